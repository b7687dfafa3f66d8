//! Training loop: per step a batch of windows is corrupted at uniformly drawn
//! steps, scored with the variational bound and updated with AdamW.

mod checkpoint;
mod data;

pub use checkpoint::{load_model, Checkpoint, CHECKPOINT_MAGIC};
pub use data::{ingest, split_windows, Dataset, ManifestEntry};

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    q_sample, vb_loss_tape, DiffusionError, NoiseSchedule, Reduction, ScheduleKind,
};
use crate::model::{BlockOrder, MfaConfig, Model, ModelError, Stage};
use crate::remi::RemiVocab;
use crate::tensor::{NumericError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data directory {0} does not exist or is not a directory")]
    DataDir(PathBuf),
    #[error("no usable training windows in {0}")]
    EmptyDataset(PathBuf),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("non-finite loss at step {step}; last checkpoint kept")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Remi(#[from] crate::remi::RemiError),
    #[error("config file: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl TrainError {
    /// True when the error comes from an overflow or NaN anywhere in the
    /// forward or backward pass.
    pub fn is_non_finite(&self) -> bool {
        let numeric = match self {
            TrainError::NonFinite { .. } => return true,
            TrainError::Numeric(n) | TrainError::Model(ModelError::Numeric(n)) => n,
            TrainError::Diffusion(DiffusionError::Numeric(n)) => n,
            _ => return false,
        };
        matches!(numeric, NumericError::NonFinite { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "constant" => Ok(Self::Constant),
            other => Err(format!("unknown lr schedule `{other}` (cosine, constant)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to matrices and embedding tables, not to
    /// vectors (biases, norms, SSM parameters).
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    pub diffusion_steps: usize,
    pub noise_schedule: ScheduleKind,
    pub seq_len: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub positions_per_bar: usize,
    pub max_duration: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub optimizer: OptimConfig,
    pub model: MfaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk scale: T=64, L=256, D=64, N=8, two blocks, batch 8.
    pub fn desk() -> Self {
        let vocab = RemiVocab::default();
        Self {
            steps: 5000,
            batch_size: 8,
            lr: 5e-4,
            warmup_steps: 100,
            lr_schedule: LrSchedule::Cosine,
            diffusion_steps: 64,
            noise_schedule: ScheduleKind::UniformAbsorption,
            seq_len: 256,
            seed: 0,
            checkpoint_every: 500,
            positions_per_bar: vocab.positions_per_bar(),
            max_duration: vocab.max_duration(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/desk"),
            optimizer: OptimConfig::default(),
            model: MfaConfig::desk(vocab.size(), 64),
        }
    }

    /// The full-size reference configuration.
    pub fn full() -> Self {
        let vocab = RemiVocab::default();
        Self {
            steps: 200_000,
            batch_size: 64,
            lr: 5e-4,
            warmup_steps: 10_000,
            diffusion_steps: 1024,
            seq_len: 2048,
            checkpoint_every: 5000,
            out_dir: PathBuf::from("runs/full"),
            model: MfaConfig::full(vocab.size()),
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn vocab(&self) -> Result<RemiVocab> {
        Ok(RemiVocab::new(self.positions_per_bar, self.max_duration)?)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return err("steps and batch_size must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return err(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr {} must be positive", self.lr));
        }
        if self.model.diffusion_steps != self.diffusion_steps {
            return err(format!(
                "model.diffusion_steps {} differs from diffusion_steps {}",
                self.model.diffusion_steps, self.diffusion_steps
            ));
        }
        let vocab = self.vocab()?;
        if self.model.vocab_size != vocab.size() {
            return err(format!(
                "model.vocab_size {} differs from the token vocabulary size {}",
                self.model.vocab_size,
                vocab.size()
            ));
        }
        if self.model.padded_len(self.seq_len) != self.seq_len {
            return err(format!(
                "seq_len {} is not aligned to the downsampling (kernel {}, stride {})",
                self.seq_len, self.model.down_kernel, self.model.down_stride
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.eps <= 0.0
            || o.weight_decay < 0.0
        {
            return err(format!("invalid optimizer settings {o:?}"));
        }
        self.model.validate()?;
        NoiseSchedule::new(self.diffusion_steps, self.noise_schedule)?;
        Ok(())
    }

    /// Learning rate for update `step` (0-based): linear warmup from zero,
    /// then cosine decay to zero at `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = (self.steps - self.warmup_steps) as f64;
                let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// AdamW state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
        o: &OptimConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - o.beta1.powi(self.t as i32);
        let c2 = 1.0 - o.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.ndim() >= 2 { o.weight_decay } else { 0.0 };
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = o.beta1 * *mi + (1.0 - o.beta1) * gi;
                *vi = o.beta2 * *vi + (1.0 - o.beta2) * gi * gi;
                let step = (*mi / c1) / ((*vi / c2).sqrt() + o.eps);
                *pi -= lr * (step + decay * *pi);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Number of updates applied so far, including this one.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Training state that can be checkpointed and resumed exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    sched: NoiseSchedule,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: u64,
    windows: Vec<Vec<usize>>,
}

fn check_windows(cfg: &TrainConfig, windows: &[Vec<usize>]) -> Result<()> {
    if windows.is_empty() {
        return Err(TrainError::Config("no training windows".into()));
    }
    let mask = cfg.model.mask_token();
    for (i, w) in windows.iter().enumerate() {
        if w.len() != cfg.seq_len {
            return Err(TrainError::Config(format!(
                "window {i} has {} tokens, expected {}",
                w.len(),
                cfg.seq_len
            )));
        }
        if let Some(t) = w.iter().find(|&&t| t >= mask) {
            return Err(TrainError::Config(format!(
                "window {i} holds token {t}, outside the clean vocabulary"
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(cfg: TrainConfig, windows: Vec<Vec<usize>>) -> Result<Self> {
        cfg.validate()?;
        check_windows(&cfg, &windows)?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let params: Vec<&Tensor> = model.params().tensors().collect();
        let opt = AdamW::new(&params);
        let sched = NoiseSchedule::new(cfg.diffusion_steps, cfg.noise_schedule)?;
        // the data stream is independent of the initialization stream
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            cfg,
            model,
            sched,
            opt,
            rng,
            step: 0,
            windows,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Per-sequence loss and gradients at a given step and corruption.
    pub fn loss_and_grads(
        &self,
        x0: &[usize],
        xt: &[usize],
        t: usize,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let fp = self.model.forward_tape(&mut tape, xt, t)?;
        let loss = vb_loss_tape(
            &mut tape,
            fp.logits,
            x0,
            xt,
            t,
            &self.sched,
            Reduction::Mean,
        )?;
        let value = tape.value(loss).data()[0];
        let mut g = tape.backward(loss)?;
        let grads = fp
            .params
            .iter()
            .zip(self.model.params().tensors())
            .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Loss without gradients.
    pub fn loss(&self, x0: &[usize], xt: &[usize], t: usize) -> Result<f64> {
        let logits = self.model.forward(xt, t)?;
        Ok(crate::diffusion::vb_loss(&logits, x0, xt, t, &self.sched, Reduction::Mean)?.total)
    }

    /// Corrupts `x0` at step `t`; PAD positions are never masked, so they
    /// carry no loss.
    pub fn corrupt(&self, x0: &[usize], t: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        Ok(q_sample(
            x0,
            t,
            &self.sched,
            self.cfg.model.mask_token(),
            self.cfg.model.pad_token,
            rng,
        )?)
    }

    /// One optimizer update on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let b = self.cfg.batch_size;
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for _ in 0..b {
            let i = self.rng.random_range(0..self.windows.len());
            let t = self.rng.random_range(1..=self.sched.steps());
            let m = &self.cfg.model;
            let xt = q_sample(
                &self.windows[i],
                t,
                &self.sched,
                m.mask_token(),
                m.pad_token,
                &mut self.rng,
            )?;
            let step = self.step;
            let (l, g) = self.loss_and_grads(&self.windows[i], &xt, t).map_err(|e| {
                if e.is_non_finite() {
                    TrainError::NonFinite { step }
                } else {
                    e
                }
            })?;
            total += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                            *p += q;
                        }
                    }
                }
            }
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step: self.step });
        }
        let mut grads = acc.expect("batch is not empty");
        let inv = 1.0 / b as f64;
        let mut sq = 0.0;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv;
                sq += *v * *v;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { step: self.step });
        }
        let clip = self.cfg.optimizer.grad_clip;
        if clip > 0.0 && norm > clip {
            let s = clip / norm;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        let lr = self.cfg.lr_at(self.step);
        let o = self.cfg.optimizer.clone();
        self.opt
            .update(self.model.params_mut().tensors_mut(), &grads, lr, &o);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
            grad_norm: norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            config_toml: self.cfg.to_toml(),
            model: self.model.clone(),
            optimizer: self.opt.clone(),
        }
    }

    /// Continues from `ckpt` on `windows`.
    pub fn resume(ckpt: Checkpoint, windows: Vec<Vec<usize>>) -> Result<Self> {
        let cfg = TrainConfig::from_toml(&ckpt.config_toml)?;
        check_windows(&cfg, &windows)?;
        if ckpt.model.config() != &cfg.model {
            return Err(TrainError::Config(
                "checkpoint model does not match its config echo".into(),
            ));
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_stream(ckpt.rng_stream);
        rng.set_word_pos(ckpt.rng_word_pos);
        let sched = NoiseSchedule::new(cfg.diffusion_steps, cfg.noise_schedule)?;
        Ok(Self {
            cfg,
            model: ckpt.model,
            sched,
            opt: ckpt.optimizer,
            rng,
            step: ckpt.step,
            windows,
        })
    }

    /// Replaces the step budget, keeping everything else (for extending or
    /// shortening a resumed run).
    pub fn set_total_steps(&mut self, steps: u64) -> Result<()> {
        let mut c = self.cfg.clone();
        c.steps = steps;
        c.validate()?;
        self.cfg = c;
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<StepStats>,
    pub out_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(path.to_path_buf(), e)
}

/// Full run from `cfg.data_dir` into `cfg.out_dir`: manifest, loss CSV
/// (`step,loss,lr`), periodic checkpoints and the final model file. With
/// `resume`, continues from an existing checkpoint in `out_dir`.
pub fn train(cfg: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = ingest(&cfg.data_dir, &cfg.vocab()?, cfg.seq_len)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let manifest = out.join(MANIFEST_FILE);
    crate::util::write_atomic(&manifest, data.manifest_csv().as_bytes())
        .map_err(io_err(&manifest))?;
    log::info!(
        "{} windows from {} files",
        data.windows.len(),
        data.manifest.len()
    );

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let loss_path = out.join(LOSS_FILE);
    let mut trainer = if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        let mut t = Trainer::resume(ck, data.windows)?;
        t.set_total_steps(cfg.steps)?;
        log::info!("resuming at step {}", t.step_count());
        t
    } else {
        std::fs::write(&loss_path, "step,loss,lr\n").map_err(io_err(&loss_path))?;
        Trainer::new(cfg.clone(), data.windows)?
    };
    let mut log_file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&loss_path)
        .map_err(io_err(&loss_path))?;
    let mut losses = Vec::new();
    while trainer.step_count() < cfg.steps {
        let s = trainer.step()?;
        writeln!(log_file, "{},{},{}", s.step, s.loss, s.lr).map_err(io_err(&loss_path))?;
        if s.step % 50 == 0 || s.step == cfg.steps {
            log::info!("step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
        losses.push(s);
        if cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    trainer.model().save(out.join(MODEL_FILE))?;
    Ok(TrainOutcome {
        model: trainer.model,
        losses,
        out_dir: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub order: BlockOrder,
    pub params: usize,
    pub attention_layers_per_block: usize,
    pub mamba_layers_per_block: usize,
    pub stages: Vec<Stage>,
    pub loss: f64,
}

/// Builds the `order` variant of `cfg.model` and trains it for one step.
pub fn ablate(
    cfg: &TrainConfig,
    order: BlockOrder,
    windows: Vec<Vec<usize>>,
) -> Result<AblationReport> {
    let mut c = cfg.clone();
    c.model.order = order;
    let mut t = Trainer::new(c, windows)?;
    let s = t.step()?;
    let n = t.cfg.model.n_mamba_per_block;
    Ok(AblationReport {
        order,
        params: t.model.num_params(),
        attention_layers_per_block: order.attention_layers(n),
        mamba_layers_per_block: order.mamba_layers(n),
        stages: order.stages(n),
        loss: s.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_full_configs_validate() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::full().validate().unwrap();
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn lr_endpoints() {
        let c = TrainConfig::desk();
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(c.warmup_steps), c.lr);
        assert!(c.lr_at(c.steps) < 1e-18);
        assert!(c.lr_at(c.steps - 1) < 1e-3 * c.lr);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = TrainConfig::desk();
        c.warmup_steps = c.steps;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.seq_len = 258;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.diffusion_steps = 32;
        assert!(c.validate().is_err());
        assert!(TrainConfig::from_toml("stepz = 3").is_err());
    }
}
