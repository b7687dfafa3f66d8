//! The hierarchical denoiser.
//!
//! ```text
//! tokens ─ embed(+step) ─ strided conv ↓ ─ blocks × (Mamba ×n → FFN → attention) ─ transposed conv ↑ ─ linear head
//! ```
//!
//! The head predicts logits over the `V − 1` non-mask classes at every position.

pub mod checkpoint;
mod config;
pub mod layers;
mod params;
pub mod scan;

pub use config::{BlockOrder, MfaConfig, Positional, Stage};
pub use params::{BoundParams, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::tensor::{NumericError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    Token {
        token: usize,
        position: usize,
        vocab: usize,
    },
    #[error("diffusion step {step} outside 1..={max}")]
    Step { step: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: MfaConfig,
    params: ParamStore,
}

/// Logits produced on a tape together with the parameter handles used.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Model {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: MfaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        store.insert(
            "embed.tokens",
            Tensor::from_fn(&[config.vocab_size, d], |_| normal.sample(&mut rng)),
        );
        store.insert(
            "embed.steps",
            Tensor::from_fn(&[config.diffusion_steps, d], |_| {
                0.1 * normal.sample(&mut rng)
            }),
        );
        let conv_bound = 1.0 / ((config.down_kernel * d) as f64).sqrt();
        let conv = Uniform::new_inclusive(-conv_bound, conv_bound).expect("finite bound");
        store.insert(
            "down.kernel",
            Tensor::from_fn(&[config.down_kernel, d, d], |_| conv.sample(&mut rng)),
        );
        store.insert("down.bias", Tensor::zeros(&[d]));
        for b in 0..config.n_blocks {
            for stage in config.order.stages(config.n_mamba_per_block) {
                let prefix = stage_prefix(b, stage);
                match stage {
                    Stage::Mamba(_) => layers::init_mamba(&mut store, &prefix, &config, &mut rng),
                    Stage::FeedForward => layers::init_ffn(&mut store, &prefix, &config, &mut rng),
                    Stage::Attention(_) => {
                        layers::init_attention(&mut store, &prefix, &config, &mut rng)
                    }
                }
            }
        }
        store.insert(
            "up.kernel",
            Tensor::from_fn(&[config.down_kernel, d, d], |_| conv.sample(&mut rng)),
        );
        store.insert("up.bias", Tensor::zeros(&[d]));
        let head_bound = 1.0 / (d as f64).sqrt();
        let head = Uniform::new_inclusive(-head_bound, head_bound).expect("finite bound");
        store.insert(
            "head.weight",
            Tensor::from_fn(&[d, config.num_classes()], |_| head.sample(&mut rng)),
        );
        store.insert("head.bias", Tensor::zeros(&[config.num_classes()]));
        Ok(Self {
            config,
            params: store,
        })
    }

    /// Same as [`Model::new`] with the block layers rearranged.
    pub fn variant(config: &MfaConfig, order: BlockOrder, seed: u64) -> Result<Self> {
        Self::new(config.clone().with_order(order), seed)
    }

    pub fn from_parts(config: MfaConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Model::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(ModelError::Checkpoint(format!(
                        "missing parameter '{name}'"
                    )))
                }
            }
        }
        // keep the canonical order
        let mut ordered = ParamStore::new();
        for (name, _) in reference.params.iter() {
            ordered.insert(name, params.get(name).expect("checked above").clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &MfaConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Stage layout of block `b`.
    pub fn block_stages(&self) -> Vec<Stage> {
        self.config.order.stages(self.config.n_mamba_per_block)
    }

    /// Puts every parameter on `tape`, differentiable or not.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Result<BoundParams<'a>> {
        let vars = self
            .params
            .tensors()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundParams {
            store: &self.params,
            vars,
        })
    }

    fn check_inputs(&self, tokens: &[usize], step: usize) -> Result<()> {
        if step == 0 || step > self.config.diffusion_steps {
            return Err(ModelError::Step {
                step,
                max: self.config.diffusion_steps,
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::Config("empty token sequence".into()));
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.vocab_size)
        {
            return Err(ModelError::Token {
                token,
                position,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding plus the learned embedding of `step`: `[L, D]`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        p: &BoundParams<'_>,
        tokens: &[usize],
        step: usize,
    ) -> Result<Var> {
        self.check_inputs(tokens, step)?;
        let tok = tape.gather(p.var("embed.tokens"), tokens)?;
        let st = tape.gather(p.var("embed.steps"), &[step - 1])?;
        let x = tape.add_bias(tok, st)?;
        match self.config.positional {
            Positional::None => Ok(x),
            Positional::Sinusoidal => {
                let pe = tape.constant(sinusoidal_table(tokens.len(), self.config.d_model))?;
                Ok(tape.add(x, pe)?)
            }
        }
    }

    /// Runs one block on the compressed sequence `[L_c, D]`.
    pub fn block(
        &self,
        tape: &mut Tape,
        p: &BoundParams<'_>,
        b: usize,
        x: Var,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        let mut h = x;
        for stage in self.block_stages() {
            let prefix = stage_prefix(b, stage);
            h = match stage {
                Stage::Mamba(_) => layers::mamba_layer(tape, p, &prefix, h)?,
                Stage::FeedForward => layers::ffn(tape, p, &prefix, h)?,
                Stage::Attention(_) => {
                    layers::self_attention(tape, p, &prefix, h, self.config.n_heads, key_mask)?
                }
            };
        }
        Ok(h)
    }

    /// Full forward pass on a bound tape. Returns logits `[L, V − 1]`.
    ///
    /// Sequences whose length is not aligned to the downsampling stride are
    /// padded with the PAD token internally and the extra rows dropped.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        p: &BoundParams<'_>,
        tokens: &[usize],
        step: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let len = tokens.len();
        let padded_len = cfg.padded_len(len);
        let mut padded: Vec<usize> = tokens.to_vec();
        if padded_len > len {
            let fill = cfg.pad_token.ok_or_else(|| {
                ModelError::Config(format!(
                    "length {len} needs padding but the model has no PAD token"
                ))
            })?;
            padded.resize(padded_len, fill);
        }
        let emb = self.embed(tape, p, &padded, step)?;
        let down = tape.conv1d(emb, p.var("down.kernel"), cfg.down_stride)?;
        let mut h = tape.add_bias(down, p.var("down.bias"))?;

        let compressed = tape.shape(h)[0];
        let key_mask = match cfg.pad_token {
            Some(pad) => {
                let flags: Vec<bool> = (0..compressed)
                    .map(|j| {
                        let s = j * cfg.down_stride;
                        padded[s..s + cfg.down_kernel].iter().all(|&t| t == pad)
                    })
                    .collect();
                layers::key_padding_mask(&flags)
                    .map(|m| tape.constant(m))
                    .transpose()?
            }
            None => None,
        };

        for b in 0..cfg.n_blocks {
            h = self.block(tape, p, b, h, key_mask)?;
        }
        let up = tape.conv1d_transposed(h, p.var("up.kernel"), cfg.down_stride, padded_len)?;
        let up = tape.add_bias(up, p.var("up.bias"))?;
        let up = if padded_len > len {
            tape.slice_rows(up, 0, len)?
        } else {
            up
        };
        let logits = tape.matmul(up, p.var("head.weight"))?;
        Ok(tape.add_bias(logits, p.var("head.bias"))?)
    }

    /// Differentiable forward pass.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        step: usize,
    ) -> Result<ForwardPass> {
        let p = self.bind(tape, true)?;
        let logits = self.forward_bound(tape, &p, tokens, step)?;
        Ok(ForwardPass {
            logits,
            params: p.vars,
        })
    }

    /// Inference-only forward pass returning logits `[L, V − 1]`.
    pub fn forward(&self, tokens: &[usize], step: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let logits = self.forward_bound(&mut tape, &p, tokens, step)?;
        Ok(tape.value(logits).clone())
    }
}

/// `[len, d]` table with `sin(p·ω_i)` in even and `cos(p·ω_i)` in odd
/// columns, `ω_i = 10000^(−2i/d)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |k| {
        let (p, c) = ((k / d) as f64, k % d);
        let w = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
        if c % 2 == 0 {
            (p * w).sin()
        } else {
            (p * w).cos()
        }
    })
}

pub(crate) fn stage_prefix(block: usize, stage: Stage) -> String {
    match stage {
        Stage::Mamba(j) => format!("blocks.{block}.mamba.{j}"),
        Stage::FeedForward => format!("blocks.{block}.ffn"),
        Stage::Attention(j) => format!("blocks.{block}.attn.{j}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> MfaConfig {
        MfaConfig {
            vocab_size: vocab,
            d_model: 8,
            d_state: 4,
            d_expand: 16,
            n_heads: 2,
            n_blocks: 1,
            n_mamba_per_block: 2,
            down_kernel: 4,
            down_stride: 4,
            conv_kernel: 4,
            diffusion_steps: 8,
            order: BlockOrder::Mfa,
            pad_token: Some(vocab - 2),
            positional: Positional::None,
        }
    }

    #[test]
    fn output_shape_covers_unaligned_lengths() {
        let m = Model::new(tiny(12), 1).unwrap();
        for len in [4, 7, 16, 33] {
            let toks: Vec<usize> = (0..len).map(|i| i % 10).collect();
            let y = m.forward(&toks, 3).unwrap();
            assert_eq!(y.shape(), &[len, 11]);
        }
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let m = Model::new(tiny(12), 1).unwrap();
        assert!(matches!(
            m.forward(&[0, 1, 12, 3], 1),
            Err(ModelError::Token {
                token: 12,
                position: 2,
                ..
            })
        ));
        assert!(matches!(
            m.forward(&[0, 1, 2, 3], 0),
            Err(ModelError::Step { .. })
        ));
        assert!(matches!(
            m.forward(&[0, 1, 2, 3], 9),
            Err(ModelError::Step { .. })
        ));
        // the mask index is legal input
        assert!(m.forward(&[11, 11, 11, 11], 8).is_ok());
    }

    #[test]
    fn equal_tokens_embed_to_equal_rows_and_steps_shift_them() {
        let m = Model::new(tiny(12), 1).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false).unwrap();
        let e1 = m.embed(&mut tape, &p, &[3, 5, 3], 2).unwrap();
        let e2 = m.embed(&mut tape, &p, &[3, 5, 3], 5).unwrap();
        let (a, b) = (tape.value(e1).data(), tape.value(e2).data());
        assert_eq!(&a[0..8], &a[16..24]);
        let steps = m.params().get("embed.steps").unwrap().data();
        for j in 0..8 {
            for r in 0..3 {
                let diff = b[r * 8 + j] - a[r * 8 + j];
                assert!((diff - (steps[4 * 8 + j] - steps[8 + j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(tiny(12), 9).unwrap();
        let b = Model::new(tiny(12), 9).unwrap();
        let c = Model::new(tiny(12), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn extra_attention_layer_adds_exact_parameter_count() {
        let cfg = tiny(12);
        let base = Model::new(cfg.clone(), 0).unwrap().num_params();
        let two = Model::variant(&cfg, BlockOrder::Mfa2Sa, 0)
            .unwrap()
            .num_params();
        let d = cfg.d_model;
        assert_eq!(two - base, cfg.n_blocks * (4 * d * d + 2 * d));
        for order in [BlockOrder::Afm, BlockOrder::Fma] {
            assert_eq!(Model::variant(&cfg, order, 0).unwrap().num_params(), base);
        }
    }
}
