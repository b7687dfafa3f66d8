//! Ancestral generation from the all-mask state.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{p_reverse_between, softmax_rows, DiffusionError, NoiseSchedule};
use crate::model::{Model, ModelError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("sampling incomplete: {remaining} mask tokens left at t=0")]
    Incomplete { remaining: usize },
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodePolicy {
    /// Draw each position from the full reverse row.
    #[default]
    Sample,
    /// Unmask with the reverse-step probability, then take the most likely token.
    Greedy,
}

impl FromStr for DecodePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sample" => Ok(Self::Sample),
            "greedy" | "argmax" => Ok(Self::Greedy),
            other => Err(format!("unknown decode policy `{other}` (sample, greedy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub length: usize,
    /// Number of reverse steps; fewer than the schedule's `T` subsamples it.
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub policy: DecodePolicy,
}

impl SamplerConfig {
    pub fn new(length: usize, steps: usize) -> Self {
        Self {
            length,
            steps,
            temperature: 1.0,
            seed: 0,
            policy: DecodePolicy::Sample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SampleError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.length == 0 {
            return Err(SampleError::Config("length must be positive".into()));
        }
        if self.steps == 0 {
            return Err(SampleError::Config("steps must be positive".into()));
        }
        Ok(())
    }
}

/// Evenly spaced steps from `T` down to 1. At least two steps are kept when
/// `T ≥ 2` so the set always contains both `T` and 1.
pub fn step_schedule(total: usize, steps: usize) -> Vec<usize> {
    let k = steps.clamp(total.min(2), total);
    if k == 1 {
        return vec![total];
    }
    let mut out: Vec<usize> = (0..k)
        .map(|i| {
            let frac = (k - 1 - i) as f64 / (k - 1) as f64;
            1 + ((total - 1) as f64 * frac).round() as usize
        })
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// `(t, masked count)` starting with the all-mask state at `t = T`.
    pub trace: Vec<(usize, usize)>,
}

impl Generation {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,masked_count\n");
        for (t, m) in &self.trace {
            let _ = writeln!(out, "{t},{m}");
        }
        out
    }
}

pub fn generate(model: &Model, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Generation> {
    cfg.validate()?;
    let mc = model.config();
    if sched.steps() != mc.diffusion_steps {
        return Err(SampleError::Config(format!(
            "schedule has {} steps but the model was built for {}",
            sched.steps(),
            mc.diffusion_steps
        )));
    }
    let mask = mc.mask_token();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = vec![mask; cfg.length];
    let mut trace = vec![(sched.steps(), cfg.length)];
    let ts = step_schedule(sched.steps(), cfg.steps);
    for (i, &t) in ts.iter().enumerate() {
        let s = ts.get(i + 1).copied().unwrap_or(0);
        let mut logits = model.forward(&x, t)?;
        if cfg.temperature != 1.0 {
            for v in logits.data_mut() {
                *v /= cfg.temperature;
            }
        }
        match cfg.policy {
            DecodePolicy::Sample => {
                let rows = p_reverse_between(&logits, &x, t, s, sched)?;
                for (xi, row) in x.iter_mut().zip(&rows) {
                    if *xi == mask {
                        *xi = row.sample(&mut rng);
                    }
                }
            }
            DecodePolicy::Greedy => {
                let a = sched.unmask_probability(t, s);
                let probs = softmax_rows(&logits);
                for (xi, p) in x.iter_mut().zip(&probs) {
                    if *xi == mask && (a >= 1.0 || rng.random::<f64>() < a) {
                        *xi = argmax(p);
                    }
                }
            }
        }
        trace.push((s, x.iter().filter(|&&v| v == mask).count()));
    }
    let remaining = trace.last().map_or(0, |&(_, m)| m);
    if remaining > 0 {
        return Err(SampleError::Incomplete { remaining });
    }
    Ok(Generation { tokens: x, trace })
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// `n` generations with seeds `cfg.seed + i`.
pub fn batch_generate(
    model: &Model,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Generation>> {
    (0..n)
        .map(|i| {
            let c = SamplerConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            generate(model, sched, &c)
        })
        .collect()
}
