//! Absorbing-state discrete diffusion.
//!
//! Vocabulary indices run over `0..V` with the absorbing mask token
//! `K = V − 1`. The forward chain keeps a token with probability `1 − β_t`
//! and otherwise moves it to `K`, where it stays. With
//! `ᾱ_t = Π_{s≤t} (1 − β_s)`:
//!
//! ```text
//! q(x_t | x_0)            = ᾱ_t on x_0,  1 − ᾱ_t on K
//! q(x_{s} | x_t = K, x_0) = a on x_0,    1 − a on K,   a = (ᾱ_s − ᾱ_t) / (1 − ᾱ_t),  s < t
//! ```
//!
//! The denoiser predicts `p_θ(x_0 | x_t)` over the `V − 1` non-mask classes;
//! the reverse step replaces the one-hot `x_0` in the posterior with that
//! distribution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{NumericError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("unknown schedule kind '{0}' (expected uniform-absorption or cosine)")]
    UnknownSchedule(String),
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("clean data contains the mask token at position {position}")]
    InvalidCleanData { position: usize },
    #[error("token {token} at position {position} is out of range for vocabulary {vocab}")]
    Token {
        token: usize,
        position: usize,
        vocab: usize,
    },
    #[error("chain violation at position {position}: x_t = {xt} is neither x_0 = {x0} nor the mask token")]
    ChainViolation {
        position: usize,
        xt: usize,
        x0: usize,
    },
    #[error("non-finite loss at position {position}")]
    NonFinite { position: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("schedule text line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Shape of `β_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `β_t = 1 / (T − t + 1)`, so `ᾱ_t = 1 − t/T`.
    #[default]
    UniformAbsorption,
    /// Squared-cosine `ᾱ_t` with offset 0.008, renormalized to `ᾱ_0 = 1`, `ᾱ_T = 0`.
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::UniformAbsorption => "uniform-absorption",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform-absorption" | "uniform" | "linear" => Ok(ScheduleKind::UniformAbsorption),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(DiffusionError::UnknownSchedule(other.to_string())),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// `β_1..β_T` stored at indices `0..T`.
    beta: Vec<f64>,
    /// `ᾱ_0..ᾱ_T`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::NoSteps);
        }
        let tf = steps as f64;
        let (beta, alpha_bar) = match kind {
            ScheduleKind::UniformAbsorption => {
                let beta = (1..=steps).map(|t| 1.0 / (steps - t + 1) as f64).collect();
                let ab = (0..=steps).map(|t| 1.0 - t as f64 / tf).collect();
                (beta, ab)
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / tf + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0);
                let mut ab: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
                ab[0] = 1.0;
                ab[steps] = 0.0;
                let beta = (1..=steps).map(|t| 1.0 - ab[t] / ab[t - 1]).collect();
                (beta, ab)
            }
        };
        let s = Self {
            kind,
            beta,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks range, monotonicity, the terminal value and `ᾱ_t = Π(1 − β_s)`.
    pub fn validate(&self) -> Result<()> {
        let steps = self.beta.len();
        if steps == 0 {
            return Err(DiffusionError::NoSteps);
        }
        if self.alpha_bar.len() != steps + 1 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "{} cumulative values for {steps} steps",
                self.alpha_bar.len()
            )));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(DiffusionError::InvalidSchedule(
                "alpha_bar_0 must be 1".into(),
            ));
        }
        let mut prod = 1.0;
        for t in 1..=steps {
            let b = self.beta[t - 1];
            if !(0.0..=1.0).contains(&b) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "beta_{t} = {b} outside [0, 1]"
                )));
            }
            if self.alpha_bar[t] > self.alpha_bar[t - 1] {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "alpha_bar increases at step {t}"
                )));
            }
            prod *= 1.0 - b;
            if (prod - self.alpha_bar[t]).abs() > 1e-12 {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "alpha_bar_{t} = {} but the product of (1 - beta) is {prod}",
                    self.alpha_bar[t]
                )));
            }
        }
        if self.alpha_bar[steps] > 1e-6 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "alpha_bar_T = {} does not reach the absorbing state",
                self.alpha_bar[steps]
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `ᾱ_0..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `w_t = (T − t + 1) / T`.
    pub fn loss_weight(&self, t: usize) -> f64 {
        (self.steps() - t + 1) as f64 / self.steps() as f64
    }

    /// Probability that a position masked at step `t` is revealed by step `s < t`.
    pub fn unmask_probability(&self, t: usize, s: usize) -> f64 {
        let (at, as_) = (self.alpha_bar[t], self.alpha_bar[s]);
        if at >= 1.0 {
            return 1.0;
        }
        ((as_ - at) / (1.0 - at)).clamp(0.0, 1.0)
    }

    /// Text table: a `# kind T` header, then one `t beta alpha_bar` line per step.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {} {}\n", self.kind, self.steps());
        for t in 1..=self.steps() {
            out.push_str(&format!("{t} {:e} {:e}\n", self.beta(t), self.alpha_bar(t)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut steps = None;
        let mut beta = Vec::new();
        let mut alpha_bar = vec![1.0];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| DiffusionError::Parse { line: i + 1, msg };
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let mut parts = h.split_whitespace();
                let k = parts.next().ok_or_else(|| err("empty header".into()))?;
                kind = Some(k.parse::<ScheduleKind>()?);
                let n = parts
                    .next()
                    .ok_or_else(|| err("header lacks a step count".into()))?;
                steps = Some(n.parse::<usize>().map_err(|e| err(e.to_string()))?);
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let t: usize = fields[0].parse().map_err(|e| err(format!("{e}")))?;
            if t != beta.len() + 1 {
                return Err(err(format!("expected step {}, found {t}", beta.len() + 1)));
            }
            beta.push(fields[1].parse::<f64>().map_err(|e| err(format!("{e}")))?);
            alpha_bar.push(fields[2].parse::<f64>().map_err(|e| err(format!("{e}")))?);
        }
        let kind = kind.ok_or(DiffusionError::Parse {
            line: 1,
            msg: "missing '# kind T' header".into(),
        })?;
        if steps != Some(beta.len()) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "header declares {:?} steps but {} rows follow",
                steps,
                beta.len()
            )));
        }
        let s = Self {
            kind,
            beta,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }
}

/// A probability vector over the full vocabulary (mask token included).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalRow {
    probs: Vec<f64>,
}

impl CategoricalRow {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DiffusionError::InvalidSchedule(
                "negative or non-finite probability".into(),
            ));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "probabilities sum to {s}"
            )));
        }
        Ok(Self { probs })
    }

    fn two_point(vocab: usize, token: usize, p_token: f64, mask: usize) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token] += p_token;
        probs[mask] += 1.0 - p_token;
        Self { probs }
    }

    pub fn point(vocab: usize, token: usize) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Draws one index by inverse CDF.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    /// `KL(self ‖ other)`; infinite when `other` lacks support.
    pub fn kl(&self, other: &CategoricalRow) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(&p, &q)| {
                if p == 0.0 {
                    0.0
                } else if q == 0.0 {
                    f64::INFINITY
                } else {
                    p * (p / q).ln()
                }
            })
            .sum()
    }
}

fn mask_of(vocab: usize) -> usize {
    vocab - 1
}

fn check_clean(token: usize, position: usize, vocab: usize) -> Result<()> {
    if token >= vocab {
        return Err(DiffusionError::Token {
            token,
            position,
            vocab,
        });
    }
    if token == mask_of(vocab) {
        return Err(DiffusionError::InvalidCleanData { position });
    }
    Ok(())
}

/// `q(x_t | x_0)` for a single position.
pub fn q_xt_given_x0(
    x0: usize,
    t: usize,
    sched: &NoiseSchedule,
    vocab: usize,
) -> Result<CategoricalRow> {
    check_clean(x0, 0, vocab)?;
    sched.check_step(t)?;
    Ok(CategoricalRow::two_point(
        vocab,
        x0,
        sched.alpha_bar(t),
        mask_of(vocab),
    ))
}

/// Corrupts `x0`: each position independently kept with probability `ᾱ_t`,
/// otherwise replaced by `mask`. Positions holding `skip` are never touched.
pub fn q_sample(
    x0: &[usize],
    t: usize,
    sched: &NoiseSchedule,
    mask: usize,
    skip: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    sched.check_step(t)?;
    let keep = sched.alpha_bar(t);
    let mut out = Vec::with_capacity(x0.len());
    for (i, &tok) in x0.iter().enumerate() {
        if tok == mask {
            return Err(DiffusionError::InvalidCleanData { position: i });
        }
        if Some(tok) == skip {
            out.push(tok);
            continue;
        }
        let u: f64 = rng.random();
        out.push(if u < keep { tok } else { mask });
    }
    Ok(out)
}

fn check_pair(xt: usize, x0: usize, position: usize, vocab: usize) -> Result<()> {
    check_clean(x0, position, vocab)?;
    if xt != x0 && xt != mask_of(vocab) {
        return Err(DiffusionError::ChainViolation { position, xt, x0 });
    }
    Ok(())
}

/// `q(x_{t−1} | x_t, x_0)`.
pub fn posterior(
    xt: usize,
    x0: usize,
    t: usize,
    sched: &NoiseSchedule,
    vocab: usize,
) -> Result<CategoricalRow> {
    posterior_between(xt, x0, t, t - 1, sched, vocab)
}

/// `q(x_s | x_t, x_0)` for `s < t`, used when skipping steps.
pub fn posterior_between(
    xt: usize,
    x0: usize,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    vocab: usize,
) -> Result<CategoricalRow> {
    sched.check_step(t)?;
    check_pair(xt, x0, 0, vocab)?;
    if s >= t {
        return Err(DiffusionError::Step { t: s, steps: t - 1 });
    }
    if xt != mask_of(vocab) {
        return Ok(CategoricalRow::point(vocab, xt));
    }
    Ok(CategoricalRow::two_point(
        vocab,
        x0,
        sched.unmask_probability(t, s),
        mask_of(vocab),
    ))
}

fn check_logits(logits: &Tensor, len: usize) -> Result<usize> {
    if logits.ndim() != 2 || logits.shape()[0] != len {
        return Err(DiffusionError::Shape(format!(
            "logits {:?} for a sequence of length {len}",
            logits.shape()
        )));
    }
    Ok(logits.shape()[1] + 1)
}

/// Row-wise softmax of `[L, C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `p_θ(x_{t−1} | x_t)` per position from clean-token logits `[L, V − 1]`.
pub fn p_reverse(
    logits: &Tensor,
    xt: &[usize],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<CategoricalRow>> {
    p_reverse_between(logits, xt, t, t - 1, sched)
}

/// `p_θ(x_s | x_t)` for `s < t`: `Σ_{x_0} q(x_s | x_t, x_0) p_θ(x_0 | x_t)`.
pub fn p_reverse_between(
    logits: &Tensor,
    xt: &[usize],
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<CategoricalRow>> {
    sched.check_step(t)?;
    if s >= t {
        return Err(DiffusionError::Step { t: s, steps: t - 1 });
    }
    let vocab = check_logits(logits, xt.len())?;
    let mask = mask_of(vocab);
    let a = sched.unmask_probability(t, s);
    let probs = softmax_rows(logits);
    xt.iter()
        .enumerate()
        .map(|(i, &tok)| {
            if tok >= vocab {
                return Err(DiffusionError::Token {
                    token: tok,
                    position: i,
                    vocab,
                });
            }
            if tok != mask {
                return Ok(CategoricalRow::point(vocab, tok));
            }
            let mut row: Vec<f64> = probs[i].iter().map(|p| a * p).collect();
            row.push(1.0 - a);
            Ok(CategoricalRow { probs: row })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over masked positions (zero when nothing is masked).
    #[default]
    Mean,
    Sum,
}

/// Loss for one sequence at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct VbLoss {
    /// Reduced, reweighted loss.
    pub total: f64,
    pub t: usize,
    /// `w_t`.
    pub weight: f64,
    /// Unweighted per-position term: the KL for `t ≥ 2`, the cross-entropy at `t = 1`.
    pub per_position: Vec<f64>,
    pub masked: usize,
    /// `KL(q(x_T | x_0) ‖ p(x_T))` summed over positions; a constant diagnostic.
    pub prior_kl: f64,
}

/// Reweighted variational-bound term at step `t`, computed from full
/// categorical rows.
pub fn vb_loss(
    logits: &Tensor,
    x0: &[usize],
    xt: &[usize],
    t: usize,
    sched: &NoiseSchedule,
    reduction: Reduction,
) -> Result<VbLoss> {
    sched.check_step(t)?;
    if x0.len() != xt.len() {
        return Err(DiffusionError::Shape(format!(
            "x0 has {} tokens, xt has {}",
            x0.len(),
            xt.len()
        )));
    }
    let vocab = check_logits(logits, xt.len())?;
    let mask = mask_of(vocab);
    let p = p_reverse(logits, xt, t, sched)?;
    let probs = softmax_rows(logits);
    let prior = CategoricalRow::point(vocab, mask);
    let mut per_position = vec![0.0; xt.len()];
    let mut masked = 0;
    let mut prior_kl = 0.0;
    for i in 0..xt.len() {
        check_pair(xt[i], x0[i], i, vocab)?;
        prior_kl += q_xt_given_x0(x0[i], sched.steps(), sched, vocab)?.kl(&prior);
        if xt[i] != mask {
            continue;
        }
        masked += 1;
        let term = if t == 1 {
            -probs[i][x0[i]].ln()
        } else {
            posterior(xt[i], x0[i], t, sched, vocab)?.kl(&p[i])
        };
        if !term.is_finite() {
            return Err(DiffusionError::NonFinite { position: i });
        }
        per_position[i] = term;
    }
    let weight = sched.loss_weight(t);
    let sum: f64 = per_position.iter().sum::<f64>() * weight;
    let total = match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if masked == 0 => 0.0,
        Reduction::Mean => sum / masked as f64,
    };
    Ok(VbLoss {
        total,
        t,
        weight,
        per_position,
        masked,
        prior_kl,
    })
}

/// Per-position coefficients `c_i` such that `Σ_i c_i · (−log p_θ(x0_i | x_t))`
/// equals [`vb_loss`]. Non-masked positions get zero.
///
/// Holds because at a masked position the posterior and the reverse step
/// share the mass `1 − a` on the mask token, leaving `KL = −a log p_θ(x_0)`.
pub fn loss_coefficients(
    x0: &[usize],
    xt: &[usize],
    t: usize,
    sched: &NoiseSchedule,
    vocab: usize,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != xt.len() {
        return Err(DiffusionError::Shape(format!(
            "x0 has {} tokens, xt has {}",
            x0.len(),
            xt.len()
        )));
    }
    let mask = mask_of(vocab);
    let mut masked = 0;
    for (i, (&a, &b)) in x0.iter().zip(xt).enumerate() {
        check_pair(b, a, i, vocab)?;
        if b == mask {
            masked += 1;
        }
    }
    let mut c = sched.loss_weight(t) * sched.unmask_probability(t, t - 1);
    if reduction == Reduction::Mean && masked > 0 {
        c /= masked as f64;
    }
    Ok(xt
        .iter()
        .map(|&b| if b == mask { c } else { 0.0 })
        .collect())
}

/// Differentiable [`vb_loss`] on a tape.
pub fn vb_loss_tape(
    tape: &mut Tape,
    logits: Var,
    x0: &[usize],
    xt: &[usize],
    t: usize,
    sched: &NoiseSchedule,
    reduction: Reduction,
) -> Result<Var> {
    let vocab = tape.value(logits).last_dim() + 1;
    let coeffs = loss_coefficients(x0, xt, t, sched, vocab, reduction)?;
    Ok(tape.weighted_nll(logits, x0, &coeffs)?)
}
