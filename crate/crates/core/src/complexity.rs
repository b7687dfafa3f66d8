//! Closed-form FLOP counts of the block layers and a wall-clock profiler.
//!
//! With expansion `E = 2D`, per layer at sequence length `L`:
//!
//! ```text
//! Mamba           4LEN + 3LED = 8LDN + 6LD²
//! feed-forward    8LD²
//! self-attention  2L²D + 4LD²
//! ```
//!
//! The single-expression block cost `8LDN + 18LD² + 2L²D` counts one Mamba
//! layer; it is reported separately as [`CostBreakdown::single_mamba_total`] next to
//! the layer-by-layer sum [`CostBreakdown::composed_total`].

use std::time::Instant;

use thiserror::Error;

use crate::model::{BlockOrder, MfaConfig, Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ComplexityError {
    #[error("FLOP count overflows 128-bit integers")]
    Overflow,
    #[error("dimensions must be positive")]
    Zero,
}

pub type Result<T> = std::result::Result<T, ComplexityError>;

/// Checked `Σ coeff · Π factors` over `u128`.
fn poly(terms: &[(u128, &[u64])]) -> Result<u128> {
    let mut total: u128 = 0;
    for (coeff, factors) in terms {
        let mut t = *coeff;
        for &f in *factors {
            t = t.checked_mul(f as u128).ok_or(ComplexityError::Overflow)?;
        }
        total = total.checked_add(t).ok_or(ComplexityError::Overflow)?;
    }
    Ok(total)
}

fn positive(dims: &[u64]) -> Result<()> {
    if dims.contains(&0) {
        return Err(ComplexityError::Zero);
    }
    Ok(())
}

/// `8LDN + 6LD²`.
pub fn flops_mamba(l: u64, d: u64, n: u64) -> Result<u128> {
    positive(&[l, d, n])?;
    poly(&[(8, &[l, d, n]), (6, &[l, d, d])])
}

/// `8LD²`.
pub fn flops_ffn(l: u64, d: u64) -> Result<u128> {
    positive(&[l, d])?;
    poly(&[(8, &[l, d, d])])
}

/// `2L²D + 4LD²`.
pub fn flops_attention(l: u64, d: u64) -> Result<u128> {
    positive(&[l, d])?;
    poly(&[(2, &[l, l, d]), (4, &[l, d, d])])
}

/// `8LDN + 18LD² + 2L²D`.
pub fn flops_single_mamba_block(l: u64, d: u64, n: u64) -> Result<u128> {
    positive(&[l, d, n])?;
    poly(&[(8, &[l, d, n]), (18, &[l, d, d]), (2, &[l, l, d])])
}

/// Quadratic side of the crossover inequality, `2L²D`.
pub fn quadratic_term(l: u64, d: u64) -> Result<u128> {
    poly(&[(2, &[l, l, d])])
}

/// Linear side of the crossover inequality, `8LDN + 18LD²`.
pub fn linear_terms(l: u64, d: u64, n: u64) -> Result<u128> {
    poly(&[(8, &[l, d, n]), (18, &[l, d, d])])
}

/// `L_C = 9D + 4N`, where the quadratic and linear sides are equal.
pub fn critical_length(d: u64, n: u64) -> u64 {
    9 * d + 4 * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostBreakdown {
    pub l: u64,
    pub d: u64,
    pub n: u64,
    pub e: u64,
    pub mamba_layers: u64,
    pub attention_layers: u64,
    /// One Mamba layer.
    pub mamba: u128,
    pub ffn: u128,
    /// One attention layer.
    pub attention: u128,
    /// `mamba_layers · mamba + ffn + attention_layers · attention`.
    pub composed_total: u128,
    /// The same block counted with a single Mamba layer.
    pub single_mamba_total: u128,
}

/// Cost of one block with the given layer counts.
pub fn flops_block(
    l: u64,
    d: u64,
    n: u64,
    mamba_layers: u64,
    attention_layers: u64,
) -> Result<CostBreakdown> {
    let mamba = flops_mamba(l, d, n)?;
    let ffn = flops_ffn(l, d)?;
    let attention = flops_attention(l, d)?;
    let m = mamba
        .checked_mul(mamba_layers as u128)
        .ok_or(ComplexityError::Overflow)?;
    let a = attention
        .checked_mul(attention_layers as u128)
        .ok_or(ComplexityError::Overflow)?;
    let composed_total = m
        .checked_add(ffn)
        .and_then(|v| v.checked_add(a))
        .ok_or(ComplexityError::Overflow)?;
    Ok(CostBreakdown {
        l,
        d,
        n,
        e: 2 * d,
        mamba_layers,
        attention_layers,
        mamba,
        ffn,
        attention,
        composed_total,
        single_mamba_total: flops_single_mamba_block(l, d, n)?,
    })
}

/// MFA block: `mamba_layers` Mamba layers, one feed-forward, one attention.
pub fn flops_mfa(l: u64, d: u64, n: u64, mamba_layers: u64) -> Result<CostBreakdown> {
    flops_block(l, d, n, mamba_layers, 1)
}

/// The comparator block with every Mamba layer replaced by attention.
pub fn flops_attention_only(l: u64, d: u64, mamba_layers: u64) -> Result<u128> {
    let a = flops_attention(l, d)?;
    a.checked_mul(mamba_layers as u128 + 1)
        .and_then(|v| v.checked_add(flops_ffn(l, d).ok()?))
        .ok_or(ComplexityError::Overflow)
}

/// Analytic cost of all blocks of a model at input length `len` (blocks run
/// on the downsampled sequence; embedding, convolutions and head excluded).
pub fn model_block_flops(cfg: &MfaConfig, len: usize) -> Result<u128> {
    let lc = ((cfg.padded_len(len) - cfg.down_kernel) / cfg.down_stride + 1) as u64;
    let n_m = cfg.n_mamba_per_block;
    let b = flops_block(
        lc,
        cfg.d_model as u64,
        cfg.d_state as u64,
        cfg.order.mamba_layers(n_m) as u64,
        cfg.order.attention_layers(n_m) as u64,
    )?;
    b.composed_total
        .checked_mul(cfg.n_blocks as u128)
        .ok_or(ComplexityError::Overflow)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub length: usize,
    pub analytic_flops_mfa: u128,
    pub analytic_flops_attn_only: u128,
    pub measured_ms_mfa: f64,
    pub measured_ms_attn_only: f64,
    /// Standard deviation above 20% of the median in either measurement.
    pub noisy: bool,
}

pub const PROFILE_HEADER: &str =
    "length,analytic_flops_mfa,analytic_flops_attn_only,measured_ms_mfa,measured_ms_attn_only";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileOptions {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            warmup: 1,
            runs: 5,
            seed: 0,
        }
    }
}

/// Median and relative spread (std / median) of repeated timings in ms.
fn time_forward(
    model: &Model,
    tokens: &[usize],
    opts: &ProfileOptions,
) -> std::result::Result<(f64, f64), ModelError> {
    for _ in 0..opts.warmup {
        model.forward(tokens, 1)?;
    }
    let mut ms = Vec::with_capacity(opts.runs);
    for _ in 0..opts.runs.max(1) {
        let start = Instant::now();
        model.forward(tokens, 1)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(|a, b| a.total_cmp(b));
    let median = ms[ms.len() / 2];
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let std = (ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ms.len() as f64).sqrt();
    Ok((median, if median > 0.0 { std / median } else { 0.0 }))
}

/// Times single-threaded forward passes of the configured model and of its
/// attention-only counterpart at every length.
pub fn profile(
    cfg: &MfaConfig,
    lengths: &[usize],
    opts: &ProfileOptions,
) -> std::result::Result<Vec<ProfileRow>, ModelError> {
    let mfa = Model::new(cfg.clone(), opts.seed)?;
    let attn = Model::new(cfg.clone().with_order(BlockOrder::AttentionOnly), opts.seed)?;
    let mut rows = Vec::with_capacity(lengths.len());
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let flops = |c: &MfaConfig, l: usize| {
        model_block_flops(c, l).map_err(|e| ModelError::Config(e.to_string()))
    };
    for l in sorted {
        let tokens = vec![cfg.mask_token(); l];
        let (m_ms, m_spread) = time_forward(&mfa, &tokens, opts)?;
        let (a_ms, a_spread) = time_forward(&attn, &tokens, opts)?;
        let noisy = m_spread > 0.2 || a_spread > 0.2;
        if noisy {
            log::warn!("length {l}: timing spread above 20% of the median");
        }
        rows.push(ProfileRow {
            length: l,
            analytic_flops_mfa: flops(mfa.config(), l)?,
            analytic_flops_attn_only: flops(attn.config(), l)?,
            measured_ms_mfa: m_ms,
            measured_ms_attn_only: a_ms,
            noisy,
        });
    }
    Ok(rows)
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from(PROFILE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            r.length,
            r.analytic_flops_mfa,
            r.analytic_flops_attn_only,
            r.measured_ms_mfa,
            r.measured_ms_attn_only
        ));
    }
    out
}
