//! Block components: Mamba layer, feed-forward layer and multi-head self-attention.
//!
//! Each takes and returns `[L, D]` and ends with a residual connection followed
//! by layer normalization.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{BoundParams, ParamStore};
use super::MfaConfig;
use crate::tensor::{Result, Tape, Tensor, Var};

/// Large negative score added to keys that must not be attended to.
pub const MASKED_SCORE: f64 = -1e9;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn layernorm_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.ln.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.ln.bias"), Tensor::zeros(&[d]));
}

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Registers the parameters of one Mamba layer under `prefix`.
pub fn init_mamba(store: &mut ParamStore, prefix: &str, cfg: &MfaConfig, rng: &mut impl Rng) {
    let (d, e, n, k) = (cfg.d_model, cfg.d_expand, cfg.d_state, cfg.conv_kernel);
    let in_bound = 1.0 / (d as f64).sqrt();
    let e_bound = 1.0 / (e as f64).sqrt();
    store.insert(format!("{prefix}.in_x"), uniform(rng, &[d, e], in_bound));
    store.insert(format!("{prefix}.in_z"), uniform(rng, &[d, e], in_bound));
    store.insert(
        format!("{prefix}.conv"),
        uniform(rng, &[k, e], 1.0 / (k as f64).sqrt()),
    );
    store.insert(format!("{prefix}.s_b"), uniform(rng, &[e, n], e_bound));
    store.insert(format!("{prefix}.s_c"), uniform(rng, &[e, n], e_bound));
    store.insert(
        format!("{prefix}.s_delta"),
        uniform(rng, &[e, e], 0.1 * e_bound),
    );
    // step sizes start log-uniform in [1e-3, 1e-1]
    let log_dt = Uniform::new_inclusive((1e-3f64).ln(), (1e-1f64).ln()).expect("finite range");
    store.insert(
        format!("{prefix}.delta_bias"),
        Tensor::from_fn(&[e], |_| softplus_inverse(log_dt.sample(rng).exp())),
    );
    // A_{e,n} = −(n + 1)
    store.insert(
        format!("{prefix}.a_log"),
        Tensor::from_fn(&[e, n], |i| ((i % n) as f64 + 1.0).ln()),
    );
    store.insert(format!("{prefix}.out"), uniform(rng, &[e, d], e_bound));
    layernorm_params(store, prefix, d);
}

pub fn init_ffn(store: &mut ParamStore, prefix: &str, cfg: &MfaConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    store.insert(
        format!("{prefix}.w1"),
        uniform(rng, &[d, 4 * d], 1.0 / (d as f64).sqrt()),
    );
    store.insert(
        format!("{prefix}.w2"),
        uniform(rng, &[4 * d, d], 1.0 / ((4 * d) as f64).sqrt()),
    );
    layernorm_params(store, prefix, d);
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, cfg: &MfaConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    let bound = 1.0 / (d as f64).sqrt();
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{name}"), uniform(rng, &[d, d], bound));
    }
    layernorm_params(store, prefix, d);
}

fn residual_norm(
    tape: &mut Tape,
    p: &BoundParams<'_>,
    prefix: &str,
    x: Var,
    branch: Var,
) -> Result<Var> {
    let sum = tape.add(branch, x)?;
    tape.layernorm(
        sum,
        p.var(&format!("{prefix}.ln.gain")),
        p.var(&format!("{prefix}.ln.bias")),
    )
}

/// `x' = SiLU(CausalConv(x·W_x))`, `z = SiLU(x·W_z)`,
/// `y = LayerNorm((SelectiveSSM(x') ⊙ z)·W_out + x)`.
pub fn mamba_layer(tape: &mut Tape, p: &BoundParams<'_>, prefix: &str, x: Var) -> Result<Var> {
    let v = |n: &str| p.var(&format!("{prefix}.{n}"));
    let proj = tape.matmul(x, v("in_x"))?;
    let conv = tape.causal_depthwise_conv(proj, v("conv"))?;
    let xs = tape.silu(conv)?;
    let zl = tape.matmul(x, v("in_z"))?;
    let z = tape.silu(zl)?;

    let b = tape.matmul(xs, v("s_b"))?;
    let c = tape.matmul(xs, v("s_c"))?;
    let dl = tape.matmul(xs, v("s_delta"))?;
    let dl = tape.add_bias(dl, v("delta_bias"))?;
    let delta = tape.softplus(dl)?;
    let a_pos = tape.exp(v("a_log"))?;
    let a = tape.scale(a_pos, -1.0)?;

    let ssm = tape.selective_scan(xs, delta, a, b, c)?;
    let gated = tape.mul(ssm, z)?;
    let out = tape.matmul(gated, v("out"))?;
    residual_norm(tape, p, prefix, x, out)
}

/// Two-layer feed-forward map `D → 4D → D` with SiLU in between.
pub fn ffn(tape: &mut Tape, p: &BoundParams<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.var(&format!("{prefix}.w1")))?;
    let h = tape.silu(h)?;
    let o = tape.matmul(h, p.var(&format!("{prefix}.w2")))?;
    residual_norm(tape, p, prefix, x, o)
}

/// Bidirectional multi-head scaled dot-product attention.
///
/// `key_mask`, when given, is an additive `[L, L]` constant (0 or
/// [`MASKED_SCORE`]) applied to the scores of every head.
pub fn self_attention(
    tape: &mut Tape,
    p: &BoundParams<'_>,
    prefix: &str,
    x: Var,
    n_heads: usize,
    key_mask: Option<Var>,
) -> Result<Var> {
    let v = |n: &str| p.var(&format!("{prefix}.{n}"));
    let d = tape.value(x).last_dim();
    let dk = d / n_heads;
    let q = tape.matmul(x, v("wq"))?;
    let k = tape.matmul(x, v("wk"))?;
    let vals = tape.matmul(x, v("wv"))?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.narrow(q, h * dk, dk)?;
        let kh = tape.narrow(k, h * dk, dk)?;
        let vh = tape.narrow(vals, h * dk, dk)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(m) = key_mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads)?
    };
    let o = tape.matmul(cat, v("wo"))?;
    residual_norm(tape, p, prefix, x, o)
}

/// Additive key mask hiding every position flagged in `padded`.
pub fn key_padding_mask(padded: &[bool]) -> Option<Tensor> {
    if !padded.iter().any(|&p| p) {
        return None;
    }
    let n = padded.len();
    Some(Tensor::from_fn(&[n, n], |i| {
        if padded[i % n] {
            MASKED_SCORE
        } else {
            0.0
        }
    }))
}
