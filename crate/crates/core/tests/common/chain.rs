//! Explicit `V × V` transition matrices for the absorbing chain. Nothing here
//! uses the closed forms of the library.

use musdiff_core::diffusion::NoiseSchedule;
use musdiff_core::tensor::Tensor;

pub type Matrix = Vec<Vec<f64>>;

/// `Q_t = (1 − β_t) I + β_t 1 e_Kᵀ`, with the mask row absorbing.
pub fn transition(vocab: usize, beta: f64) -> Matrix {
    let k = vocab - 1;
    let mut q = vec![vec![0.0; vocab]; vocab];
    for (i, row) in q.iter_mut().enumerate() {
        if i == k {
            row[k] = 1.0;
        } else {
            row[i] = 1.0 - beta;
            row[k] += beta;
        }
    }
    q
}

pub fn row_times(row: &[f64], m: &Matrix) -> Vec<f64> {
    let n = m[0].len();
    (0..n)
        .map(|j| row.iter().zip(m).map(|(r, mr)| r * mr[j]).sum())
        .collect()
}

pub fn one_hot(vocab: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; vocab];
    v[i] = 1.0;
    v
}

/// `x_0 Q_1 ⋯ Q_t`.
pub fn marginal(vocab: usize, sched: &NoiseSchedule, x0: usize, t: usize) -> Vec<f64> {
    let mut row = one_hot(vocab, x0);
    for s in 1..=t {
        row = row_times(&row, &transition(vocab, sched.beta(s)));
    }
    row
}

/// Bayes: `q(x_{t−1} | x_t, x_0) ∝ Q_t[x_{t−1}, x_t] · q(x_{t−1} | x_0)`.
pub fn posterior(vocab: usize, sched: &NoiseSchedule, xt: usize, x0: usize, t: usize) -> Vec<f64> {
    let prev = marginal(vocab, sched, x0, t - 1);
    let qt = transition(vocab, sched.beta(t));
    let un: Vec<f64> = (0..vocab).map(|j| qt[j][xt] * prev[j]).collect();
    let z: f64 = un.iter().sum();
    un.into_iter().map(|v| v / z).collect()
}

/// `Σ_{x_0} q(x_{t−1} | x_t = K, x_0) p(x_0)` over the non-mask classes.
pub fn reverse_masked(vocab: usize, sched: &NoiseSchedule, p_x0: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab];
    for (x0, &p) in p_x0.iter().enumerate() {
        let post = posterior(vocab, sched, vocab - 1, x0, t);
        for (o, q) in out.iter_mut().zip(post) {
            *o += p * q;
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// A fixed but arbitrary "network": logits depend on every token of `xt`,
/// the step and the position.
pub fn toy_logits(xt: &[usize], t: usize, classes: usize) -> Tensor {
    let l = xt.len();
    let ctx: f64 = xt
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) * (x + 3)) as f64)
        .sum();
    Tensor::from_fn(&[l, classes], |idx| {
        let (i, c) = (idx / classes, idx % classes);
        (0.7 * ctx + 1.3 * t as f64 + 2.1 * i as f64 + 0.9 * c as f64 * (i as f64 + 1.0)).sin()
            * 2.0
    })
}

/// Every sequence over `{x0_i, K}` reachable from `x0`.
pub fn corruptions(x0: &[usize], mask: usize) -> Vec<Vec<usize>> {
    let l = x0.len();
    (0..1usize << l)
        .map(|bits| {
            (0..l)
                .map(|i| if bits >> i & 1 == 1 { mask } else { x0[i] })
                .collect()
        })
        .collect()
}

/// Joint probability of `xt` under the product of per-position marginals.
pub fn joint_marginal(
    vocab: usize,
    sched: &NoiseSchedule,
    x0: &[usize],
    xt: &[usize],
    t: usize,
) -> f64 {
    x0.iter()
        .zip(xt)
        .map(|(&a, &b)| marginal(vocab, sched, a, t)[b])
        .product()
}

/// Reweighted variational bound of `x0` under [`toy_logits`], enumerated over
/// every corruption and computed from explicit matrices:
///
/// `KL(q(x_T|x_0) ‖ δ_K) + Σ_{t≥2} w_t E_q KL(q(x_{t−1}|x_t,x_0) ‖ p(x_{t−1}|x_t)) − w_1 E_q log p(x_0|x_1)`.
pub fn enumerated_bound(vocab: usize, sched: &NoiseSchedule, x0: &[usize]) -> f64 {
    let mask = vocab - 1;
    let steps = sched.steps();
    let classes = vocab - 1;
    let prior = one_hot(vocab, mask);
    let mut total: f64 = x0
        .iter()
        .map(|&a| kl(&marginal(vocab, sched, a, steps), &prior))
        .sum();
    for t in 1..=steps {
        let w = (steps - t + 1) as f64 / steps as f64;
        for xt in corruptions(x0, mask) {
            let q = joint_marginal(vocab, sched, x0, &xt, t);
            if q == 0.0 {
                continue;
            }
            let logits = toy_logits(&xt, t, classes);
            let mut term = 0.0;
            for i in 0..x0.len() {
                let p_x0 = softmax(&logits.data()[i * classes..(i + 1) * classes]);
                // unmasked positions have a point-mass reverse step
                let p = if xt[i] == mask {
                    reverse_masked(vocab, sched, &p_x0, t)
                } else {
                    one_hot(vocab, xt[i])
                };
                if t == 1 {
                    // x_0 is a deterministic function of x_1 under p except at masked sites
                    term -= p[x0[i]].ln();
                } else {
                    term += kl(&posterior(vocab, sched, xt[i], x0[i], t), &p);
                }
            }
            total += w * q * term;
        }
    }
    total
}
