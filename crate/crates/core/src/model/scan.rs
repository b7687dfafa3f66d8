//! Selective state-space scan kernels.
//!
//! For every channel `e` and state index `n` the recurrence is
//!
//! ```text
//! Ā_t = exp(Δ_t,e · A_e,n)
//! B̄_t = (Δ_t,e · A_e,n)⁻¹ (exp(Δ_t,e · A_e,n) − 1) · Δ_t,e · B_t,n = expm1(Δ A) / A · B_t,n
//! h_t = Ā_t h_{t−1} + B̄_t x_t,e          (h_0 = 0)
//! y_t,e = Σ_n C_t,n h_t,e,n
//! ```
//!
//! `A` is diagonal and strictly negative, so `Ā_t ∈ (0, 1)`.
//! [`scan_reference`] is the sequential oracle; [`scan_chunked`] is the
//! production path and must agree with it.

pub const DEFAULT_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

#[inline]
fn discretize(delta: f64, a: f64) -> (f64, f64) {
    let em1 = (delta * a).exp_m1();
    (1.0 + em1, em1 / a)
}

/// Plain sequential recurrence, one position at a time.
pub fn scan_reference(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
) -> Vec<f64> {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let mut h = vec![0.0; channels * state];
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        for e in 0..channels {
            let mut acc = 0.0;
            for n in 0..state {
                let (abar, phi) = discretize(delta[t * channels + e], a[e * state + n]);
                let hv = &mut h[e * state + n];
                *hv = abar * *hv + phi * b[t * state + n] * x[t * channels + e];
                acc += c[t * state + n] * *hv;
            }
            y[t * channels + e] = acc;
        }
    }
    y
}

/// Chunked scan: each chunk runs from a zero local state while the running
/// product of `Ā` is tracked, and the carry from the previous chunk enters as
/// `h_t = local_t + (Π Ā) · carry`.
///
/// Returns `(y, states)` with `states` laid out `[L, E, N]`.
pub fn scan_chunked(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    chunk: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let chunk = chunk.max(1);
    let stride = channels * state;
    let mut states = vec![0.0; len * stride];
    let mut y = vec![0.0; len * channels];
    let mut carry = vec![0.0; stride];
    let mut local = vec![0.0; stride];
    let mut prod = vec![0.0; stride];
    for start in (0..len).step_by(chunk) {
        let end = (start + chunk).min(len);
        local.fill(0.0);
        prod.fill(1.0);
        for t in start..end {
            let bt = &b[t * state..(t + 1) * state];
            let ct = &c[t * state..(t + 1) * state];
            let row = &mut states[t * stride..(t + 1) * stride];
            for e in 0..channels {
                let (d, xv) = (delta[t * channels + e], x[t * channels + e]);
                let mut acc = 0.0;
                for n in 0..state {
                    let k = e * state + n;
                    let (abar, phi) = discretize(d, a[k]);
                    local[k] = abar * local[k] + phi * bt[n] * xv;
                    prod[k] *= abar;
                    let h = local[k] + prod[k] * carry[k];
                    row[k] = h;
                    acc += ct[n] * h;
                }
                y[t * channels + e] = acc;
            }
        }
        carry.copy_from_slice(&states[(end - 1) * stride..end * stride]);
    }
    (y, states)
}

#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub dx: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
}

/// Reverse-mode rule for the scan given the forward states and `dL/dy`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
    gy: &[f64],
) -> ScanGrads {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let stride = channels * state;
    let mut g = ScanGrads {
        dx: vec![0.0; len * channels],
        ddelta: vec![0.0; len * channels],
        da: vec![0.0; channels * state],
        db: vec![0.0; len * state],
        dc: vec![0.0; len * state],
    };
    for e in 0..channels {
        for n in 0..state {
            let an = a[e * state + n];
            let mut carry = 0.0;
            for t in (0..len).rev() {
                let te = t * channels + e;
                let tn = t * state + n;
                let h = states[t * stride + e * state + n];
                let h_prev = if t > 0 {
                    states[(t - 1) * stride + e * state + n]
                } else {
                    0.0
                };
                let dh = gy[te] * c[tn] + carry;
                g.dc[tn] += gy[te] * h;

                let d = delta[te];
                let em1 = (d * an).exp_m1();
                let (abar, phi) = (1.0 + em1, em1 / an);
                let dabar = dh * h_prev;
                let dbbar = dh * x[te];
                g.dx[te] += dh * phi * b[tn];
                g.db[tn] += dbbar * phi;
                let dphi = dbbar * b[tn];
                g.ddelta[te] += dabar * an * abar + dphi * abar;
                g.da[e * state + n] += dabar * d * abar + dphi * (d * an * abar - em1) / (an * an);
                carry = abar * dh;
            }
        }
    }
    g
}
