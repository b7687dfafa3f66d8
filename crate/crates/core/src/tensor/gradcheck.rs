use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericError, Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step relative to `max(1, |x|)`.
    pub rel_step: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-5,
            abs_floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(NumericError::Invalid {
            op: "grad_check",
            msg: "function must return a scalar".into(),
        });
    }
    Ok(v.item())
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(*var);
        for c in coords {
            let x0 = params[pi].data()[c];
            let h = opts.rel_step * x0.abs().max(1.0);
            work[pi].data_mut()[c] = x0 + h;
            let fp = eval(&f, &work)?;
            work[pi].data_mut()[c] = x0 - h;
            let fm = eval(&f, &work)?;
            work[pi].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(NumericError::NonFinite {
                    op: "grad_check",
                    index: c,
                });
            }
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
