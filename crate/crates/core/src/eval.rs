//! Overlap-area evaluation of generated clips against a reference set.
//!
//! Seven attributes are extracted per clip. For each attribute the pairwise
//! distances within the reference set (intra) and between the reference and
//! generated sets (inter) are smoothed into two densities; the overlap area is
//! the integral of their pointwise minimum.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::remi::{decode, io, parse_midi, RemiVocab, Score};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what} has {valid} valid clips, at least 2 are needed")]
    TooFewClips { what: String, valid: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    UsedPitch,
    Ioi,
    PitchHist,
    PitchRange,
    Velocity,
    NoteDuration,
    NoteDensity,
}

impl Attribute {
    /// Report column order.
    pub const ALL: [Attribute; 7] = [
        Attribute::UsedPitch,
        Attribute::Ioi,
        Attribute::PitchHist,
        Attribute::PitchRange,
        Attribute::Velocity,
        Attribute::NoteDuration,
        Attribute::NoteDensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::UsedPitch => "used_pitch",
            Attribute::Ioi => "ioi",
            Attribute::PitchHist => "pitch_hist",
            Attribute::PitchRange => "pitch_range",
            Attribute::Velocity => "velocity",
            Attribute::NoteDuration => "note_duration",
            Attribute::NoteDensity => "note_density",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Attribute::UsedPitch => "Used Pitch",
            Attribute::Ioi => "IOI",
            Attribute::PitchHist => "Pitch Hist",
            Attribute::PitchRange => "Pitch Range",
            Attribute::Velocity => "Velocity",
            Attribute::NoteDuration => "Note Duration",
            Attribute::NoteDensity => "Note Density",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    pub used_pitch: usize,
    /// Beats between successive distinct onsets.
    pub ioi: Vec<f64>,
    pub pitch_hist: [f64; 12],
    pub pitch_range: u8,
    pub velocity: Vec<f64>,
    /// Beats.
    pub note_duration: Vec<f64>,
    /// Notes per bar.
    pub note_density: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl AttributeVector {
    /// The per-clip value compared across clips: the histogram itself, or a
    /// scalar (lists reduce to their mean, an empty IOI list to 0).
    pub fn feature(&self, attr: Attribute) -> Vec<f64> {
        match attr {
            Attribute::UsedPitch => vec![self.used_pitch as f64],
            Attribute::Ioi => vec![mean(&self.ioi)],
            Attribute::PitchHist => self.pitch_hist.to_vec(),
            Attribute::PitchRange => vec![self.pitch_range as f64],
            Attribute::Velocity => vec![mean(&self.velocity)],
            Attribute::NoteDuration => vec![mean(&self.note_duration)],
            Attribute::NoteDensity => vec![self.note_density],
        }
    }
}

/// `None` for a score without notes.
pub fn extract_attributes(score: &Score) -> Option<AttributeVector> {
    let notes = score.notes();
    if notes.is_empty() {
        return None;
    }
    let tpb = score.ticks_per_beat() as f64;
    let mut pitches: Vec<u8> = notes.iter().map(|n| n.pitch).collect();
    pitches.sort_unstable();
    let pitch_range = pitches[pitches.len() - 1] - pitches[0];
    pitches.dedup();
    let mut hist = [0.0; 12];
    for n in notes {
        hist[(n.pitch % 12) as usize] += 1.0;
    }
    for h in &mut hist {
        *h /= notes.len() as f64;
    }
    let mut onsets: Vec<u64> = notes.iter().map(|n| n.onset).collect();
    onsets.dedup();
    Some(AttributeVector {
        used_pitch: pitches.len(),
        ioi: onsets
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 / tpb)
            .collect(),
        pitch_hist: hist,
        pitch_range,
        velocity: notes.iter().map(|n| n.velocity as f64).collect(),
        note_duration: notes.iter().map(|n| n.duration as f64 / tpb).collect(),
        note_density: notes.len() as f64 / score.bars() as f64,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub const GRID_POINTS: usize = 1000;
pub const FALLBACK_BINS: usize = 32;

/// Scott's rule, `σ · n^(−1/5)`.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = mean(samples);
    let var = samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt() * n.powf(-0.2)
}

/// Gaussian KDE on a uniform grid. Samples are linearly binned onto the grid
/// first and the result is renormalized to unit area so that bandwidths
/// narrower than the spacing still give a proper density.
fn binned_kde(samples: &[f64], h: f64, lo: f64, step: f64, points: usize) -> Vec<f64> {
    let mut w = vec![0.0; points];
    for &x in samples {
        let pos = ((x - lo) / step).clamp(0.0, (points - 1) as f64);
        let i = (pos.floor() as usize).min(points - 2);
        let frac = pos - i as f64;
        w[i] += 1.0 - frac;
        w[i + 1] += frac;
    }
    let reach = ((5.0 * h / step).ceil() as usize).min(points);
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| {
            let z = k as f64 * step / h;
            (-0.5 * z * z).exp()
        })
        .collect();
    let mut dens = vec![0.0; points];
    for (j, d) in dens.iter_mut().enumerate() {
        let from = j.saturating_sub(reach);
        let to = (j + reach).min(points - 1);
        for (i, wi) in w.iter().enumerate().take(to + 1).skip(from) {
            if *wi != 0.0 {
                *d += wi * kernel[i.abs_diff(j)];
            }
        }
    }
    let area = trapezoid(&dens, step);
    if area > 0.0 {
        for d in &mut dens {
            *d /= area;
        }
    }
    dens
}

fn trapezoid(y: &[f64], step: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    step * (y.iter().sum::<f64>() - 0.5 * (y[0] + y[y.len() - 1]))
}

fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &x in samples {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        h[i] += 1.0 / samples.len() as f64;
    }
    h
}

/// Overlap area of two one-dimensional samples, in `[0, 1]`.
pub fn overlap_of_samples(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return 1.0;
    }
    let (ha, hb) = (scott_bandwidth(a), scott_bandwidth(b));
    let floor = 1e-9 * span.max(hi.abs());
    let oa = if ha <= floor || hb <= floor {
        let pa = histogram(a, lo, hi, FALLBACK_BINS);
        let pb = histogram(b, lo, hi, FALLBACK_BINS);
        pa.iter().zip(&pb).map(|(x, y)| x.min(*y)).sum()
    } else {
        let pad = 3.0 * ha.max(hb);
        let (glo, ghi) = (lo - pad, hi + pad);
        let step = (ghi - glo) / (GRID_POINTS - 1) as f64;
        let da = binned_kde(a, ha, glo, step, GRID_POINTS);
        let db = binned_kde(b, hb, glo, step, GRID_POINTS);
        let m: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x.min(*y)).collect();
        trapezoid(&m, step)
    };
    oa.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceSummary {
    pub intra_mean: f64,
    pub intra_std: f64,
    pub inter_mean: f64,
    pub inter_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn distances(reference: &[Vec<f64>], other: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut intra = Vec::with_capacity(reference.len() * reference.len().saturating_sub(1) / 2);
    for i in 0..reference.len() {
        for j in i + 1..reference.len() {
            intra.push(distance(&reference[i], &reference[j]));
        }
    }
    let mut inter = Vec::with_capacity(reference.len() * other.len());
    for r in reference {
        for o in other {
            inter.push(distance(r, o));
        }
    }
    (intra, inter)
}

/// Overlap area for one attribute with `set_a` as the reference.
pub fn overlap_area(set_a: &[AttributeVector], set_b: &[AttributeVector], attr: Attribute) -> f64 {
    overlap_with_summary(set_a, set_b, attr).0
}

fn overlap_with_summary(
    set_a: &[AttributeVector],
    set_b: &[AttributeVector],
    attr: Attribute,
) -> (f64, DistanceSummary) {
    let fa: Vec<Vec<f64>> = set_a.iter().map(|v| v.feature(attr)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|v| v.feature(attr)).collect();
    let (intra, inter) = distances(&fa, &fb);
    let (intra_mean, intra_std) = mean_std(&intra);
    let (inter_mean, inter_std) = mean_std(&inter);
    (
        overlap_of_samples(&intra, &inter),
        DistanceSummary {
            intra_mean,
            intra_std,
            inter_mean,
            inter_std,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct OaReport {
    /// Overlap per attribute, in [`Attribute::ALL`] order.
    pub per_attribute: Vec<(Attribute, f64)>,
    pub average: f64,
    /// Bootstrap `(mean, std)` per attribute followed by the average.
    pub bootstrap: Vec<(f64, f64)>,
    pub summaries: Vec<DistanceSummary>,
    pub reference_clips: usize,
    pub generated_clips: usize,
    pub reference_excluded: usize,
    pub generated_excluded: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bootstrap: BOOTSTRAP_RESAMPLES,
            seed: 0,
        }
    }
}

fn scores_to_attributes(scores: &[Score]) -> (Vec<AttributeVector>, usize) {
    let attrs: Vec<AttributeVector> = scores.iter().filter_map(extract_attributes).collect();
    let excluded = scores.len() - attrs.len();
    (attrs, excluded)
}

/// Compares generated clips against reference clips.
pub fn evaluate_scores(
    generated: &[Score],
    reference: &[Score],
    opts: &EvalOptions,
) -> Result<OaReport, EvalError> {
    let (gen, gen_ex) = scores_to_attributes(generated);
    let (refs, ref_ex) = scores_to_attributes(reference);
    for (what, set) in [("generated set", &gen), ("reference set", &refs)] {
        if set.len() < 2 {
            return Err(EvalError::TooFewClips {
                what: what.into(),
                valid: set.len(),
            });
        }
    }
    let mut per_attribute = Vec::with_capacity(7);
    let mut summaries = Vec::with_capacity(7);
    for attr in Attribute::ALL {
        let (oa, s) = overlap_with_summary(&refs, &gen, attr);
        per_attribute.push((attr, oa));
        summaries.push(s);
    }
    let average = per_attribute.iter().map(|(_, v)| v).sum::<f64>() / 7.0;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.bootstrap); 8];
    for _ in 0..opts.bootstrap {
        let ra: Vec<AttributeVector> = (0..refs.len())
            .map(|_| refs[rng.random_range(0..refs.len())].clone())
            .collect();
        let rb: Vec<AttributeVector> = (0..gen.len())
            .map(|_| gen[rng.random_range(0..gen.len())].clone())
            .collect();
        let mut total = 0.0;
        for (k, attr) in Attribute::ALL.into_iter().enumerate() {
            let oa = overlap_area(&ra, &rb, attr);
            draws[k].push(oa);
            total += oa;
        }
        draws[7].push(total / 7.0);
    }
    let bootstrap = draws.iter().map(|d| mean_std(d)).collect();
    Ok(OaReport {
        per_attribute,
        average,
        bootstrap,
        summaries,
        reference_clips: refs.len(),
        generated_clips: gen.len(),
        reference_excluded: ref_ex,
        generated_excluded: gen_ex,
    })
}

impl OaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for a in Attribute::ALL {
            let _ = write!(out, ",{a}");
        }
        out.push_str(",average\n");
        out.push_str("oa");
        for (_, v) in &self.per_attribute {
            let _ = write!(out, ",{v:.6}");
        }
        let _ = writeln!(out, ",{:.6}", self.average);
        for (label, pick) in [("bootstrap_mean", 0usize), ("bootstrap_std", 1)] {
            out.push_str(label);
            for ms in &self.bootstrap {
                let v = if pick == 0 { ms.0 } else { ms.1 };
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, String)> = Attribute::ALL
            .iter()
            .zip(&self.bootstrap)
            .map(|(a, (m, s))| (a.title().to_string(), format!("{m:.3} ± {s:.3}")))
            .collect();
        let (m, s) = self
            .bootstrap
            .get(7)
            .copied()
            .unwrap_or((self.average, 0.0));
        cols.push(("Average".into(), format!("{m:.3} ± {s:.3}")));
        let widths: Vec<usize> = cols
            .iter()
            .map(|(h, v)| h.chars().count().max(v.chars().count()))
            .collect();
        let mut out = String::new();
        for ((h, _), w) in cols.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        out.push('\n');
        for ((_, v), w) in cols.iter().zip(&widths) {
            let _ = write!(out, "{v:>w$}  ");
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "reference clips {} ({} empty excluded), generated clips {} ({} empty excluded)",
            self.reference_clips,
            self.reference_excluded,
            self.generated_clips,
            self.generated_excluded
        );
        out
    }
}

/// Scores from every MIDI or token file in `dir` (sorted by name; a token
/// file may hold several sequences). Unreadable files are skipped with a
/// warning.
pub fn load_clips(dir: &Path, vocab: &RemiVocab) -> Result<Vec<Score>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        match read_clip_file(&path, vocab) {
            Ok(mut scores) => out.append(&mut scores),
            Err(msg) => log::warn!("skipping {}: {msg}", path.display()),
        }
    }
    Ok(out)
}

fn read_clip_file(path: &Path, vocab: &RemiVocab) -> Result<Vec<Score>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "mid" || ext == "midi" {
        return parse_midi(&bytes)
            .map(|s| vec![s])
            .map_err(|e| e.to_string());
    }
    let seqs = if io::is_binary(&bytes) {
        io::tokens_from_binary(&bytes, Some(vocab.size()))
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| e.to_string())?;
        io::tokens_from_text(text, vocab.size())
    }
    .map_err(|e| e.to_string())?;
    Ok(seqs.iter().map(|s| decode(s, vocab).0).collect())
}

pub fn evaluate(
    gen_dir: &Path,
    ref_dir: &Path,
    vocab: &RemiVocab,
    opts: &EvalOptions,
) -> Result<OaReport, EvalError> {
    let gen = load_clips(gen_dir, vocab)?;
    let refs = load_clips(ref_dir, vocab)?;
    evaluate_scores(&gen, &refs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_overlap_fully() {
        let a = [1.0, 2.0, 2.5, 4.0, 7.0];
        assert!((overlap_of_samples(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(overlap_of_samples(&[3.0, 3.0], &[3.0]), 1.0);
    }

    #[test]
    fn separated_samples_barely_overlap() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        assert!(overlap_of_samples(&a, &b) < 1e-6);
    }

    #[test]
    fn constant_sets_use_the_histogram() {
        // zero bandwidth on one side, identical support
        let a = [2.0, 2.0, 2.0];
        let b = [2.0, 2.0, 5.0, 5.0];
        assert!((overlap_of_samples(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kde_has_unit_area() {
        let s = [0.3, 0.31, 0.9, 1.7];
        let step = 3.0 / 999.0;
        let d = binned_kde(&s, scott_bandwidth(&s), -0.5, step, GRID_POINTS);
        assert!((trapezoid(&d, step) - 1.0).abs() < 1e-12);
    }
}
