//! Seeded generators of quantized scores.

use musdiff_core::remi::{tempo_of_bin, velocity_of_bin, NoteEvent, Score, TimeSignature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random score already in canonical quantized form (16ths at 480 ticks
/// per beat, binned velocities and tempo, durations ≤ 64 units).
pub fn random_quantized(rng: &mut impl Rng, max_notes: usize, max_bars: u64) -> Score {
    let bars = rng.random_range(1..=max_bars);
    let n = rng.random_range(0..=max_notes);
    let notes = (0..n)
        .map(|_| {
            NoteEvent::new(
                rng.random_range(0..128),
                rng.random_range(0..bars * 16) * 120,
                rng.random_range(1..=64u64) * 120,
                velocity_of_bin(rng.random_range(0..32)),
            )
        })
        .collect();
    Score::new(
        notes,
        480,
        TimeSignature::COMMON,
        tempo_of_bin(rng.random_range(0..32)),
        bars,
    )
    .unwrap()
}

/// Notes drawn from a pitch window with a fixed rhythm, to build
/// stylistically separated clip sets.
pub fn styled(
    rng: &mut impl Rng,
    pitch_lo: u8,
    pitch_hi: u8,
    step_units: u64,
    dur_units: u64,
    vel_bin: u8,
    bars: u64,
) -> Score {
    let mut notes = Vec::new();
    let mut onset = 0;
    while onset < bars * 16 {
        notes.push(NoteEvent::new(
            rng.random_range(pitch_lo..=pitch_hi),
            onset * 120,
            dur_units * 120,
            velocity_of_bin(vel_bin),
        ));
        onset += step_units;
    }
    Score::new(notes, 480, TimeSignature::COMMON, tempo_of_bin(16), bars).unwrap()
}

/// Clips from one broad style: pitch window, rhythm, velocity and length all
/// vary per clip.
pub fn varied(rng: &mut impl Rng) -> Score {
    let lo = rng.random_range(48..64u8);
    let hi = lo + rng.random_range(5..20u8);
    let step = [1u64, 2, 4][rng.random_range(0..3)];
    let dur = rng.random_range(1..=step * 2);
    let vel = rng.random_range(10..24u8);
    let bars = rng.random_range(2..=6);
    styled(rng, lo, hi, step, dur, vel, bars)
}

pub fn varied_clips(seed: u64, n: usize) -> Vec<Score> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| varied(&mut rng)).collect()
}
