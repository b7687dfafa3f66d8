use std::cmp::Ordering;

use super::vocab::{tempo_bin, tempo_of_bin, velocity_bin, velocity_of_bin};
use super::RemiError;

/// Ticks per beat of every quantized score at 16 positions per bar.
pub const CANONICAL_TICKS_PER_BEAT: u16 = 480;
pub const DEFAULT_TEMPO_BPM: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u64, duration: u64, velocity: u8) -> Self {
        Self {
            pitch,
            onset,
            duration,
            velocity,
        }
    }

    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }

    fn key(&self) -> (u64, u8, u64, u8) {
        (self.onset, self.pitch, self.duration, self.velocity)
    }
}

impl PartialOrd for NoteEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NoteEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub numerator: u8,
    /// Power of two.
    pub denominator: u8,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature {
        numerator: 4,
        denominator: 4,
    };
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self::COMMON
    }
}

/// Note events on a tick grid plus global meter and tempo.
///
/// Notes are kept sorted by `(onset, pitch, duration, velocity)`, and
/// `bars` always covers the end of the last sounding note.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    notes: Vec<NoteEvent>,
    ticks_per_beat: u16,
    time_signature: TimeSignature,
    tempo_bpm: f64,
    bars: u64,
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

impl Score {
    /// Validates and sorts `notes`. `bars` is raised to cover every note and
    /// to at least one.
    pub fn new(
        mut notes: Vec<NoteEvent>,
        ticks_per_beat: u16,
        time_signature: TimeSignature,
        tempo_bpm: f64,
        bars: u64,
    ) -> Result<Self, RemiError> {
        if ticks_per_beat == 0 || ticks_per_beat > 0x7FFF {
            return Err(RemiError::InvalidScore(format!(
                "ticks per beat {ticks_per_beat} outside 1..=32767"
            )));
        }
        let TimeSignature {
            numerator,
            denominator,
        } = time_signature;
        if numerator == 0 || denominator == 0 || !denominator.is_power_of_two() {
            return Err(RemiError::InvalidScore(format!(
                "time signature {numerator}/{denominator} is not valid"
            )));
        }
        if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
            return Err(RemiError::InvalidScore(format!(
                "tempo {tempo_bpm} must be positive"
            )));
        }
        for n in &notes {
            if n.pitch > 127 {
                return Err(RemiError::Pitch(n.pitch));
            }
            if n.velocity == 0 || n.velocity > 127 {
                return Err(RemiError::InvalidScore(format!(
                    "velocity {} outside 1..=127",
                    n.velocity
                )));
            }
            if n.duration == 0 {
                return Err(RemiError::InvalidScore(format!(
                    "note at tick {} has zero duration",
                    n.onset
                )));
            }
        }
        notes.sort();
        let mut s = Self {
            notes,
            ticks_per_beat,
            time_signature,
            tempo_bpm,
            bars: 0,
        };
        s.bars = bars.max(s.covering_bars()).max(1);
        Ok(s)
    }

    /// Score with no notes and one bar in canonical 4/4.
    pub fn empty() -> Self {
        Self {
            notes: Vec::new(),
            ticks_per_beat: CANONICAL_TICKS_PER_BEAT,
            time_signature: TimeSignature::COMMON,
            tempo_bpm: DEFAULT_TEMPO_BPM,
            bars: 1,
        }
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn ticks_per_beat(&self) -> u16 {
        self.ticks_per_beat
    }

    pub fn time_signature(&self) -> TimeSignature {
        self.time_signature
    }

    pub fn tempo_bpm(&self) -> f64 {
        self.tempo_bpm
    }

    pub fn bars(&self) -> u64 {
        self.bars
    }

    /// Microseconds per quarter note as written to MIDI.
    pub fn tempo_micros(&self) -> u32 {
        ((60e6 / self.tempo_bpm).round() as u32).clamp(1, 0xFF_FFFF)
    }

    /// Bar length as the fraction `num / den` of ticks.
    fn bar_ticks_ratio(&self) -> (u128, u128) {
        let TimeSignature {
            numerator,
            denominator,
        } = self.time_signature;
        (
            4 * self.ticks_per_beat as u128 * numerator as u128,
            denominator as u128,
        )
    }

    /// Bar length in ticks, when integral.
    pub fn bar_ticks(&self) -> Option<u64> {
        let (n, d) = self.bar_ticks_ratio();
        (n % d == 0).then(|| (n / d) as u64)
    }

    /// Number of bars needed to hold `ticks`.
    pub fn bars_for_ticks(&self, ticks: u64) -> u64 {
        let (n, d) = self.bar_ticks_ratio();
        ceil_div(ticks as u128 * d, n) as u64
    }

    /// Smallest bar count whose (rounded-up) end tick reaches `tick`; the
    /// inverse of [`Score::end_tick`] for bars of fractional length.
    pub fn bars_ending_at(&self, tick: u64) -> u64 {
        if tick == 0 {
            return 0;
        }
        let (n, d) = self.bar_ticks_ratio();
        ((tick as u128 - 1) * d / n + 1) as u64
    }

    /// Tick at which bar `bars` ends (rounded up).
    pub fn end_tick(&self) -> u64 {
        let (n, d) = self.bar_ticks_ratio();
        ceil_div(self.bars as u128 * n, d) as u64
    }

    fn covering_bars(&self) -> u64 {
        let end = self.notes.iter().map(NoteEvent::end).max().unwrap_or(0);
        // a note starting exactly on a bar line belongs to that bar
        let last_onset = self.notes.iter().map(|n| n.onset).max();
        let by_onset = last_onset.map_or(0, |o| self.bars_for_ticks(o + 1));
        self.bars_for_ticks(end).max(by_onset)
    }

    /// Keeps the first `bars` bars (at least one): later notes are removed
    /// and notes crossing the cut are shortened to end on it.
    pub fn truncate_bars(&self, bars: u64) -> Self {
        let bars = bars.max(1);
        if bars >= self.bars {
            return self.clone();
        }
        let (n, d) = self.bar_ticks_ratio();
        let limit = ceil_div(bars as u128 * n, d) as u64;
        let mut notes: Vec<NoteEvent> = self
            .notes
            .iter()
            .filter(|x| x.onset < limit)
            .map(|x| NoteEvent {
                duration: x.duration.min(limit - x.onset),
                ..*x
            })
            .collect();
        notes.sort();
        Self {
            notes,
            bars,
            ..self.clone()
        }
    }
}

/// Ticks per beat used for a given grid: the smallest multiple of 480 for
/// which one grid unit is a whole number of ticks.
pub fn canonical_ticks_per_beat(positions_per_bar: usize) -> u64 {
    let bar = 4 * CANONICAL_TICKS_PER_BEAT as u64;
    let p = positions_per_bar as u64;
    CANONICAL_TICKS_PER_BEAT as u64 * (p / gcd(p, bar))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `round(num / den)` with halves rounded down.
fn round_half_down(num: u128, den: u128) -> u128 {
    let (q, r) = (num / den, num % den);
    if 2 * r > den {
        q + 1
    } else {
        q
    }
}

/// Snaps a score onto a `positions_per_bar` grid in 4/4.
///
/// Onsets go to the nearest grid line (halves down), durations to the
/// nearest positive multiple of the grid unit. The result is re-expressed at
/// [`canonical_ticks_per_beat`], in 4/4, with velocity and tempo moved to
/// their vocabulary bin representatives, so it is a fixed point of the
/// tokenizer round trip. Idempotent.
pub fn quantize(score: &Score, positions_per_bar: usize) -> Result<Score, RemiError> {
    if positions_per_bar == 0 {
        return Err(RemiError::InvalidScore(
            "positions per bar must be at least 1".into(),
        ));
    }
    let tpb = canonical_ticks_per_beat(positions_per_bar);
    if tpb > 0x7FFF {
        return Err(RemiError::InvalidScore(format!(
            "{positions_per_bar} positions per bar needs {tpb} ticks per beat"
        )));
    }
    let unit = 4 * tpb / positions_per_bar as u64;
    // grid units = ticks * P / (4 * tpb_in)
    let p = positions_per_bar as u128;
    let den = 4 * score.ticks_per_beat as u128;
    let notes = score
        .notes
        .iter()
        .map(|n| {
            let onset = round_half_down(n.onset as u128 * p, den) as u64;
            let dur = (round_half_down(n.duration as u128 * p, den) as u64).max(1);
            NoteEvent::new(
                n.pitch,
                onset * unit,
                dur * unit,
                velocity_of_bin(velocity_bin(n.velocity)),
            )
        })
        .collect();
    let TimeSignature {
        numerator,
        denominator,
    } = score.time_signature;
    let bars = ceil_div(score.bars as u128 * numerator as u128, denominator as u128) as u64;
    Score::new(
        notes,
        tpb as u16,
        TimeSignature::COMMON,
        tempo_of_bin(tempo_bin(score.tempo_bpm)),
        bars,
    )
}
