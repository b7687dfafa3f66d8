//! Fixed REMI vocabulary.
//!
//! Index layout, in build order:
//!
//! ```text
//! Bar                       1
//! Position(0..P)            P    (P = positions per bar, default 16)
//! Pitch(0..128)             128
//! Duration(1..=Dmax)        Dmax (grid units, default 64)
//! Velocity(bin 0..32)       32   (bin i covers velocities 4i+1 ..= 4i+4)
//! Tempo(bin 0..32)          32   (bin i covers [30 + 5.625 i, 30 + 5.625 (i+1)) BPM)
//! PAD                       1
//! MASK                      1    (always V − 1)
//! ```

use std::fmt;

use super::RemiError;

pub const VELOCITY_BINS: usize = 32;
pub const TEMPO_BINS: usize = 32;
pub const TEMPO_MIN_BPM: f64 = 30.0;
pub const TEMPO_MAX_BPM: f64 = 210.0;
const TEMPO_BIN_WIDTH: f64 = (TEMPO_MAX_BPM - TEMPO_MIN_BPM) / TEMPO_BINS as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Bar,
    Position(u16),
    Pitch(u8),
    /// Length in grid units, `1..=max_duration`.
    Duration(u16),
    /// Velocity bin.
    Velocity(u8),
    /// Tempo bin.
    Tempo(u8),
    Pad,
    Mask,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Bar => write!(f, "Bar"),
            Token::Position(p) => write!(f, "Position_{p}"),
            Token::Pitch(p) => write!(f, "Pitch_{p}"),
            Token::Duration(d) => write!(f, "Duration_{d}"),
            Token::Velocity(v) => write!(f, "Velocity_{v}"),
            Token::Tempo(t) => write!(f, "Tempo_{t}"),
            Token::Pad => write!(f, "PAD"),
            Token::Mask => write!(f, "MASK"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemiVocab {
    positions_per_bar: usize,
    max_duration: usize,
}

impl Default for RemiVocab {
    fn default() -> Self {
        Self {
            positions_per_bar: 16,
            max_duration: 64,
        }
    }
}

impl RemiVocab {
    pub fn new(positions_per_bar: usize, max_duration: usize) -> Result<Self, RemiError> {
        if positions_per_bar == 0 || max_duration == 0 {
            return Err(RemiError::InvalidScore(
                "positions per bar and maximum duration must be positive".into(),
            ));
        }
        if positions_per_bar > u16::MAX as usize || max_duration > u16::MAX as usize {
            return Err(RemiError::InvalidScore(
                "vocabulary family too large".into(),
            ));
        }
        Ok(Self {
            positions_per_bar,
            max_duration,
        })
    }

    pub fn positions_per_bar(&self) -> usize {
        self.positions_per_bar
    }

    pub fn max_duration(&self) -> usize {
        self.max_duration
    }

    fn position_base(&self) -> usize {
        1
    }

    fn pitch_base(&self) -> usize {
        self.position_base() + self.positions_per_bar
    }

    fn duration_base(&self) -> usize {
        self.pitch_base() + 128
    }

    fn velocity_base(&self) -> usize {
        self.duration_base() + self.max_duration
    }

    fn tempo_base(&self) -> usize {
        self.velocity_base() + VELOCITY_BINS
    }

    pub fn pad(&self) -> usize {
        self.tempo_base() + TEMPO_BINS
    }

    pub fn mask(&self) -> usize {
        self.pad() + 1
    }

    pub fn size(&self) -> usize {
        self.mask() + 1
    }

    pub fn index_of(&self, token: Token) -> Result<usize, RemiError> {
        let bad = || RemiError::InvalidToken(token.to_string());
        Ok(match token {
            Token::Bar => 0,
            Token::Position(p) if (p as usize) < self.positions_per_bar => {
                self.position_base() + p as usize
            }
            Token::Pitch(p) if p < 128 => self.pitch_base() + p as usize,
            Token::Duration(d) if d >= 1 && (d as usize) <= self.max_duration => {
                self.duration_base() + d as usize - 1
            }
            Token::Velocity(v) if (v as usize) < VELOCITY_BINS => self.velocity_base() + v as usize,
            Token::Tempo(t) if (t as usize) < TEMPO_BINS => self.tempo_base() + t as usize,
            Token::Pad => self.pad(),
            Token::Mask => self.mask(),
            _ => return Err(bad()),
        })
    }

    pub fn token_of(&self, index: usize) -> Result<Token, RemiError> {
        let i = index;
        Ok(if i == 0 {
            Token::Bar
        } else if i < self.pitch_base() {
            Token::Position((i - self.position_base()) as u16)
        } else if i < self.duration_base() {
            Token::Pitch((i - self.pitch_base()) as u8)
        } else if i < self.velocity_base() {
            Token::Duration((i - self.duration_base() + 1) as u16)
        } else if i < self.tempo_base() {
            Token::Velocity((i - self.velocity_base()) as u8)
        } else if i < self.pad() {
            Token::Tempo((i - self.tempo_base()) as u8)
        } else if i == self.pad() {
            Token::Pad
        } else if i == self.mask() {
            Token::Mask
        } else {
            return Err(RemiError::TokenRange {
                token: index,
                position: 0,
                vocab: self.size(),
            });
        })
    }
}

pub fn velocity_bin(velocity: u8) -> u8 {
    (velocity.clamp(1, 127) - 1) / 4
}

/// Representative velocity of a bin: `4i + 2`.
pub fn velocity_of_bin(bin: u8) -> u8 {
    4 * bin + 2
}

pub fn tempo_bin(bpm: f64) -> u8 {
    let b = ((bpm - TEMPO_MIN_BPM) / TEMPO_BIN_WIDTH).floor();
    b.clamp(0.0, (TEMPO_BINS - 1) as f64) as u8
}

/// Microseconds per quarter note for the center of a tempo bin.
pub fn tempo_micros_of_bin(bin: u8) -> u32 {
    let center = TEMPO_MIN_BPM + TEMPO_BIN_WIDTH * (bin as f64 + 0.5);
    (60e6 / center).round() as u32
}

/// Representative tempo of a bin, exactly representable in a MIDI tempo event.
pub fn tempo_of_bin(bin: u8) -> f64 {
    60e6 / tempo_micros_of_bin(bin) as f64
}
