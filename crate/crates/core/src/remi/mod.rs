//! MIDI ↔ quantized score ↔ REMI tokens.

mod codec;
pub mod io;
mod midi;
mod score;
mod vocab;

pub use codec::{decode, encode, validate, DecodeDiagnostics, GrammarError};
pub use midi::{parse_midi, parse_midi_verbose, write_midi, ParsedMidi};
pub use score::{
    canonical_ticks_per_beat, quantize, NoteEvent, Score, TimeSignature, CANONICAL_TICKS_PER_BEAT,
    DEFAULT_TEMPO_BPM,
};
pub use vocab::{
    tempo_bin, tempo_micros_of_bin, tempo_of_bin, velocity_bin, velocity_of_bin, RemiVocab, Token,
    TEMPO_BINS, VELOCITY_BINS,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RemiError {
    #[error("not a MIDI file (missing MThd header)")]
    NotMidi,
    #[error("truncated {what} at byte {offset}")]
    Truncated { what: String, offset: usize },
    #[error("chunk at byte {offset} declares {declared} bytes but only {available} remain")]
    ChunkOverflow {
        offset: usize,
        declared: usize,
        available: usize,
    },
    #[error("unsupported MIDI: {0}")]
    UnsupportedFormat(String),
    #[error("malformed MIDI at byte {offset}: {msg}")]
    Midi { offset: usize, msg: String },
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error("score is not quantized to the vocabulary grid: {0}")]
    NotQuantized(String),
    #[error("pitch {0} outside 0..=127")]
    Pitch(u8),
    #[error("token {0} is not in the vocabulary")]
    InvalidToken(String),
    #[error("token {token} at position {position} is out of range for vocabulary {vocab}")]
    TokenRange {
        token: usize,
        position: usize,
        vocab: usize,
    },
    #[error("token file record {record}: {msg}")]
    TokenFile { record: usize, msg: String },
}

/// Reads a MIDI file, quantizes it to the vocabulary grid and encodes it.
pub fn midi_to_tokens(bytes: &[u8], vocab: &RemiVocab) -> Result<Vec<usize>, RemiError> {
    let score = parse_midi(bytes)?;
    encode(&quantize(&score, vocab.positions_per_bar())?, vocab)
}
