//! Score ↔ REMI token conversion and the token grammar.

use super::score::{canonical_ticks_per_beat, NoteEvent, Score, TimeSignature};
use super::vocab::{tempo_bin, tempo_of_bin, velocity_bin, velocity_of_bin, RemiVocab, Token};
use super::RemiError;

/// What [`decode`] had to skip.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeDiagnostics {
    /// Ungrammatical or mask tokens that were skipped.
    pub dropped: usize,
    /// PAD tokens (ignored, not counted as dropped).
    pub padding: usize,
    pub notes: usize,
}

fn grid_unit(vocab: &RemiVocab) -> u64 {
    4 * canonical_ticks_per_beat(vocab.positions_per_bar()) / vocab.positions_per_bar() as u64
}

/// Encodes a quantized score.
///
/// The score must use the vocabulary's canonical ticks per beat, 4/4 time,
/// and onsets/durations on the grid (see [`super::quantize`]). Velocities and
/// tempo are binned; durations beyond the vocabulary maximum are clipped with
/// a warning.
pub fn encode(score: &Score, vocab: &RemiVocab) -> Result<Vec<usize>, RemiError> {
    let tpb = canonical_ticks_per_beat(vocab.positions_per_bar());
    if score.ticks_per_beat() as u64 != tpb || score.time_signature() != TimeSignature::COMMON {
        return Err(RemiError::NotQuantized(format!(
            "expected {tpb} ticks per beat in 4/4, found {} in {}/{}",
            score.ticks_per_beat(),
            score.time_signature().numerator,
            score.time_signature().denominator
        )));
    }
    let unit = grid_unit(vocab);
    let ppb = vocab.positions_per_bar() as u64;
    let mut out = Vec::with_capacity(2 + score.bars() as usize + score.notes().len() * 4);
    let mut push = |t: Token| -> Result<(), RemiError> {
        out.push(vocab.index_of(t)?);
        Ok(())
    };
    let notes = score.notes();
    let mut next = 0;
    let mut clipped = 0;
    for bar in 0..score.bars() {
        push(Token::Bar)?;
        if bar == 0 {
            push(Token::Tempo(tempo_bin(score.tempo_bpm())))?;
        }
        let mut last_pos = None;
        while next < notes.len() {
            let n = notes[next];
            if n.onset % unit != 0 || n.duration % unit != 0 {
                return Err(RemiError::NotQuantized(format!(
                    "note {} at tick {} is off the {unit}-tick grid",
                    n.pitch, n.onset
                )));
            }
            let g = n.onset / unit;
            if g / ppb != bar {
                break;
            }
            let pos = (g % ppb) as u16;
            if last_pos != Some(pos) {
                push(Token::Position(pos))?;
                last_pos = Some(pos);
            }
            let mut d = n.duration / unit;
            if d > vocab.max_duration() as u64 {
                d = vocab.max_duration() as u64;
                clipped += 1;
            }
            push(Token::Pitch(n.pitch))?;
            push(Token::Duration(d as u16))?;
            push(Token::Velocity(velocity_bin(n.velocity)))?;
            next += 1;
        }
    }
    if clipped > 0 {
        log::warn!(
            "{clipped} note(s) longer than {} grid units were clipped",
            vocab.max_duration()
        );
    }
    Ok(out)
}

/// Tolerant decoder for arbitrary token streams.
///
/// Tokens that do not fit the grammar are skipped and counted. The result is
/// in canonical form: vocabulary ticks per beat, 4/4, and at least as many
/// bars as Bar tokens.
pub fn decode(tokens: &[usize], vocab: &RemiVocab) -> (Score, DecodeDiagnostics) {
    let unit = grid_unit(vocab);
    let ppb = vocab.positions_per_bar() as u64;
    let mut diag = DecodeDiagnostics::default();
    let mut bar: Option<u64> = None;
    let mut pos: Option<u64> = None;
    let mut tempo: Option<u8> = None;
    // pending (pitch, duration) and how many tokens it consumed
    let mut pitch: Option<u8> = None;
    let mut duration: Option<u16> = None;
    let mut notes = Vec::new();

    for &idx in tokens {
        let tok = match vocab.token_of(idx) {
            Ok(t) => t,
            Err(_) => {
                diag.dropped += 1;
                continue;
            }
        };
        let pending = pitch.is_some() as usize + duration.is_some() as usize;
        let mut abandon = |pitch: &mut Option<u8>, duration: &mut Option<u16>| {
            diag.dropped += pending;
            *pitch = None;
            *duration = None;
        };
        match tok {
            Token::Pad => diag.padding += 1,
            Token::Mask => diag.dropped += 1,
            Token::Bar => {
                abandon(&mut pitch, &mut duration);
                bar = Some(bar.map_or(0, |b| b + 1));
                pos = None;
            }
            Token::Tempo(t) => {
                if tempo.is_none() && bar.is_some() && pending == 0 {
                    tempo = Some(t);
                } else {
                    diag.dropped += 1;
                }
            }
            Token::Position(p) => {
                abandon(&mut pitch, &mut duration);
                if bar.is_some() {
                    pos = Some(p as u64);
                } else {
                    diag.dropped += 1;
                }
            }
            Token::Pitch(p) => {
                abandon(&mut pitch, &mut duration);
                if pos.is_some() {
                    pitch = Some(p);
                } else {
                    diag.dropped += 1;
                }
            }
            Token::Duration(d) => {
                if pitch.is_some() && duration.is_none() {
                    duration = Some(d);
                } else {
                    diag.dropped += 1;
                }
            }
            Token::Velocity(v) => match (pitch, duration, bar, pos) {
                (Some(p), Some(d), Some(b), Some(q)) => {
                    notes.push(NoteEvent::new(
                        p,
                        (b * ppb + q) * unit,
                        d as u64 * unit,
                        velocity_of_bin(v),
                    ));
                    pitch = None;
                    duration = None;
                }
                _ => diag.dropped += 1,
            },
        }
    }
    diag.dropped += pitch.is_some() as usize + duration.is_some() as usize;
    diag.notes = notes.len();
    let tempo_bpm =
        tempo_of_bin(tempo.unwrap_or_else(|| tempo_bin(super::score::DEFAULT_TEMPO_BPM)));
    let bars = bar.map_or(1, |b| b + 1);
    let tpb = canonical_ticks_per_beat(vocab.positions_per_bar()) as u16;
    let score = Score::new(notes, tpb, TimeSignature::COMMON, tempo_bpm, bars)
        .expect("decoded notes satisfy score invariants");
    (score, diag)
}

/// Position and reason of the first grammar violation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("grammar violation at token {position}: {reason}")]
pub struct GrammarError {
    pub position: usize,
    pub reason: String,
}

/// Checks a token sequence against the REMI grammar:
///
/// * no MASK; PAD only as a trailing run;
/// * the first token is Bar, followed directly by the only Tempo token;
/// * Position only inside a bar, strictly increasing within it;
/// * Pitch only after a Position, always followed by Duration then Velocity;
/// * Duration and Velocity only inside such a triple.
pub fn validate(tokens: &[usize], vocab: &RemiVocab) -> Result<(), GrammarError> {
    let err = |position: usize, reason: &str| GrammarError {
        position,
        reason: reason.to_string(),
    };
    let mut seen_bar = false;
    let mut seen_tempo = false;
    let mut in_pad = false;
    let mut last_pos: Option<u16> = None;
    // 0 idle, 1 expects Duration, 2 expects Velocity
    let mut triple = 0;
    for (i, &idx) in tokens.iter().enumerate() {
        let tok = vocab
            .token_of(idx)
            .map_err(|_| err(i, "index outside the vocabulary"))?;
        if in_pad && tok != Token::Pad {
            return Err(err(i, "token after padding"));
        }
        if triple == 1 && !matches!(tok, Token::Duration(_)) {
            return Err(err(i, "Pitch must be followed by Duration"));
        }
        if triple == 2 && !matches!(tok, Token::Velocity(_)) {
            return Err(err(i, "Duration must be followed by Velocity"));
        }
        if i == 0 && tok != Token::Bar && tok != Token::Pad {
            return Err(err(i, "sequence must start with Bar"));
        }
        match tok {
            Token::Mask => return Err(err(i, "mask token")),
            Token::Pad => in_pad = true,
            Token::Bar => {
                seen_bar = true;
                last_pos = None;
            }
            Token::Tempo(_) => {
                if seen_tempo || i != 1 {
                    return Err(err(i, "Tempo must appear once, right after the first Bar"));
                }
                seen_tempo = true;
            }
            Token::Position(p) => {
                if !seen_bar {
                    return Err(err(i, "Position before any Bar"));
                }
                if last_pos.is_some_and(|l| p <= l) {
                    return Err(err(i, "Position not increasing within the bar"));
                }
                last_pos = Some(p);
            }
            Token::Pitch(_) => {
                if last_pos.is_none() {
                    return Err(err(i, "Pitch without a Position in the current bar"));
                }
                triple = 1;
            }
            Token::Duration(_) => {
                if triple != 1 {
                    return Err(err(i, "Duration without a Pitch"));
                }
                triple = 2;
            }
            Token::Velocity(_) => {
                if triple != 2 {
                    return Err(err(i, "Velocity without Pitch and Duration"));
                }
                triple = 0;
            }
        }
    }
    if triple != 0 {
        return Err(err(tokens.len(), "sequence ends inside a note"));
    }
    Ok(())
}
