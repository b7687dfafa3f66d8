//! Standard MIDI File reading and writing.

use std::collections::{HashMap, VecDeque};

use super::score::{NoteEvent, Score, TimeSignature};
use super::RemiError;

const DEFAULT_TEMPO_MICROS: u32 = 500_000;
const DRUM_CHANNEL: u8 = 9;

/// Parse result with the non-fatal problems encountered.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub score: Score,
    pub warnings: Vec<String>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn truncated(&self, what: &str) -> RemiError {
        RemiError::Truncated {
            what: what.to_string(),
            offset: self.base + self.pos,
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8], RemiError> {
        if self.buf.len() - self.pos < n {
            return Err(self.truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, RemiError> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, RemiError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity of at most four bytes.
    fn vlq(&mut self, what: &str) -> Result<u32, RemiError> {
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8(what)?;
            v = (v << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(RemiError::Midi {
            offset: self.base + self.pos,
            msg: format!("{what}: variable-length quantity longer than 4 bytes"),
        })
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    NoteOn {
        channel: u8,
        pitch: u8,
        velocity: u8,
    },
    NoteOff {
        channel: u8,
        pitch: u8,
    },
    Tempo(u32),
    TimeSig(TimeSignature),
    End,
}

struct Track {
    events: Vec<(u64, Event)>,
    end: u64,
}

fn parse_track(data: &[u8], base: usize) -> Result<Track, RemiError> {
    let mut c = Cursor {
        buf: data,
        pos: 0,
        base,
    };
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    while !c.done() {
        tick += c.vlq("delta time")? as u64;
        let first = c.u8("event status")?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            match running {
                Some(s) => {
                    c.pos -= 1;
                    s
                }
                None => {
                    return Err(RemiError::Midi {
                        offset: base + c.pos - 1,
                        msg: "data byte without running status".into(),
                    })
                }
            }
        };
        match status {
            0xFF => {
                running = None;
                let kind = c.u8("meta type")?;
                let len = c.vlq("meta length")? as usize;
                let body = c.bytes(len, "meta event")?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, body[0], body[1], body[2]]);
                        if us > 0 {
                            events.push((tick, Event::Tempo(us)));
                        }
                    }
                    0x58 if len >= 2 => {
                        if body[1] < 8 && body[0] > 0 {
                            events.push((
                                tick,
                                Event::TimeSig(TimeSignature {
                                    numerator: body[0],
                                    denominator: 1 << body[1],
                                }),
                            ));
                        }
                    }
                    0x2F => {
                        events.push((tick, Event::End));
                        break;
                    }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = c.vlq("sysex length")? as usize;
                c.bytes(len, "sysex event")?;
            }
            0xF1..=0xFE => {
                return Err(RemiError::Midi {
                    offset: base + c.pos - 1,
                    msg: format!("system message 0x{status:02X} inside a track"),
                })
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0F;
                let n_data = if matches!(status & 0xF0, 0xC0 | 0xD0) {
                    1
                } else {
                    2
                };
                let d = c.bytes(n_data, "channel event")?;
                match status & 0xF0 {
                    0x90 if d[1] > 0 => events.push((
                        tick,
                        Event::NoteOn {
                            channel,
                            pitch: d[0] & 0x7F,
                            velocity: d[1] & 0x7F,
                        },
                    )),
                    0x80 | 0x90 => events.push((
                        tick,
                        Event::NoteOff {
                            channel,
                            pitch: d[0] & 0x7F,
                        },
                    )),
                    _ => {}
                }
            }
        }
    }
    Ok(Track { events, end: tick })
}

/// Parses an SMF (format 0 or 1, ticks-per-quarter division) into a Score,
/// merging all tracks.
pub fn parse_midi(bytes: &[u8]) -> Result<Score, RemiError> {
    Ok(parse_midi_verbose(bytes)?.score)
}

/// Like [`parse_midi`], also returning warnings (which are logged too).
pub fn parse_midi_verbose(bytes: &[u8]) -> Result<ParsedMidi, RemiError> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        base: 0,
    };
    if bytes.len() < 4 || &bytes[..4] != b"MThd" {
        return Err(RemiError::NotMidi);
    }
    c.pos = 4;
    let header_len = c.u32("header length")? as usize;
    if header_len < 6 {
        return Err(RemiError::Midi {
            offset: 4,
            msg: format!("header length {header_len} is shorter than 6"),
        });
    }
    let header = c.bytes(header_len, "header chunk")?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(RemiError::UnsupportedFormat(format!("SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(RemiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(RemiError::UnsupportedFormat(
            "zero ticks per quarter note".into(),
        ));
    }

    let mut tracks = Vec::new();
    while !c.done() {
        let start = c.pos;
        let id = c.bytes(4, "chunk id")?;
        let len = c.u32("chunk length")? as usize;
        if len > bytes.len() - c.pos {
            return Err(RemiError::ChunkOverflow {
                offset: start,
                declared: len,
                available: bytes.len() - c.pos,
            });
        }
        let body_start = c.pos;
        let body = c.bytes(len, "chunk body")?;
        if id == b"MTrk" {
            tracks.push(parse_track(body, body_start)?);
        }
    }

    let mut warnings = Vec::new();
    let mut warn = |msg: String| {
        log::warn!("{msg}");
        warnings.push(msg);
    };

    // merge in (tick, track, order) so the first meta event in time wins
    let mut merged: Vec<(u64, usize, usize, Event)> = Vec::new();
    for (ti, tr) in tracks.iter().enumerate() {
        for (ei, &(tick, ev)) in tr.events.iter().enumerate() {
            merged.push((tick, ti, ei, ev));
        }
    }
    merged.sort_by_key(|&(tick, ti, ei, _)| (tick, ti, ei));

    let mut tempo: Option<u32> = None;
    let mut time_sig: Option<TimeSignature> = None;
    let mut notes = Vec::new();
    for (ti, tr) in tracks.iter().enumerate() {
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        for &(tick, ev) in &tr.events {
            match ev {
                Event::NoteOn {
                    channel,
                    pitch,
                    velocity,
                } => {
                    open.entry((channel, pitch))
                        .or_default()
                        .push_back((tick, velocity));
                }
                Event::NoteOff { channel, pitch } => {
                    match open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                        Some((on, vel)) if tick > on => {
                            notes.push(NoteEvent::new(pitch, on, tick - on, vel))
                        }
                        Some((on, _)) => warn(format!(
                            "track {ti}: zero-length note {pitch} at tick {on} dropped"
                        )),
                        None => warn(format!(
                            "track {ti}: note-off for {pitch} at tick {tick} without a note-on"
                        )),
                    }
                }
                _ => {}
            }
        }
        let mut leftovers: Vec<((u8, u8), (u64, u8))> = open
            .into_iter()
            .flat_map(|(k, q)| q.into_iter().map(move |v| (k, v)))
            .collect();
        leftovers.sort();
        for ((_, pitch), (on, vel)) in leftovers {
            if tr.end > on {
                warn(format!(
                    "track {ti}: note {pitch} at tick {on} never released, closed at track end"
                ));
                notes.push(NoteEvent::new(pitch, on, tr.end - on, vel));
            } else {
                warn(format!(
                    "track {ti}: unreleased note {pitch} at the last tick dropped"
                ));
            }
        }
    }
    for &(tick, _, _, ev) in &merged {
        match ev {
            Event::Tempo(us) => match tempo {
                None => tempo = Some(us),
                Some(t) if t != us => warn(format!("tempo change at tick {tick} ignored")),
                _ => {}
            },
            Event::TimeSig(ts) => match time_sig {
                None => time_sig = Some(ts),
                Some(t) if t != ts => warn(format!("time signature change at tick {tick} ignored")),
                _ => {}
            },
            _ => {}
        }
    }

    let end = tracks.iter().map(|t| t.end).max().unwrap_or(0);
    let tempo_bpm = 60e6 / tempo.unwrap_or(DEFAULT_TEMPO_MICROS) as f64;
    let mut score = Score::new(notes, division, time_sig.unwrap_or_default(), tempo_bpm, 1)?;
    let bars = score.bars_ending_at(end);
    if bars > score.bars() {
        score = Score::new(
            score.notes().to_vec(),
            division,
            score.time_signature(),
            tempo_bpm,
            bars,
        )?;
    }
    Ok(ParsedMidi { score, warnings })
}

fn put_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(stack[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Assigns each note a channel so that notes of equal pitch never overlap
/// on one channel. Channel 9 is skipped.
fn assign_channels(notes: &[NoteEvent]) -> Vec<u8> {
    let mut busy_until: HashMap<(u8, u8), u64> = HashMap::new();
    let channels: Vec<u8> = (0..16).filter(|&c| c != DRUM_CHANNEL).collect();
    let mut out = Vec::with_capacity(notes.len());
    let mut overflow = false;
    for n in notes {
        let free = channels
            .iter()
            .copied()
            .find(|&c| busy_until.get(&(c, n.pitch)).is_none_or(|&e| e <= n.onset));
        let ch = free.unwrap_or_else(|| {
            overflow = true;
            channels[0]
        });
        let e = busy_until.entry((ch, n.pitch)).or_insert(0);
        *e = (*e).max(n.end());
        out.push(ch);
    }
    if overflow {
        log::warn!("more than 15 overlapping notes of one pitch; some will not survive a re-parse");
    }
    out
}

/// Writes a single-track format-0 file: tempo and time signature at tick 0,
/// notes, and end-of-track at the score's final bar line.
pub fn write_midi(score: &Score) -> Vec<u8> {
    let notes = score.notes();
    let channels = assign_channels(notes);
    // (tick, class, a, b, channel, velocity): note-offs sort before note-ons at a tick
    let mut events: Vec<(u64, u8, u8, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for (n, &ch) in notes.iter().zip(&channels) {
        events.push((n.end(), 0, ch, n.pitch, 0));
        events.push((n.onset, 1, ch, n.pitch, n.velocity));
    }
    events.sort();

    let mut track = Vec::with_capacity(16 + events.len() * 4);
    let us = score.tempo_micros();
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&us.to_be_bytes()[1..]);
    let ts = score.time_signature();
    track.extend_from_slice(&[
        0x00,
        0xFF,
        0x58,
        0x04,
        ts.numerator,
        ts.denominator.trailing_zeros() as u8,
        24,
        8,
    ]);
    let mut last = 0u64;
    for (tick, class, ch, pitch, vel) in events {
        put_vlq(&mut track, (tick - last) as u32);
        last = tick;
        if class == 0 {
            track.extend_from_slice(&[0x80 | ch, pitch, 0x40]);
        } else {
            track.extend_from_slice(&[0x90 | ch, pitch, vel]);
        }
    }
    let end = score.end_tick().max(last);
    put_vlq(&mut track, (end - last) as u32);
    track.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&score.ticks_per_beat().to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}
