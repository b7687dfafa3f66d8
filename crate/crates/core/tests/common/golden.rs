//! Hand-assembled Standard MIDI Files, byte by byte.

fn chunk(id: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = id.to_vec();
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn header(format: u16, tracks: u16, division: u16) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&format.to_be_bytes());
    body.extend_from_slice(&tracks.to_be_bytes());
    body.extend_from_slice(&division.to_be_bytes());
    chunk(b"MThd", &body)
}

pub fn track(body: &[u8]) -> Vec<u8> {
    chunk(b"MTrk", body)
}

pub fn file(format: u16, division: u16, tracks: &[&[u8]]) -> Vec<u8> {
    let mut out = header(format, tracks.len() as u16, division);
    for t in tracks {
        out.extend(track(t));
    }
    out
}

/// C4 for one beat at velocity 64, 96 ticks per quarter, explicit note-off.
pub fn one_note() -> Vec<u8> {
    file(
        0,
        96,
        &[&[
            0x00, 0x90, 60, 64, // note-on
            0x60, 0x80, 60, 0x40, // delta 96, note-off
            0x00, 0xFF, 0x2F, 0x00,
        ]],
    )
}

/// Same note closed by a note-on with velocity 0.
pub fn one_note_velocity_zero() -> Vec<u8> {
    file(
        0,
        96,
        &[&[
            0x00, 0x90, 60, 64, 0x60, 0x90, 60, 0x00, 0x00, 0xFF, 0x2F, 0x00,
        ]],
    )
}

/// Three notes, the last two using running status, plus tempo and 3/4.
pub fn running_status() -> Vec<u8> {
    file(
        0,
        480,
        &[&[
            0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, // 500000 µs
            0x00, 0xFF, 0x58, 0x04, 0x03, 0x02, 0x18, 0x08, // 3/4
            0x00, 0x90, 60, 100, //
            0x00, 64, 90, // running status note-on
            0x83, 0x60, 60, 0, // delta 480, running status note-off via velocity 0
            0x00, 64, 0, //
            0x00, 67, 80, //
            0x81, 0x70, 67, 0, // delta 240
            0x00, 0xFF, 0x2F, 0x00,
        ]],
    )
}

/// Format 1: a tempo track and two note tracks.
pub fn format1() -> Vec<u8> {
    file(
        1,
        96,
        &[
            &[
                0x00, 0xFF, 0x51, 0x03, 0x09, 0x27, 0xC0, 0x00, 0xFF, 0x2F, 0x00,
            ], // 600000 µs = 100 BPM
            &[
                0x00, 0x90, 48, 70, 0x81, 0x40, 0x80, 48, 0, 0x00, 0xFF, 0x2F, 0x00,
            ],
            &[
                0x30, 0x91, 72, 50, 0x30, 0x81, 72, 0, 0x00, 0xFF, 0x2F, 0x00,
            ],
        ],
    )
}

pub fn empty() -> Vec<u8> {
    file(0, 480, &[&[0x00, 0xFF, 0x2F, 0x00]])
}
