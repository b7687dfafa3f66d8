//! Token sequence files.
//!
//! Text: one sequence per line, whitespace-separated decimal indices; blank
//! lines are skipped.
//!
//! Binary: a concatenation of records, each
//!
//! ```text
//! magic    4 bytes "REMI"
//! version  u16 LE  1
//! V        u32 LE  vocabulary size
//! L        u32 LE  sequence length
//! tokens   L × u16 LE
//! ```

use super::RemiError;

pub const MAGIC: &[u8; 4] = b"REMI";
pub const VERSION: u16 = 1;

fn check(tokens: &[usize], vocab_size: usize, line: usize) -> Result<(), RemiError> {
    for (position, &token) in tokens.iter().enumerate() {
        if token >= vocab_size {
            return Err(RemiError::TokenFile {
                record: line,
                msg: format!(
                    "token {token} at position {position} is outside vocabulary size {vocab_size}"
                ),
            });
        }
    }
    Ok(())
}

pub fn tokens_to_text(seqs: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn tokens_from_text(text: &str, vocab_size: usize) -> Result<Vec<Vec<usize>>, RemiError> {
    let mut seqs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>().map_err(|e| RemiError::TokenFile {
                    record: i + 1,
                    msg: format!("'{w}': {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        check(&seq, vocab_size, i + 1)?;
        seqs.push(seq);
    }
    Ok(seqs)
}

pub fn tokens_to_binary(seqs: &[Vec<usize>], vocab_size: usize) -> Result<Vec<u8>, RemiError> {
    if vocab_size > u16::MAX as usize + 1 {
        return Err(RemiError::TokenFile {
            record: 0,
            msg: format!("vocabulary size {vocab_size} does not fit 16-bit tokens"),
        });
    }
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        check(s, vocab_size, i + 1)?;
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for &t in s {
            out.extend_from_slice(&(t as u16).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads binary records; `vocab_size`, when given, must match every header.
pub fn tokens_from_binary(
    bytes: &[u8],
    vocab_size: Option<usize>,
) -> Result<Vec<Vec<usize>>, RemiError> {
    let mut seqs = Vec::new();
    let mut pos = 0;
    let mut record = 0;
    while pos < bytes.len() {
        record += 1;
        let err = |msg: String| RemiError::TokenFile { record, msg };
        if bytes.len() - pos < 14 {
            return Err(err("truncated header".into()));
        }
        if &bytes[pos..pos + 4] != MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[pos + 4], bytes[pos + 5]]);
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let v = u32::from_le_bytes(bytes[pos + 6..pos + 10].try_into().unwrap()) as usize;
        let l = u32::from_le_bytes(bytes[pos + 10..pos + 14].try_into().unwrap()) as usize;
        if let Some(expected) = vocab_size {
            if v != expected {
                return Err(err(format!("vocabulary size {v}, expected {expected}")));
            }
        }
        pos += 14;
        if (bytes.len() - pos) / 2 < l {
            return Err(err(format!("declares {l} tokens but the file ends early")));
        }
        let seq: Vec<usize> = bytes[pos..pos + 2 * l]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        pos += 2 * l;
        check(&seq, v, record)?;
        seqs.push(seq);
    }
    Ok(seqs)
}

/// True when `bytes` start with the binary record magic.
pub fn is_binary(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}
