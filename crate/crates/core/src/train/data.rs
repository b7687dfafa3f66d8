//! Dataset ingestion: MIDI or token files into fixed-length windows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::TrainError;
use crate::remi::{io, midi_to_tokens, RemiVocab};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub tokens: usize,
    pub windows: usize,
    /// `ok` or the reason the file was skipped.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub windows: Vec<Vec<usize>>,
    pub manifest: Vec<ManifestEntry>,
}

/// Non-overlapping windows of `seq_len`; the last one is filled with `pad`.
pub fn split_windows(tokens: &[usize], seq_len: usize, pad: usize) -> Vec<Vec<usize>> {
    tokens
        .chunks(seq_len)
        .map(|c| {
            let mut w = c.to_vec();
            w.resize(seq_len, pad);
            w
        })
        .collect()
}

impl Dataset {
    pub fn from_sequences(seqs: &[Vec<usize>], seq_len: usize, pad: usize) -> Self {
        let mut d = Dataset::default();
        for (i, s) in seqs.iter().enumerate() {
            d.push(format!("sequence-{i}"), s, seq_len, pad);
        }
        d
    }

    fn push(&mut self, file: String, tokens: &[usize], seq_len: usize, pad: usize) {
        let w = split_windows(tokens, seq_len, pad);
        self.manifest.push(ManifestEntry {
            file,
            tokens: tokens.len(),
            windows: w.len(),
            status: "ok".into(),
        });
        self.windows.extend(w);
    }

    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("file,tokens,windows,status\n");
        for e in &self.manifest {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.file,
                e.tokens,
                e.windows,
                e.status.replace(',', ";")
            );
        }
        out
    }
}

fn is_midi(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("mid" | "midi")
    )
}

fn read_sequences(path: &Path, vocab: &RemiVocab) -> Result<Vec<Vec<usize>>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    if is_midi(path) {
        return midi_to_tokens(&bytes, vocab)
            .map(|t| vec![t])
            .map_err(|e| e.to_string());
    }
    if io::is_binary(&bytes) {
        return io::tokens_from_binary(&bytes, Some(vocab.size())).map_err(|e| e.to_string());
    }
    let text =
        std::str::from_utf8(&bytes).map_err(|_| "neither MIDI nor a token file".to_string())?;
    io::tokens_from_text(text, vocab.size()).map_err(|e| e.to_string())
}

/// Reads every file of `dir` in name order. Unreadable files are skipped and
/// recorded in the manifest; no usable window at all is an error.
pub fn ingest(dir: &Path, vocab: &RemiVocab, seq_len: usize) -> Result<Dataset, TrainError> {
    if !dir.is_dir() {
        return Err(TrainError::DataDir(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| TrainError::Io(dir.to_path_buf(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut data = Dataset::default();
    for path in paths {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match read_sequences(&path, vocab) {
            Ok(seqs) => {
                let tokens: Vec<usize> = seqs.concat();
                let windows: Vec<Vec<usize>> = seqs
                    .iter()
                    .filter(|s| !s.is_empty())
                    .flat_map(|s| split_windows(s, seq_len, vocab.pad()))
                    .collect();
                data.manifest.push(ManifestEntry {
                    file: name,
                    tokens: tokens.len(),
                    windows: windows.len(),
                    status: "ok".into(),
                });
                data.windows.extend(windows);
            }
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                data.manifest.push(ManifestEntry {
                    file: name,
                    tokens: 0,
                    windows: 0,
                    status: reason,
                });
            }
        }
    }
    if data.windows.is_empty() {
        return Err(TrainError::EmptyDataset(dir.to_path_buf()));
    }
    Ok(data)
}
