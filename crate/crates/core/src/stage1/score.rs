//! Symbolic scores: `(phoneme, midi note, duration in frames)` rows.
//!
//! Text form: one `phoneme<TAB>midi<TAB>duration_frames` row per line;
//! rests use phoneme `SP` and midi `-1`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const REST_PHONEME: &str = "SP";
/// Note-embedding row used for rests.
pub const REST_NOTE_INDEX: usize = 128;
pub const NOTE_VOCAB: usize = 129;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreEntry {
    pub phoneme: usize,
    /// `None` for rests.
    pub note: Option<u8>,
    pub duration: usize,
}

impl ScoreEntry {
    pub fn note_index(&self) -> usize {
        self.note.map_or(REST_NOTE_INDEX, usize::from)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    pub entries: Vec<ScoreEntry>,
    pub phoneme_vocab_size: usize,
}

impl Score {
    pub fn new(entries: Vec<ScoreEntry>, phoneme_vocab_size: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("score is empty".into()));
        }
        for e in &entries {
            if e.duration == 0 {
                return Err(Error::Config("score durations must be at least one frame".into()));
            }
            if e.phoneme >= phoneme_vocab_size {
                return Err(Error::Vocab(format!("phoneme id {} with vocabulary {phoneme_vocab_size}", e.phoneme)));
            }
            if e.note.is_some_and(|n| n > 127) {
                return Err(Error::Vocab(format!("midi note {:?}", e.note)));
            }
        }
        Ok(Self {
            entries,
            phoneme_vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(|e| e.duration).sum()
    }

    pub fn durations(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.duration).collect()
    }

    /// Per-frame rest flags after length regulation.
    pub fn frame_is_rest(&self) -> Vec<bool> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(e.note.is_none(), e.duration))
            .collect()
    }

    pub fn parse(text: &str, phoneme_set: &[String]) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("score line {}: {what}: {line:?}", lineno + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad("expected three tab-separated columns"));
            }
            let phoneme = phoneme_set
                .iter()
                .position(|p| p == cols[0].trim())
                .ok_or_else(|| Error::Vocab(format!("phoneme {:?} not in the configured set", cols[0])))?;
            let midi: i32 = cols[1].trim().parse().map_err(|_| bad("midi"))?;
            let note = match midi {
                -1 => None,
                0..=127 => Some(midi as u8),
                _ => return Err(Error::Vocab(format!("midi note {midi}"))),
            };
            let duration: usize = cols[2].trim().parse().map_err(|_| bad("duration"))?;
            entries.push(ScoreEntry { phoneme, note, duration });
        }
        Self::new(entries, phoneme_set.len())
    }

    pub fn read(path: impl AsRef<Path>, phoneme_set: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, phoneme_set).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self, phoneme_set: &[String]) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let midi = e.note.map_or(-1, i32::from);
            let _ = writeln!(out, "{}\t{midi}\t{}", phoneme_set[e.phoneme], e.duration);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, phoneme_set: &[String]) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text(phoneme_set)).map_err(|e| Error::io(path, e))
    }
}
