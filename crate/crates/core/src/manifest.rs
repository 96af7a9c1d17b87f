//! Corpus manifests: one JSON object per line describing a clip.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HUMAN_DOMAIN: &str = "human";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub audio_path: PathBuf,
    /// `human`, `instrumental`, `bird`, `general`, or any other label.
    pub domain: String,
    #[serde(default)]
    pub annotated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_path: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
}

impl ManifestRow {
    pub fn is_human(&self) -> bool {
        self.domain == HUMAN_DOMAIN
    }
}

/// Rows plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.id.is_empty() || r.id.contains(['/', '\\']) {
                return Err(Error::Format(format!("manifest id {:?} is not a valid file stem", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate manifest id {}", r.id)));
            }
            if r.annotated && r.score_path.is_none() {
                return Err(Error::Format(format!("{}: annotated row without score_path", r.id)));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(rows, base).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.rows {
            let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn select(&self, split: Option<Split>, human: Option<bool>) -> Vec<&ManifestRow> {
        self.rows
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s) && human.is_none_or(|h| r.is_human() == h))
            .collect()
    }
}
