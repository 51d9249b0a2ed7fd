//! Dataset manifest: a line-delimited JSON file whose first line is a header
//! `{seed, sample_rate, normalization}` and whose remaining lines are item
//! records `{path, split, duration}`. Paths are relative to the manifest's
//! directory unless absolute.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DvaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    /// Seed from which all dataset randomness (synthesis, split assignment)
    /// is derived.
    pub seed: u64,
    pub sample_rate: u32,
    pub normalization: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub split: Split,
    /// Seconds.
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    base_dir: PathBuf,
}

pub const PEAK_NORMALIZATION: &str = "peak amplitude in [-1, 1]";

impl DatasetManifest {
    pub fn new(header: ManifestHeader, records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            header,
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Every path belongs to exactly one split and appears once.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(&r.path, r.split) {
                let msg = if prev == r.split {
                    format!("{} listed twice in the {} split", r.path, r.split.name())
                } else {
                    format!("{} appears in both the {} and {} splits", r.path, prev.name(), r.split.name())
                };
                return Err(DvaeError::Format(msg));
            }
            if !(r.duration.is_finite() && r.duration >= 0.0) {
                return Err(DvaeError::Format(format!("{} has an invalid duration", r.path)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines
            .next()
            .ok_or_else(|| DvaeError::Format(format!("{}: empty manifest", path.display())))?;
        let header: ManifestHeader = serde_json::from_str(&first?)
            .map_err(|e| DvaeError::Format(format!("{}: bad header: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let r = serde_json::from_str(&line?)
                .map_err(|e| DvaeError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(header, records, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}
