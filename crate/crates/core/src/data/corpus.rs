//! Corpus preparation: synthetic corpus generation with seeded split
//! assignment, waveform-to-spectrogram preprocessing with on-disk caching,
//! and loading of prepared splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::{read_wav, write_wav};
use super::cache::{config_hash, read_cached, read_header, write_cached};
use super::manifest::{DatasetManifest, ManifestHeader, ManifestRecord, Split, PEAK_NORMALIZATION};
use super::segment::{segment_sequences, SegmentReport};
use super::silence::{trim_silence, SilenceConfig};
use super::stft::{Spectrogram, Stft, StftConfig};
use super::synth::{synth_speech_corpus, SpeechSynthConfig};
use crate::error::{DvaeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub silence: SilenceConfig,
    /// Frames per training segment.
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
}

fn default_segment_len() -> usize {
    150
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            silence: SilenceConfig::default(),
            segment_len: default_segment_len(),
        }
    }
}

impl PreprocessConfig {
    pub fn stft_hash(&self) -> Result<String> {
        config_hash(&self.stft)
    }
}

/// Split proportions used when assigning a synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
        }
    }
}

/// Assigns `n` items to splits after a seeded shuffle. With at least three
/// items every split is non-empty.
pub fn assign_splits(n: usize, fractions: SplitFractions, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (fractions.validation * n as f64).round() as usize;
    let mut n_train = (fractions.train * n as f64).round() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_train = n_train.clamp(1, n - n_val - 1);
    }
    n_train = n_train.min(n);
    n_val = n_val.min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    out
}

/// Writes a synthetic corpus as 16-bit WAV files under `dir/wav` plus
/// `dir/manifest.jsonl`.
pub fn write_synthetic_corpus(dir: &Path, cfg: &SpeechSynthConfig, fractions: SplitFractions) -> Result<DatasetManifest> {
    let utterances = synth_speech_corpus(cfg)?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let splits = assign_splits(utterances.len(), fractions, cfg.seed);
    let mut records = Vec::with_capacity(utterances.len());
    for (u, split) in utterances.iter().zip(splits) {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(&dir.join(&rel), &u.samples, cfg.sample_rate)?;
        records.push(ManifestRecord {
            path: rel,
            split,
            duration: u.samples.len() as f64 / cfg.sample_rate as f64,
        });
    }
    let header = ManifestHeader {
        seed: cfg.seed,
        sample_rate: cfg.sample_rate,
        normalization: PEAK_NORMALIZATION.into(),
    };
    let manifest = DatasetManifest::new(header, records, dir)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Reads a manifest item as a waveform; test items are silence-trimmed.
pub fn load_waveform(manifest: &DatasetManifest, record: &ManifestRecord, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    let path = manifest.resolve(record);
    let (wave, sr) = read_wav(&path)?;
    if sr != cfg.stft.sample_rate {
        return Err(DvaeError::Format(format!(
            "{}: sample rate {sr} Hz, expected {} Hz",
            path.display(),
            cfg.stft.sample_rate
        )));
    }
    Ok(match record.split {
        Split::Test => trim_silence(&wave, sr, &cfg.silence),
        _ => wave,
    })
}

fn item_stem(record: &ManifestRecord) -> String {
    let stem = Path::new(&record.path)
        .with_extension("")
        .to_string_lossy()
        .replace(['/', '\\'], "_");
    format!("{}_{}", record.split.name(), stem)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub items: usize,
    pub frames: usize,
    /// Items whose cached spectrograms already matched the configuration.
    pub cache_hits: usize,
    /// Items shorter than one analysis frame.
    pub skipped: Vec<String>,
}

/// Cache paths of an item's power and phase spectrograms.
pub fn cache_paths(cache_dir: &Path, record: &ManifestRecord) -> (PathBuf, PathBuf) {
    let stem = item_stem(record);
    (
        cache_dir.join(format!("{stem}.power.bin")),
        cache_dir.join(format!("{stem}.phase.bin")),
    )
}

fn cached_frames(power: &Path, phase: &Path, hash: &str) -> Option<usize> {
    let a = read_header(power).ok()?;
    let b = read_header(phase).ok()?;
    (a.stft_hash == hash && b.stft_hash == hash && a.shape == b.shape && power.exists() && phase.exists())
        .then_some(a.shape[0])
}

/// Analyzes every manifest item into the cache directory. Items already
/// cached under the same STFT configuration are not recomputed. Fails
/// before doing any work if audio files are missing.
pub fn preprocess_corpus(manifest: &DatasetManifest, cfg: &PreprocessConfig, cache_dir: &Path) -> Result<PreprocessReport> {
    let stft = Stft::new(cfg.stft)?;
    let hash = cfg.stft_hash()?;
    let missing: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| !manifest.resolve(r).is_file())
        .map(|r| manifest.resolve(r).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DvaeError::Format(format!("missing audio files: {}", missing.join(", "))));
    }
    fs::create_dir_all(cache_dir)?;
    let mut report = PreprocessReport::default();
    for record in &manifest.records {
        let (power_path, phase_path) = cache_paths(cache_dir, record);
        if let Some(frames) = cached_frames(&power_path, &phase_path, &hash) {
            report.items += 1;
            report.cache_hits += 1;
            report.frames += frames;
            continue;
        }
        let wave = load_waveform(manifest, record, cfg)?;
        if wave.len() < cfg.stft.frame_len {
            log::warn!("{}: shorter than one analysis frame, skipped", record.path);
            report.skipped.push(record.path.clone());
            continue;
        }
        let spec = stft.analyze(&wave)?;
        write_cached(&power_path, &spec.power, &hash)?;
        write_cached(&phase_path, &spec.phase, &hash)?;
        report.items += 1;
        report.frames += spec.num_frames();
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedItem {
    pub path: String,
    pub spectrogram: Spectrogram,
}

/// Cached spectrograms of one split, in manifest order. Items skipped during
/// preprocessing are skipped here too.
pub fn load_split(manifest: &DatasetManifest, cfg: &PreprocessConfig, cache_dir: &Path, split: Split) -> Result<Vec<PreparedItem>> {
    let hash = cfg.stft_hash()?;
    let mut out = Vec::new();
    for record in manifest.split(split) {
        let (power_path, phase_path) = cache_paths(cache_dir, record);
        if !power_path.exists() {
            continue;
        }
        out.push(PreparedItem {
            path: record.path.clone(),
            spectrogram: Spectrogram {
                power: read_cached(&power_path, &hash)?,
                phase: read_cached(&phase_path, &hash)?,
            },
        });
    }
    Ok(out)
}

/// Non-overlapping fixed-length training sequences cut from `items`.
pub fn training_sequences(items: &[PreparedItem], segment_len: usize) -> (Vec<Vec<Vec<f64>>>, SegmentReport) {
    let spectra: Vec<Vec<Vec<f64>>> = items.iter().map(|i| i.spectrogram.power.clone()).collect();
    let (segments, report) = segment_sequences(&spectra, segment_len);
    let seqs = segments.into_iter().map(|s| s.frames).collect();
    (seqs, report)
}
