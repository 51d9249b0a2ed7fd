//! Cached spectrograms: a flat little-endian `f32` array next to a JSON
//! sidecar `{dtype, shape, stft_hash}`. Loading with a different STFT
//! configuration hash is an error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DvaeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub dtype: String,
    /// `[frames, bins]`.
    pub shape: [usize; 2],
    pub stft_hash: String,
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes frame-major data (`frames[t][k]`).
pub fn write_cached(bin: &Path, frames: &[Vec<f64>], stft_hash: &str) -> Result<()> {
    let bins = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != bins) {
        return Err(DvaeError::Format("ragged spectrogram".into()));
    }
    let mut bytes = Vec::with_capacity(frames.len() * bins * 4);
    for v in frames.iter().flatten() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(bin, bytes)?;
    let header = CacheHeader {
        dtype: "float32".into(),
        shape: [frames.len(), bins],
        stft_hash: stft_hash.into(),
    };
    fs::write(sidecar_path(bin), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_header(bin: &Path) -> Result<CacheHeader> {
    Ok(serde_json::from_slice(&fs::read(sidecar_path(bin))?)?)
}

pub fn read_cached(bin: &Path, expected_hash: &str) -> Result<Vec<Vec<f64>>> {
    let header = read_header(bin)?;
    if header.stft_hash != expected_hash {
        return Err(DvaeError::HashMismatch {
            expected: expected_hash.into(),
            found: header.stft_hash,
        });
    }
    if header.dtype != "float32" {
        return Err(DvaeError::Format(format!("unsupported cache dtype {}", header.dtype)));
    }
    let bytes = fs::read(bin)?;
    let [frames, bins] = header.shape;
    if bytes.len() != frames * bins * 4 {
        return Err(DvaeError::Format(format!(
            "{}: expected {} bytes, found {}",
            bin.display(),
            frames * bins * 4,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(if bins == 0 {
        vec![Vec::new(); frames]
    } else {
        values.chunks(bins).map(<[f64]>::to_vec).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("x.bin");
        let frames = vec![vec![1.0, 0.25, 3.5], vec![0.0, -2.0, 1e-3]];
        write_cached(&bin, &frames, "abc").unwrap();
        let back = read_cached(&bin, "abc").unwrap();
        for (a, b) in frames.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(matches!(read_cached(&bin, "abd"), Err(DvaeError::HashMismatch { .. })));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&(512, 256)).unwrap();
        assert_eq!(a, config_hash(&(512, 256)).unwrap());
        assert_ne!(a, config_hash(&(512, 128)).unwrap());
        assert_eq!(a.len(), 64);
    }
}
