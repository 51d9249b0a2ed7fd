//! Run configuration files (TOML) and output provenance.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dvae::data::{config_hash, PreprocessConfig};
use dvae::evaluation::EvalConfig;
use dvae::training::TrainConfig;
use dvae::{ModelConfig, ModelKind};
use serde::{Deserialize, Serialize};

/// Environment variable overriding the spectrogram cache root.
pub const CACHE_ENV: &str = "DVAE_CACHE_DIR";

pub const REVISION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("DVAE_GIT_REVISION"));

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "all_models")]
    pub models: Vec<ModelKind>,
}

fn all_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { models: all_models() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Dataset manifest (relative paths resolve against the config file).
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

/// `{config hash, code revision, seed}` attached to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub revision: String,
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads, resolves relative paths against the file's directory and
    /// applies the seed override.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self) {
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.preprocess.stft.validate()?;
        if self.preprocess.stft.n_bins() != self.model.x_dim {
            anyhow::bail!(
                "model.x_dim = {} but the STFT yields {} bins",
                self.model.x_dim,
                self.preprocess.stft.n_bins()
            );
        }
        Ok(())
    }

    /// Same run with a different model family, written under
    /// `output_dir/<model id>`.
    pub fn for_model(&self, kind: ModelKind) -> Self {
        let mut c = self.clone();
        c.model.kind = kind;
        c.output_dir = self.output_dir.join(kind.id());
        c
    }

    pub fn hash(&self) -> Result<String> {
        Ok(config_hash(self)?)
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.hash()?,
            revision: REVISION.into(),
            seed: self.seed,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Spectrogram cache for this STFT configuration.
    pub fn cache_dir(&self) -> Result<PathBuf> {
        let root = match std::env::var_os(CACHE_ENV) {
            Some(r) => PathBuf::from(r),
            None => self.manifest.parent().unwrap_or(Path::new("")).join("cache"),
        };
        let hash = self.preprocess.stft_hash()?;
        Ok(root.join(&hash[..16]))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.bin")
    }
}
