//! Versioned binary checkpoints: magic, format version, a JSON header
//! (configs, counters, generator position, loss curve) and little-endian
//! `f64` arrays for parameters, best parameters and optimizer moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::train::{EarlyStopping, EpochRecord, TrainConfig, TrainState};
use crate::data::cache::hex;
use crate::error::{DvaeError, Result};
use crate::model::DynamicalVae;
use crate::models::{build_model, ModelConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 8] = b"DVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Serialized as a string: JSON numbers cannot hold 128 bits.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Hex SHA-256 identifying the model and training configuration a
/// checkpoint belongs to.
pub fn checkpoint_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model)?);
    h.update([0u8]);
    h.update(serde_json::to_vec(train)?);
    Ok(hex(&h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    config_hash: String,
    #[serde(default)]
    revision: String,
    scalar: String,
    param_shapes: Vec<(String, usize, usize)>,
    adam_step: u64,
    adam_skipped: u64,
    epoch: usize,
    batch_in_epoch: usize,
    steps: u64,
    rng: RngState,
    stopping: EarlyStopping,
    curve: Vec<EpochRecord>,
    finished: bool,
    epoch_loss: f64,
    epoch_frames: usize,
    epoch_sequences: usize,
    epoch_wall: f64,
}

/// Model parameters plus full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    header: Header,
    params: Vec<f64>,
    best_params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn flatten_tensors<T: Scalar>(ts: &[Tensor<T>]) -> Vec<f64> {
    ts.iter().flat_map(|t| to_f64(t.as_slice())).collect()
}

fn split_tensors<T: Scalar>(flat: &[f64], params: &ParamSet<T>) -> Vec<Tensor<T>> {
    let mut off = 0;
    params
        .ids()
        .map(|id| {
            let (r, c) = params.get(id).shape();
            let t = Tensor::from_vec(r, c, from_f64(&flat[off..off + r * c])).expect("shape checked");
            off += r * c;
            t
        })
        .collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar, M: DynamicalVae<T> + ?Sized>(
        model: &M,
        model_cfg: &ModelConfig,
        train: &TrainConfig,
        state: &TrainState<T>,
    ) -> Result<Self> {
        let params = model.params();
        let header = Header {
            model: model_cfg.clone(),
            train: train.clone(),
            config_hash: checkpoint_hash(model_cfg, train)?,
            revision: String::new(),
            scalar: T::NAME.into(),
            param_shapes: params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.rows(), e.value.cols()))
                .collect(),
            adam_step: state.adam.step,
            adam_skipped: state.adam.skipped,
            epoch: state.epoch,
            batch_in_epoch: state.batch_in_epoch,
            steps: state.steps,
            rng: RngState::capture(&state.noise_rng),
            stopping: state.stopping,
            curve: state.curve.clone(),
            finished: state.finished,
            epoch_loss: state.epoch_loss,
            epoch_frames: state.epoch_frames,
            epoch_sequences: state.epoch_sequences,
            epoch_wall: state.epoch_wall,
        };
        Ok(Self {
            header,
            params: to_f64(&params.flatten()),
            best_params: to_f64(&state.best_params),
            adam_m: flatten_tensors(&state.adam.m),
            adam_v: flatten_tensors(&state.adam.v),
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.header.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.header.train
    }

    pub fn config_hash(&self) -> &str {
        &self.header.config_hash
    }

    /// Code revision that wrote the checkpoint.
    pub fn revision(&self) -> &str {
        &self.header.revision
    }

    pub fn set_revision(&mut self, revision: impl Into<String>) {
        self.header.revision = revision.into();
    }

    pub fn seed(&self) -> u64 {
        self.header.train.seed
    }

    pub fn epoch(&self) -> usize {
        self.header.epoch
    }

    pub fn best_val_loss(&self) -> f64 {
        self.header.stopping.best
    }

    pub fn curve(&self) -> &[EpochRecord] {
        &self.header.curve
    }

    pub fn finished(&self) -> bool {
        self.header.finished
    }

    /// Errors unless the checkpoint was written under `model` and `train`.
    pub fn verify(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        let expected = checkpoint_hash(model, train)?;
        if expected != self.header.config_hash {
            return Err(DvaeError::HashMismatch {
                expected,
                found: self.header.config_hash.clone(),
            });
        }
        Ok(())
    }

    fn check_layout<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let shapes: Vec<(String, usize, usize)> = params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.rows(), e.value.cols()))
            .collect();
        if shapes != self.header.param_shapes {
            return Err(DvaeError::Format("checkpoint parameter layout does not match the model".into()));
        }
        Ok(())
    }

    /// Rebuilds the model with the saved current parameters.
    pub fn build_model<T: Scalar + 'static>(&self) -> Result<Box<dyn DynamicalVae<T>>> {
        let mut model = build_model::<T>(&self.header.model, self.header.train.seed)?;
        self.check_layout(model.params())?;
        model.params_mut().assign_flat(&from_f64::<T>(&self.params));
        Ok(model)
    }

    /// Rebuilds the model with the best-validation parameters.
    pub fn build_best_model<T: Scalar + 'static>(&self) -> Result<Box<dyn DynamicalVae<T>>> {
        let mut model = self.build_model::<T>()?;
        model.params_mut().assign_flat(&from_f64::<T>(&self.best_params));
        Ok(model)
    }

    /// Optimizer and schedule state for resuming on `params`' layout.
    pub fn train_state<T: Scalar>(&self, params: &ParamSet<T>) -> Result<TrainState<T>> {
        self.check_layout(params)?;
        let h = &self.header;
        Ok(TrainState {
            adam: AdamState {
                step: h.adam_step,
                skipped: h.adam_skipped,
                m: split_tensors(&self.adam_m, params),
                v: split_tensors(&self.adam_v, params),
            },
            epoch: h.epoch,
            batch_in_epoch: h.batch_in_epoch,
            steps: h.steps,
            noise_rng: h.rng.restore(),
            stopping: h.stopping,
            best_params: from_f64(&self.best_params),
            curve: h.curve.clone(),
            finished: h.finished,
            epoch_loss: h.epoch_loss,
            epoch_frames: h.epoch_frames,
            epoch_sequences: h.epoch_sequences,
            epoch_wall: h.epoch_wall,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut buf = Vec::with_capacity(header.len() + 8 * (self.params.len() * 4) + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for arr in [&self.params, &self.best_params, &self.adam_m, &self.adam_v] {
            buf.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DvaeError::Format(format!("{}: not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(DvaeError::Format(format!(
                "{}: checkpoint format {version}, expected {FORMAT_VERSION}",
                path.display()
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let mut arrays = Vec::with_capacity(4);
        for _ in 0..4 {
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| DvaeError::Format("corrupt array length".into()))?)?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<f64>>(),
            );
        }
        if r.pos != bytes.len() {
            return Err(DvaeError::Format(format!("{}: trailing bytes", path.display())));
        }
        let total: usize = header.param_shapes.iter().map(|(_, r, c)| r * c).sum();
        if arrays.iter().any(|a| a.len() != total) {
            return Err(DvaeError::Format(format!("{}: array sizes disagree with the layout", path.display())));
        }
        let mut it = arrays.into_iter();
        Ok(Self {
            header,
            params: it.next().expect("4 arrays"),
            best_params: it.next().expect("4 arrays"),
            adam_m: it.next().expect("4 arrays"),
            adam_v: it.next().expect("4 arrays"),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DvaeError::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
