//! Minibatch training on the negative ELBO with early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adaptive_moment_step, clip_grad_norm, AdamConfig, AdamState, StepOutcome};
use crate::error::{DvaeError, Result};
use crate::graph::Graph;
use crate::model::{elbo, DynamicalVae, ElboBreakdown, ElboOptions, ModelKind, Noise, SequenceBatch};
use crate::models::{ModelConfig, LDS_GROUP};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Final weight of the regularization terms.
    pub beta: f64,
    /// Epochs over which β ramps linearly from 0 (0 disables the ramp).
    pub beta_warmup_epochs: usize,
    /// Global gradient-norm bound (`None` disables clipping).
    pub clip_norm: Option<f64>,
    /// Monte-Carlo samples per training sequence.
    pub train_samples: usize,
    /// Monte-Carlo samples per validation sequence.
    pub val_samples: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            patience: 20,
            max_epochs: 300,
            seed: 0,
            beta: 1.0,
            beta_warmup_epochs: 0,
            clip_norm: Some(10.0),
            train_samples: 1,
            val_samples: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DvaeError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.patience == 0 {
            return Err(DvaeError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.train_samples == 0 || self.val_samples == 0 {
            return Err(DvaeError::Config("batch_size and sample counts must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(DvaeError::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Regularization weight used during `epoch` (0-based).
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.beta_warmup_epochs == 0 {
            self.beta
        } else {
            self.beta * (epoch as f64 / self.beta_warmup_epochs as f64).min(1.0)
        }
    }
}

/// One loss-curve record. Losses are negative ELBOs, per frame and per
/// sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_loss_per_sequence: f64,
    pub val_loss_per_sequence: f64,
    pub wall_seconds: f64,
    /// 1 while the KVAE dynamics are frozen, 2 afterwards (1 for
    /// single-stage training).
    pub stage: u8,
    pub skipped_steps: u64,
}

/// Patience counter over a stream of validation losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    #[serde(with = "unbounded_loss")]
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            epochs_since_best: 0,
        }
    }

    /// Records the loss of `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        (improved, self.epochs_since_best >= self.patience)
    }
}

/// JSON has no infinity; the "nothing seen yet" loss is stored as null.
mod unbounded_loss {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

const ORDER_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Generator for one purpose (`stream`) and index, derived from the seed.
fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_shl(40) ^ index);
    rng
}

/// Everything besides the model parameters needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub adam: AdamState<T>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch_in_epoch: usize,
    pub steps: u64,
    pub noise_rng: ChaCha8Rng,
    pub stopping: EarlyStopping,
    pub best_params: Vec<T>,
    pub curve: Vec<EpochRecord>,
    pub finished: bool,
    /// Running sums for the epoch in progress: loss, frames, sequences.
    pub epoch_loss: f64,
    pub epoch_frames: usize,
    pub epoch_sequences: usize,
    pub epoch_wall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Negative ELBO per valid frame of the batch.
    pub loss: f64,
    pub grad_norm: f64,
    pub outcome: StepOutcome,
}

/// Drives optimization of one model; owns the optimizer state.
pub struct Trainer<'m, T: Scalar, M: DynamicalVae<T> + ?Sized> {
    model: &'m mut M,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    state: TrainState<T>,
}

impl<'m, T: Scalar, M: DynamicalVae<T> + ?Sized> Trainer<'m, T, M> {
    pub fn new(model: &'m mut M, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = TrainState {
            adam: AdamState::new(model.params()),
            epoch: 0,
            batch_in_epoch: 0,
            steps: 0,
            noise_rng: derived_rng(cfg.seed, NOISE_STREAM, 0),
            stopping: EarlyStopping::new(cfg.patience),
            best_params: model.params().flatten(),
            curve: Vec::new(),
            finished: false,
            epoch_loss: 0.0,
            epoch_frames: 0,
            epoch_sequences: 0,
            epoch_wall: 0.0,
        };
        Ok(Self {
            model,
            model_cfg,
            cfg,
            state,
        })
    }

    /// Resumes with previously saved optimizer state.
    pub fn with_state(model: &'m mut M, model_cfg: ModelConfig, cfg: TrainConfig, state: TrainState<T>) -> Result<Self> {
        cfg.validate()?;
        if state.adam.m.len() != model.params().len() || state.best_params.len() != model.params().num_scalars() {
            return Err(DvaeError::Contract("training state does not match the model's parameters".into()));
        }
        Ok(Self {
            model,
            model_cfg,
            cfg,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn curve(&self) -> &[EpochRecord] {
        &self.state.curve
    }

    /// Whether the KVAE dynamics are frozen in the current epoch.
    pub fn in_first_stage(&self) -> bool {
        self.model_cfg.kind == ModelKind::Kvae
            && self.model_cfg.kvae.two_stage
            && self.state.epoch < self.model_cfg.kvae.stage_one_epochs
    }

    /// Per-parameter trainable flags for the current epoch.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let frozen: &[&str] = if self.in_first_stage() { &[LDS_GROUP] } else { &[] };
        trainable_mask(self.model.params(), frozen)
    }

    /// One optimizer step on `batch`. A non-finite loss is an error and
    /// leaves parameters and optimizer state untouched.
    pub fn step(&mut self, batch: &SequenceBatch<T>) -> Result<StepReport> {
        let beta = self.cfg.beta_at(self.state.epoch);
        let opts = ElboOptions {
            n_samples: self.cfg.train_samples,
            beta: T::lit(beta),
        };
        let mut g = Graph::new();
        let eval = elbo(&*self.model, &mut g, batch, opts, &mut Noise::Rng(&mut self.state.noise_rng))?;
        let b = &eval.breakdown;
        let frames = b.valid_frames.max(1) as f64;
        let loss = -b.total.to_f64().unwrap_or(f64::NAN) / frames;
        if !loss.is_finite() {
            return Err(non_finite(b, self.state.epoch, self.state.batch_in_epoch));
        }
        let grads = g.backward(eval.total);
        let scale = T::lit(-1.0 / frames);
        let mut dense = grads.dense(self.model.params());
        for d in dense.iter_mut() {
            d.scale_assign(scale);
        }
        let mask = self.trainable_mask();
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut dense, Some(&mask), c),
            None => super::adam::grad_norm(&dense, Some(&mask)),
        };
        let outcome = adaptive_moment_step(
            self.model.params_mut(),
            &dense,
            &mut self.state.adam,
            T::lit(self.cfg.learning_rate),
            &self.cfg.adam,
            Some(&mask),
        )?;
        self.state.steps += 1;
        self.state.batch_in_epoch += 1;
        self.state.epoch_loss += loss * frames;
        self.state.epoch_frames += b.valid_frames;
        self.state.epoch_sequences += b.batch_size;
        Ok(StepReport {
            loss,
            grad_norm,
            outcome,
        })
    }

    /// Batches of the current epoch, as index lists into the training set.
    pub fn epoch_order(&self, n: usize) -> Vec<Vec<usize>> {
        epoch_batches(n, self.cfg.batch_size, self.cfg.seed, self.state.epoch)
    }

    /// Negative ELBO of `data` per frame and per sequence.
    pub fn validation_loss(&self, data: &[Vec<Vec<T>>]) -> Result<(f64, f64)> {
        let mut rng = derived_rng(self.cfg.seed, VALIDATION_STREAM, self.state.epoch as u64);
        let opts = ElboOptions {
            n_samples: self.cfg.val_samples,
            beta: T::lit(self.cfg.beta),
        };
        dataset_loss(&*self.model, data, self.cfg.batch_size, opts, &mut Noise::Rng(&mut rng))
    }

    /// Finishes the current epoch (from wherever it was interrupted) and
    /// records it. Returns `true` once training should stop.
    pub fn run_epoch(&mut self, train: &[Vec<Vec<T>>], val: &[Vec<Vec<T>>]) -> Result<bool> {
        if train.is_empty() || val.is_empty() {
            return Err(DvaeError::EmptyInput("training and validation sets must be non-empty".into()));
        }
        if self.state.finished {
            return Ok(true);
        }
        let start = Instant::now();
        let stage = if self.in_first_stage() { 1 } else if self.model_cfg.kind == ModelKind::Kvae && self.model_cfg.kvae.two_stage { 2 } else { 1 };
        let order = self.epoch_order(train.len());
        while self.state.batch_in_epoch < order.len() {
            let idx = &order[self.state.batch_in_epoch];
            let seqs: Vec<Vec<Vec<T>>> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch = SequenceBatch::from_sequences(&seqs)?;
            self.step(&batch)?;
        }
        let (val_loss, val_seq) = self.validation_loss(val)?;
        let wall = self.state.epoch_wall + start.elapsed().as_secs_f64();
        let s = &mut self.state;
        let record = EpochRecord {
            epoch: s.epoch,
            train_loss: s.epoch_loss / s.epoch_frames.max(1) as f64,
            val_loss,
            train_loss_per_sequence: s.epoch_loss / s.epoch_sequences.max(1) as f64,
            val_loss_per_sequence: val_seq,
            wall_seconds: wall,
            stage,
            skipped_steps: s.adam.skipped,
        };
        if !val_loss.is_finite() {
            return Err(DvaeError::NonFinite {
                term: format!("validation loss (epoch {})", s.epoch),
                batch: 0,
            });
        }
        let (improved, stop) = s.stopping.observe(s.epoch, val_loss);
        if improved {
            s.best_params = self.model.params().flatten();
        }
        log::info!(
            "epoch {:>3}  train {:.5}  val {:.5}{}",
            record.epoch,
            record.train_loss,
            record.val_loss,
            if improved { "  *" } else { "" }
        );
        s.curve.push(record);
        s.epoch += 1;
        s.batch_in_epoch = 0;
        s.epoch_loss = 0.0;
        s.epoch_frames = 0;
        s.epoch_sequences = 0;
        s.epoch_wall = 0.0;
        s.finished = stop || s.epoch >= self.cfg.max_epochs;
        Ok(s.finished)
    }

    /// Runs epochs until early stopping or the epoch limit, calling
    /// `on_epoch` after each, then loads the best-validation parameters.
    pub fn fit(
        &mut self,
        train: &[Vec<Vec<T>>],
        val: &[Vec<Vec<T>>],
        mut on_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while !self.state.finished {
            if self.cfg.max_epochs == 0 {
                self.state.finished = true;
                break;
            }
            self.run_epoch(train, val)?;
            on_epoch(self)?;
        }
        self.restore_best();
        Ok(())
    }

    /// Overwrites the model parameters with the best-validation snapshot.
    pub fn restore_best(&mut self) {
        let best = self.state.best_params.clone();
        self.model.params_mut().assign_flat(&best);
    }
}

fn non_finite<T: Scalar>(b: &ElboBreakdown<T>, epoch: usize, batch: usize) -> DvaeError {
    let finite = |v: T| v.is_finite();
    let term = if !finite(b.recon()) {
        let t = b.recon_per_t.iter().position(|&v| !finite(v)).unwrap_or(0);
        format!("reconstruction term at frame {t} (epoch {epoch})")
    } else if !finite(b.sequence_kl) {
        format!("sequence-level regularization term (epoch {epoch})")
    } else if !finite(b.kl()) {
        let t = b.kl_per_t.iter().position(|&v| !finite(v)).unwrap_or(0);
        format!("regularization term at frame {t} (epoch {epoch})")
    } else {
        format!("total (epoch {epoch})")
    };
    DvaeError::NonFinite { term, batch }
}

/// Flags every parameter outside the `frozen` groups.
pub fn trainable_mask<T: Scalar>(params: &ParamSet<T>, frozen: &[&str]) -> Vec<bool> {
    params
        .entries()
        .iter()
        .map(|e| !frozen.contains(&e.group.as_str()))
        .collect()
}

/// Seeded shuffle of `0..n` for `epoch`, cut into batches (the last may be
/// short).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, ORDER_STREAM, epoch as u64));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Negative ELBO over a dataset in fixed-order batches, per frame and per
/// sequence.
pub fn dataset_loss<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    data: &[Vec<Vec<T>>],
    batch_size: usize,
    opts: ElboOptions<T>,
    noise: &mut Noise<'_>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(DvaeError::EmptyInput("empty dataset".into()));
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = SequenceBatch::from_sequences(chunk)?;
        let mut g = Graph::new();
        let eval = elbo(model, &mut g, &batch, opts, noise)?;
        total -= eval.breakdown.total.to_f64().unwrap_or(f64::NAN);
        frames += eval.breakdown.valid_frames;
    }
    Ok((total / frames.max(1) as f64, total / data.len() as f64))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub curve: Vec<EpochRecord>,
}

/// Trains `model` to completion and leaves it at the best-validation
/// parameters.
pub fn train<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &mut M,
    model_cfg: &ModelConfig,
    train_set: &[Vec<Vec<T>>],
    val_set: &[Vec<Vec<T>>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, model_cfg.clone(), cfg.clone())?;
    trainer.fit(train_set, val_set, |_| Ok(()))?;
    Ok(TrainOutcome {
        curve: trainer.state.curve.clone(),
        state: trainer.state,
    })
}

/// Writes one JSON record per epoch.
pub fn write_loss_curve(path: &std::path::Path, curve: &[EpochRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in curve {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
