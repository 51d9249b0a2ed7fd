//! Optimization: Adam updates, the epoch loop with early stopping and
//! two-stage KVAE scheduling, loss curves and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod train;

pub use adam::{adaptive_moment_step, clip_grad_norm, grad_norm, AdamConfig, AdamState, StepOutcome};
pub use checkpoint::{checkpoint_hash, Checkpoint, RngState};
pub use train::{
    dataset_loss, epoch_batches, train, trainable_mask, write_loss_curve, EarlyStopping, EpochRecord, StepReport,
    TrainConfig, TrainOutcome, TrainState, Trainer,
};
