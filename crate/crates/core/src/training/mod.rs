//! Fitting the segmentation model.

mod adam;
mod gradcheck;
mod loss;
mod train;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{default_cases, grad_check, grad_check_model, CoordCheck, GradCase, GradCheckReport, FD_STEP, GRAD_TOLERANCE, KINK_STEPS, KINK_TOL, MIN_COORDS, REL_FLOOR};
pub use loss::{class_cost, loss_on_tape, min_relabeling, permutation_min_loss, relabeled_nll, DEFAULT_PERMUTATION_CAP};
pub use train::{
    augment, load_checkpoint, load_model, mean_seg_accuracy, read_meta, resume, sample_gradient, save_checkpoint,
    sidecar_path, train, train_model, CheckpointMeta, EpochRecord, TrainOutcome,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DataError;
use crate::model::ModelError;
use crate::tensor::{CheckpointError, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch} on sample {sample_id}")]
    NonFinite { epoch: usize, sample_id: String, loss: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rotation applied to each training target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationAugment {
    Off,
    /// Haar-uniform rotation drawn per sample and epoch.
    Random,
    /// Runs the augmentation path with the identity rotation.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rotation: RotationAugment,
    /// Probability of training on the non-exact version of an exact sample.
    pub nonexact_fraction: f64,
    pub permutation_cap: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            epochs: 300,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rotation: RotationAugment::Random,
            nonexact_fraction: 0.25,
            permutation_cap: DEFAULT_PERMUTATION_CAP,
            seed: 0,
            checkpoint_every: 10,
        }
    }

    pub fn full() -> Self {
        Self { learning_rate: 4e-5, batch_size: 36, epochs: 2000, ..Self::desk() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return err("batch size must be at least 1");
        }
        if self.permutation_cap == 0 {
            return err("permutation cap must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.nonexact_fraction) {
            return err("non-exact fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return err("Adam betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }
}
