//! Small from-scratch learners that stand in for fine-tuning a deep network:
//! a multilayer perceptron with a 5-way softmax or a regression head, a
//! minimal LSTM sequence regressor, the momentum-SGD training loop with
//! interval validation and early stopping, and a finite-difference gradient
//! checker.

mod gradcheck;
mod lstm;
mod mlp;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::dataset::{MOS_MAX, MOS_MIN};
use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, GradCheckModel};
pub use lstm::{train_lstm, Batching, LstmConfig, LstmModel, SequenceData};
pub use mlp::{extract_activations, Activation, ExtractMode, HeadKind, MlpModel};
pub use optim::MomentumSgd;
pub use train::{fine_tune, train_classifier, train_classifier_with, train_regressor_e2e, train_regressor_e2e_with, E2eArch};

/// The five quality classes used as fine-tuning targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityClass {
    VeryPoor,
    Poor,
    Mediocre,
    Good,
    VeryGood,
}

impl QualityClass {
    pub const ALL: [QualityClass; 5] = [
        QualityClass::VeryPoor,
        QualityClass::Poor,
        QualityClass::Mediocre,
        QualityClass::Good,
        QualityClass::VeryGood,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Maps a MOS on `[1, 5]` to its class. Each bin includes its upper edge;
/// the lowest bin also includes 1.0.
pub fn bin_mos(mos: f64) -> Result<QualityClass> {
    if !(MOS_MIN..=MOS_MAX).contains(&mos) {
        return Err(Error::Data(format!("MOS {mos} outside [1, 5]")));
    }
    Ok(if mos > 4.2 {
        QualityClass::VeryGood
    } else if mos > 3.4 {
        QualityClass::Good
    } else if mos > 2.6 {
        QualityClass::Mediocre
    } else if mos > 1.8 {
        QualityClass::Poor
    } else {
        QualityClass::VeryPoor
    })
}

/// Optimizer and validation discipline for every learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validate after this many training samples. Values larger than one
    /// epoch fall back to validating once per epoch.
    pub validation_every_n_samples: usize,
    /// Validations without a new validation-loss minimum that count as a plateau.
    pub patience: usize,
    /// Learning-rate factor applied on a plateau. On a plateau after
    /// `max_lr_drops` drops (or with a factor of 1) training halts.
    pub lr_drop_factor: f64,
    pub max_lr_drops: usize,
    /// Factor applied to the learning rate at the start of every epoch after the first.
    pub epoch_lr_factor: f64,
    /// Learning-rate multiplier for head layers.
    pub head_lr_multiplier: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 60,
            validation_every_n_samples: 320,
            patience: 8,
            lr_drop_factor: 0.1,
            max_lr_drops: 1,
            epoch_lr_factor: 1.0,
            head_lr_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// The fine-tuning settings quoted for the original classifier:
    /// α = 1e-4, β = 0.9, batches of 32, validation every 1600 frames,
    /// learning rate divided by 10 on a plateau.
    pub fn published_finetune() -> Self {
        Self {
            learning_rate: 1e-4,
            validation_every_n_samples: 1600,
            ..Self::default()
        }
    }

    /// The end-to-end regressor's settings: α = 1e-4, ×0.75 per epoch, 10
    /// epochs, head at ten times the base rate.
    pub fn published_e2e() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 10,
            epoch_lr_factor: 0.75,
            head_lr_multiplier: 10.0,
            lr_drop_factor: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train schedule: {m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.validation_every_n_samples == 0 {
            return bad("batch_size, max_epochs and validation_every_n_samples must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor must lie in (0, 1]");
        }
        if !(self.epoch_lr_factor > 0.0 && self.epoch_lr_factor <= 1.0) {
            return bad("epoch_lr_factor must lie in (0, 1]");
        }
        if !(self.head_lr_multiplier.is_finite() && self.head_lr_multiplier > 0.0) {
            return bad("head_lr_multiplier must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub samples_seen: usize,
    /// Mean training loss over mini-batches since the previous validation;
    /// absent for the point recorded before training starts.
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
    /// Only for classifiers.
    pub validation_accuracy: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub points: Vec<ValidationPoint>,
    /// Index into `points` of the restored checkpoint.
    pub chosen: usize,
    pub epochs_run: usize,
    pub iterations: usize,
    /// Validation fell back to once per epoch.
    pub per_epoch_validation: bool,
    pub final_learning_rate: f64,
    pub stopped_early: bool,
}

impl TrainingTrace {
    pub fn best_validation_loss(&self) -> f64 {
        self.points[self.chosen].validation_loss
    }

    /// Hex digest of the trace's JSON encoding.
    pub fn digest(&self) -> String {
        crate::seed::digest_hex(&serde_json::to_vec(self).expect("trace serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_at_quoted_edges() {
        assert_eq!(bin_mos(4.5).unwrap(), QualityClass::VeryGood);
        assert_eq!(bin_mos(4.2).unwrap(), QualityClass::Good);
        assert_eq!(bin_mos(1.0).unwrap(), QualityClass::VeryPoor);
        assert_eq!(bin_mos(2.6).unwrap(), QualityClass::Poor);
        assert_eq!(bin_mos(5.0).unwrap(), QualityClass::VeryGood);
        assert!(bin_mos(0.99).is_err());
        assert!(bin_mos(5.01).is_err());
        assert!(bin_mos(f64::NAN).is_err());
    }

    #[test]
    fn class_order() {
        assert!(QualityClass::VeryPoor < QualityClass::Poor);
        assert!(QualityClass::Good < QualityClass::VeryGood);
        for (i, c) in QualityClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
    }

    #[test]
    fn schedule_presets_validate() {
        TrainSchedule::default().validate().unwrap();
        TrainSchedule::published_finetune().validate().unwrap();
        TrainSchedule::published_e2e().validate().unwrap();
        let s = TrainSchedule {
            momentum: 1.0,
            ..TrainSchedule::default()
        };
        assert!(s.validate().is_err());
    }
}
