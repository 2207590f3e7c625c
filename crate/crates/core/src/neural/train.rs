use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{HeadKind, MlpModel, Target};
use super::optim::MomentumSgd;
use super::{bin_mos, TrainSchedule, TrainingTrace, ValidationPoint};
use crate::dataset::{GroupedDataset, LabelSource};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::seed;
use crate::split::{items_in, Partition, SplitPlan};

pub(crate) struct Sample<'a> {
    pub x: &'a [f64],
    pub target: Target,
}

/// Plateau and early-stopping bookkeeping over validation losses.
pub(crate) struct Plateau {
    best: f64,
    since_best: usize,
    drops: usize,
}

pub(crate) enum PlateauAction {
    Continue,
    DropRate,
    Stop,
}

impl Plateau {
    pub(crate) fn new() -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            drops: 0,
        }
    }

    pub(crate) fn observe(&mut self, loss: f64, schedule: &TrainSchedule) -> (bool, PlateauAction) {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            return (true, PlateauAction::Continue);
        }
        self.since_best += 1;
        if self.since_best < schedule.patience {
            return (false, PlateauAction::Continue);
        }
        self.since_best = 0;
        if schedule.lr_drop_factor < 1.0 && self.drops < schedule.max_lr_drops {
            self.drops += 1;
            (false, PlateauAction::DropRate)
        } else {
            (false, PlateauAction::Stop)
        }
    }
}

/// A parametric model the shared training loop can drive.
pub(crate) trait Learner<S> {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Parameters from this index on train at the head learning rate.
    fn head_param_start(&self) -> usize;
    /// Summed loss of `batch`; adds the summed gradient into `grad`.
    fn accumulate_batch(&self, batch: &[&S], grad: &mut [f64], rng: &mut seed::Rng) -> f64;
    /// Mean loss and, for classifiers, accuracy.
    fn evaluate(&self, samples: &[S]) -> (f64, Option<f64>);
}

impl Learner<Sample<'_>> for MlpModel {
    fn params(&self) -> &[f64] {
        MlpModel::params(self)
    }

    fn params_mut(&mut self) -> &mut [f64] {
        MlpModel::params_mut(self)
    }

    fn head_param_start(&self) -> usize {
        MlpModel::head_param_start(self)
    }

    fn accumulate_batch(&self, batch: &[&Sample], grad: &mut [f64], rng: &mut seed::Rng) -> f64 {
        batch.iter().map(|s| self.accumulate(s.x, s.target, grad, Some(rng))).sum()
    }

    fn evaluate(&self, samples: &[Sample]) -> (f64, Option<f64>) {
        let mut loss = 0.0;
        let mut hits = 0usize;
        let mut classified = false;
        for s in samples {
            loss += self.loss(s.x, s.target);
            if let Target::Class(c) = s.target {
                classified = true;
                if self.predict_class(s.x).expect("dimension checked") == c {
                    hits += 1;
                }
            }
        }
        let n = samples.len() as f64;
        (loss / n, classified.then(|| hits as f64 / n))
    }
}

/// Per-epoch ordering of training indices; batches are consecutive chunks.
pub(crate) enum EpochOrder {
    Shuffled,
    Fixed(Vec<usize>),
}

/// Momentum-SGD mini-batch training with interval validation, plateau
/// learning-rate drops and early stopping. The model is left at the
/// checkpoint with the lowest validation loss.
pub(crate) fn fit<S, M: Learner<S>>(
    model: &mut M,
    train: &[S],
    val: &[S],
    schedule: &TrainSchedule,
    ordering: EpochOrder,
) -> Result<TrainingTrace> {
    schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation partitions must be non-empty"));
    }
    let mut rng = seed::rng(seed::derive(schedule.seed, "fit", 0));
    let mut opt = MomentumSgd::new(model.params().len(), schedule.momentum);
    let head_start = model.head_param_start();
    let per_epoch = schedule.validation_every_n_samples > train.len();

    let mut points = Vec::new();
    let mut best_params = model.params().to_vec();
    let mut chosen = 0;
    let mut plateau = Plateau::new();

    let (v_loss, v_acc) = model.evaluate(val);
    points.push(ValidationPoint {
        iteration: 0,
        samples_seen: 0,
        train_loss: None,
        validation_loss: v_loss,
        validation_accuracy: v_acc,
        learning_rate: schedule.learning_rate,
    });
    plateau.observe(v_loss, schedule);

    let mut order: Vec<usize> = match ordering {
        EpochOrder::Shuffled => (0..train.len()).collect(),
        EpochOrder::Fixed(ref o) => o.clone(),
    };
    let mut grad = vec![0.0; model.params().len()];
    let mut iteration = 0usize;
    let mut samples_seen = 0usize;
    let mut next_validation = schedule.validation_every_n_samples;
    let mut running = (0.0, 0usize);
    let mut drop_scale = 1.0;
    let mut lr = schedule.learning_rate;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    'epochs: for epoch in 0..schedule.max_epochs {
        epochs_run = epoch + 1;
        lr = schedule.learning_rate * schedule.epoch_lr_factor.powi(epoch as i32) * drop_scale;
        if let EpochOrder::Shuffled = ordering {
            order.shuffle(&mut rng);
        }
        let n_batches = order.len().div_ceil(schedule.batch_size);
        for (b, batch) in order.chunks(schedule.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let members: Vec<&S> = batch.iter().map(|&i| &train[i]).collect();
            let mut batch_loss = model.accumulate_batch(&members, &mut grad, &mut rng);
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            iteration += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    loss: batch_loss,
                });
            }
            grad.iter_mut().for_each(|g| *g *= inv);
            let head_lr = lr * schedule.head_lr_multiplier;
            opt.step_with(model.params_mut(), &grad, |i| if i >= head_start { head_lr } else { lr });
            samples_seen += batch.len();
            running.0 += batch_loss;
            running.1 += 1;

            let due = if per_epoch {
                b + 1 == n_batches
            } else {
                samples_seen >= next_validation
            };
            if !due {
                continue;
            }
            while next_validation <= samples_seen {
                next_validation += schedule.validation_every_n_samples;
            }
            let (v_loss, v_acc) = model.evaluate(val);
            if !v_loss.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    loss: v_loss,
                });
            }
            points.push(ValidationPoint {
                iteration,
                samples_seen,
                train_loss: Some(running.0 / running.1 as f64),
                validation_loss: v_loss,
                validation_accuracy: v_acc,
                learning_rate: lr,
            });
            running = (0.0, 0);
            let (improved, action) = plateau.observe(v_loss, schedule);
            if improved {
                best_params.copy_from_slice(model.params());
                chosen = points.len() - 1;
            }
            match action {
                PlateauAction::Continue => {}
                PlateauAction::DropRate => {
                    drop_scale *= schedule.lr_drop_factor;
                    lr *= schedule.lr_drop_factor;
                }
                PlateauAction::Stop => {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }

    model.params_mut().copy_from_slice(&best_params);
    Ok(TrainingTrace {
        points,
        chosen,
        epochs_run,
        iterations: iteration,
        per_epoch_validation: per_epoch,
        final_learning_rate: lr,
        stopped_early,
    })
}

fn collect_samples<'a, L: LabelSource>(
    features: &'a FeatureSet,
    dataset: &GroupedDataset,
    labels: &L,
    items: &[usize],
    head: HeadKind,
) -> Result<Vec<Sample<'a>>> {
    items
        .iter()
        .map(|&i| {
            let id = &dataset.item(i).item_id;
            let x = features
                .get(id)
                .ok_or_else(|| Error::Data(format!("no features for item {id}")))?;
            let mos = labels.mos(i);
            let target = match head {
                HeadKind::Softmax5 => Target::Class(bin_mos(mos)?.index()),
                HeadKind::Regression1 => Target::Value(mos),
            };
            Ok(Sample { x, target })
        })
        .collect()
}

/// Trains `model` on the plan's train items and selects the checkpoint by
/// validation loss. Targets follow the head: binned MOS classes for the
/// softmax head, raw MOS for the regression head. Only train and validation
/// labels are read from `labels`.
pub fn fine_tune<L: LabelSource>(
    mut model: MlpModel,
    features: &FeatureSet,
    dataset: &GroupedDataset,
    labels: &L,
    plan: &SplitPlan,
    schedule: &TrainSchedule,
) -> Result<(MlpModel, TrainingTrace)> {
    if features.dim() != model.input_dim() {
        return Err(Error::dim(model.input_dim(), features.dim(), "features vs network input"));
    }
    let parts = plan.aligned(dataset)?;
    let train_items = items_in(&parts, Partition::Train);
    let val_items = items_in(&parts, Partition::Validation);
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::Empty("plan needs train and validation items"));
    }
    let train = collect_samples(features, dataset, labels, &train_items, model.head())?;
    let val = collect_samples(features, dataset, labels, &val_items, model.head())?;
    let trace = fit(&mut model, &train, &val, schedule, EpochOrder::Shuffled)?;
    Ok((model, trace))
}

/// Fresh Xavier network with a 5-way softmax head, fine-tuned on binned MOS.
pub fn train_classifier(
    features: &FeatureSet,
    dataset: &GroupedDataset,
    plan: &SplitPlan,
    hidden: &[usize],
    schedule: &TrainSchedule,
) -> Result<(MlpModel, TrainingTrace)> {
    train_classifier_with(features, dataset, dataset, plan, hidden, schedule)
}

pub fn train_classifier_with<L: LabelSource>(
    features: &FeatureSet,
    dataset: &GroupedDataset,
    labels: &L,
    plan: &SplitPlan,
    hidden: &[usize],
    schedule: &TrainSchedule,
) -> Result<(MlpModel, TrainingTrace)> {
    let mut rng = seed::rng(seed::derive(schedule.seed, "init", 0));
    let model = MlpModel::new(features.dim(), hidden, HeadKind::Softmax5, &mut rng)?;
    fine_tune(model, features, dataset, labels, plan, schedule)
}

/// Layout of the end-to-end regressor: a backbone followed by a fully
/// connected head with dropout, then one output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2eArch {
    pub backbone: Vec<usize>,
    pub head: Vec<usize>,
    pub dropout: f64,
}

impl Default for E2eArch {
    /// 1024/512/32 scaled down to 64/32/8.
    fn default() -> Self {
        Self {
            backbone: vec![32],
            head: vec![64, 32, 8],
            dropout: 0.25,
        }
    }
}

impl E2eArch {
    pub fn build(&self, input: usize, rng: &mut seed::Rng) -> Result<MlpModel> {
        let hidden: Vec<usize> = self.backbone.iter().chain(&self.head).copied().collect();
        if hidden.is_empty() {
            return Err(Error::Config("end-to-end network needs hidden layers".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(MlpModel::new(input, &hidden, HeadKind::Regression1, rng)?
            .with_dropout(self.backbone.len(), self.dropout)
            .with_head_from(self.backbone.len()))
    }
}

impl E2eArch {
    /// Regression network on top of an existing backbone's hidden layers;
    /// `backbone` widths of the layout are ignored.
    pub fn build_on(&self, backbone: &MlpModel, rng: &mut seed::Rng) -> Result<MlpModel> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        backbone.with_new_head(&self.head, HeadKind::Regression1, self.dropout, rng)
    }
}

/// End-to-end MOS regressor trained with squared error.
pub fn train_regressor_e2e(
    features: &FeatureSet,
    dataset: &GroupedDataset,
    plan: &SplitPlan,
    arch: &E2eArch,
    schedule: &TrainSchedule,
) -> Result<(MlpModel, TrainingTrace)> {
    train_regressor_e2e_with(features, dataset, dataset, plan, arch, schedule)
}

pub fn train_regressor_e2e_with<L: LabelSource>(
    features: &FeatureSet,
    dataset: &GroupedDataset,
    labels: &L,
    plan: &SplitPlan,
    arch: &E2eArch,
    schedule: &TrainSchedule,
) -> Result<(MlpModel, TrainingTrace)> {
    let mut rng = seed::rng(seed::derive(schedule.seed, "init", 0));
    let model = arch.build(features.dim(), &mut rng)?;
    fine_tune(model, features, dataset, labels, plan, schedule)
}
