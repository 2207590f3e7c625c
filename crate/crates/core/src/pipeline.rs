//! The three-stage experiment: split, optional fine-tuning of the surrogate
//! network, feature extraction, then a quality predictor evaluated on test
//! groups. Cells of the leakage matrix differ in how fine-tuning data is
//! split (`FtMode`) and whether predictor test folds may contain groups the
//! network was fine-tuned on (`TestMode`).

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{GroupedDataset, LabelSource, Structure};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::metrics::{self, MetricSummary, STD_CONVENTION};
use crate::neural::{
    bin_mos, extract_activations, fine_tune, train_lstm, E2eArch, ExtractMode, HeadKind, LstmConfig, MlpModel,
    SequenceData, TrainSchedule,
};
use crate::seed;
use crate::split::{
    self, audit_labels, items_in, largest_remainder, make_kfold_plans, AuditReport, Partition, Ratio, SplitPlan,
    Verdict,
};
use crate::svr::{pool_features, train_svr, KernelSpec, Pooling, SvrConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FtMode {
    None,
    Clean,
    Leaky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMode {
    Independent,
    Tainted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Predictor {
    Svr { kernel: KernelSpec, pooling: Pooling },
    Lstm,
    E2e,
}

impl Default for Predictor {
    fn default() -> Self {
        Predictor::Svr {
            kernel: KernelSpec::default(),
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    /// Fraction of groups reserved for testing.
    pub test_fraction: f64,
    /// Fraction of frames drawn for fine-tuning.
    pub frame_fraction: f64,
    pub finetune_ratio: Ratio,
    /// Train:validation ratio over groups for predictors that validate.
    pub predictor_ratio: Ratio,
    pub folds: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            frame_fraction: 0.2,
            finetune_ratio: Ratio::THREE_TO_ONE,
            predictor_ratio: Ratio::FOUR_TO_ONE,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerParams {
    /// Hidden widths of the surrogate network.
    pub hidden: Vec<usize>,
    pub finetune: TrainSchedule,
    pub svr: SvrConfig,
    pub lstm: LstmConfig,
    pub e2e: E2eArch,
    pub e2e_schedule: TrainSchedule,
    /// Standardize predictor inputs with training statistics.
    pub standardize: bool,
}

impl Default for LearnerParams {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            finetune: TrainSchedule {
                learning_rate: 0.01,
                max_epochs: 60,
                validation_every_n_samples: 320,
                patience: 8,
                ..TrainSchedule::default()
            },
            svr: SvrConfig::default(),
            lstm: LstmConfig::default(),
            e2e: E2eArch::default(),
            e2e_schedule: TrainSchedule {
                learning_rate: 1e-3,
                max_epochs: 10,
                epoch_lr_factor: 0.75,
                head_lr_multiplier: 10.0,
                lr_drop_factor: 1.0,
                validation_every_n_samples: 1_000_000,
                patience: 10,
                ..TrainSchedule::default()
            },
            standardize: true,
        }
    }
}

/// One cell of the leakage matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Cell name; defaults to a tag built from the modes.
    pub name: Option<String>,
    pub ft_mode: FtMode,
    pub test_mode: TestMode,
    pub predictor: Predictor,
    pub extract_mode: ExtractMode,
    pub split: SplitParams,
    pub learners: LearnerParams,
    pub replicates: usize,
    pub base_seed: u64,
    /// Fine-tune once (replicate 0) and reuse the network in every replicate.
    pub reuse_finetune: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            name: None,
            ft_mode: FtMode::Clean,
            test_mode: TestMode::Independent,
            predictor: Predictor::default(),
            extract_mode: ExtractMode::LastLayer,
            split: SplitParams::default(),
            learners: LearnerParams::default(),
            replicates: 5,
            base_seed: 0,
            reuse_finetune: false,
        }
    }
}

fn mode_str<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl ProtocolConfig {
    pub fn tag(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let predictor = match self.predictor {
            Predictor::Svr { kernel, pooling } => {
                let k = match kernel {
                    KernelSpec::Linear => "linear",
                    KernelSpec::Polynomial { .. } => "polynomial",
                    KernelSpec::Gaussian { .. } => "gaussian",
                };
                format!("svr-{k}-{}", mode_str(&pooling))
            }
            Predictor::Lstm => "lstm".into(),
            Predictor::E2e => "e2e".into(),
        };
        format!(
            "ft-{}/test-{}/{}/{}",
            mode_str(&self.ft_mode),
            mode_str(&self.test_mode),
            predictor,
            mode_str(&self.extract_mode)
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_mode == TestMode::Tainted && self.ft_mode == FtMode::None {
            return Err(Error::Protocol(
                "tainted test mode needs fine-tuning: taint is defined by fine-tuning groups".into(),
            ));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        if self.split.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.learners.hidden.is_empty() {
            return Err(Error::Config("the surrogate network needs hidden layers".into()));
        }
        self.learners.finetune.validate()?;
        self.learners.svr.validate()?;
        self.learners.e2e_schedule.validate()?;
        self.learners.lstm.schedule.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Label access log
// ---------------------------------------------------------------------------

/// Pipeline stage on whose behalf a label was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FineTune,
    Predictor,
    Evaluation,
}

#[derive(Default)]
struct AccessLog {
    reads: RefCell<Vec<(Stage, usize, usize)>>,
}

/// Label view that records every read with its stage and fold.
struct Recorder<'a> {
    dataset: &'a GroupedDataset,
    log: &'a AccessLog,
    stage: Stage,
    fold: usize,
}

impl LabelSource for Recorder<'_> {
    fn mos(&self, item: usize) -> f64 {
        self.log.reads.borrow_mut().push((self.stage, self.fold, item));
        self.dataset.mos(item)
    }
}

impl AccessLog {
    fn view<'a>(&'a self, dataset: &'a GroupedDataset, stage: Stage, fold: usize) -> Recorder<'a> {
        Recorder {
            dataset,
            log: self,
            stage,
            fold,
        }
    }

    /// `test_sets[f]` holds the test items of fold `f`.
    fn summarize(&self, dataset: &GroupedDataset, test_sets: &[BTreeSet<usize>]) -> LabelAccess {
        let reads = self.reads.borrow();
        let mut summary = LabelAccess::default();
        let mut hasher = Sha256::new();
        for &(stage, fold, item) in reads.iter() {
            hasher.update(format!("{}:{fold}:{}\n", mode_str(&stage), dataset.item(item).item_id));
            match stage {
                Stage::FineTune => {
                    summary.fine_tune_reads += 1;
                    summary.test_label_reads_before_evaluation +=
                        test_sets.iter().filter(|s| s.contains(&item)).count();
                }
                Stage::Predictor => {
                    summary.predictor_reads += 1;
                    if test_sets.get(fold).is_some_and(|s| s.contains(&item)) {
                        summary.test_label_reads_before_evaluation += 1;
                    }
                }
                Stage::Evaluation => summary.evaluation_reads += 1,
            }
        }
        summary.digest = hex::encode(hasher.finalize());
        summary
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAccess {
    pub fine_tune_reads: usize,
    pub predictor_reads: usize,
    pub evaluation_reads: usize,
    /// Reads of an evaluated fold's test labels by fine-tuning or by that
    /// fold's predictor.
    pub test_label_reads_before_evaluation: usize,
    pub digest: String,
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub verdict: Verdict,
    pub n_leaky_groups: usize,
    pub n_tainted_test_items: usize,
}

impl From<&AuditReport> for AuditSummary {
    fn from(r: &AuditReport) -> Self {
        Self {
            verdict: r.verdict,
            n_leaky_groups: r.leaky_groups.len(),
            n_tainted_test_items: r.n_tainted_test_items,
        }
    }
}

fn combine(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
    let (mut leak, mut taint) = (false, false);
    for v in verdicts {
        leak |= matches!(v, Verdict::GroupLeak | Verdict::Both);
        taint |= matches!(v, Verdict::TaintedTest | Verdict::Both);
    }
    match (leak, taint) {
        (false, false) => Verdict::Clean,
        (true, false) => Verdict::GroupLeak,
        (false, true) => Verdict::TaintedTest,
        (true, true) => Verdict::Both,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub audit: AuditSummary,
    pub trace_digest: String,
    pub best_validation_loss: f64,
    pub validation_accuracy: Option<f64>,
    pub epochs_run: usize,
    /// Accuracy of the chosen checkpoint on the reserved test items
    /// (classifier fine-tuning only).
    pub test_accuracy: Option<f64>,
    /// Accuracy of always answering the training set's most frequent class.
    pub dominant_class_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub cell_seed: u64,
    pub split_seed: u64,
    pub plcc: f64,
    pub srocc: f64,
    /// Test units per fold (groups, or items for degraded variants).
    pub folds: Vec<MetricSummary>,
    /// Combined verdict over the fine-tuning plan and every predictor plan.
    pub audit: AuditSummary,
    pub predictor_audits: Vec<AuditSummary>,
    pub finetune: Option<FinetuneSummary>,
    pub predictor_trace_digests: Vec<String>,
    pub label_access: LabelAccess,
    pub label_access_log_digest: String,
}

impl ReplicateResult {
    pub fn metrics(&self) -> MetricSummary {
        MetricSummary {
            plcc: self.plcc,
            srocc: self.srocc,
            n: self.folds.iter().map(|f| f.n).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub plcc_mean: f64,
    pub plcc_std: f64,
    pub srocc_mean: f64,
    pub srocc_std: f64,
    pub std_convention: String,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub replicate: usize,
    pub cell_seed: u64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base_seed: u64,
    pub per_replicate: Vec<SeedRecord>,
}

/// Everything recorded for one protocol cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub per_replicate: Vec<ReplicateResult>,
    pub summary: SummaryStats,
}

impl EvalReport {
    fn assemble(protocol: String, config: serde_json::Value, base_seed: u64, per_replicate: Vec<ReplicateResult>) -> Result<Self> {
        let summaries: Vec<MetricSummary> = per_replicate.iter().map(ReplicateResult::metrics).collect();
        let agg = metrics::aggregate(&summaries)?;
        Ok(Self {
            protocol,
            config,
            seeds: Seeds {
                base_seed,
                per_replicate: per_replicate
                    .iter()
                    .map(|r| SeedRecord {
                        replicate: r.replicate,
                        cell_seed: r.cell_seed,
                        split_seed: r.split_seed,
                    })
                    .collect(),
            },
            per_replicate,
            summary: SummaryStats {
                plcc_mean: agg.plcc.mean,
                plcc_std: agg.plcc.std,
                srocc_mean: agg.srocc.mean,
                srocc_std: agg.srocc.std,
                std_convention: STD_CONVENTION.into(),
                replicates: agg.replicates,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// The untuned surrogate network every cell starts from: Xavier weights
/// drawn from the base seed, shared by all cells and replicates.
pub fn pretrained_backbone(input: usize, hidden: &[usize], base_seed: u64) -> Result<MlpModel> {
    let mut rng = seed::rng(seed::derive(base_seed, "backbone", 0));
    MlpModel::new(input, hidden, HeadKind::Softmax5, &mut rng)
}

/// Moves a share of the groups that lie wholly in `Train` into `Validation`.
fn carve_validation(dataset: &GroupedDataset, labels: &mut [Partition], ratio: Ratio, rng: &mut seed::Rng) {
    let mut train_groups: Vec<usize> = (0..dataset.n_groups())
        .filter(|&g| dataset.groups()[g].items.iter().all(|&i| labels[i] == Partition::Train))
        .collect();
    train_groups.shuffle(rng);
    let counts = largest_remainder(train_groups.len(), &[ratio.0 as f64, ratio.1 as f64], rng);
    let n_val = if train_groups.len() >= 2 { counts[1].max(1) } else { 0 };
    for &g in &train_groups[..n_val] {
        for &i in &dataset.groups()[g].items {
            labels[i] = Partition::Validation;
        }
    }
}

fn plan_from(dataset: &GroupedDataset, labels: &[Partition], tag: String, seed_: u64) -> SplitPlan {
    SplitPlan {
        protocol_tag: tag,
        seed: seed_,
        assignment: dataset
            .items()
            .iter()
            .zip(labels)
            .map(|(it, &p)| (it.item_id.clone(), p))
            .collect(),
    }
}

/// Per-dimension standardization fitted on training rows.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut()
                .zip(*r)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let scale = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn apply_set(&self, features: &FeatureSet) -> Result<FeatureSet> {
        let mut out = FeatureSet::new(features.dim(), features.provenance());
        for (id, x) in features.iter() {
            out.insert(id.to_string(), self.apply(x))?;
        }
        Ok(out)
    }
}

/// Test units of one fold: either whole groups or single items.
enum Units {
    Groups(Vec<usize>),
    Items(Vec<usize>),
}

struct FoldOutcome {
    summary: MetricSummary,
    trace_digest: Option<String>,
}

/// Trains the predictor on the plan's train (and validation) units and
/// scores its test units.
fn run_predictor(
    dataset: &GroupedDataset,
    features: &FeatureSet,
    raw: &FeatureSet,
    backbone: &MlpModel,
    labels: &[Partition],
    protocol: &ProtocolConfig,
    log: &AccessLog,
    fold: usize,
    cell_seed: u64,
) -> Result<FoldOutcome> {
    let learn = log.view(dataset, Stage::Predictor, fold);
    let eval = log.view(dataset, Stage::Evaluation, fold);
    let group_level = dataset.structure() == Structure::VideoFrames;
    let fit_parts = [Partition::Train, Partition::Validation];
    let test_groups = split::groups_in(dataset, labels, &[Partition::Test]);
    let test_items = items_in(labels, Partition::Test);
    let units = if group_level { Units::Groups(test_groups) } else { Units::Items(test_items) };
    let seed_fold = seed::derive(cell_seed, "predictor", fold as u64);
    let rows = features.aligned(dataset)?;

    let member_items = |g: usize, parts: &[Partition]| -> Vec<usize> {
        dataset.groups()[g]
            .items
            .iter()
            .copied()
            .filter(|&i| parts.contains(&labels[i]))
            .collect()
    };
    let group_truth = |g: usize| -> f64 {
        let items = member_items(g, &[Partition::Test]);
        items.iter().map(|&i| eval.mos(i)).sum::<f64>() / items.len() as f64
    };

    let (pred, digest): (Vec<f64>, Option<String>) = match protocol.predictor {
        Predictor::Svr { kernel, pooling } => {
            let (train_x, train_y, test_x): (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) = match &units {
                Units::Groups(test) => {
                    let train_groups = split::groups_in(dataset, labels, &fit_parts);
                    let pool = |items: &[usize]| -> Result<Vec<f64>> {
                        let vs: Vec<&[f64]> = items.iter().map(|&i| rows[i]).collect();
                        pool_features(&vs, pooling)
                    };
                    let mut tx = Vec::new();
                    let mut ty = Vec::new();
                    for &g in &train_groups {
                        let items = member_items(g, &fit_parts);
                        tx.push(pool(&items)?);
                        ty.push(items.iter().map(|&i| learn.mos(i)).sum::<f64>() / items.len() as f64);
                    }
                    let sx = test
                        .iter()
                        .map(|&g| pool(&member_items(g, &[Partition::Test])))
                        .collect::<Result<Vec<_>>>()?;
                    (tx, ty, sx)
                }
                Units::Items(test) => {
                    let mut train_items = items_in(labels, Partition::Train);
                    train_items.extend(items_in(labels, Partition::Validation));
                    train_items.sort_unstable();
                    (
                        train_items.iter().map(|&i| rows[i].to_vec()).collect(),
                        train_items.iter().map(|&i| learn.mos(i)).collect(),
                        test.iter().map(|&i| rows[i].to_vec()).collect(),
                    )
                }
            };
            if train_x.is_empty() {
                return Err(Error::Empty("predictor has no training units"));
            }
            let scaler = if protocol.learners.standardize {
                Standardizer::fit(&train_x.iter().map(Vec::as_slice).collect::<Vec<_>>())
            } else {
                Standardizer::identity(train_x[0].len())
            };
            let train_x: Vec<Vec<f64>> = train_x.iter().map(|x| scaler.apply(x)).collect();
            let svr_cfg = SvrConfig {
                seed: seed_fold,
                ..protocol.learners.svr.clone()
            };
            let model = train_svr(&train_x, &train_y, kernel, &svr_cfg)?;
            let pred = test_x
                .iter()
                .map(|x| model.predict(&scaler.apply(x)))
                .collect::<Result<Vec<_>>>()?;
            (pred, None)
        }
        Predictor::Lstm => {
            let Units::Groups(test) = &units else {
                return Err(Error::Config("the LSTM predictor needs video-frame data".into()));
            };
            let plan = plan_from(dataset, labels, "predictor".into(), seed_fold);
            let scaled;
            let feats = if protocol.learners.standardize {
                let fit_rows: Vec<&[f64]> = items_in(labels, Partition::Train).iter().map(|&i| rows[i]).collect();
                scaled = Standardizer::fit(&fit_rows).apply_set(features)?;
                &scaled
            } else {
                features
            };
            let data = SequenceData::from_plan(feats, dataset, &learn, &plan)?;
            let mut config = protocol.learners.lstm.clone();
            config.schedule.seed = seed_fold;
            let (model, trace) = train_lstm(&data, &config)?;
            let by_group: BTreeMap<&str, usize> =
                data.group_ids.iter().enumerate().map(|(k, g)| (g.as_str(), k)).collect();
            let pred = test
                .iter()
                .map(|&g| model.predict(&data.sequences[by_group[dataset.groups()[g].id.as_str()]]))
                .collect::<Result<Vec<_>>>()?;
            (pred, Some(trace.digest()))
        }
        Predictor::E2e => {
            let plan = plan_from(dataset, labels, "predictor".into(), seed_fold);
            let mut rng = seed::rng(seed::derive(seed_fold, "e2e-init", 0));
            let model = protocol.learners.e2e.build_on(backbone, &mut rng)?;
            let schedule = TrainSchedule {
                seed: seed_fold,
                ..protocol.learners.e2e_schedule.clone()
            };
            let (model, trace) = fine_tune(model, raw, dataset, &learn, &plan, &schedule)?;
            let raw_rows = raw.aligned(dataset)?;
            let item_pred = |i: usize| model.predict_value(raw_rows[i]);
            let pred = match &units {
                Units::Groups(test) => test
                    .iter()
                    .map(|&g| {
                        let items = member_items(g, &[Partition::Test]);
                        let s = items.iter().map(|&i| item_pred(i)).sum::<Result<f64>>()?;
                        Ok(s / items.len() as f64)
                    })
                    .collect::<Result<Vec<_>>>()?,
                Units::Items(test) => test.iter().map(|&i| item_pred(i)).collect::<Result<Vec<_>>>()?,
            };
            (pred, Some(trace.digest()))
        }
    };

    let truth: Vec<f64> = match &units {
        Units::Groups(test) => test.iter().map(|&g| group_truth(g)).collect(),
        Units::Items(test) => test.iter().map(|&i| eval.mos(i)).collect(),
    };
    Ok(FoldOutcome {
        summary: MetricSummary::compute(&pred, &truth)?,
        trace_digest: digest,
    })
}

/// Fraction of `test` items whose class equals the most frequent class of
/// `train` (ties resolve to the lowest class).
fn dominant_accuracy<L: LabelSource>(labels: &L, train: &[usize], test: &[usize]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("dominant-class baseline needs train and test items"));
    }
    let classes = |items: &[usize]| -> Result<Vec<usize>> {
        items.iter().map(|&i| Ok(bin_mos(labels.mos(i))?.index())).collect()
    };
    let train_dist = metrics::class_distribution(&classes(train)?, 5)?;
    let mut dominant = 0;
    for (c, &f) in train_dist.iter().enumerate() {
        if f > train_dist[dominant] {
            dominant = c;
        }
    }
    let test_classes = classes(test)?;
    Ok(test_classes.iter().filter(|&&c| c == dominant).count() as f64 / test_classes.len() as f64)
}

/// Accuracy of predicting the training partition's most frequent class for
/// every test item.
pub fn dominant_class_baseline(plan: &SplitPlan, dataset: &GroupedDataset) -> Result<f64> {
    let labels = plan.aligned(dataset)?;
    dominant_accuracy(dataset, &items_in(&labels, Partition::Train), &items_in(&labels, Partition::Test))
}

/// Seeds of one replicate: the cell's own learner seed and the split seed
/// shared by every cell of the same base seed.
pub fn replicate_seeds(protocol: &ProtocolConfig, replicate: usize) -> (u64, u64) {
    (
        seed::derive(protocol.base_seed, &protocol.tag(), replicate as u64),
        seed::derive(protocol.base_seed, "split", replicate as u64),
    )
}

/// Runs one replicate of one protocol cell.
pub fn run_replicate(
    dataset: &GroupedDataset,
    raw: &FeatureSet,
    protocol: &ProtocolConfig,
    replicate: usize,
) -> Result<ReplicateResult> {
    protocol.validate()?;
    let (cell_seed, split_seed) = replicate_seeds(protocol, replicate);
    let ft_rep = if protocol.reuse_finetune { 0 } else { replicate };
    let (ft_cell_seed, ft_split_seed) = replicate_seeds(protocol, ft_rep);
    let log = AccessLog::default();
    let sp = &protocol.split;

    // stage 1: fine-tuning on a reservation that holds out test groups
    let ft_plan = match protocol.ft_mode {
        FtMode::Leaky => {
            split::split_leaky_frame_pool(dataset, sp.test_fraction, sp.frame_fraction, sp.finetune_ratio, ft_split_seed)?
        }
        FtMode::Clean | FtMode::None => {
            split::split_clean_frame_sample(dataset, sp.test_fraction, sp.frame_fraction, sp.finetune_ratio, ft_split_seed)?
        }
    };
    let ft_labels = ft_plan.aligned(dataset)?;
    let reserved: Vec<usize> = split::groups_in(dataset, &ft_labels, &[Partition::Test]);
    let backbone = pretrained_backbone(raw.dim(), &protocol.learners.hidden, protocol.base_seed)?;
    let (network, ft_trace, ft_groups) = if protocol.ft_mode == FtMode::None {
        (backbone, None, None)
    } else {
        let mut model = backbone;
        let mut rng = seed::rng(seed::derive(ft_cell_seed, "head", 0));
        model.reinit_from(model.n_layers() - 1, &mut rng);
        let schedule = TrainSchedule {
            seed: seed::derive(ft_cell_seed, "finetune", 0),
            ..protocol.learners.finetune.clone()
        };
        let view = log.view(dataset, Stage::FineTune, 0);
        let (model, trace) = fine_tune(model, raw, dataset, &view, &ft_plan, &schedule)?;
        let groups = split::trained_groups(dataset, &ft_labels);
        (model, Some(trace), Some(groups))
    };

    // stage 2: features from the (possibly tuned) network
    let features = extract_activations(&network, raw, protocol.extract_mode)?;

    // stage 3: predictor plans
    let mut plans: Vec<Vec<Partition>> = match protocol.test_mode {
        TestMode::Independent => {
            let mut labels = vec![Partition::Train; dataset.len()];
            for &g in &reserved {
                for &i in &dataset.groups()[g].items {
                    labels[i] = Partition::Test;
                }
            }
            vec![labels]
        }
        TestMode::Tainted => make_kfold_plans(dataset, sp.folds, 1, true, seed::derive(split_seed, "folds", 0))?
            .iter()
            .map(|p| p.aligned(dataset))
            .collect::<Result<_>>()?,
    };
    if !matches!(protocol.predictor, Predictor::Svr { .. }) {
        for (f, labels) in plans.iter_mut().enumerate() {
            let mut rng = seed::rng(seed::derive(split_seed, "predictor-validation", f as u64));
            carve_validation(dataset, labels, sp.predictor_ratio, &mut rng);
        }
    }

    let mut folds = Vec::with_capacity(plans.len());
    let mut digests = Vec::new();
    let mut audits = Vec::new();
    for (f, labels) in plans.iter().enumerate() {
        audits.push(audit_labels(labels, dataset, ft_groups.as_ref()));
        let outcome = run_predictor(dataset, &features, raw, &network, labels, protocol, &log, f, cell_seed)?;
        folds.push(outcome.summary);
        digests.extend(outcome.trace_digest);
    }

    let finetune = match &ft_trace {
        Some(trace) => {
            let eval = log.view(dataset, Stage::Evaluation, 0);
            let test_items = items_in(&ft_labels, Partition::Test);
            let mut hits = 0;
            for &i in &test_items {
                let x = raw.get(&dataset.item(i).item_id).expect("aligned features");
                if network.predict_class(x)? == bin_mos(eval.mos(i))?.index() {
                    hits += 1;
                }
            }
            let ft_audit = audit_labels(&ft_labels, dataset, None);
            Some(FinetuneSummary {
                audit: AuditSummary::from(&ft_audit),
                trace_digest: trace.digest(),
                best_validation_loss: trace.best_validation_loss(),
                validation_accuracy: trace.points[trace.chosen].validation_accuracy,
                epochs_run: trace.epochs_run,
                test_accuracy: Some(hits as f64 / test_items.len() as f64),
                dominant_class_accuracy: Some(dominant_accuracy(
                    &eval,
                    &items_in(&ft_labels, Partition::Train),
                    &test_items,
                )?),
            })
        }
        None => None,
    };

    let test_sets: Vec<BTreeSet<usize>> = plans
        .iter()
        .map(|l| items_in(l, Partition::Test).into_iter().collect())
        .collect();
    let label_access = log.summarize(dataset, &test_sets);
    let predictor_audits: Vec<AuditSummary> = audits.iter().map(AuditSummary::from).collect();
    let verdict = combine(
        predictor_audits
            .iter()
            .map(|a| a.verdict)
            .chain(finetune.as_ref().map(|f| f.audit.verdict)),
    );
    let audit = AuditSummary {
        verdict,
        n_leaky_groups: predictor_audits.iter().map(|a| a.n_leaky_groups).sum::<usize>()
            + finetune.as_ref().map_or(0, |f| f.audit.n_leaky_groups),
        n_tainted_test_items: predictor_audits.iter().map(|a| a.n_tainted_test_items).sum(),
    };
    let plcc = folds.iter().map(|f| f.plcc).sum::<f64>() / folds.len() as f64;
    let srocc = folds.iter().map(|f| f.srocc).sum::<f64>() / folds.len() as f64;
    Ok(ReplicateResult {
        replicate,
        cell_seed,
        split_seed,
        plcc,
        srocc,
        folds,
        audit,
        predictor_audits,
        finetune,
        predictor_trace_digests: digests,
        label_access_log_digest: label_access.digest.clone(),
        label_access,
    })
}

/// Runs every replicate of `protocol`.
pub fn run_protocol(dataset: &GroupedDataset, raw: &FeatureSet, protocol: &ProtocolConfig) -> Result<EvalReport> {
    Ok(run_matrix(dataset, raw, std::slice::from_ref(protocol), None)?.remove(0))
}

/// Runs all cells and replicates, in parallel over `jobs` threads (all
/// cores when `None`). Reports come back sorted by protocol tag.
pub fn run_matrix(
    dataset: &GroupedDataset,
    raw: &FeatureSet,
    protocols: &[ProtocolConfig],
    jobs: Option<usize>,
) -> Result<Vec<EvalReport>> {
    if protocols.is_empty() {
        return Err(Error::Config("no protocols to run".into()));
    }
    let mut tags = BTreeSet::new();
    for p in protocols {
        p.validate()?;
        if !tags.insert(p.tag()) {
            return Err(Error::Config(format!("duplicate protocol tag {}", p.tag())));
        }
    }
    let tasks: Vec<(usize, usize)> = protocols
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.replicates).map(move |r| (pi, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<ReplicateResult>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(pi, r)| {
                log::info!("running {} replicate {r}", protocols[pi].tag());
                run_replicate(dataset, raw, &protocols[pi], r)
            })
            .collect()
    });
    let mut per_cell: Vec<Vec<ReplicateResult>> = vec![Vec::new(); protocols.len()];
    for (&(pi, _), res) in tasks.iter().zip(results) {
        per_cell[pi].push(res?);
    }
    let mut reports = protocols
        .iter()
        .zip(per_cell)
        .map(|(p, reps)| {
            let config = serde_json::to_value(p).map_err(Error::from)?;
            EvalReport::assemble(p.tag(), config, p.base_seed, reps)
        })
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.protocol.cmp(&b.protocol));
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Degraded-variants experiment
// ---------------------------------------------------------------------------

/// Random-vs-reference-grouped image split with an SVR on features of the
/// untuned (or regression-head tuned) network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradedConfig {
    pub hidden: Vec<usize>,
    pub extract_mode: ExtractMode,
    pub kernel: KernelSpec,
    pub svr: SvrConfig,
    /// Test fold size is `1 / folds` of the population.
    pub folds: usize,
    /// Regression-head fine-tuning on the training items before extraction.
    pub finetune: Option<TrainSchedule>,
    pub standardize: bool,
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for DegradedConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            extract_mode: ExtractMode::AllLayers,
            kernel: KernelSpec::default(),
            svr: SvrConfig::default(),
            folds: 5,
            finetune: None,
            standardize: true,
            replicates: 5,
            base_seed: 0,
        }
    }
}

/// One fold of a `folds`-fold split over items (`grouped = false`) or over
/// reference groups (`grouped = true`) serves as the test set; an SVR is
/// trained on everything else and scored per item.
pub fn degraded_split_experiment(
    dataset: &GroupedDataset,
    raw: &FeatureSet,
    grouped: bool,
    config: &DegradedConfig,
) -> Result<EvalReport> {
    if dataset.structure() != Structure::DegradedVariants {
        return Err(Error::Data("the split experiment needs degraded-variant data".into()));
    }
    if config.replicates == 0 || config.folds < 2 {
        return Err(Error::Config("replicates must be positive and folds at least 2".into()));
    }
    let tag = format!("degraded/{}", if grouped { "grouped" } else { "random" });
    let protocol = ProtocolConfig {
        name: Some(tag.clone()),
        ft_mode: if config.finetune.is_some() { FtMode::Clean } else { FtMode::None },
        predictor: Predictor::Svr {
            kernel: config.kernel,
            pooling: Pooling::Mean,
        },
        extract_mode: config.extract_mode,
        learners: LearnerParams {
            hidden: config.hidden.clone(),
            svr: config.svr.clone(),
            standardize: config.standardize,
            ..LearnerParams::default()
        },
        replicates: config.replicates,
        base_seed: config.base_seed,
        ..ProtocolConfig::default()
    };
    let reps = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let (cell_seed, split_seed) = replicate_seeds(&protocol, r);
            let log = AccessLog::default();
            let plan = make_kfold_plans(dataset, config.folds, 1, grouped, seed::derive(split_seed, "degraded", 0))?
                .swap_remove(0);
            let labels = plan.aligned(dataset)?;
            let backbone = pretrained_backbone(raw.dim(), &config.hidden, config.base_seed)?;
            let (network, ft_groups, ft_summary) = match &config.finetune {
                None => (backbone, None, None),
                Some(schedule) => {
                    let mut rng = seed::rng(seed::derive(cell_seed, "head", 0));
                    let model = backbone.with_new_head(&[], HeadKind::Regression1, 0.0, &mut rng)?;
                    let mut ft_labels = labels.clone();
                    carve_validation(dataset, &mut ft_labels, Ratio::FOUR_TO_ONE, &mut rng);
                    if !ft_labels.contains(&Partition::Validation) {
                        // item-random folds leave no whole training group; validate on items
                        let mut train = items_in(&ft_labels, Partition::Train);
                        train.shuffle(&mut rng);
                        for &i in train.iter().take(train.len() / 5) {
                            ft_labels[i] = Partition::Validation;
                        }
                    }
                    let ft_plan = plan_from(dataset, &ft_labels, "degraded-finetune".into(), split_seed);
                    let schedule = TrainSchedule {
                        seed: seed::derive(cell_seed, "finetune", 0),
                        ..schedule.clone()
                    };
                    let view = log.view(dataset, Stage::FineTune, 0);
                    let (model, trace) = fine_tune(model, raw, dataset, &view, &ft_plan, &schedule)?;
                    let audit = AuditSummary::from(&audit_labels(&ft_labels, dataset, None));
                    (model, Some(split::trained_groups(dataset, &ft_labels)), Some((trace, audit)))
                }
            };
            let features = extract_activations(&network, raw, config.extract_mode)?;
            let audit_report = audit_labels(&labels, dataset, ft_groups.as_ref());
            let outcome = run_predictor(dataset, &features, raw, &network, &labels, &protocol, &log, 0, cell_seed)?;
            let test_set: BTreeSet<usize> = items_in(&labels, Partition::Test).into_iter().collect();
            let label_access = log.summarize(dataset, &[test_set]);
            let audit = AuditSummary::from(&audit_report);
            Ok(ReplicateResult {
                replicate: r,
                cell_seed,
                split_seed,
                plcc: outcome.summary.plcc,
                srocc: outcome.summary.srocc,
                folds: vec![outcome.summary],
                audit: audit.clone(),
                predictor_audits: vec![audit],
                finetune: ft_summary.map(|(trace, audit)| FinetuneSummary {
                    audit,
                    trace_digest: trace.digest(),
                    best_validation_loss: trace.best_validation_loss(),
                    validation_accuracy: None,
                    epochs_run: trace.epochs_run,
                    test_accuracy: None,
                    dominant_class_accuracy: None,
                }),
                predictor_trace_digests: Vec::new(),
                label_access_log_digest: label_access.digest.clone(),
                label_access,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config_json = serde_json::to_value(config)?;
    EvalReport::assemble(tag, config_json, config.base_seed, reps)
}
