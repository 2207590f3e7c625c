use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::train::{fit, EpochOrder, Learner};
use super::{TrainSchedule, TrainingTrace};
use crate::dataset::{GroupedDataset, LabelSource};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::seed;
use crate::split::{Partition, SplitPlan};

/// How mini-batches are drawn from the training sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Batching {
    /// Sequences sorted by length, cut into consecutive batches, same order every epoch.
    SortedNonRandom,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub hidden: usize,
    pub forget_bias: f64,
    pub batching: Batching,
    pub schedule: TrainSchedule,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            forget_bias: 1.0,
            batching: Batching::SortedNonRandom,
            schedule: TrainSchedule {
                batch_size: 27,
                learning_rate: 0.005,
                validation_every_n_samples: 1_000_000,
                max_epochs: 80,
                patience: 10,
                ..TrainSchedule::default()
            },
        }
    }
}

/// Per-group frame sequences with their labels. Labels are only present for
/// groups a learner may train or validate on.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub group_ids: Vec<String>,
    pub sequences: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<Option<f64>>,
    pub partitions: Vec<Partition>,
}

impl SequenceData {
    /// One sequence per group, items in `seq_index` order. Each group must
    /// sit in a single partition (excluded items are dropped). The label of a
    /// train or validation group is the mean MOS of its items; other groups
    /// get no label and their MOS is never read.
    pub fn from_plan<L: LabelSource>(
        features: &FeatureSet,
        dataset: &GroupedDataset,
        labels: &L,
        plan: &SplitPlan,
    ) -> Result<Self> {
        let parts = plan.aligned(dataset)?;
        let mut data = SequenceData {
            group_ids: Vec::new(),
            sequences: Vec::new(),
            labels: Vec::new(),
            partitions: Vec::new(),
        };
        for group in dataset.groups() {
            let members: Vec<usize> = group
                .items
                .iter()
                .copied()
                .filter(|&i| parts[i] != Partition::Excluded)
                .collect();
            let Some(&first) = members.first() else { continue };
            let part = parts[first];
            if members.iter().any(|&i| parts[i] != part) {
                return Err(Error::Protocol(format!(
                    "group {} spans several partitions; sequence learners need whole groups",
                    group.id
                )));
            }
            let mut seq = Vec::with_capacity(members.len());
            for &i in &members {
                let id = &dataset.item(i).item_id;
                let x = features
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no features for item {id}")))?;
                seq.push(x.to_vec());
            }
            let label = matches!(part, Partition::Train | Partition::Validation)
                .then(|| members.iter().map(|&i| labels.mos(i)).sum::<f64>() / members.len() as f64);
            data.group_ids.push(group.id.clone());
            data.sequences.push(seq);
            data.labels.push(label);
            data.partitions.push(part);
        }
        Ok(data)
    }

    pub fn indices_in(&self, partition: Partition) -> Vec<usize> {
        (0..self.partitions.len()).filter(|&i| self.partitions[i] == partition).collect()
    }
}

/// Single-layer LSTM with a linear regression head on the final hidden state.
///
/// Gates are stacked `[input, forget, cell, output]`. Parameters are one flat
/// vector: input weights `W` (`4h x d`, row-major), recurrent weights `U`
/// (`4h x h`), bias `b` (`4h`), head weights (`h`) and head bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    input: usize,
    hidden: usize,
    forget_bias: f64,
    params: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one real (non-padded) step, kept for backpropagation.
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
}

impl LstmModel {
    pub fn new(input: usize, hidden: usize, forget_bias: f64, rng: &mut seed::Rng) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("LSTM dimensions must be positive".into()));
        }
        let mut model = Self {
            input,
            hidden,
            forget_bias,
            params: vec![0.0; 4 * hidden * (input + hidden + 1) + hidden + 1],
        };
        let (d, h) = (input, hidden);
        let lim_w = (6.0 / (d + h) as f64).sqrt();
        let lim_u = (6.0 / (2 * h) as f64).sqrt();
        let lim_o = (6.0 / (h + 1) as f64).sqrt();
        let (w, u, b, wo, _) = model.offsets();
        for p in &mut model.params[w..u] {
            *p = rng.gen_range(-lim_w..lim_w);
        }
        for p in &mut model.params[u..b] {
            *p = rng.gen_range(-lim_u..lim_u);
        }
        for p in &mut model.params[b + h..b + 2 * h] {
            *p = forget_bias;
        }
        for p in &mut model.params[wo..wo + h] {
            *p = rng.gen_range(-lim_o..lim_o);
        }
        Ok(model)
    }

    pub fn check(&self) -> Result<()> {
        let (d, h) = (self.input, self.hidden);
        if d == 0 || h == 0 {
            return Err(Error::Data("LSTM dimensions must be positive".into()));
        }
        let n = 4 * h * (d + h + 1) + h + 1;
        if self.params.len() != n {
            return Err(Error::dim(n, self.params.len(), "LSTM parameters"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn forget_bias(&self) -> f64 {
        self.forget_bias
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize) {
        let (d, h) = (self.input, self.hidden);
        let w = 0;
        let u = w + 4 * h * d;
        let b = u + 4 * h * h;
        let wo = b + 4 * h;
        (w, u, b, wo, wo + h)
    }

    /// Gate activations `[i, f, g, o]` for input `x` and previous state `h_prev`.
    fn gates(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let (d, h) = (self.input, self.hidden);
        let (w, u, b, _, _) = self.offsets();
        let p = &self.params;
        let mut a = p[b..b + 4 * h].to_vec();
        for (r, ar) in a.iter_mut().enumerate() {
            let wr = &p[w + r * d..w + (r + 1) * d];
            let ur = &p[u + r * h..u + (r + 1) * h];
            *ar += wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *ar += ur.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        for (r, ar) in a.iter_mut().enumerate() {
            *ar = if r / h == 2 { ar.tanh() } else { sigmoid(*ar) };
        }
        a
    }

    fn head(&self, h_last: &[f64]) -> f64 {
        let (_, _, _, wo, bo) = self.offsets();
        self.params[wo..bo].iter().zip(h_last).map(|(a, b)| a * b).sum::<f64>() + self.params[bo]
    }

    /// Runs `steps` (possibly zero-padded) where only the first `len` steps
    /// are real; padded steps leave the state untouched.
    fn run(&self, steps: &[Vec<f64>], len: usize, mut cache: Option<&mut Vec<StepCache>>) -> (Vec<f64>, f64) {
        let h = self.hidden;
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        for (t, x) in steps.iter().enumerate() {
            if t >= len {
                continue;
            }
            let g = self.gates(x, &hs);
            let c: Vec<f64> = (0..h).map(|k| g[h + k] * cs[k] + g[k] * g[2 * h + k]).collect();
            let h_new: Vec<f64> = (0..h).map(|k| g[3 * h + k] * c[k].tanh()).collect();
            if let Some(cache) = cache.as_deref_mut() {
                cache.push(StepCache {
                    h_prev: std::mem::replace(&mut hs, h_new),
                    c_prev: std::mem::replace(&mut cs, c.clone()),
                    gates: g,
                    c,
                });
            } else {
                hs = h_new;
                cs = c;
            }
        }
        let y = self.head(&hs);
        (hs, y)
    }

    fn check_sequence(&self, seq: &[Vec<f64>]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Empty("sequence has no steps"));
        }
        if let Some(x) = seq.iter().find(|x| x.len() != self.input) {
            return Err(Error::dim(self.input, x.len(), "LSTM step"));
        }
        Ok(())
    }

    /// Regression output after the last step of `seq`.
    pub fn predict(&self, seq: &[Vec<f64>]) -> Result<f64> {
        self.check_sequence(seq)?;
        Ok(self.run(seq, seq.len(), None).1)
    }

    /// Mean squared error of a zero-padded batch: every sequence is padded to
    /// the longest one and the padding is masked out of the recurrence.
    pub fn batch_loss(&self, seqs: &[&[Vec<f64>]], targets: &[f64]) -> Result<f64> {
        if seqs.is_empty() || seqs.len() != targets.len() {
            return Err(Error::Empty("batch needs one target per sequence"));
        }
        for s in seqs {
            self.check_sequence(s)?;
        }
        let (padded, lens) = pad(seqs, self.input);
        let total: f64 = padded
            .iter()
            .zip(&lens)
            .zip(targets)
            .map(|((steps, &len), y)| (self.run(steps, len, None).1 - y).powi(2))
            .sum();
        Ok(total / seqs.len() as f64)
    }

    /// Squared error of one padded sequence; adds its gradient into `grad`
    /// by backpropagation through the real steps.
    fn accumulate(&self, steps: &[Vec<f64>], len: usize, target: f64, grad: &mut [f64]) -> f64 {
        let (d, h) = (self.input, self.hidden);
        let (w, u, b, wo, bo) = self.offsets();
        let mut cache = Vec::with_capacity(len);
        let (h_last, y) = self.run(steps, len, Some(&mut cache));
        let r = y - target;
        let dy = 2.0 * r;
        for k in 0..h {
            grad[wo + k] += dy * h_last[k];
        }
        grad[bo] += dy;
        let mut dh: Vec<f64> = self.params[wo..bo].iter().map(|v| dy * v).collect();
        let mut dc = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        for t in (0..cache.len()).rev() {
            let s = &cache[t];
            let g = &s.gates;
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = s.c[k].tanh();
                let d_o = dh[k] * tc;
                let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
                da[k] = dck * gg * i * (1.0 - i);
                da[h + k] = dck * s.c_prev[k] * f * (1.0 - f);
                da[2 * h + k] = dck * i * (1.0 - gg * gg);
                da[3 * h + k] = d_o * o * (1.0 - o);
                dc[k] = dck * f;
            }
            let x = &steps[t];
            let mut dh_prev = vec![0.0; h];
            for (row, &a) in da.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                grad[w + row * d..w + (row + 1) * d]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(gv, xv)| *gv += a * xv);
                let urow = u + row * h;
                for k in 0..h {
                    grad[urow + k] += a * s.h_prev[k];
                    dh_prev[k] += a * self.params[urow + k];
                }
                grad[b + row] += a;
            }
            dh = dh_prev;
        }
        r * r
    }

    /// As `accumulate` on `seq` followed by two padded steps.
    pub(crate) fn accumulate_padded(&self, seq: &[Vec<f64>], target: f64, grad: &mut [f64]) -> f64 {
        let mut steps = seq.to_vec();
        steps.extend(std::iter::repeat(vec![0.0; self.input]).take(2));
        self.accumulate(&steps, seq.len(), target, grad)
    }
}

/// Zero-pads every sequence to the longest; returns the padded steps and true lengths.
fn pad(seqs: &[&[Vec<f64>]], dim: usize) -> (Vec<Vec<Vec<f64>>>, Vec<usize>) {
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let lens = seqs.iter().map(|s| s.len()).collect();
    let padded = seqs
        .iter()
        .map(|s| {
            let mut steps = s.to_vec();
            steps.resize(longest, vec![0.0; dim]);
            steps
        })
        .collect();
    (padded, lens)
}

pub(crate) struct SeqSample<'a> {
    steps: &'a [Vec<f64>],
    target: f64,
}

impl Learner<SeqSample<'_>> for LstmModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn head_param_start(&self) -> usize {
        self.offsets().3
    }

    fn accumulate_batch(&self, batch: &[&SeqSample], grad: &mut [f64], _rng: &mut seed::Rng) -> f64 {
        let seqs: Vec<&[Vec<f64>]> = batch.iter().map(|s| s.steps).collect();
        let (padded, lens) = pad(&seqs, self.input);
        padded
            .iter()
            .zip(&lens)
            .zip(batch)
            .map(|((steps, &len), s)| self.accumulate(steps, len, s.target, grad))
            .sum()
    }

    fn evaluate(&self, samples: &[SeqSample]) -> (f64, Option<f64>) {
        let total: f64 = samples
            .iter()
            .map(|s| (self.run(s.steps, s.steps.len(), None).1 - s.target).powi(2))
            .sum();
        (total / samples.len() as f64, None)
    }
}

/// Trains an LSTM regressor on the train sequences of `data`, selecting the
/// checkpoint by validation loss.
pub fn train_lstm(data: &SequenceData, config: &LstmConfig) -> Result<(LstmModel, TrainingTrace)> {
    let first = data
        .sequences
        .first()
        .and_then(|s| s.first())
        .ok_or(Error::Empty("no sequences"))?;
    let mut rng = seed::rng(seed::derive(config.schedule.seed, "init", 0));
    let mut model = LstmModel::new(first.len(), config.hidden, config.forget_bias, &mut rng)?;
    let collect = |part: Partition| -> Result<Vec<SeqSample>> {
        data.indices_in(part)
            .into_iter()
            .map(|i| {
                model.check_sequence(&data.sequences[i])?;
                let target = data.labels[i]
                    .ok_or_else(|| Error::Protocol(format!("group {} has no label", data.group_ids[i])))?;
                Ok(SeqSample {
                    steps: &data.sequences[i],
                    target,
                })
            })
            .collect()
    };
    let train = collect(Partition::Train)?;
    let val = collect(Partition::Validation)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("plan needs train and validation groups"));
    }
    // start the head bias at the mean training label
    let mean = train.iter().map(|s| s.target).sum::<f64>() / train.len() as f64;
    let bo = model.offsets().4;
    model.params[bo] = mean;
    let ordering = match config.batching {
        Batching::Shuffled => EpochOrder::Shuffled,
        Batching::SortedNonRandom => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.sort_by_key(|&i| train[i].steps.len());
            EpochOrder::Fixed(order)
        }
    };
    let trace = fit(&mut model, &train, &val, &config.schedule, ordering)?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_seq(rng: &mut seed::Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn padded_batch_matches_unbatched() {
        let mut rng = seed::rng(3);
        let model = LstmModel::new(4, 6, 1.0, &mut rng).unwrap();
        let a = random_seq(&mut rng, 5, 4);
        let b = random_seq(&mut rng, 3, 4);
        let batched = model.batch_loss(&[&a, &b], &[2.0, 4.0]).unwrap();
        let la = (model.predict(&a).unwrap() - 2.0).powi(2);
        let lb = (model.predict(&b).unwrap() - 4.0).powi(2);
        assert_eq!(batched, (la + lb) / 2.0);
    }

    #[test]
    fn trailing_padding_leaves_output_unchanged() {
        let mut rng = seed::rng(5);
        let model = LstmModel::new(3, 5, 1.0, &mut rng).unwrap();
        let s = random_seq(&mut rng, 4, 3);
        let (padded, lens) = pad(&[&s, &random_seq(&mut rng, 9, 3)], 3);
        assert_eq!(padded[0].len(), 9);
        assert_eq!(model.run(&padded[0], lens[0], None).1, model.predict(&s).unwrap());
    }

    // Hand-written gate equations for one step from the zero state:
    // c = i*g, h = o*tanh(c), y = w.h + b.
    #[test]
    fn length_one_matches_gate_equations() {
        let mut rng = seed::rng(9);
        let (d, h) = (3, 4);
        let model = LstmModel::new(d, h, 1.0, &mut rng).unwrap();
        let x = vec![0.3, -0.7, 1.1];
        let p = model.params();
        let w = |r: usize| &p[r * d..(r + 1) * d];
        let bias = |r: usize| p[4 * h * d + 4 * h * h + r];
        let pre = |r: usize| w(r).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + bias(r);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wo = 4 * h * (d + h + 1);
        let mut y = p[wo + h];
        for k in 0..h {
            let c = sig(pre(k)) * pre(2 * h + k).tanh();
            y += p[wo + k] * sig(pre(3 * h + k)) * c.tanh();
        }
        assert!((model.predict(&[x]).unwrap() - y).abs() < 1e-10);
    }

    #[test]
    fn forget_bias_is_initialized() {
        let model = LstmModel::new(2, 3, 1.0, &mut seed::rng(0)).unwrap();
        let b = 4 * 3 * 2 + 4 * 3 * 3;
        assert_eq!(&model.params()[b + 3..b + 6], &[1.0; 3]);
        assert_eq!(&model.params()[b..b + 3], &[0.0; 3]);
    }

    #[test]
    fn default_batch_is_27_sorted() {
        let c = LstmConfig::default();
        assert_eq!(c.schedule.batch_size, 27);
        assert_eq!(c.batching, Batching::SortedNonRandom);
    }

    fn toy_data(n: usize, seed_: u64) -> SequenceData {
        let mut rng = seed::rng(seed_);
        let mut data = SequenceData {
            group_ids: Vec::new(),
            sequences: Vec::new(),
            labels: Vec::new(),
            partitions: Vec::new(),
        };
        for i in 0..n {
            let q: f64 = rng.gen_range(1.0..5.0);
            let len = rng.gen_range(2..8);
            let seq = (0..len)
                .map(|_| vec![(q - 3.0) / 2.0 + rng.gen_range(-0.1..0.1), rng.gen_range(-1.0..1.0)])
                .collect();
            data.group_ids.push(format!("g{i}"));
            data.sequences.push(seq);
            data.labels.push(Some(q));
            data.partitions.push(if i % 4 == 0 { Partition::Validation } else { Partition::Train });
        }
        data
    }

    #[test]
    fn learns_a_sequence_mean_signal() {
        let data = toy_data(120, 1);
        let config = LstmConfig {
            hidden: 6,
            ..LstmConfig::default()
        };
        let (model, trace) = train_lstm(&data, &config).unwrap();
        assert!(trace.best_validation_loss() < 0.5 * trace.points[0].validation_loss, "{trace:?}");
        let preds: Vec<f64> = data.sequences.iter().map(|s| model.predict(s).unwrap()).collect();
        let truth: Vec<f64> = data.labels.iter().map(|l| l.unwrap()).collect();
        assert!(crate::metrics::plcc(&preds, &truth).unwrap() > 0.8);
    }

    #[test]
    fn deterministic_and_label_checked() {
        let data = toy_data(40, 2);
        let config = LstmConfig {
            hidden: 4,
            schedule: TrainSchedule {
                max_epochs: 3,
                batch_size: 27,
                ..TrainSchedule::default()
            },
            batching: Batching::Shuffled,
            ..LstmConfig::default()
        };
        let a = train_lstm(&data, &config).unwrap();
        let b = train_lstm(&data, &config).unwrap();
        assert_eq!(a.0, b.0);
        let mut missing = data.clone();
        missing.labels[1] = None;
        assert!(matches!(train_lstm(&missing, &config), Err(Error::Protocol(_))));
        let mut empty = data;
        empty.sequences[1].clear();
        assert!(train_lstm(&empty, &config).is_err());
    }
}
