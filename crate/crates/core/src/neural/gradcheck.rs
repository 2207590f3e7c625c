use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::lstm::LstmModel;
use super::mlp::{HeadKind, MlpModel, Target};
use crate::error::{Error, Result};
use crate::seed;

/// Model family and shape for a gradient check. `dims` lists every layer
/// width including input and output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradCheckModel {
    MlpSoftmax { dims: Vec<usize> },
    MlpRegression { dims: Vec<usize> },
    Lstm { input: usize, hidden: usize, seq_len: usize },
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compares the analytic gradient of a randomly drawn instance against
/// central finite differences with step `h` over every parameter and
/// returns the largest relative error `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn gradient_check(kind: &GradCheckModel, seed_: u64, h: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("perturbation {h} outside [1e-7, 1e-3]")));
    }
    let mut rng = seed::rng(seed::derive(seed_, "gradcheck", 0));
    match kind {
        GradCheckModel::MlpSoftmax { dims } | GradCheckModel::MlpRegression { dims } => {
            let (head, target) = match kind {
                GradCheckModel::MlpSoftmax { .. } => (HeadKind::Softmax5, Target::Class(rng.gen_range(0..5))),
                _ => (HeadKind::Regression1, Target::Value(rng.gen_range(1.0..5.0))),
            };
            if dims.len() < 2 || *dims.last().unwrap() != head.outputs() {
                return Err(Error::Config(format!(
                    "dims must run from input to {} outputs",
                    head.outputs()
                )));
            }
            let mut model = MlpModel::new(dims[0], &dims[1..dims.len() - 1], head, &mut rng)?;
            // non-zero biases so every path is exercised
            for p in model.params_mut() {
                *p += rng.gen_range(-0.1..0.1);
            }
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grad = vec![0.0; model.params().len()];
            model.accumulate(&x, target, &mut grad, None);
            Ok(compare(&grad, model.params().to_vec(), h, |p| {
                model.params_mut().copy_from_slice(p);
                model.loss(&x, target)
            }))
        }
        GradCheckModel::Lstm { input, hidden, seq_len } => {
            if *seq_len == 0 {
                return Err(Error::Config("seq_len must be positive".into()));
            }
            let mut model = LstmModel::new(*input, *hidden, 1.0, &mut rng)?;
            for p in model.params_mut() {
                *p += rng.gen_range(-0.1..0.1);
            }
            let seq: Vec<Vec<f64>> = (0..*seq_len)
                .map(|_| (0..*input).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let target = rng.gen_range(1.0..5.0);
            let grad = model.gradient(&seq, target);
            Ok(compare(&grad, model.params().to_vec(), h, |p| {
                model.params_mut().copy_from_slice(p);
                (model.predict(&seq).expect("valid sequence") - target).powi(2)
            }))
        }
    }
}

fn compare(analytic: &[f64], mut params: Vec<f64>, h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(&params);
        params[i] = orig - h;
        let down = loss(&params);
        params[i] = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
    }
    worst
}

impl LstmModel {
    /// Gradient of the squared error of one sequence.
    pub(crate) fn gradient(&self, seq: &[Vec<f64>], target: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.params().len()];
        self.accumulate_padded(seq, target, &mut grad);
        grad
    }
}
