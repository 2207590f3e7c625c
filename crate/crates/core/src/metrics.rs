//! Correlation and classification metrics.
//!
//! SROCC is computed literally as PLCC on average-rank vectors, so tie
//! handling and the rank/Pearson identity hold by construction. Constant
//! inputs are an error rather than a NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub plcc: f64,
    pub srocc: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            plcc: plcc(pred, truth)?,
            srocc: srocc(pred, truth)?,
            n: pred.len(),
        })
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(x.len(), y.len(), "correlation inputs"));
    }
    if x.len() < 2 {
        return Err(Error::Empty("correlation needs at least two samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson product-moment correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("first input is constant"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("second input is constant"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank-order correlation with average ranks on ties.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim(pred.len(), truth.len(), "accuracy inputs"));
    }
    if pred.is_empty() {
        return Err(Error::Empty("accuracy of zero samples"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of samples in each of `n_classes` classes.
pub fn class_distribution(classes: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if classes.is_empty() {
        return Err(Error::Empty("class distribution of zero samples"));
    }
    let mut counts = vec![0usize; n_classes];
    for &c in classes {
        if c >= n_classes {
            return Err(Error::Data(format!("class {c} out of range 0..{n_classes}")));
        }
        counts[c] += 1;
    }
    let n = classes.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population (divide-by-n) standard deviation.
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "MeanStd of empty slice");
        let m = mean(values);
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
        Self {
            mean: m,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub plcc: MeanStd,
    pub srocc: MeanStd,
    pub replicates: usize,
}

/// Convention string recorded next to every aggregate.
pub const STD_CONVENTION: &str = "population";

pub fn aggregate(summaries: &[MetricSummary]) -> Result<Aggregate> {
    if summaries.is_empty() {
        return Err(Error::Empty("aggregate of zero replicates"));
    }
    let plccs: Vec<f64> = summaries.iter().map(|s| s.plcc).collect();
    let sroccs: Vec<f64> = summaries.iter().map(|s| s.srocc).collect();
    Ok(Aggregate {
        plcc: MeanStd::of(&plccs),
        srocc: MeanStd::of(&sroccs),
        replicates: summaries.len(),
    })
}
