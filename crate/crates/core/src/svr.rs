//! ε-support-vector regression trained by sequential minimal optimization.
//!
//! The dual is solved in its 2n-variable form
//!
//! ```text
//! min  ½ aᵀQa + pᵀa   s.t.  yᵀa = 0,  0 ≤ a ≤ C
//! ```
//!
//! where `a = (α, α*)`, `y = (+1…, −1…)`, `Q = yyᵀ ∘ [[K, K], [K, K]]` and
//! `p = (ε − z, ε + z)`. Each step updates the maximal violating pair.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    Linear,
    /// `(x·y + coef0)^degree`
    Polynomial { degree: u32, coef0: f64 },
    /// `exp(−gamma ‖x − y‖²)`; a missing gamma resolves to `1 / dim`.
    Gaussian {
        #[serde(default)]
        gamma: Option<f64>,
    },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian { gamma: None }
    }
}

impl KernelSpec {
    pub fn gaussian(gamma: f64) -> Self {
        KernelSpec::Gaussian { gamma: Some(gamma) }
    }

    /// Fills in the default gamma for inputs of dimension `dim` and checks parameters.
    pub fn resolve(self, dim: usize) -> Result<Self> {
        match self {
            KernelSpec::Linear => Ok(self),
            KernelSpec::Polynomial { degree, coef0 } => {
                if degree == 0 || !coef0.is_finite() {
                    return Err(Error::Config("polynomial kernel needs degree ≥ 1 and finite coef0".into()));
                }
                Ok(self)
            }
            KernelSpec::Gaussian { gamma } => {
                let g = gamma.unwrap_or(1.0 / dim.max(1) as f64);
                if !(g.is_finite() && g > 0.0) {
                    return Err(Error::Config("gaussian kernel needs gamma > 0".into()));
                }
                Ok(KernelSpec::gaussian(g))
            }
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Polynomial { degree, coef0 } => (dot(a, b) + coef0).powi(degree as i32),
            KernelSpec::Gaussian { gamma } => {
                let g = gamma.expect("kernel resolved before use");
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-g * d2).exp()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Median,
    Min,
    Max,
}

/// Elementwise aggregation of a group's item vectors.
pub fn pool_features(vectors: &[&[f64]], method: Pooling) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::Empty("cannot pool an empty group"))?;
    let dim = first.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::dim(dim, v.len(), "pooled vectors"));
    }
    let n = vectors.len();
    let mut column = vec![0.0; n];
    let pooled = (0..dim)
        .map(|j| {
            for (c, v) in column.iter_mut().zip(vectors) {
                *c = v[j];
            }
            match method {
                Pooling::Mean => column.iter().sum::<f64>() / n as f64,
                Pooling::Min => column.iter().cloned().fold(f64::INFINITY, f64::min),
                Pooling::Max => column.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Pooling::Median => {
                    column.sort_by(f64::total_cmp);
                    if n % 2 == 1 {
                        column[n / 2]
                    } else {
                        0.5 * (column[n / 2 - 1] + column[n / 2])
                    }
                }
            }
        })
        .collect();
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrConfig {
    pub c: f64,
    pub epsilon: f64,
    /// Stop once the maximal KKT violation `m(a) − M(a)` falls below this.
    pub kkt_tolerance: f64,
    /// Iteration budget in units of the training-set size.
    pub max_passes: usize,
    /// Kernel row cache budget in megabytes.
    pub cache_mb: usize,
    pub seed: u64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 0.1,
            kkt_tolerance: 1e-3,
            max_passes: 200,
            cache_mb: 256,
            seed: 0,
        }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config("svr: c must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config("svr: epsilon must be non-negative".into()));
        }
        if !(self.kkt_tolerance.is_finite() && self.kkt_tolerance > 0.0) {
            return Err(Error::Config("svr: kkt_tolerance must be positive".into()));
        }
        if self.max_passes == 0 {
            return Err(Error::Config("svr: max_passes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub kernel: KernelSpec,
    pub dim: usize,
    pub support: Vec<Vec<f64>>,
    /// `α − α*` per support vector, within `[−c, c]`.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal KKT violation.
    pub kkt_residual: f64,
    /// Dual objective `½ aᵀQa + pᵀa` at the returned solution.
    pub dual_objective: f64,
}

impl SvrModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::dim(self.dim, x.len(), "svr input"));
        }
        Ok(self.predict_unchecked(x))
    }

    fn predict_unchecked(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * self.kernel.eval(s, x))
            .sum::<f64>()
            + self.bias
    }
}

pub fn predict_svr(model: &SvrModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Kernel rows over the training set with least-recently-used eviction.
struct RowCache<'a> {
    x: &'a [Vec<f64>],
    kernel: KernelSpec,
    rows: HashMap<usize, Vec<f64>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> RowCache<'a> {
    fn new(x: &'a [Vec<f64>], kernel: KernelSpec, cache_mb: usize) -> Self {
        let row_bytes = (x.len() * 8).max(1);
        Self {
            x,
            kernel,
            rows: HashMap::new(),
            order: VecDeque::new(),
            capacity: (cache_mb * 1024 * 1024 / row_bytes).max(2),
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let xi = &self.x[i];
            let row = self.x.iter().map(|xj| self.kernel.eval(xi, xj)).collect();
            self.rows.insert(i, row);
        } else if let Some(pos) = self.order.iter().position(|&k| k == i) {
            self.order.remove(pos);
        }
        self.order.push_back(i);
        &self.rows[&i]
    }
}

/// Trains an ε-SVR. Failing to reach `kkt_tolerance` within the iteration
/// budget is not an error: the model comes back with `converged = false`
/// and its residual.
pub fn train_svr(x: &[Vec<f64>], y: &[f64], kernel: KernelSpec, config: &SvrConfig) -> Result<SvrModel> {
    config.validate()?;
    let n = x.len();
    if n == 0 {
        return Err(Error::Empty("svr needs at least one sample"));
    }
    if y.len() != n {
        return Err(Error::dim(n, y.len(), "svr targets"));
    }
    let dim = x[0].len();
    for v in x {
        if v.len() != dim {
            return Err(Error::dim(dim, v.len(), "svr inputs"));
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("svr training data".into()));
        }
    }
    if y.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("svr training data".into()));
    }
    let kernel = kernel.resolve(dim)?;
    let c = config.c;
    let l = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let diag: Vec<f64> = x.iter().map(|v| kernel.eval(v, v)).collect();
    let mut alpha = vec![0.0; l];
    // a = 0, so the gradient starts at p
    let mut grad: Vec<f64> = (0..l)
        .map(|t| if t < n { config.epsilon - y[t] } else { config.epsilon + y[t - n] })
        .collect();
    let mut cache = RowCache::new(x, kernel, config.cache_mb);
    let mut scan: Vec<usize> = (0..l).collect();
    scan.shuffle(&mut seed::rng(seed::derive(config.seed, "svr-scan", 0)));

    let max_iter = config.max_passes.saturating_mul(n);
    let mut iterations = 0;
    let mut residual;
    loop {
        // maximal violating pair; ties go to the earlier index in the seeded scan order
        let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut gmin) = (usize::MAX, f64::INFINITY);
        for &t in &scan {
            let yt = sign(t);
            let v = -yt * grad[t];
            let up = if yt > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
            let low = if yt > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
            if up && v > gmax {
                gmax = v;
                i = t;
            }
            if low && v < gmin {
                gmin = v;
                j = t;
            }
        }
        residual = if i == usize::MAX || j == usize::MAX { 0.0 } else { gmax - gmin };
        if residual < config.kkt_tolerance || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let (yi, yj) = (sign(i), sign(j));
        let (bi, bj) = (i % n, j % n);
        let kij = cache.row(bi)[bj];
        let qij = yi * yj * kij;
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if yi != yj {
            let quad = (diag[bi] + diag[bj] + 2.0 * qij).max(1e-12);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (diag[bi] + diag[bj] - 2.0 * qij).max(1e-12);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        debug_assert!(alpha[i] >= 0.0 && alpha[i] <= c && alpha[j] >= 0.0 && alpha[j] <= c);

        // G_t += Q_ti Δa_i + Q_tj Δa_j, with Q_ts = y_t y_s K(t mod n, s mod n)
        let di = (alpha[i] - old_i) * yi;
        let dj = (alpha[j] - old_j) * yj;
        let ri = cache.row(bi).to_vec();
        let rj = cache.row(bj);
        for k in 0..n {
            let s = ri[k] * di + rj[k] * dj;
            grad[k] += s;
            grad[k + n] -= s;
        }
    }
    let converged = residual < config.kkt_tolerance;
    if !converged {
        log::warn!("svr stopped after {iterations} iterations with KKT residual {residual:.3e}");
    }

    // bias from the free variables, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut n_free) = (0.0, 0usize);
    for t in 0..l {
        let yg = sign(t) * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            n_free += 1;
        }
    }
    let rho = if n_free > 0 { free_sum / n_free as f64 } else { 0.5 * (ub + lb) };

    let p_dot: f64 = (0..l)
        .map(|t| alpha[t] * if t < n { config.epsilon - y[t] } else { config.epsilon + y[t - n] })
        .sum();
    // ½ aᵀQa + pᵀa = ½ aᵀ(G + p)
    let dual_objective = 0.5 * ((0..l).map(|t| alpha[t] * grad[t]).sum::<f64>() + p_dot);

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for k in 0..n {
        let beta = alpha[k] - alpha[k + n];
        if beta != 0.0 {
            support.push(x[k].clone());
            coef.push(beta);
        }
    }
    Ok(SvrModel {
        kernel,
        dim,
        support,
        coef,
        bias: -rho,
        c,
        epsilon: config.epsilon,
        iterations,
        converged,
        kkt_residual: residual,
        dual_objective,
    })
}

/// As [`train_svr`] after sorting samples by `ids`, so the model does not
/// depend on the order samples arrive in.
pub fn train_svr_keyed(ids: &[&str], x: &[Vec<f64>], y: &[f64], kernel: KernelSpec, config: &SvrConfig) -> Result<SvrModel> {
    if ids.len() != x.len() || ids.len() != y.len() {
        return Err(Error::dim(ids.len(), x.len(), "svr ids vs samples"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
    let xs: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    train_svr(&xs, &ys, kernel, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn dual_objective(alpha: &[f64], k: &[Vec<f64>], y: &[f64], eps: f64) -> f64 {
        let n = y.len();
        let beta: Vec<f64> = (0..n).map(|i| alpha[i] - alpha[i + n]).collect();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += beta[i] * beta[j] * k[i][j];
            }
        }
        let lin: f64 = (0..n).map(|i| eps * (alpha[i] + alpha[i + n]) - y[i] * beta[i]).sum();
        0.5 * quad + lin
    }

    /// Projection onto {0 ≤ a ≤ c, Σ a_i − Σ a*_i = 0} by bisection on the multiplier.
    fn project(u: &[f64], c: f64) -> Vec<f64> {
        let n = u.len() / 2;
        let at = |lam: f64| -> (Vec<f64>, f64) {
            let v: Vec<f64> = (0..2 * n)
                .map(|t| {
                    let s = if t < n { 1.0 } else { -1.0 };
                    (u[t] - lam * s).clamp(0.0, c)
                })
                .collect();
            let bal = v[..n].iter().sum::<f64>() - v[n..].iter().sum::<f64>();
            (v, bal)
        };
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if at(mid).1 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi)).0
    }

    /// Accelerated projected gradient on the 2n-variable dual.
    fn brute_force_dual(k: &[Vec<f64>], y: &[f64], c: f64, eps: f64) -> (Vec<f64>, f64) {
        let n = y.len();
        let grad = |a: &[f64]| -> Vec<f64> {
            let beta: Vec<f64> = (0..n).map(|i| a[i] - a[i + n]).collect();
            let kb: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i][j] * beta[j]).sum()).collect();
            (0..2 * n)
                .map(|t| if t < n { kb[t] + eps - y[t] } else { -kb[t - n] + eps + y[t - n] })
                .collect()
        };
        // Lipschitz constant of the dual gradient is 2 λmax(K)
        let lmax = power_iteration(k) * 2.0 + 1e-9;
        let mut a = vec![0.0; 2 * n];
        let mut z = a.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            let g = grad(&z);
            let step: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - gi / lmax).collect();
            let next = project(&step, c);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            z = next
                .iter()
                .zip(&a)
                .map(|(nv, av)| nv + (t - 1.0) / t_next * (nv - av))
                .collect();
            a = next;
            t = t_next;
        }
        let obj = dual_objective(&a, k, y, eps);
        (a, obj)
    }

    fn power_iteration(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = (0..n).map(|i| dot(&m[i], &v)).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = dot(&v, &w);
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }

    fn gram(x: &[Vec<f64>], kernel: KernelSpec) -> Vec<Vec<f64>> {
        x.iter().map(|a| x.iter().map(|b| kernel.eval(a, b)).collect()).collect()
    }

    /// ½‖w‖² + C Σ max(0, |f(x_i) − y_i| − ε) with `f = Σ β_j k(x_j, ·) + b`.
    fn primal(beta: &[f64], b: f64, k: &[Vec<f64>], y: &[f64], c: f64, eps: f64) -> f64 {
        let n = y.len();
        let mut reg = 0.0;
        let mut loss = 0.0;
        for i in 0..n {
            let fi: f64 = (0..n).map(|j| beta[j] * k[i][j]).sum::<f64>() + b;
            loss += ((fi - y[i]).abs() - eps).max(0.0);
            for j in 0..n {
                reg += 0.5 * beta[i] * beta[j] * k[i][j];
            }
        }
        reg + c * loss
    }

    /// The primal is piecewise linear in b, so its minimum sits at a breakpoint.
    fn best_bias(beta: &[f64], k: &[Vec<f64>], y: &[f64], c: f64, eps: f64) -> f64 {
        let n = y.len();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..n {
            let g: f64 = (0..n).map(|j| beta[j] * k[i][j]).sum();
            for b in [y[i] - g - eps, y[i] - g + eps] {
                let p = primal(beta, b, k, y, c, eps);
                if p < best.0 {
                    best = (p, b);
                }
            }
        }
        best.1
    }

    fn instance(seed_: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = seed::rng(seed_);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y = x.iter().map(|v| 3.0 + v[0] - 0.5 * v[dim - 1] + rng.gen_range(-0.3..0.3)).collect();
        (x, y)
    }

    fn tight() -> SvrConfig {
        SvrConfig {
            kkt_tolerance: 1e-10,
            max_passes: 100_000,
            ..SvrConfig::default()
        }
    }

    #[test]
    fn pooling_examples() {
        let a = [1.0, 4.0];
        let b = [3.0, 2.0];
        assert_eq!(pool_features(&[&a, &b], Pooling::Mean).unwrap(), vec![2.0, 3.0]);
        assert_eq!(pool_features(&[&a, &b], Pooling::Max).unwrap(), vec![3.0, 4.0]);
        assert_eq!(pool_features(&[&a, &b], Pooling::Min).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool_features(&[&a, &b, &[2.0, 9.0]], Pooling::Median).unwrap(), vec![2.0, 4.0]);
        for m in [Pooling::Mean, Pooling::Median, Pooling::Min, Pooling::Max] {
            assert_eq!(pool_features(&[&a], m).unwrap(), a.to_vec());
        }
        assert!(pool_features(&[], Pooling::Mean).is_err());
        assert!(pool_features(&[&a, &[1.0]], Pooling::Mean).is_err());
    }

    #[test]
    fn five_point_linear_matches_brute_force_dual() {
        let (x, y) = instance(11, 5, 2);
        let cfg = tight();
        let model = train_svr(&x, &y, KernelSpec::Linear, &cfg).unwrap();
        assert!(model.converged);
        let k = gram(&x, KernelSpec::Linear);
        let (_, oracle) = brute_force_dual(&k, &y, cfg.c, cfg.epsilon);
        assert!((model.dual_objective - oracle).abs() < 1e-6, "{} vs {oracle}", model.dual_objective);
    }

    #[test]
    fn primal_never_worse_than_oracle() {
        for (s, kernel) in [
            (1, KernelSpec::Linear),
            (2, KernelSpec::gaussian(0.7)),
            (3, KernelSpec::Polynomial { degree: 2, coef0: 1.0 }),
            (4, KernelSpec::Linear),
        ] {
            let n = 6 + s as usize;
            let (x, y) = instance(s, n, 3);
            let cfg = SvrConfig { c: 2.0, ..tight() };
            let model = train_svr(&x, &y, kernel, &cfg).unwrap();
            let k = gram(&x, model.kernel);
            // coefficients back in training order
            let beta: Vec<f64> = x
                .iter()
                .map(|xi| {
                    model
                        .support
                        .iter()
                        .position(|s| s == xi)
                        .map_or(0.0, |p| model.coef[p])
                })
                .collect();
            let ours = primal(&beta, model.bias, &k, &y, cfg.c, cfg.epsilon);
            let (a, _) = brute_force_dual(&k, &y, cfg.c, cfg.epsilon);
            let ob: Vec<f64> = (0..n).map(|i| a[i] - a[i + n]).collect();
            let oracle = primal(&ob, best_bias(&ob, &k, &y, cfg.c, cfg.epsilon), &k, &y, cfg.c, cfg.epsilon);
            assert!(ours <= oracle + 1e-6, "{kernel:?}: {ours} vs {oracle}");
        }
    }

    #[test]
    fn constant_targets_give_bias_only() {
        let (x, _) = instance(5, 20, 3);
        let y = vec![2.5; 20];
        let model = train_svr(&x, &y, KernelSpec::default(), &SvrConfig::default()).unwrap();
        assert!(model.support.is_empty());
        for v in &x {
            assert!((model.predict(v).unwrap() - 2.5).abs() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn single_point_within_tube() {
        let x = vec![vec![0.4, -0.2]];
        let model = train_svr(&x, &[3.3], KernelSpec::default(), &SvrConfig::default()).unwrap();
        assert!((model.predict(&x[0]).unwrap() - 3.3).abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn prediction_by_hand() {
        let empty = SvrModel {
            kernel: KernelSpec::Linear,
            dim: 2,
            support: vec![],
            coef: vec![],
            bias: 0.7,
            c: 1.0,
            epsilon: 0.1,
            iterations: 0,
            converged: true,
            kkt_residual: 0.0,
            dual_objective: 0.0,
        };
        assert_eq!(predict_svr(&empty, &[5.0, 6.0]).unwrap(), 0.7);
        let linear = SvrModel {
            support: vec![vec![1.0, 2.0], vec![0.0, -1.0]],
            coef: vec![0.5, -0.25],
            ..empty.clone()
        };
        // w = (0.5, 1.25); w·(2, 4) + 0.7 = 1 + 5 + 0.7
        assert!((linear.predict(&[2.0, 4.0]).unwrap() - 6.7).abs() < 1e-12);
        let gauss = SvrModel {
            kernel: KernelSpec::gaussian(3.0),
            support: vec![vec![1.0, 1.0]],
            coef: vec![0.4],
            ..empty
        };
        assert!((gauss.predict(&[1.0, 1.0]).unwrap() - 1.1).abs() < 1e-12);
        assert!(gauss.predict(&[1.0]).is_err());
    }

    #[test]
    fn gram_matrices_are_psd() {
        let (x, _) = instance(7, 25, 4);
        for kernel in [
            KernelSpec::Linear,
            KernelSpec::gaussian(0.5),
            KernelSpec::Polynomial { degree: 3, coef0: 1.0 },
        ] {
            let k = gram(&x, kernel);
            for i in 0..k.len() {
                for j in 0..k.len() {
                    assert_eq!(k[i][j], k[j][i]);
                }
            }
            // min eigenvalue of K via the largest eigenvalue of (λmax I − K)
            let top = power_iteration(&k);
            let shifted: Vec<Vec<f64>> = (0..k.len())
                .map(|i| (0..k.len()).map(|j| if i == j { top - k[i][j] } else { -k[i][j] }).collect())
                .collect();
            let min_eig = top - power_iteration(&shifted);
            assert!(min_eig >= -1e-8 * top.max(1.0), "{kernel:?}: {min_eig}");
        }
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let (x, y) = instance(8, 40, 3);
        let cfg = SvrConfig {
            kkt_tolerance: 1e-14,
            max_passes: 1,
            ..SvrConfig::default()
        };
        let model = train_svr(&x, &y, KernelSpec::default(), &cfg).unwrap();
        assert!(!model.converged);
        assert!(model.kkt_residual >= 1e-14);
    }

    #[test]
    fn tiny_cache_gives_same_model() {
        let (x, y) = instance(12, 60, 3);
        let a = train_svr(&x, &y, KernelSpec::default(), &SvrConfig::default()).unwrap();
        let b = train_svr(&x, &y, KernelSpec::default(), &SvrConfig { cache_mb: 0, ..SvrConfig::default() }).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn box_constraints_and_order_invariance(s in 0u64..1000, n in 2usize..30) {
            let (x, y) = instance(s, n, 3);
            let cfg = SvrConfig { c: 0.5, seed: s, ..SvrConfig::default() };
            let model = train_svr(&x, &y, KernelSpec::default(), &cfg).unwrap();
            prop_assert!(model.coef.iter().all(|c| c.abs() <= cfg.c + 1e-12));
            prop_assert!(model.coef.iter().sum::<f64>().abs() < 1e-9);

            let ids: Vec<String> = (0..n).map(|i| format!("id{i:03}")).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seed::rng(s + 1));
            let ids_p: Vec<&str> = perm.iter().map(|&i| ids[i].as_str()).collect();
            let x_p: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
            let y_p: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
            let a = train_svr_keyed(&id_refs, &x, &y, KernelSpec::default(), &cfg).unwrap();
            let b = train_svr_keyed(&ids_p, &x_p, &y_p, KernelSpec::default(), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
