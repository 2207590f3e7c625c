/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v - lr * g`, `theta <- theta + v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(n_params: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    /// One update with a per-parameter learning rate given by `lr_of(i)`.
    pub fn step_with(&mut self, params: &mut [f64], grad: &[f64], lr_of: impl Fn(usize) -> f64) {
        debug_assert_eq!(params.len(), grad.len());
        for (i, ((p, g), v)) in params.iter_mut().zip(grad).zip(&mut self.velocity).enumerate() {
            *v = self.momentum * *v - lr_of(i) * g;
            *p += *v;
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step_with(params, grad, |_| lr);
    }
}
