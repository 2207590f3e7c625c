use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, Provenance};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Rectifier,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Softmax5,
    Regression1,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Softmax5 => 5,
            HeadKind::Regression1 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractMode {
    LastLayer,
    AllLayers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Target {
    Class(usize),
    Value(f64),
}

/// Fully connected network: rectified hidden layers, identity output layer.
///
/// Parameters live in one flat vector, layer by layer, each layer's weight
/// matrix (row-major, `out x in`) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    head: HeadKind,
    /// Dropout probability applied to each hidden layer's output while training.
    dropout: Vec<f64>,
    /// Layers at or after this index belong to the head.
    head_from: usize,
    params: Vec<f64>,
}

fn xavier_fill(rng: &mut Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in out {
        *w = rng.gen_range(-limit..limit);
    }
}

impl MlpModel {
    /// Xavier-initialized network `input -> hidden... -> head`.
    pub fn new(input: usize, hidden: &[usize], head: HeadKind, rng: &mut Rng) -> Result<Self> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(head.outputs());
        let n_layers = sizes.len() - 1;
        let mut activations = vec![Activation::Rectifier; n_layers];
        activations[n_layers - 1] = Activation::Identity;
        let n_params = (0..n_layers).map(|l| sizes[l + 1] * (sizes[l] + 1)).sum();
        let mut model = Self {
            sizes,
            activations,
            head,
            dropout: vec![0.0; n_layers - 1],
            head_from: n_layers - 1,
            params: vec![0.0; n_params],
        };
        model.reinit_from(0, rng);
        Ok(model)
    }

    /// Re-draws Xavier weights (and zeroes biases) for layers `from..`.
    pub fn reinit_from(&mut self, from: usize, rng: &mut Rng) {
        for l in from..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_ranges(l);
            xavier_fill(rng, &mut self.params[w], fan_in, fan_out);
            self.params[b].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sets dropout probability `p` on the outputs of hidden layers `from..`.
    pub fn with_dropout(mut self, from: usize, p: f64) -> Self {
        self.dropout.iter_mut().skip(from).for_each(|d| *d = p);
        self
    }

    pub fn with_head_from(mut self, layer: usize) -> Self {
        self.head_from = layer.min(self.n_layers() - 1);
        self
    }

    /// Keeps this network's hidden layers and replaces the output layer with
    /// freshly initialized `head_hidden` layers and a `head` output. Dropout
    /// `p` applies to the new hidden layers, which train as the head.
    pub fn with_new_head(&self, head_hidden: &[usize], head: HeadKind, p: f64, rng: &mut Rng) -> Result<Self> {
        let keep = self.n_layers() - 1;
        let hidden: Vec<usize> = self.hidden_sizes().iter().chain(head_hidden).copied().collect();
        let mut model = MlpModel::new(self.input_dim(), &hidden, head, rng)?;
        let shared = self.layer_offset(keep);
        model.params[..shared].copy_from_slice(&self.params[..shared]);
        Ok(model.with_dropout(keep, p).with_head_from(keep))
    }

    /// Verifies that the stored shapes and parameter count agree, for models
    /// read back from disk.
    pub fn check(&self) -> Result<()> {
        let n_layers = self.sizes.len().saturating_sub(1);
        if n_layers == 0 || self.sizes.contains(&0) {
            return Err(Error::Data("network needs positive layer sizes".into()));
        }
        if self.activations.len() != n_layers || self.dropout.len() != n_layers - 1 {
            return Err(Error::Data("network layer metadata is inconsistent".into()));
        }
        if self.sizes[n_layers] != self.head.outputs() || self.head_from >= n_layers {
            return Err(Error::Data("network head does not match its output layer".into()));
        }
        let n: usize = (0..n_layers).map(|l| self.sizes[l + 1] * (self.sizes[l] + 1)).sum();
        if self.params.len() != n {
            return Err(Error::dim(n, self.params.len(), "network parameters"));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn head_from(&self) -> usize {
        self.head_from
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Hidden widths, i.e. the dimensions `extract_activations` can return.
    pub fn hidden_sizes(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer).map(|l| self.sizes[l + 1] * (self.sizes[l] + 1)).sum()
    }

    fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off = self.layer_offset(layer);
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let w_end = off + n_in * n_out;
        (off..w_end, w_end..w_end + n_out)
    }

    /// Parameter index range of the head layers.
    pub fn head_param_start(&self) -> usize {
        self.layer_offset(self.head_from)
    }

    fn affine(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let (w, b) = self.layer_ranges(layer);
        let (w, b) = (&self.params[w], &self.params[b]);
        let n_in = input.len();
        out.clear();
        out.extend(b.iter().enumerate().map(|(o, &bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        }));
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len(), "network input"));
        }
        Ok(())
    }

    /// Output layer values (logits for the softmax head). No dropout.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.n_layers() {
            self.affine(l, &cur, &mut next);
            if self.activations[l] == Activation::Rectifier {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Scalar prediction of a regression head.
    pub fn predict_value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?[0])
    }

    /// Class probabilities of a softmax head.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(x)?))
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        let out = self.forward(x)?;
        Ok(argmax(&out))
    }

    /// Post-activation outputs of every hidden layer.
    pub fn hidden_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.n_layers() - 1);
        let mut cur = x.to_vec();
        for l in 0..self.n_layers() - 1 {
            let mut next = Vec::new();
            self.affine(l, &cur, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            out.push(next.clone());
            cur = next;
        }
        Ok(out)
    }

    /// Loss of one sample; adds its gradient into `grad`. With `dropout_rng`
    /// set, hidden outputs are dropped (inverted scaling) per `dropout`.
    pub(crate) fn accumulate(
        &self,
        x: &[f64],
        target: Target,
        grad: &mut [f64],
        mut dropout_rng: Option<&mut Rng>,
    ) -> f64 {
        let n_layers = self.n_layers();
        // inputs[l] is the input of layer l; pre[l] its pre-activation
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut masks: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_layers);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        inputs.push(x.to_vec());
        for l in 0..n_layers {
            let mut z = Vec::new();
            self.affine(l, &inputs[l], &mut z);
            let mut a: Vec<f64> = match self.activations[l] {
                Activation::Rectifier => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            let mut mask = None;
            if l + 1 < n_layers {
                let p = self.dropout[l];
                if p > 0.0 {
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        let keep = 1.0 - p;
                        let m: Vec<f64> = (0..a.len())
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        a.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                        mask = Some(m);
                    }
                }
            }
            masks.push(mask);
            pre.push(z);
            inputs.push(a);
        }
        let out = &inputs[n_layers];
        let (loss, mut delta) = match target {
            Target::Class(c) => {
                let p = softmax(out);
                let loss = -p[c].max(f64::MIN_POSITIVE).ln();
                let mut d = p;
                d[c] -= 1.0;
                (loss, d)
            }
            Target::Value(y) => {
                let r = out[0] - y;
                (r * r, vec![2.0 * r])
            }
        };
        for l in (0..n_layers).rev() {
            // delta is dL/da_l on entry (a_l = output of layer l after mask)
            if let Some(m) = &masks[l] {
                delta.iter_mut().zip(m).for_each(|(d, s)| *d *= s);
            }
            if self.activations[l] == Activation::Rectifier {
                delta.iter_mut().zip(&pre[l]).for_each(|(d, z)| {
                    if *z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let (w_range, b_range) = self.layer_ranges(l);
            let input = &inputs[l];
            let n_in = input.len();
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_range.start + o * n_in..w_range.start + (o + 1) * n_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                grad[b_range.start + o] += d;
            }
            if l > 0 {
                let w = &self.params[w_range];
                let mut prev = vec![0.0; n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[o * n_in..(o + 1) * n_in];
                    prev.iter_mut().zip(row).for_each(|(p, wv)| *p += d * wv);
                }
                delta = prev;
            }
        }
        loss
    }

    /// Loss without dropout and without gradient.
    pub(crate) fn loss(&self, x: &[f64], target: Target) -> f64 {
        let out = self.forward_unchecked(x);
        match target {
            Target::Class(c) => -softmax(&out)[c].max(f64::MIN_POSITIVE).ln(),
            Target::Value(y) => (out[0] - y).powi(2),
        }
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs every vector of `features` through `model` and keeps the penultimate
/// activations (`LastLayer`) or the concatenation of all hidden layers
/// (`AllLayers`).
pub fn extract_activations(model: &MlpModel, features: &FeatureSet, mode: ExtractMode) -> Result<FeatureSet> {
    if features.dim() != model.input_dim() {
        return Err(Error::dim(model.input_dim(), features.dim(), "extraction input"));
    }
    if model.hidden_sizes().is_empty() {
        return Err(Error::Config("model has no hidden layers to extract".into()));
    }
    let (dim, provenance) = match mode {
        ExtractMode::LastLayer => (*model.hidden_sizes().last().unwrap(), Provenance::LastLayer),
        ExtractMode::AllLayers => (model.hidden_sizes().iter().sum(), Provenance::AllLayers),
    };
    let mut out = FeatureSet::new(dim, provenance);
    for (id, x) in features.iter() {
        let layers = model.hidden_activations(x)?;
        let vector = match mode {
            ExtractMode::LastLayer => layers.into_iter().last().unwrap(),
            ExtractMode::AllLayers => layers.concat(),
        };
        out.insert(id.to_string(), vector)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn features(dim: usize, n: usize) -> FeatureSet {
        let mut fs = FeatureSet::new(dim, Provenance::Raw);
        for i in 0..n {
            fs.insert(format!("i{i}"), (0..dim).map(|j| ((i + j) as f64).sin()).collect())
                .unwrap();
        }
        fs
    }

    #[test]
    fn extraction_dims() {
        let model = MlpModel::new(8, &[32, 16], HeadKind::Softmax5, &mut seed::rng(1)).unwrap();
        let fs = features(8, 3);
        let last = extract_activations(&model, &fs, ExtractMode::LastLayer).unwrap();
        let all = extract_activations(&model, &fs, ExtractMode::AllLayers).unwrap();
        assert_eq!(last.dim(), 16);
        assert_eq!(all.dim(), 48);
        assert_eq!(last.provenance(), Provenance::LastLayer);
        assert_eq!(all.provenance(), Provenance::AllLayers);
        // the last 16 entries of all-layers are the last-layer vector
        assert_eq!(&all.get("i1").unwrap()[32..], last.get("i1").unwrap());
        assert_eq!(extract_activations(&model, &fs, ExtractMode::AllLayers).unwrap(), all);
    }

    #[test]
    fn zero_model_extracts_zeros() {
        let mut model = MlpModel::new(4, &[3, 2], HeadKind::Regression1, &mut seed::rng(2)).unwrap();
        model.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = extract_activations(&model, &features(4, 5), ExtractMode::AllLayers).unwrap();
        assert!(out.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn extraction_dimension_mismatch() {
        let model = MlpModel::new(4, &[3], HeadKind::Regression1, &mut seed::rng(2)).unwrap();
        assert!(matches!(
            extract_activations(&model, &features(5, 2), ExtractMode::LastLayer),
            Err(Error::Dimension { .. })
        ));
        assert!(model.forward(&[1.0; 3]).is_err());
    }

    #[test]
    fn evaluation_ignores_dropout() {
        let model = MlpModel::new(4, &[8, 8], HeadKind::Regression1, &mut seed::rng(3))
            .unwrap()
            .with_dropout(0, 0.5);
        let x = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
        assert_eq!(model.loss(&x, Target::Value(1.0)), model.loss(&x, Target::Value(1.0)));
    }

    #[test]
    fn new_head_keeps_backbone() {
        let mut rng = crate::seed::rng(2);
        let base = MlpModel::new(4, &[6, 5], HeadKind::Softmax5, &mut rng).unwrap();
        let e2e = base.with_new_head(&[7], HeadKind::Regression1, 0.25, &mut rng).unwrap();
        assert_eq!(e2e.sizes(), &[4, 6, 5, 7, 1]);
        assert_eq!(e2e.head_from(), 2);
        let x = [0.1, -0.4, 0.9, 0.3];
        let a = base.hidden_activations(&x).unwrap();
        let b = e2e.hidden_activations(&x).unwrap();
        assert_eq!(a[..], b[..2]);
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
    }
}
