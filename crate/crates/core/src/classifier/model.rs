use serde::{Deserialize, Serialize};

use super::{ConfidenceVector, ImageTensor};
use crate::{Error, Result};

/// Parameters of the softmax-regression reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    class_names: Vec<String>,
    /// K x D, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    input_dims: (usize, usize),
}

/// Gradient of the training objective, same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn new(
        class_names: Vec<String>,
        weights: Vec<f64>,
        bias: Vec<f64>,
        input_dims: (usize, usize),
    ) -> Result<Self> {
        let k = class_names.len();
        let d = input_dims.0 * input_dims.1;
        if k == 0 {
            return Err(Error::InvalidConfig("model needs at least one class".into()));
        }
        if d == 0 {
            return Err(Error::InvalidConfig("input dims must be positive".into()));
        }
        if weights.len() != k * d || bias.len() != k {
            return Err(Error::MalformedModel(format!(
                "expected {k}x{d} weights and {k} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            class_names,
            weights,
            bias,
            input_dims,
        })
    }

    pub fn zeros(class_names: Vec<String>, input_dims: (usize, usize)) -> Result<Self> {
        let k = class_names.len();
        let d = input_dims.0 * input_dims.1;
        Self::new(class_names, vec![0.0; k * d], vec![0.0; k], input_dims)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dims(&self) -> (usize, usize) {
        self.input_dims
    }

    pub fn feature_len(&self) -> usize {
        self.input_dims.0 * self.input_dims.1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn row(&self, k: usize) -> &[f64] {
        let d = self.feature_len();
        &self.weights[k * d..(k + 1) * d]
    }

    pub(crate) fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = dot(self.row(k), x) + self.bias[k];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place softmax; returns log-sum-exp of the input logits.
pub(crate) fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// `softmax(W x + b)` in declared class order.
pub fn predict(params: &ModelParams, tensor: &ImageTensor) -> Result<ConfidenceVector> {
    if tensor.dims() != params.input_dims {
        return Err(Error::DimensionMismatch {
            expected: params.input_dims,
            got: tensor.dims(),
        });
    }
    let mut probs = vec![0.0; params.num_classes()];
    params.logits_into(tensor.pixels(), &mut probs);
    softmax_in_place(&mut probs);
    Ok(ConfidenceVector::from_parts(&params.class_names, &probs))
}

/// Mean cross-entropy over the batch plus `(l2 / 2) * ||W||²`, and its exact
/// gradient. The bias is not regularized.
///
/// # Panics
/// On an empty batch, a class index out of range or a tensor of the wrong size.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[(&ImageTensor, usize)],
    l2: f64,
) -> (f64, Gradient) {
    let rows: Vec<(&[f64], usize)> = batch.iter().map(|(t, c)| (t.pixels(), *c)).collect();
    loss_and_grad_raw(params, &rows, l2)
}

pub(crate) fn loss_and_grad_raw(
    params: &ModelParams,
    batch: &[(&[f64], usize)],
    l2: f64,
) -> (f64, Gradient) {
    assert!(!batch.is_empty(), "loss_and_grad needs a non-empty batch");
    let k = params.num_classes();
    let d = params.feature_len();
    let mut grad = Gradient {
        weights: vec![0.0; k * d],
        bias: vec![0.0; k],
    };
    let mut probs = vec![0.0; k];
    let mut ce = 0.0;
    for &(x, target) in batch {
        assert_eq!(x.len(), d, "tensor size does not match model input");
        assert!(target < k, "class index {target} out of range");
        params.logits_into(x, &mut probs);
        let true_logit = probs[target];
        let lse = softmax_in_place(&mut probs);
        ce += lse - true_logit;
        for (c, &p) in probs.iter().enumerate() {
            let delta = p - if c == target { 1.0 } else { 0.0 };
            grad.bias[c] += delta;
            let row = &mut grad.weights[c * d..(c + 1) * d];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += delta * xi;
            }
        }
    }
    let n = batch.len() as f64;
    let mut penalty = 0.0;
    for (g, w) in grad.weights.iter_mut().zip(&params.weights) {
        *g = *g / n + l2 * w;
        penalty += w * w;
    }
    for g in &mut grad.bias {
        *g /= n;
    }
    (ce / n + 0.5 * l2 * penalty, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn tensor(w: usize, h: usize, v: f64) -> ImageTensor {
        ImageTensor::new(w, h, vec![v; w * h]).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(names(3), (4, 3)).unwrap();
        let cv = predict(&p, &tensor(4, 3, 0.7)).unwrap();
        for e in &cv.entries {
            assert!((e.probability - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_first_bias_dominates() {
        let mut p = ModelParams::zeros(names(3), (2, 2)).unwrap();
        p.bias_mut().copy_from_slice(&[10.0, 0.0, 0.0]);
        let cv = predict(&p, &tensor(2, 2, 0.5)).unwrap();
        // e^10 / (e^10 + 2)
        let expected = 22026.465794806718 / (22026.465794806718 + 2.0);
        assert!((cv.entries[0].probability - expected).abs() < 1e-12);
        assert!(cv.entries[0].probability > 0.9999);
    }

    #[test]
    fn constant_logit_shift_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 4;
        let w: Vec<f64> = (0..k * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = ModelParams::new(names(k), w.clone(), b.clone(), (3, 2)).unwrap();
        let shifted =
            ModelParams::new(names(k), w, b.iter().map(|v| v + 123.25).collect(), (3, 2)).unwrap();
        let t = tensor(3, 2, 0.3);
        let a = predict(&base, &t).unwrap();
        let s = predict(&shifted, &t).unwrap();
        for (x, y) in a.entries.iter().zip(&s.entries) {
            assert!((x.probability - y.probability).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dims_rejected() {
        let p = ModelParams::zeros(names(2), (4, 3)).unwrap();
        let err = predict(&p, &tensor(3, 4, 0.0)).unwrap_err();
        assert_eq!(err.kind(), "DimensionMismatch");
    }

    #[test]
    fn uniform_prediction_loss_is_ln_k() {
        let p = ModelParams::zeros(names(3), (2, 2)).unwrap();
        let t = tensor(2, 2, 0.4);
        let (loss, _) = loss_and_grad(&p, &[(&t, 1)], 0.0);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut p = ModelParams::zeros(names(3), (2, 2)).unwrap();
        p.bias_mut().copy_from_slice(&[0.0, 60.0, 0.0]);
        let t = tensor(2, 2, 0.4);
        let (loss, _) = loss_and_grad(&p, &[(&t, 1)], 0.0);
        assert!(loss < 1e-20);
        // and huge wrong-class logits stay finite
        let (loss, _) = loss_and_grad(&p, &[(&t, 0)], 0.0);
        assert!(loss.is_finite() && (loss - 60.0).abs() < 1e-9);
    }

    #[test]
    fn l2_penalty_uses_half_squared_norm() {
        let p = ModelParams::new(names(1), vec![3.0, 4.0], vec![0.0], (2, 1)).unwrap();
        let t = tensor(2, 1, 0.0);
        let (loss, grad) = loss_and_grad(&p, &[(&t, 0)], 0.1);
        // single class: cross-entropy is 0
        assert!((loss - 0.05 * 25.0).abs() < 1e-12);
        assert!((grad.weights[0] - 0.3).abs() < 1e-12);
        assert!((grad.weights[1] - 0.4).abs() < 1e-12);
    }
}
