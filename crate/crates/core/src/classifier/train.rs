use std::sync::Arc;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad_raw, softmax_in_place};
use super::{ImageTensor, ModelParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub input_dims: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 32,
            l2: 1e-4,
            seed: 0,
            input_dims: (64, 48),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be non-negative".into()));
        }
        if self.input_dims.0 == 0 || self.input_dims.1 == 0 {
            return Err(Error::InvalidConfig("input_dims must be positive".into()));
        }
        Ok(())
    }
}

/// One training row. Replicated manifest rows share their tensor.
#[derive(Debug, Clone)]
pub struct Example {
    pub tensor: Arc<ImageTensor>,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub final_loss: f64,
    pub train_acc: f64,
    /// `None` when the validation set is empty.
    pub val_acc: Option<f64>,
    pub epochs_run: usize,
    /// Mean mini-batch loss of every epoch, in order.
    pub loss_history: Vec<f64>,
}

/// Seeded mini-batch gradient descent from zero-initialized parameters.
///
/// Runs every epoch (no early stopping). Fully deterministic for fixed inputs
/// and config.
pub fn train(
    train_set: &[Example],
    validation_set: &[Example],
    class_names: &[String],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainMetrics)> {
    config.validate()?;
    let k = class_names.len();
    let mut seen = vec![false; k];
    for ex in train_set.iter().chain(validation_set) {
        if ex.class_index >= k {
            return Err(Error::InvalidConfig(format!(
                "class index {} out of range for {k} classes",
                ex.class_index
            )));
        }
        if ex.tensor.dims() != config.input_dims {
            return Err(Error::DimensionMismatch {
                expected: config.input_dims,
                got: ex.tensor.dims(),
            });
        }
    }
    for ex in train_set {
        seen[ex.class_index] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass(class_names[missing].clone()));
    }

    let mut params = ModelParams::zeros(class_names.to_vec(), config.input_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (train_set[i].tensor.pixels(), train_set[i].class_index))
                .collect();
            let (loss, grad) = loss_and_grad_raw(&params, &batch, config.l2);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            for (w, g) in params.weights_mut().iter_mut().zip(&grad.weights) {
                *w -= config.learning_rate * g;
            }
            for (b, g) in params.bias_mut().iter_mut().zip(&grad.bias) {
                *b -= config.learning_rate * g;
            }
        }
        let mean = epoch_loss / train_set.len() as f64;
        if !mean.is_finite() || params.weights().iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }

    let metrics = TrainMetrics {
        final_loss: *history.last().expect("epochs > 0"),
        train_acc: accuracy(&params, train_set),
        val_acc: (!validation_set.is_empty()).then(|| accuracy(&params, validation_set)),
        epochs_run: history.len(),
        loss_history: history,
    };
    Ok((params, metrics))
}

/// Fraction of examples whose argmax (ties to lowest index) matches the label.
pub(crate) fn accuracy(params: &ModelParams, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut probs = vec![0.0; params.num_classes()];
    let correct = examples
        .iter()
        .filter(|ex| {
            params.logits_into(ex.tensor.pixels(), &mut probs);
            softmax_in_place(&mut probs);
            argmax(&probs) == ex.class_index
        })
        .count();
    correct as f64 / examples.len() as f64
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
