//! Pluggable image classifiers.
//!
//! A backend turns a serialized model blob into a loaded classifier that maps
//! PNG bytes to a [`ConfidenceVector`]. The reference backend, `softmax-v1`,
//! is multinomial logistic regression over downsampled grayscale pixels.

mod backend;
mod blob;
mod model;
mod preprocess;
mod train;

use serde::{Deserialize, Serialize};

pub use backend::{
    check_conformance, BackendRegistry, ClassifierBackend, LoadedClassifier, SoftmaxBackend,
    SOFTMAX_BACKEND,
};
pub use blob::{decode_model, encode_model, ModelHeader, BLOB_MAGIC, BLOB_VERSION};
pub use model::{loss_and_grad, predict, Gradient, ModelParams};
pub use preprocess::{bilinear_resample, preprocess};
pub use train::{train, Example, TrainConfig, TrainMetrics};

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> crate::Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(crate::Error::DimensionMismatch {
                expected: (width, height),
                got: (pixels.len(), 1),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(crate::Error::CorruptImage(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class_name: String,
    pub probability: f64,
}

/// Per-class probabilities in the model's declared class order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceVector {
    pub entries: Vec<ClassConfidence>,
}

impl ConfidenceVector {
    pub fn from_parts(class_names: &[String], probabilities: &[f64]) -> Self {
        debug_assert_eq!(class_names.len(), probabilities.len());
        Self {
            entries: class_names
                .iter()
                .zip(probabilities)
                .map(|(c, &p)| ClassConfidence {
                    class_name: c.clone(),
                    probability: p,
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.class_name.as_str())
    }

    pub fn probability(&self, class_name: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.class_name == class_name)
            .map(|e| e.probability)
    }

    /// Index, class and probability of the most likely class. Ties go to the
    /// lowest index. `None` for an empty vector.
    pub fn argmax(&self) -> Option<(usize, &str, f64)> {
        let mut best: Option<(usize, &ClassConfidence)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            match best {
                Some((_, b)) if e.probability <= b.probability => {}
                _ => best = Some((i, e)),
            }
        }
        best.map(|(i, e)| (i, e.class_name.as_str(), e.probability))
    }

    /// Checks non-negativity and that probabilities sum to one within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let mut sum = 0.0;
        for e in &self.entries {
            if !e.probability.is_finite() || e.probability < 0.0 {
                return false;
            }
            sum += e.probability;
        }
        !self.entries.is_empty() && (sum - 1.0).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(p: &[f64]) -> ConfidenceVector {
        let names: Vec<String> = (0..p.len()).map(|i| format!("c{i}")).collect();
        ConfidenceVector::from_parts(&names, p)
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(cv(&[0.4, 0.4, 0.2]).argmax().unwrap().0, 0);
        assert_eq!(cv(&[0.2, 0.4, 0.4]).argmax().unwrap().0, 1);
        assert!(cv(&[]).argmax().is_none());
    }

    #[test]
    fn tensor_rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(2, 1, vec![0.0, 1.0]).is_ok());
    }
}
