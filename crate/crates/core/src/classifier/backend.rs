use std::collections::BTreeMap;
use std::sync::Arc;

use super::{decode_model, predict, preprocess, ConfidenceVector, ModelParams};
use crate::{Error, Result};

pub const SOFTMAX_BACKEND: &str = "softmax-v1";

/// Factory turning a model blob into a ready-to-use classifier.
pub trait ClassifierBackend: Send + Sync {
    fn name(&self) -> &str;
    fn load(&self, blob: &[u8]) -> Result<Arc<dyn LoadedClassifier>>;
}

/// A loaded, immutable classifier. Inference may run concurrently.
pub trait LoadedClassifier: Send + Sync {
    fn class_names(&self) -> &[String];
    fn infer(&self, png_bytes: &[u8]) -> Result<ConfidenceVector>;
}

pub struct SoftmaxBackend;

struct SoftmaxClassifier {
    params: ModelParams,
}

impl ClassifierBackend for SoftmaxBackend {
    fn name(&self) -> &str {
        SOFTMAX_BACKEND
    }

    fn load(&self, blob: &[u8]) -> Result<Arc<dyn LoadedClassifier>> {
        let (header, params) = decode_model(blob)?;
        if header.backend != SOFTMAX_BACKEND {
            return Err(Error::BackendUnavailable(header.backend));
        }
        Ok(Arc::new(SoftmaxClassifier { params }))
    }
}

impl LoadedClassifier for SoftmaxClassifier {
    fn class_names(&self) -> &[String] {
        self.params.class_names()
    }

    fn infer(&self, png_bytes: &[u8]) -> Result<ConfidenceVector> {
        let tensor = preprocess(png_bytes, self.params.input_dims())?;
        predict(&self.params, &tensor)
    }
}

/// Backends by name. Cloning is cheap.
#[derive(Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn ClassifierBackend>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self {
            backends: BTreeMap::new(),
        };
        r.register(Arc::new(SoftmaxBackend));
        r
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            backends: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, backend: Arc<dyn ClassifierBackend>) {
        self.backends.insert(backend.name().to_string(), backend);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn load(&self, backend: &str, blob: &[u8]) -> Result<Arc<dyn LoadedClassifier>> {
        self.backends
            .get(backend)
            .ok_or_else(|| Error::BackendUnavailable(backend.to_string()))?
            .load(blob)
    }
}

/// Interface conformance: every inference on `samples` must be a normalized
/// vector in the classifier's declared class order, and corrupt input must be
/// rejected with `CorruptImage`.
pub fn check_conformance(
    classifier: &dyn LoadedClassifier,
    samples: &[Vec<u8>],
) -> std::result::Result<(), String> {
    if classifier.class_names().is_empty() {
        return Err("classifier declares no classes".into());
    }
    for (i, png) in samples.iter().enumerate() {
        let cv = classifier
            .infer(png)
            .map_err(|e| format!("sample {i}: inference failed: {e}"))?;
        if !cv.class_names().eq(classifier.class_names().iter().map(String::as_str)) {
            return Err(format!("sample {i}: class order differs from declaration"));
        }
        if !cv.is_normalized(1e-9) {
            return Err(format!("sample {i}: confidence vector not normalized"));
        }
    }
    match classifier.infer(b"\x89PNG\r\n\x1a\nbroken") {
        Err(Error::CorruptImage(_)) => Ok(()),
        Err(e) => Err(format!("corrupt input gave {} instead of CorruptImage", e.kind())),
        Ok(_) => Err("corrupt input was accepted".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::encode_model;
    use image::{ImageBuffer, ImageFormat, Luma};

    fn png(w: u32, h: u32, v: u8) -> Vec<u8> {
        let img = ImageBuffer::from_fn(w, h, |x, _| Luma([v.wrapping_add(x as u8)]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn params() -> ModelParams {
        let k = 3;
        let d = 4 * 3;
        let w = (0..k * d).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        ModelParams::new(
            vec!["Good".into(), "Bad".into(), "NoData".into()],
            w,
            vec![0.1, -0.2, 0.05],
            (4, 3),
        )
        .unwrap()
    }

    /// Always answers the same distribution, whatever the input.
    struct ConstantBackend;
    struct Constant {
        names: Vec<String>,
    }

    impl ClassifierBackend for ConstantBackend {
        fn name(&self) -> &str {
            "constant"
        }
        fn load(&self, _blob: &[u8]) -> Result<Arc<dyn LoadedClassifier>> {
            Ok(Arc::new(Constant {
                names: vec!["Good".into(), "Bad".into()],
            }))
        }
    }

    impl LoadedClassifier for Constant {
        fn class_names(&self) -> &[String] {
            &self.names
        }
        fn infer(&self, png_bytes: &[u8]) -> Result<ConfidenceVector> {
            image::load_from_memory(png_bytes).map_err(|e| Error::CorruptImage(e.to_string()))?;
            Ok(ConfidenceVector::from_parts(&self.names, &[0.75, 0.25]))
        }
    }

    #[test]
    fn softmax_round_trip_matches_direct_predict() {
        let p = params();
        let reg = BackendRegistry::default();
        let loaded = reg.load(SOFTMAX_BACKEND, &encode_model(&p, None, None)).unwrap();
        let bytes = png(16, 12, 40);
        let direct = predict(&p, &preprocess(&bytes, (4, 3)).unwrap()).unwrap();
        assert_eq!(loaded.infer(&bytes).unwrap(), direct);
    }

    #[test]
    fn unknown_backend_is_unavailable() {
        let err = BackendRegistry::default().load("inception-v3", b"").err().unwrap();
        assert_eq!(err.kind(), "BackendUnavailable");
    }

    #[test]
    fn reference_and_mock_backends_conform() {
        let samples: Vec<Vec<u8>> = (0..5).map(|i| png(20 + i, 10 + i, (i * 40) as u8)).collect();
        let mut reg = BackendRegistry::default();
        reg.register(Arc::new(ConstantBackend));
        let softmax = reg.load(SOFTMAX_BACKEND, &encode_model(&params(), None, None)).unwrap();
        check_conformance(softmax.as_ref(), &samples).unwrap();
        let constant = reg.load("constant", b"").unwrap();
        check_conformance(constant.as_ref(), &samples).unwrap();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["constant", "softmax-v1"]);
    }
}
