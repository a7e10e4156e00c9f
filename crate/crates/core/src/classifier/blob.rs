//! Versioned binary model format.
//!
//! ```text
//! "HYDM" | version: u16 LE | header_len: u32 LE | header (JSON, UTF-8)
//!        | weights: K*D f64 LE, row-major | bias: K f64 LE
//! ```

use serde::{Deserialize, Serialize};

use super::{ModelParams, TrainConfig};
use crate::dataset::SplitConfig;
use crate::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"HYDM";
pub const BLOB_VERSION: u16 = 1;

/// Self-describing header embedded in every blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub backend: String,
    pub class_names: Vec<String>,
    pub input_dims: (usize, usize),
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub split_config: Option<SplitConfig>,
}

pub fn encode_model(
    params: &ModelParams,
    train_config: Option<&TrainConfig>,
    split_config: Option<&SplitConfig>,
) -> Vec<u8> {
    let header = ModelHeader {
        backend: super::SOFTMAX_BACKEND.to_string(),
        class_names: params.class_names().to_vec(),
        input_dims: params.input_dims(),
        train_config: train_config.cloned(),
        split_config: split_config.cloned(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let floats = params.weights().len() + params.bias().len();
    let mut out = Vec::with_capacity(10 + header.len() + 8 * floats);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.weights().iter().chain(params.bias()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(blob: &[u8]) -> Result<(ModelHeader, ModelParams)> {
    let bad = |msg: &str| Error::MalformedModel(msg.to_string());
    if blob.len() < 10 || &blob[..4] != BLOB_MAGIC {
        return Err(bad("missing HYDM magic"));
    }
    let version = u16::from_le_bytes([blob[4], blob[5]]);
    if version != BLOB_VERSION {
        return Err(Error::MalformedModel(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(blob[6..10].try_into().expect("4 bytes")) as usize;
    let body_start = 10usize
        .checked_add(header_len)
        .filter(|&end| end <= blob.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader = serde_json::from_slice(&blob[10..body_start])?;
    let k = header.class_names.len();
    let d = header.input_dims.0 * header.input_dims.1;
    let body = &blob[body_start..];
    if body.len() != 8 * (k * d + k) {
        return Err(Error::MalformedModel(format!(
            "expected {} parameter bytes, found {}",
            8 * (k * d + k),
            body.len()
        )));
    }
    let mut floats = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let weights: Vec<f64> = floats.by_ref().take(k * d).collect();
    let bias: Vec<f64> = floats.collect();
    let params = ModelParams::new(header.class_names.clone(), weights, bias, header.input_dims)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_round_trips(
            k in 1usize..4,
            w in 1usize..5,
            h in 1usize..4,
            seed in any::<u64>(),
        ) {
            let d = w * h;
            let vals: Vec<f64> = (0..k * d + k)
                .map(|i| (seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) as f64 / u64::MAX as f64 - 0.5)
                .collect();
            let names: Vec<String> = (0..k).map(|i| format!("class-{i}")).collect();
            let params = ModelParams::new(names, vals[..k * d].to_vec(), vals[k * d..].to_vec(), (w, h)).unwrap();
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let blob = encode_model(&params, Some(&cfg), None);
            prop_assert_eq!(&blob[..4], b"HYDM");
            let (header, back) = decode_model(&blob).unwrap();
            prop_assert_eq!(back, params);
            prop_assert_eq!(header.train_config, Some(cfg));
        }
    }

    #[test]
    fn truncated_and_foreign_blobs_rejected() {
        let params = ModelParams::zeros(vec!["a".into(), "b".into()], (2, 2)).unwrap();
        let blob = encode_model(&params, None, None);
        assert!(decode_model(&blob[..blob.len() - 1]).is_err());
        assert!(decode_model(b"PNG\x00garbage").is_err());
        let mut future = blob.clone();
        future[4] = 9;
        assert_eq!(decode_model(&future).unwrap_err().kind(), "MalformedModel");
    }
}
