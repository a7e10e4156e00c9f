//! End-to-end training of one plot type: manifest, under-sampling, split,
//! preprocessing, training, persistence and a full inference pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ImageQuery, ModelRecord, NewModel};
use crate::classifier::{
    encode_model, preprocess, train, BackendRegistry, Example, ImageTensor, TrainConfig, TrainMetrics,
    SOFTMAX_BACKEND,
};
use crate::dataset::{build_manifest, class_counts, split_shuffle, strategic_undersample, ManifestRow, SplitConfig};
use crate::evaluation::infer_all;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub model: ModelRecord,
    pub metrics: TrainMetrics,
    /// Rows per class after weighting and under-sampling.
    pub class_counts: BTreeMap<String, usize>,
    pub train_rows: usize,
    pub validation_rows: usize,
    pub inferred: usize,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Loads and preprocesses every distinct image referenced by `rows`.
pub fn load_tensors(
    rows: &[ManifestRow],
    input_dims: (usize, usize),
) -> Result<HashMap<i64, Arc<ImageTensor>>> {
    let mut tensors = HashMap::new();
    for row in rows {
        if tensors.contains_key(&row.image_id) {
            continue;
        }
        let bytes = std::fs::read(&row.path)
            .map_err(|e| Error::CorruptImage(format!("{}: {e}", row.path.display())))?;
        tensors.insert(row.image_id, Arc::new(preprocess(&bytes, input_dims)?));
    }
    Ok(tensors)
}

fn examples(
    rows: &[ManifestRow],
    tensors: &HashMap<i64, Arc<ImageTensor>>,
    class_names: &[String],
) -> Result<Vec<Example>> {
    rows.iter()
        .map(|r| {
            let class_index = class_names
                .iter()
                .position(|c| *c == r.class_name)
                .ok_or_else(|| Error::ClassMismatch)?;
            Ok(Example {
                tensor: Arc::clone(&tensors[&r.image_id]),
                class_index,
            })
        })
        .collect()
}

/// Trains, stores and evaluates a new model for `plot_type`. The stored blob
/// carries both configs so the run can be reproduced.
pub fn train_plot_type(
    catalog: &Catalog,
    registry: &BackendRegistry,
    plot_type: &str,
    split: &SplitConfig,
    class_weights: &BTreeMap<String, u32>,
    config: &TrainConfig,
) -> Result<TrainingReport> {
    let started = Instant::now();
    config.validate()?;
    split.validate()?;
    let class_set = catalog.class_set(plot_type)?;
    let manifest = build_manifest(catalog, plot_type, class_weights)?;
    let sampled = strategic_undersample(&manifest, split.seed, split.undersample_ratio)?;
    let (train_rows, val_rows) = split_shuffle(&sampled, split)?;
    let tensors = load_tensors(&sampled, config.input_dims)?;
    let class_names = class_set.classes.clone();
    let (params, metrics) = train(
        &examples(&train_rows, &tensors, &class_names)?,
        &examples(&val_rows, &tensors, &class_names)?,
        &class_names,
        config,
    )?;
    let blob = encode_model(&params, Some(config), Some(split));
    let model = catalog.insert_model(NewModel {
        plot_type: plot_type.to_string(),
        backend: SOFTMAX_BACKEND.to_string(),
        class_names,
        blob,
        train_config: Some(config.clone()),
        split_config: Some(split.clone()),
        metrics: Some(metrics.clone()),
    })?;
    let ids = |rows: &[ManifestRow]| rows.iter().map(|r| r.image_id).collect::<Vec<_>>();
    catalog.record_split(model.model_id, &ids(&train_rows), &ids(&val_rows))?;
    let inferred = infer_all(catalog, registry, model.model_id, &ImageQuery::default())?;
    info!(
        "model {} for `{plot_type}`: train_acc {:.4}, val_acc {:?}, {inferred} images inferred",
        model.model_id, metrics.train_acc, metrics.val_acc
    );
    Ok(TrainingReport {
        model,
        metrics,
        class_counts: class_counts(&sampled),
        train_rows: train_rows.len(),
        validation_rows: val_rows.len(),
        inferred,
        elapsed: started.elapsed(),
    })
}
