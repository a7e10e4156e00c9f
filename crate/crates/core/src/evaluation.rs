//! Post-training analysis over persisted inferences.
//!
//! Every confidence of every class is stored per image, so the disagreement
//! report, the confidence-augmented confusion matrix and threshold calibration
//! are pure aggregations over `(effective label, confidence vector)` pairs.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ImageQuery};
use crate::classifier::{BackendRegistry, ConfidenceVector};
use crate::{Error, Result, Timestamp};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub image_id: i64,
    pub model_id: i64,
    pub confidence_vector: ConfidenceVector,
    /// Argmax class, ties to the lowest class index.
    pub predicted_class: String,
    /// Probability of `predicted_class`.
    pub confidence: f64,
    pub inferred_at: Timestamp,
}

impl InferenceRecord {
    pub fn new(image_id: i64, model_id: i64, confidence_vector: ConfidenceVector, at: Timestamp) -> Self {
        let (_, class, p) = confidence_vector.argmax().expect("non-empty confidence vector");
        Self {
            image_id,
            model_id,
            predicted_class: class.to_string(),
            confidence: p,
            confidence_vector,
            inferred_at: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub image_id: i64,
    pub ground_truth: String,
    pub predicted_class: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub count: u64,
    /// Mean predicted-class confidence; 0 for an empty cell.
    pub mean_confidence: f64,
    /// Bin `i` covers `[i/20, (i+1)/20)`; the last bin is closed.
    pub histogram: [u64; HISTOGRAM_BINS],
}

impl Default for ConfusionCell {
    fn default() -> Self {
        Self {
            count: 0,
            mean_confidence: 0.0,
            histogram: [0; HISTOGRAM_BINS],
        }
    }
}

/// Confusion matrix whose cells also carry the confidence distribution.
/// `cells[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedConfusionMatrix {
    pub class_names: Vec<String>,
    pub cells: Vec<Vec<ConfusionCell>>,
}

impl AugmentedConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().map(|c| c.count).sum()
    }

    pub fn cell(&self, truth: &str, predicted: &str) -> Option<&ConfusionCell> {
        let t = self.class_names.iter().position(|c| c == truth)?;
        let p = self.class_names.iter().position(|c| c == predicted)?;
        Some(&self.cells[t][p])
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.class_names.len()).map(|i| self.cells[i][i].count).sum();
        diag as f64 / total as f64
    }
}

/// Per-class confirmation thresholds of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// Assigned by the catalog; 0 before persisting.
    pub table_id: i64,
    pub model_id: i64,
    pub target_fpr: f64,
    pub alarm_classes: Vec<String>,
    pub entries: BTreeMap<String, f64>,
    pub created_at: Timestamp,
}

impl ThresholdTable {
    /// All-zero thresholds: every alarm-class prediction alarms.
    pub fn permissive(model_id: i64, class_names: &[String], alarm_classes: &[String]) -> Self {
        Self {
            table_id: 0,
            model_id,
            target_fpr: 1.0,
            alarm_classes: alarm_classes.to_vec(),
            entries: class_names.iter().map(|c| (c.clone(), 0.0)).collect(),
            created_at: crate::now(),
        }
    }

    pub fn threshold(&self, class_name: &str) -> Option<f64> {
        self.entries.get(class_name).copied()
    }
}

/// Histogram bin of a confidence in `[0, 1]`.
pub fn confidence_bin(confidence: f64) -> usize {
    ((confidence * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Runs the model over every image of its plot type matching `filter` and
/// stores one record per image, replacing earlier ones. Unreadable images are
/// skipped with a warning. Returns the number of records written.
pub fn infer_all(
    catalog: &Catalog,
    registry: &BackendRegistry,
    model_id: i64,
    filter: &ImageQuery,
) -> Result<usize> {
    let model = catalog.model(model_id)?;
    let classifier = registry.load(&model.backend, &catalog.model_blob(model_id)?)?;
    let query = ImageQuery {
        plot_type: Some(model.plot_type.clone()),
        ..filter.clone()
    };
    let mut records = Vec::new();
    for (image, _) in catalog.query_images(&query)? {
        let path = catalog.resolve_path(image.image_id)?;
        let result = std::fs::read(&path)
            .map_err(Error::from)
            .and_then(|bytes| classifier.infer(&bytes));
        match result {
            Ok(cv) => records.push(InferenceRecord::new(image.image_id, model_id, cv, crate::now())),
            Err(e) => warn!("skipping image {} ({}): {e}", image.image_id, path.display()),
        }
    }
    catalog.replace_inferences(&records)?;
    Ok(records.len())
}

/// Labeled images the model gets wrong, most confident error first.
pub fn disagreement_report(catalog: &Catalog, model_id: i64) -> Result<Vec<Disagreement>> {
    let model = catalog.model(model_id)?;
    let labels = catalog.effective_labels(&model.plot_type)?;
    Ok(disagreements(&catalog.inferences(model_id)?, &labels))
}

pub fn disagreements(records: &[InferenceRecord], labels: &BTreeMap<i64, String>) -> Vec<Disagreement> {
    let mut out: Vec<Disagreement> = records
        .iter()
        .filter_map(|r| {
            let truth = labels.get(&r.image_id)?;
            (truth != &r.predicted_class).then(|| Disagreement {
                image_id: r.image_id,
                ground_truth: truth.clone(),
                predicted_class: r.predicted_class.clone(),
                confidence: r.confidence,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.image_id.cmp(&b.image_id))
    });
    out
}

pub fn confusion_with_confidence(catalog: &Catalog, model_id: i64) -> Result<AugmentedConfusionMatrix> {
    let model = catalog.model(model_id)?;
    let labels = catalog.effective_labels(&model.plot_type)?;
    let records = catalog.inferences(model_id)?;
    let pairs: Vec<(&str, &InferenceRecord)> = records
        .iter()
        .filter_map(|r| labels.get(&r.image_id).map(|t| (t.as_str(), r)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoLabeledData(model_id));
    }
    Ok(build_confusion(&model.class_names, &pairs))
}

/// Aggregates `(truth, inference)` pairs. Truths outside `class_names` are
/// ignored.
pub fn build_confusion(class_names: &[String], pairs: &[(&str, &InferenceRecord)]) -> AugmentedConfusionMatrix {
    let k = class_names.len();
    let index = |c: &str| class_names.iter().position(|n| n == c);
    let mut cells = vec![vec![ConfusionCell::default(); k]; k];
    let mut sums = vec![vec![0.0f64; k]; k];
    for (truth, rec) in pairs {
        let (Some(t), Some(p)) = (index(truth), index(&rec.predicted_class)) else {
            continue;
        };
        let cell = &mut cells[t][p];
        cell.count += 1;
        cell.histogram[confidence_bin(rec.confidence)] += 1;
        sums[t][p] += rec.confidence;
    }
    for (row, sum_row) in cells.iter_mut().zip(&sums) {
        for (cell, sum) in row.iter_mut().zip(sum_row) {
            if cell.count > 0 {
                cell.mean_confidence = sum / cell.count as f64;
            }
        }
    }
    AugmentedConfusionMatrix {
        class_names: class_names.to_vec(),
        cells,
    }
}

/// One labeled prediction used for calibration.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationSample<'a> {
    pub truth: &'a str,
    pub predicted: &'a str,
    pub confidence: f64,
}

/// Fraction of truly clean images (truth not an alarm class) that would alarm
/// as `class` at threshold `t`.
pub fn false_positive_rate(
    samples: &[CalibrationSample<'_>],
    alarm_classes: &[String],
    class: &str,
    t: f64,
) -> f64 {
    let is_alarm = |c: &str| alarm_classes.iter().any(|a| a == c);
    let clean = samples.iter().filter(|s| !is_alarm(s.truth)).count();
    if clean == 0 {
        return 0.0;
    }
    let fp = samples
        .iter()
        .filter(|s| !is_alarm(s.truth) && s.predicted == class && s.confidence >= t)
        .count();
    fp as f64 / clean as f64
}

/// Result of calibrating one alarm class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassThreshold {
    pub threshold: f64,
    /// False when even the strictest threshold in `[0, 1]` misses the target,
    /// which only happens when false positives carry confidence exactly 1.
    pub achieved: bool,
}

/// Smallest threshold among `{0} ∪ {observed confidences of predictions of
/// the class} ∪ {just above the largest of them}` whose false-positive rate is
/// at most `target_fpr`.
pub fn calibrate_class(
    samples: &[CalibrationSample<'_>],
    alarm_classes: &[String],
    class: &str,
    target_fpr: f64,
) -> ClassThreshold {
    let mut candidates: Vec<f64> = samples
        .iter()
        .filter(|s| s.predicted == class)
        .map(|s| s.confidence)
        .collect();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let max = *candidates.last().expect("contains 0");
    candidates.push(max.next_up());
    for &t in &candidates {
        if false_positive_rate(samples, alarm_classes, class, t) <= target_fpr {
            return if t <= 1.0 {
                ClassThreshold { threshold: t, achieved: true }
            } else {
                ClassThreshold { threshold: 1.0, achieved: false }
            };
        }
    }
    unreachable!("no prediction reaches a threshold above the maximum confidence")
}

/// Threshold per class: calibrated for alarm classes, 0 for the others.
pub fn calibrate(
    class_names: &[String],
    samples: &[CalibrationSample<'_>],
    alarm_classes: &[String],
    target_fpr: f64,
) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target_fpr must lie in (0, 1), got {target_fpr}"
        )));
    }
    if let Some(a) = alarm_classes.iter().find(|a| !class_names.contains(a)) {
        return Err(Error::InvalidConfig(format!("alarm class `{a}` is not a model class")));
    }
    let mut entries = BTreeMap::new();
    let mut unmet = Vec::new();
    for class in class_names {
        let t = if alarm_classes.contains(class) {
            let ct = calibrate_class(samples, alarm_classes, class, target_fpr);
            if !ct.achieved {
                unmet.push(class.clone());
            }
            ct.threshold
        } else {
            0.0
        };
        entries.insert(class.clone(), t);
    }
    Ok((entries, unmet))
}

/// Calibrates on the model's validation images (all labeled inferred images
/// when no split was recorded) and persists the table.
pub fn calibrate_thresholds(
    catalog: &Catalog,
    model_id: i64,
    alarm_classes: &[String],
    target_fpr: f64,
) -> Result<ThresholdTable> {
    let model = catalog.model(model_id)?;
    let labels = catalog.effective_labels(&model.plot_type)?;
    let validation: BTreeSet<i64> = catalog.split_image_ids(model_id, "validation")?.into_iter().collect();
    let records = catalog.inferences(model_id)?;
    let samples: Vec<CalibrationSample<'_>> = records
        .iter()
        .filter(|r| validation.is_empty() || validation.contains(&r.image_id))
        .filter_map(|r| {
            labels.get(&r.image_id).map(|truth| CalibrationSample {
                truth,
                predicted: &r.predicted_class,
                confidence: r.confidence,
            })
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::NoValidationData(model_id));
    }
    let (entries, unmet) = calibrate(&model.class_names, &samples, alarm_classes, target_fpr)?;
    for class in unmet {
        warn!("model {model_id}: target FPR {target_fpr} unreachable for `{class}`; threshold pinned at 1.0");
    }
    catalog.insert_threshold_table(&ThresholdTable {
        table_id: 0,
        model_id,
        target_fpr,
        alarm_classes: alarm_classes.to_vec(),
        entries,
        created_at: crate::now(),
    })
}
