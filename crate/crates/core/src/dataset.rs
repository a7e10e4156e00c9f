//! Training manifests: weighting by replication, strategic under-sampling and
//! stratified, seeded train/validation splits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ImageQuery};
use crate::{Error, Result};

/// One (possibly replicated) training row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: i64,
    pub path: PathBuf,
    pub class_name: String,
    /// Replication count of the source image; the row appears this many times.
    pub weight: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub undersample_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.95,
            seed: 0,
            undersample_ratio: 1.0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.undersample_ratio >= 1.0 && self.undersample_ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "undersample_ratio must be >= 1, got {}",
                self.undersample_ratio
            )));
        }
        Ok(())
    }
}

/// Expanded manifest of every labeled image of `plot_type`, chronological,
/// each image repeated `weight` times (weight from `class_weights`, default 1).
pub fn build_manifest(
    catalog: &Catalog,
    plot_type: &str,
    class_weights: &BTreeMap<String, u32>,
) -> Result<Vec<ManifestRow>> {
    let class_set = catalog.class_set(plot_type)?;
    let labeled = catalog.query_images(&ImageQuery {
        plot_type: Some(plot_type.to_string()),
        labeled: Some(true),
        ..ImageQuery::default()
    })?;
    let mut rows = Vec::new();
    for (image, label) in labeled {
        let class_name = label.expect("labeled filter");
        let weight = class_weights.get(&class_name).copied().unwrap_or(1).max(1);
        let path = catalog.resolve_path(image.image_id)?;
        for _ in 0..weight {
            rows.push(ManifestRow {
                image_id: image.image_id,
                path: path.clone(),
                class_name: class_name.clone(),
                weight,
            });
        }
    }
    let counts = class_counts(&rows);
    for class in &class_set.classes {
        if !counts.contains_key(class) {
            return Err(Error::EmptyClass(class.clone()));
        }
    }
    Ok(rows)
}

pub fn class_counts(rows: &[ManifestRow]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in rows {
        *counts.entry(r.class_name.clone()).or_insert(0) += 1;
    }
    counts
}

/// Caps every class at `ceil(ratio * smallest_class_count)` rows by seeded
/// uniform sampling without replacement. Surviving rows keep manifest order.
pub fn strategic_undersample(
    manifest: &[ManifestRow],
    seed: u64,
    ratio: f64,
) -> Result<Vec<ManifestRow>> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "undersample ratio must be >= 1, got {ratio}"
        )));
    }
    let by_class = indices_by_class(manifest);
    let Some(min) = by_class.values().map(Vec::len).min() else {
        return Ok(Vec::new());
    };
    // tolerance keeps e.g. 1.1 * 10 from rounding up to 12
    let cap = (ratio * min as f64 - 1e-9).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.len()];
    for members in by_class.values() {
        if members.len() <= cap {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for pick in index::sample(&mut rng, members.len(), cap) {
                keep[members[pick]] = true;
            }
        }
    }
    Ok(manifest
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(row, _)| row.clone())
        .collect())
}

/// Stratified split: each class sends `round(n * train_fraction)` rows to
/// training, clamped so both sides get at least one row. Both halves are
/// shuffled.
pub fn split_shuffle(
    manifest: &[ManifestRow],
    config: &SplitConfig,
) -> Result<(Vec<ManifestRow>, Vec<ManifestRow>)> {
    config.validate()?;
    let by_class = indices_by_class(manifest);
    if let Some((class, _)) = by_class.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::ClassTooSmall(class.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for members in by_class.values() {
        let n = members.len();
        let n_train = ((n as f64 * config.train_fraction).round() as usize).clamp(1, n - 1);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train.extend(shuffled[..n_train].iter().map(|&i| manifest[i].clone()));
        validation.extend(shuffled[n_train..].iter().map(|&i| manifest[i].clone()));
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok((train, validation))
}

fn indices_by_class(manifest: &[ManifestRow]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in manifest.iter().enumerate() {
        map.entry(row.class_name.as_str()).or_default().push(i);
    }
    map
}

/// Writes the manifest as CSV with header `image_id,path,class,weight`.
pub fn write_manifest_csv<W: Write>(rows: &[ManifestRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "path", "class", "weight"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.image_id.to_string(),
            r.path.display().to_string(),
            r.class_name.clone(),
            r.weight.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
