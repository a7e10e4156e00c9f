#![allow(dead_code)]

use std::path::Path;

use dqm_core::catalog::Catalog;
use dqm_core::labeling::import_labels;
use dqm_core::synthgen::{generate_corpus, CorpusConfig, CorpusReport};

/// Generates a corpus under `dir`, catalogs it as root `syn` and labels every
/// image with its ground truth.
pub fn labeled_corpus(dir: &Path, cfg: &CorpusConfig) -> (Catalog, CorpusReport) {
    let report = generate_corpus(dir, cfg).unwrap();
    let catalog = Catalog::open_in_memory().unwrap();
    catalog.add_root("syn", dir).unwrap();
    catalog.scan_root("syn").unwrap();
    let rows: Vec<_> = report
        .files
        .iter()
        .map(|f| (f.path.clone(), f.class_name.clone()))
        .collect();
    import_labels(&catalog, &rows, "truth").unwrap();
    (catalog, report)
}
