//! On-disk image layout:
//! `<base_path>/<run_period>/Run<NNNNNN>/<plot_name>_<YYYYMMDDTHHMMSSZ>.png`.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use walkdir::WalkDir;

use super::ImageRef;
use crate::{Error, Result, Timestamp};

const CAPTURE_FORMAT: &str = "%Y%m%dT%H%M%SZ";

pub fn layout_path(base: &Path, run_period: &str, run_number: i64, filename: &str) -> PathBuf {
    base.join(run_period).join(run_dir(run_number)).join(filename)
}

fn run_dir(run_number: i64) -> String {
    format!("Run{run_number:06}")
}

/// Path components relative to a root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutPath {
    pub run_period: String,
    pub run_number: i64,
    pub filename: String,
}

/// Inverse of [`layout_path`]. Rejects paths outside `base`, wrong depth and
/// non-canonical run directories (e.g. `Run12` or `Run0012345`).
pub fn parse_layout(base: &Path, path: &Path) -> Option<LayoutPath> {
    let rel = path.strip_prefix(base).ok()?;
    let parts: Vec<&str> = rel
        .components()
        .map(|c| c.as_os_str().to_str())
        .collect::<Option<_>>()?;
    let [period, run, filename] = parts.as_slice() else {
        return None;
    };
    let digits = run.strip_prefix("Run")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let run_number: i64 = digits.parse().ok()?;
    if run_number < 1 || run_dir(run_number) != *run {
        return None;
    }
    Some(LayoutPath {
        run_period: period.to_string(),
        run_number,
        filename: filename.to_string(),
    })
}

/// ISO-8601 basic UTC token used in image filenames.
pub fn capture_token(at: Timestamp) -> String {
    at.format(CAPTURE_FORMAT).to_string()
}

/// Splits `<plot_name>_<token>.png` into plot name and capture time. Without a
/// parseable trailing token the whole stem is the plot name.
pub fn parse_filename(filename: &str) -> (String, Option<Timestamp>) {
    let stem = match filename.rsplit_once('.') {
        Some((stem, ext)) if ext.eq_ignore_ascii_case("png") => stem,
        _ => filename,
    };
    if let Some((plot, token)) = stem.rsplit_once('_') {
        if let Ok(t) = NaiveDateTime::parse_from_str(token, CAPTURE_FORMAT) {
            if !plot.is_empty() {
                return (plot.to_string(), Some(t.and_utc()));
            }
        }
    }
    (stem.to_string(), None)
}

#[derive(Debug, Default)]
pub struct ScanReport {
    /// Newly registered images, in capture order.
    pub registered: Vec<ImageRef>,
    /// Files that were already in the catalog.
    pub existing: usize,
    /// PNG files that do not follow the layout.
    pub skipped: Vec<PathBuf>,
}

pub(crate) struct FoundImage {
    pub run_period: String,
    pub run_number: i64,
    pub plot_type: String,
    pub filename: String,
    pub captured_at: Timestamp,
}

/// Every PNG under `base`, in path order. Layout violations come back as
/// `Err(path)`.
pub(crate) fn walk_root(base: &Path) -> Result<Vec<std::result::Result<FoundImage, PathBuf>>> {
    if !base.is_dir() {
        return Err(Error::RootUnreachable(base.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(base).sort_by_file_name() {
        let entry = entry.map_err(|e| match e.io_error() {
            Some(_) => Error::Io(e.into()),
            None => Error::RootUnreachable(base.to_path_buf()),
        })?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !entry.file_type().is_file() || !is_png {
            continue;
        }
        let Some(layout) = parse_layout(base, path) else {
            out.push(Err(path.to_path_buf()));
            continue;
        };
        let (plot_type, stamped) = parse_filename(&layout.filename);
        let captured_at = match stamped {
            Some(t) => t,
            None => {
                let modified = entry.metadata().map_err(|e| Error::Io(e.into()))?.modified()?;
                let secs = modified
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs() as i64)
                    .unwrap_or(0);
                chrono::DateTime::from_timestamp(secs, 0).unwrap_or_default()
            }
        };
        out.push(Ok(FoundImage {
            run_period: layout.run_period,
            run_number: layout.run_number,
            plot_type,
            filename: layout.filename,
            captured_at,
        }));
    }
    Ok(out)
}
