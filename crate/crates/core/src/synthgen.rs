//! Deterministic synthetic occupancy plots.
//!
//! Each plot is a grid of Poisson hit counts whose mean falls off as a
//! Gaussian of the distance from the grid center, rendered as a heatmap with a
//! thin axes frame. Faults: dead left half of the columns, a pedestal added to
//! off-center cells, or an empty frame (no data).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::Duration;
use image::{ImageBuffer, ImageFormat, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::catalog::{capture_token, layout_path};
use crate::{Error, Result, Timestamp};

pub const LAMBDA_MAX: f64 = 50.0;
/// Counts at or above this render at full intensity.
pub const COUNT_SCALE: f64 = 100.0;
const FRAME_GRAY: u8 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    None,
    HalfColumnsDead,
    PedestalNoise,
    Blank,
}

impl FaultKind {
    pub fn class_name(self) -> &'static str {
        match self {
            FaultKind::None => "Good",
            FaultKind::HalfColumnsDead | FaultKind::PedestalNoise => "Bad",
            FaultKind::Blank => "NoData",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Pedestal height as a fraction of `LAMBDA_MAX`; ignored by other kinds.
    pub magnitude: f64,
    pub seed: u64,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, magnitude: f64, seed: u64) -> Self {
        Self { kind, magnitude, seed }
    }
}

/// Grid cells and rendered pixel size, both as (width, height).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlotGeometry {
    pub grid: (usize, usize),
    pub image: (u32, u32),
}

impl Default for PlotGeometry {
    fn default() -> Self {
        Self {
            grid: (32, 24),
            image: (320, 240),
        }
    }
}

fn sigma(grid: (usize, usize)) -> f64 {
    let (w, h) = (grid.0 as f64, grid.1 as f64);
    (w * w + h * h).sqrt() / 3.0
}

fn radius(grid: (usize, usize), x: usize, y: usize) -> f64 {
    let dx = x as f64 + 0.5 - grid.0 as f64 / 2.0;
    let dy = y as f64 + 0.5 - grid.1 as f64 / 2.0;
    (dx * dx + dy * dy).sqrt()
}

/// Cells farther than half a sigma from the grid center.
pub fn is_off_center(grid: (usize, usize), x: usize, y: usize) -> bool {
    radius(grid, x, y) > sigma(grid) / 2.0
}

/// Expected hits per cell for a fault spec, row-major.
pub fn expected_occupancy(spec: &FaultSpec, grid: (usize, usize)) -> Vec<f64> {
    let s = sigma(grid);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for y in 0..grid.1 {
        for x in 0..grid.0 {
            let r = radius(grid, x, y);
            let mut lambda = LAMBDA_MAX * (-r * r / (2.0 * s * s)).exp();
            match spec.kind {
                FaultKind::None => {}
                FaultKind::HalfColumnsDead if x < grid.0 / 2 => lambda = 0.0,
                FaultKind::HalfColumnsDead => {}
                FaultKind::PedestalNoise if is_off_center(grid, x, y) => {
                    lambda += spec.magnitude.max(0.0) * LAMBDA_MAX
                }
                FaultKind::PedestalNoise => {}
                FaultKind::Blank => lambda = 0.0,
            }
            out.push(lambda);
        }
    }
    out
}

/// Poisson-sampled hit counts, row-major; deterministic per seed.
pub fn sample_counts(spec: &FaultSpec, grid: (usize, usize)) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    expected_occupancy(spec, grid)
        .into_iter()
        .map(|lambda| {
            if lambda > 0.0 {
                Poisson::new(lambda).expect("positive finite lambda").sample(&mut rng) as u32
            } else {
                0
            }
        })
        .collect()
}

/// Black-red-yellow-white ramp; luma is monotonic in `v` and zero at `v = 0`.
fn hot(v: f64) -> Rgb<u8> {
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0 * v), ch(3.0 * v - 1.0), ch(3.0 * v - 2.0)])
}

fn render(counts: &[u32], geometry: PlotGeometry, blank: bool) -> RgbImage {
    let (gw, gh) = geometry.grid;
    let (iw, ih) = geometry.image;
    ImageBuffer::from_fn(iw, ih, |px, py| {
        if px == 0 || py == 0 || px == iw - 1 || py == ih - 1 {
            return Rgb([FRAME_GRAY; 3]);
        }
        if blank {
            return Rgb([0, 0, 0]);
        }
        let cx = (px as usize * gw) / iw as usize;
        let cy = (py as usize * gh) / ih as usize;
        hot(f64::from(counts[cy * gw + cx]) / COUNT_SCALE)
    })
}

fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Renders one plot and returns its PNG bytes and class.
pub fn generate_plot(spec: &FaultSpec, geometry: PlotGeometry) -> (Vec<u8>, &'static str) {
    let counts = sample_counts(spec, geometry.grid);
    let img = render(&counts, geometry, spec.kind == FaultKind::Blank);
    (encode_png(&img), spec.kind.class_name())
}

/// Corpus layout and class composition.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub plot_type: String,
    pub good: usize,
    /// Alternates dead-half-columns and pedestal faults.
    pub bad: usize,
    pub no_data: usize,
    pub seed: u64,
    pub run_period: String,
    pub first_run: i64,
    pub images_per_run: usize,
    pub start: Timestamp,
    pub interval: Duration,
    pub geometry: PlotGeometry,
}

impl CorpusConfig {
    pub fn balanced(n_per_class: usize, seed: u64) -> Self {
        Self {
            plot_type: "synth_occupancy".into(),
            good: n_per_class,
            bad: n_per_class,
            no_data: n_per_class,
            seed,
            run_period: "RunPeriod-SYN-01".into(),
            first_run: 1000,
            images_per_run: 50,
            start: chrono::DateTime::from_timestamp(1_598_486_400, 0).expect("valid"), // 2020-08-27
            interval: Duration::seconds(60),
            geometry: PlotGeometry::default(),
        }
    }

    /// The fault spec of every image, in capture order.
    pub fn specs(&self) -> Vec<FaultSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut kinds: Vec<FaultKind> = std::iter::repeat_n(FaultKind::None, self.good)
            .chain((0..self.bad).map(|i| {
                if i % 2 == 0 {
                    FaultKind::HalfColumnsDead
                } else {
                    FaultKind::PedestalNoise
                }
            }))
            .chain(std::iter::repeat_n(FaultKind::Blank, self.no_data))
            .collect();
        kinds.shuffle(&mut rng);
        kinds
            .into_iter()
            .map(|kind| {
                let magnitude = if kind == FaultKind::PedestalNoise {
                    rng.random_range(0.5..=1.0)
                } else {
                    0.0
                };
                FaultSpec::new(kind, magnitude, rng.random())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub class_name: String,
}

#[derive(Debug, Clone)]
pub struct CorpusReport {
    pub files: Vec<CorpusFile>,
    pub truth_csv: PathBuf,
}

impl CorpusReport {
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for f in &self.files {
            *m.entry(f.class_name.clone()).or_insert(0) += 1;
        }
        m
    }
}

pub const TRUTH_CSV: &str = "truth.csv";

/// Writes the corpus under `root` in catalog layout plus `root/truth.csv`
/// (`path,class`, paths relative to `root`).
pub fn generate_corpus(root: &Path, config: &CorpusConfig) -> Result<CorpusReport> {
    if config.good + config.bad + config.no_data == 0 {
        return Err(Error::InvalidConfig("corpus needs at least one image".into()));
    }
    let per_run = config.images_per_run.max(1);
    let mut files = Vec::new();
    for (i, spec) in config.specs().iter().enumerate() {
        let at = config.start + config.interval * i as i32;
        let run = config.first_run + (i / per_run) as i64;
        let filename = format!("{}_{}.png", config.plot_type, capture_token(at));
        let path = layout_path(root, &config.run_period, run, &filename);
        std::fs::create_dir_all(path.parent().expect("layout has parents"))?;
        let (png, class) = generate_plot(spec, config.geometry);
        std::fs::write(&path, png)?;
        files.push(CorpusFile {
            path,
            class_name: class.to_string(),
        });
    }
    let truth_csv = root.join(TRUTH_CSV);
    let mut w = csv::Writer::from_path(&truth_csv).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["path", "class"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for f in &files {
        let rel = f.path.strip_prefix(root).expect("under root");
        w.write_record([rel.display().to_string(), f.class_name.clone()])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(CorpusReport { files, truth_csv })
}

/// Reads a truth CSV written by [`generate_corpus`]; relative paths are
/// resolved against the CSV's directory.
pub fn read_truth_csv(path: &Path) -> Result<Vec<CorpusFile>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let (Some(p), Some(c)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::InvalidConfig(format!("malformed truth row in {}", path.display())));
        };
        out.push(CorpusFile {
            path: base.join(p),
            class_name: c.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;

    fn luma_halves(png: &[u8]) -> (f64, f64) {
        let img = image::load_from_memory(png).unwrap().to_rgb8();
        let (w, h) = img.dimensions();
        let mut sums = [0.0f64; 2];
        for (x, _, p) in img.enumerate_pixels() {
            let [r, g, b] = p.0;
            let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
            sums[usize::from(x >= w / 2)] += y / 255.0;
        }
        let n = f64::from(w / 2 * h);
        (sums[0] / n, sums[1] / n)
    }

    #[test]
    fn same_seed_gives_identical_png() {
        let spec = FaultSpec::new(FaultKind::None, 0.0, 1234);
        let a = generate_plot(&spec, PlotGeometry::default());
        let b = generate_plot(&spec, PlotGeometry::default());
        assert_eq!(a, b);
        assert_eq!(a.1, "Good");
        let c = generate_plot(&FaultSpec::new(FaultKind::None, 0.0, 1235), PlotGeometry::default());
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn dead_half_is_dark() {
        for seed in 0..10 {
            let (png, class) = generate_plot(&FaultSpec::new(FaultKind::HalfColumnsDead, 0.0, seed), PlotGeometry::default());
            assert_eq!(class, "Bad");
            let (left, right) = luma_halves(&png);
            assert!(left < 0.05 * right, "left {left} right {right}");
        }
    }

    #[test]
    fn blank_is_no_data() {
        let (png, class) = generate_plot(&FaultSpec::new(FaultKind::Blank, 0.0, 1), PlotGeometry::default());
        assert_eq!(class, "NoData");
        let (l, r) = luma_halves(&png);
        assert!(l < 0.02 && r < 0.02);
    }

    #[test]
    fn pedestal_raises_off_center_occupancy() {
        let grid = PlotGeometry::default().grid;
        for magnitude in [0.5, 0.75, 1.0] {
            for seed in 0..5 {
                let good = sample_counts(&FaultSpec::new(FaultKind::None, 0.0, seed), grid);
                let noisy = sample_counts(&FaultSpec::new(FaultKind::PedestalNoise, magnitude, seed + 100), grid);
                let off_center_mean = |c: &[u32]| {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for y in 0..grid.1 {
                        for x in 0..grid.0 {
                            if is_off_center(grid, x, y) {
                                sum += f64::from(c[y * grid.0 + x]);
                                n += 1.0;
                            }
                        }
                    }
                    sum / n
                };
                let diff = off_center_mean(&noisy) - off_center_mean(&good);
                assert!(diff >= magnitude * LAMBDA_MAX / 2.0, "magnitude {magnitude}: diff {diff}");
            }
        }
    }

    #[test]
    fn occupancy_peaks_at_center() {
        let grid = (32, 24);
        let lam = expected_occupancy(&FaultSpec::new(FaultKind::None, 0.0, 0), grid);
        let center = lam[12 * 32 + 16];
        let corner = lam[0];
        assert!(center > 49.0 && center <= LAMBDA_MAX);
        assert!(corner < center / 2.0);
    }

    #[test]
    fn corpus_layout_truth_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::balanced(5, 9);
        let ra = generate_corpus(a.path(), &cfg).unwrap();
        let rb = generate_corpus(b.path(), &cfg).unwrap();
        assert_eq!(ra.files.len(), 15);
        assert!(ra.class_counts().values().all(|&n| n == 5));
        let truth = read_truth_csv(&ra.truth_csv).unwrap();
        assert_eq!(truth, ra.files);
        let header = std::fs::read_to_string(&ra.truth_csv).unwrap();
        assert!(header.starts_with("path,class\n"));
        for (fa, fb) in ra.files.iter().zip(&rb.files) {
            assert_eq!(fa.path.strip_prefix(a.path()).unwrap(), fb.path.strip_prefix(b.path()).unwrap());
            assert_eq!(std::fs::read(&fa.path).unwrap(), std::fs::read(&fb.path).unwrap());
        }

        // ingestion round trip
        let cat = Catalog::open_in_memory().unwrap();
        cat.add_root("syn", a.path()).unwrap();
        let scan = cat.scan_root("syn").unwrap();
        assert_eq!(scan.registered.len(), 15);
        assert!(scan.skipped.is_empty());
        let mut resolved: Vec<PathBuf> =
            scan.registered.iter().map(|i| cat.resolve_path(i.image_id).unwrap()).collect();
        resolved.sort();
        let mut written: Vec<PathBuf> = ra.files.iter().map(|f| f.path.clone()).collect();
        written.sort();
        assert_eq!(resolved, written);
        assert!(scan.registered.iter().all(|i| i.plot_type == "synth_occupancy"));
    }
}
