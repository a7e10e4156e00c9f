//! Live operation: classify incoming plots with the deployed model of their
//! plot type, gate alarms on per-class confirmation thresholds, flag
//! under-confident alarm predictions for labeling and draw a fixed-rate
//! unbiased audit sample.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::SecondsFormat;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ClassSet, Decision, NewOperationalRecord, OperationalRecord};
use crate::classifier::{BackendRegistry, ConfidenceVector, LoadedClassifier};
use crate::evaluation::ThresholdTable;
use crate::{Error, Result, Timestamp};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(60);
pub const DEFAULT_SAMPLE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateDecision {
    Ok,
    Alarm(String),
    Flagged(String),
    NoModel,
}

impl GateDecision {
    pub fn kind(&self) -> Decision {
        match self {
            GateDecision::Ok => Decision::Ok,
            GateDecision::Alarm(_) => Decision::Alarm,
            GateDecision::Flagged(_) => Decision::Flagged,
            GateDecision::NoModel => Decision::NoModel,
        }
    }
}

/// Applies confirmation thresholds to one confidence vector.
///
/// A non-alarm argmax is `Ok` whatever its confidence; an alarm-class argmax
/// alarms at or above its threshold and is flagged below it.
pub fn decide(
    confidence: &ConfidenceVector,
    table: &ThresholdTable,
    alarm_classes: &[String],
) -> Result<GateDecision> {
    if confidence.len() != table.entries.len()
        || confidence.class_names().any(|c| !table.entries.contains_key(c))
    {
        return Err(Error::ClassMismatch);
    }
    let (_, class, p) = confidence.argmax().ok_or(Error::ClassMismatch)?;
    if !alarm_classes.iter().any(|a| a == class) {
        return Ok(GateDecision::Ok);
    }
    let threshold = table.entries[class];
    Ok(if p >= threshold {
        GateDecision::Alarm(class.to_string())
    } else {
        GateDecision::Flagged(class.to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GatekeeperConfig {
    pub sample: SampleConfig,
    /// Operational log; none disables file logging.
    pub log_path: Option<PathBuf>,
}

/// Tile of the live status view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub plot_type: String,
    pub image_id: i64,
    pub predicted_class: Option<String>,
    pub confidence: Option<f64>,
    pub decision: Decision,
    pub decided_at: Timestamp,
    /// True exactly for alarms.
    pub highlight: bool,
}

impl From<&OperationalRecord> for StatusEntry {
    fn from(r: &OperationalRecord) -> Self {
        Self {
            plot_type: r.plot_type.clone(),
            image_id: r.image_id,
            predicted_class: r.predicted_class.clone(),
            confidence: r.confidence,
            decision: r.decision,
            decided_at: r.decided_at,
            highlight: r.decision == Decision::Alarm,
        }
    }
}

struct Deployed {
    model_id: i64,
    table_id: i64,
    classifier: Arc<dyn LoadedClassifier>,
    thresholds: ThresholdTable,
    alarm_classes: Vec<String>,
}

pub struct Gatekeeper {
    catalog: Arc<Catalog>,
    registry: BackendRegistry,
    deployed: RwLock<HashMap<String, Option<Arc<Deployed>>>>,
    sample_rate: f64,
    sampler: Mutex<ChaCha8Rng>,
    log: Option<Mutex<BufWriter<File>>>,
}

impl Gatekeeper {
    pub fn new(catalog: Arc<Catalog>, registry: BackendRegistry, config: GatekeeperConfig) -> Result<Self> {
        let rate = config.sample.sample_rate;
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("sample_rate must lie in [0, 1], got {rate}")));
        }
        let log = match &config.log_path {
            Some(p) => Some(Mutex::new(BufWriter::new(open_log(p)?))),
            None => None,
        };
        Ok(Self {
            catalog,
            registry,
            deployed: RwLock::new(HashMap::new()),
            sample_rate: rate,
            sampler: Mutex::new(ChaCha8Rng::seed_from_u64(config.sample.seed)),
            log,
        })
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    /// Drops cached models and thresholds so the next image of each plot type
    /// picks up the newest model and threshold table.
    pub fn reload(&self) {
        self.deployed.write().unwrap_or_else(|p| p.into_inner()).clear();
    }

    fn deployed(&self, plot_type: &str) -> Result<Option<Arc<Deployed>>> {
        if let Some(d) = self.deployed.read().unwrap_or_else(|p| p.into_inner()).get(plot_type) {
            return Ok(d.clone());
        }
        let loaded = match self.catalog.latest_model(plot_type)? {
            None => None,
            Some(model) => {
                let blob = self.catalog.model_blob(model.model_id)?;
                let classifier = self.registry.load(&model.backend, &blob)?;
                let (thresholds, alarm_classes) = match self.catalog.latest_threshold_table(model.model_id)? {
                    Some(t) => {
                        let alarms = t.alarm_classes.clone();
                        (t, alarms)
                    }
                    None => {
                        let set: ClassSet = self.catalog.class_set(plot_type)?;
                        let alarms: Vec<String> = set
                            .alarm_classes
                            .into_iter()
                            .filter(|a| model.class_names.contains(a))
                            .collect();
                        (ThresholdTable::permissive(model.model_id, &model.class_names, &alarms), alarms)
                    }
                };
                info!(
                    "deployed model {} for `{plot_type}` (threshold table {})",
                    model.model_id, thresholds.table_id
                );
                Some(Arc::new(Deployed {
                    model_id: model.model_id,
                    table_id: thresholds.table_id,
                    classifier,
                    thresholds,
                    alarm_classes,
                }))
            }
        };
        self.deployed
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(plot_type.to_string(), loaded.clone());
        Ok(loaded)
    }

    /// Deployed (model id, threshold table id) for a plot type, if any.
    pub fn deployment(&self, plot_type: &str) -> Result<Option<(i64, i64)>> {
        Ok(self.deployed(plot_type)?.map(|d| (d.model_id, d.table_id)))
    }

    fn draw_sample(&self) -> bool {
        self.sampler
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .random_bool(self.sample_rate)
    }

    /// Classifies and gates one registered image, persists the decision and
    /// appends it to the operational log. Unreadable images are recorded as
    /// `NoModel` with a note.
    pub fn process_image(&self, image_id: i64) -> Result<OperationalRecord> {
        let image = self.catalog.image(image_id)?;
        let sampled = self.draw_sample();
        let mut record = NewOperationalRecord {
            image_id,
            model_id: None,
            confidence_vector: ConfidenceVector::default(),
            decision: Decision::NoModel,
            sampled,
            decided_at: crate::now(),
            note: None,
        };
        if let Some(d) = self.deployed(&image.plot_type)? {
            record.model_id = Some(d.model_id);
            let path = self.catalog.resolve_path(image_id)?;
            let inferred = std::fs::read(&path)
                .map_err(|e| Error::CorruptImage(format!("{}: {e}", path.display())))
                .and_then(|bytes| d.classifier.infer(&bytes));
            match inferred {
                Ok(cv) => {
                    record.decision = decide(&cv, &d.thresholds, &d.alarm_classes)?.kind();
                    record.confidence_vector = cv;
                }
                Err(e) => {
                    warn!("image {image_id}: {e}");
                    record.note = Some(format!("{}: {e}", e.kind()));
                }
            }
        }
        record.decided_at = crate::now();
        let stored = self.catalog.insert_operational(&record)?;
        self.write_log(&stored)?;
        Ok(stored)
    }

    fn write_log(&self, r: &OperationalRecord) -> Result<()> {
        let Some(log) = &self.log else {
            return Ok(());
        };
        let mut w = log.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(w, "{}", log_line(r))?;
        w.flush()?;
        Ok(())
    }

    /// Scans every root once and processes each newly registered image.
    /// Unreachable roots are logged and skipped until the next poll.
    pub fn poll_once(&self, roots: &[String]) -> Result<Vec<OperationalRecord>> {
        let mut out = Vec::new();
        for root in roots {
            let report = match self.catalog.scan_root(root) {
                Ok(r) => r,
                Err(e @ Error::RootUnreachable(_)) => {
                    warn!("root `{root}`: {e}; retrying next poll");
                    continue;
                }
                Err(e) => return Err(e),
            };
            for path in &report.skipped {
                warn!("ignoring file outside catalog layout: {}", path.display());
            }
            for image in report.registered {
                out.push(self.process_image(image.image_id)?);
            }
        }
        Ok(out)
    }

    /// Polls until `stop` is set, handing every record to `sink`. The first
    /// poll runs immediately. Thresholds and models are reloaded every poll.
    pub fn watch(
        &self,
        roots: &[String],
        poll_interval: Duration,
        stop: &AtomicBool,
        mut sink: impl FnMut(OperationalRecord),
    ) -> Result<()> {
        if poll_interval < Duration::from_secs(1) {
            return Err(Error::InvalidConfig("poll interval must be at least 1 s".into()));
        }
        while !stop.load(Ordering::SeqCst) {
            let started = Instant::now();
            self.reload();
            match self.poll_once(roots) {
                Ok(records) => records.into_iter().for_each(&mut sink),
                Err(e) => warn!("poll failed: {e}"),
            }
            let next = started + poll_interval;
            while !stop.load(Ordering::SeqCst) {
                let now = Instant::now();
                if now >= next {
                    break;
                }
                std::thread::sleep((next - now).min(Duration::from_millis(50)));
            }
        }
        Ok(())
    }

    /// Runs [`watch`](Self::watch) on a background thread.
    pub fn spawn_watch(self: &Arc<Self>, roots: Vec<String>, poll_interval: Duration) -> Result<WatchHandle> {
        if poll_interval < Duration::from_secs(1) {
            return Err(Error::InvalidConfig("poll interval must be at least 1 s".into()));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let gk = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            gk.watch(&roots, poll_interval, &flag, |r| {
                let _ = tx.send(r);
            })
        });
        Ok(WatchHandle {
            stop,
            thread: Some(thread),
            records: rx,
        })
    }

    /// Most recent decision per plot type.
    pub fn latest_status(&self) -> Result<Vec<StatusEntry>> {
        Ok(self
            .catalog
            .latest_operational_per_plot_type()?
            .iter()
            .map(StatusEntry::from)
            .collect())
    }

    /// Alarms and flags decided within `window` of now, newest first.
    pub fn trailing_view(&self, window: Duration) -> Result<Vec<OperationalRecord>> {
        trailing_view_at(&self.catalog, crate::now(), window)
    }

    /// Sampled images still waiting for a label, oldest first.
    pub fn sampled_queue(&self) -> Result<Vec<i64>> {
        self.catalog.sampled_unlabeled()
    }
}

pub fn trailing_view_at(catalog: &Catalog, now: Timestamp, window: Duration) -> Result<Vec<OperationalRecord>> {
    if window.is_zero() {
        return Err(Error::InvalidConfig("window must be positive".into()));
    }
    let window = chrono::Duration::from_std(window)
        .map_err(|_| Error::InvalidConfig("window too large".into()))?;
    catalog.operational_between(now - window, now, &[Decision::Alarm, Decision::Flagged])
}

/// Tab-separated: time, image id, plot type, predicted class, confidence,
/// decision, sampled.
pub fn log_line(r: &OperationalRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.decided_at.to_rfc3339_opts(SecondsFormat::Secs, true),
        r.image_id,
        r.plot_type,
        r.predicted_class.as_deref().unwrap_or("-"),
        r.confidence.map_or_else(|| "-".to_string(), |c| format!("{c:.6}")),
        r.decision,
        r.sampled
    )
}

fn open_log(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

pub struct WatchHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
    pub records: Receiver<OperationalRecord>,
}

impl WatchHandle {
    pub fn stop(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(Error::InvalidConfig("watcher panicked".into()))),
            None => Ok(()),
        }
    }
}

impl Drop for WatchHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
