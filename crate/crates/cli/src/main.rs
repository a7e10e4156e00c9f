//! `dqm`: operator entry point for every pipeline stage.

mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use dqm_core::catalog::{Catalog, ModelRecord, OperationalRecord};
use dqm_core::classifier::{BackendRegistry, TrainConfig};
use dqm_core::evaluation::{
    calibrate_thresholds, confusion_with_confidence, disagreement_report, infer_all, AugmentedConfusionMatrix,
    Disagreement, ThresholdTable,
};
use dqm_core::gatekeeper::{log_line, Gatekeeper, GatekeeperConfig, SampleConfig};
use dqm_core::labeling::import_labels;
use dqm_core::pipeline::train_plot_type;
use dqm_core::synthgen::{generate_corpus, read_truth_csv, CorpusConfig};

use config::{Config, ConfigError};

const DEFAULT_CONFIG: &str = "hydra.toml";

#[derive(Parser)]
#[command(name = "dqm", version, about = "Data-quality monitoring for detector plots")]
struct Cli {
    /// Config file (default: hydra.toml)
    #[arg(long, global = true, env = "HYDRA_CONFIG")]
    config: Option<PathBuf>,
    /// Override catalog.db_path
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Machine-readable JSON on stdout
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register new images found under the configured roots
    Scan {
        #[arg(long)]
        root: Option<String>,
    },
    /// Train a model for one plot type from its labeled images
    Train {
        plot_type: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        undersample_ratio: Option<f64>,
    },
    /// Run a model over its plot type and summarize errors
    Evaluate { model_id: i64 },
    /// Calibrate alarm thresholds to a target false-positive rate
    Calibrate {
        model_id: i64,
        #[arg(long)]
        target_fpr: f64,
        /// Alarm classes (default: the plot type's configured alarm classes)
        #[arg(long = "alarm-class")]
        alarm_classes: Vec<String>,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Also run the gatekeeper in this process
        #[arg(long)]
        watch: bool,
    },
    /// Run the gatekeeper over the configured roots
    Watch {
        #[arg(long)]
        poll_interval: Option<u64>,
        #[arg(long)]
        sample_rate: Option<f64>,
        /// Poll once and exit
        #[arg(long)]
        once: bool,
    },
    /// Write a labeled synthetic corpus
    Synth {
        #[arg(long)]
        per_class: usize,
        /// Output directory (default: the first configured root)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Confusion matrix, disagreements and thresholds of a model
    Report { model_id: i64 },
    /// Import `path,class` labels (e.g. a synthetic truth.csv)
    ImportLabels {
        csv: PathBuf,
        #[arg(long, default_value = "import")]
        labeler: String,
    },
    /// Manage users and API tokens
    User {
        #[command(subcommand)]
        action: UserAction,
    },
    /// Allow a user to label a plot type
    Grant { user: String, plot_type: String },
}

#[derive(Subcommand)]
enum UserAction {
    /// Create a user and print a fresh token
    Add {
        user: String,
        #[arg(long)]
        admin: bool,
    },
    /// Issue another token for an existing user
    Token { user: String },
}

enum Failure {
    Config(String),
    Op(&'static str, String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<dqm_core::Error> for Failure {
    fn from(e: dqm_core::Error) -> Self {
        Failure::Op(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Op("IoFailure", e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("ConfigInvalid: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Op(kind, msg)) => {
            eprintln!("{kind}: {msg}");
            ExitCode::from(1)
        }
    }
}

struct Ctx {
    cfg: Config,
    catalog: Arc<Catalog>,
    json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> CliResult {
        if self.json {
            let s = serde_json::to_string_pretty(value).map_err(|e| Failure::Op("SerializationFailure", e.to_string()))?;
            println!("{s}");
        } else {
            println!("{}", text());
        }
        Ok(())
    }

    fn gatekeeper(&self) -> CliResult<Arc<Gatekeeper>> {
        let g = &self.cfg.gatekeeper;
        Ok(Arc::new(Gatekeeper::new(
            Arc::clone(&self.catalog),
            BackendRegistry::default(),
            GatekeeperConfig {
                sample: SampleConfig {
                    sample_rate: g.sample_rate,
                    seed: g.seed,
                },
                log_path: Some(g.log_path.clone()),
            },
        )?))
    }
}

fn open(cli: &Cli) -> CliResult<Ctx> {
    let (path, required) = match &cli.config {
        Some(p) => (p.clone(), true),
        None => (PathBuf::from(DEFAULT_CONFIG), false),
    };
    let mut cfg = Config::load(&path, required)?;
    if let Some(db) = &cli.db {
        cfg.catalog.db_path = db.clone();
    }
    if let Some(parent) = cfg.catalog.db_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let catalog = Catalog::open(&cfg.catalog.db_path)?;
    for r in &cfg.roots {
        catalog.add_root(&r.id, &r.path).map_err(|e| Failure::Config(format!("root `{}`: {e}", r.id)))?;
    }
    for set in cfg.class_sets()? {
        catalog.set_class_set(&set)?;
    }
    Ok(Ctx {
        cfg,
        catalog: Arc::new(catalog),
        json: cli.json,
    })
}

fn run(cli: Cli) -> CliResult {
    let ctx = open(&cli)?;
    match cli.command {
        Command::Scan { root } => scan(&ctx, root),
        Command::Train {
            plot_type,
            epochs,
            learning_rate,
            seed,
            train_fraction,
            undersample_ratio,
        } => {
            let mut split = ctx.cfg.dataset.split();
            split.train_fraction = train_fraction.unwrap_or(split.train_fraction);
            split.undersample_ratio = undersample_ratio.unwrap_or(split.undersample_ratio);
            let mut tcfg = TrainConfig::default();
            tcfg.epochs = epochs.unwrap_or(tcfg.epochs);
            tcfg.learning_rate = learning_rate.unwrap_or(tcfg.learning_rate);
            if let Some(s) = seed {
                tcfg.seed = s;
                split.seed = s;
            }
            split.validate().map_err(|e| Failure::Config(e.to_string()))?;
            tcfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let report = train_plot_type(
                &ctx.catalog,
                &BackendRegistry::default(),
                &plot_type,
                &split,
                &ctx.cfg.dataset.class_weight,
                &tcfg,
            )?;
            ctx.emit(&report, || {
                format!(
                    "model {} ({plot_type}): train_acc {:.4}, val_acc {}, {} train / {} validation rows, {:.1}s",
                    report.model.model_id,
                    report.metrics.train_acc,
                    report.metrics.val_acc.map_or("n/a".into(), |v| format!("{v:.4}")),
                    report.train_rows,
                    report.validation_rows,
                    report.elapsed.as_secs_f64()
                )
            })
        }
        Command::Evaluate { model_id } => evaluate(&ctx, model_id),
        Command::Calibrate {
            model_id,
            target_fpr,
            alarm_classes,
        } => {
            if !(target_fpr > 0.0 && target_fpr < 1.0) {
                return Err(Failure::Config(format!("--target-fpr must lie in (0, 1), got {target_fpr}")));
            }
            let model = ctx.catalog.model(model_id)?;
            let alarms = if alarm_classes.is_empty() {
                ctx.catalog.class_set(&model.plot_type)?.alarm_classes
            } else {
                alarm_classes
            };
            let table = calibrate_thresholds(&ctx.catalog, model_id, &alarms, target_fpr)?;
            ctx.emit(&table, || {
                let entries: Vec<String> = table.entries.iter().map(|(c, t)| format!("{c}={t:.6}")).collect();
                format!("threshold table {} for model {model_id}: {}", table.table_id, entries.join(" "))
            })
        }
        Command::Serve { bind, watch } => serve(&ctx, bind, watch),
        Command::Watch {
            poll_interval,
            sample_rate,
            once,
        } => {
            let mut ctx = ctx;
            if let Some(p) = poll_interval {
                ctx.cfg.gatekeeper.poll_interval_s = p;
            }
            if let Some(r) = sample_rate {
                ctx.cfg.gatekeeper.sample_rate = r;
            }
            ctx.cfg.validate()?;
            watch(&ctx, once)
        }
        Command::Synth { per_class, out, seed } => {
            let out = match out {
                Some(o) => o,
                None => ctx
                    .cfg
                    .roots
                    .first()
                    .map(|r| r.path.clone())
                    .ok_or_else(|| Failure::Config("no roots configured; pass --out".into()))?,
            };
            std::fs::create_dir_all(&out)?;
            let report = generate_corpus(&out, &CorpusConfig::balanced(per_class, seed))?;
            let summary = SynthSummary {
                root: out.clone(),
                truth_csv: report.truth_csv.clone(),
                class_counts: report.class_counts(),
            };
            ctx.emit(&summary, || {
                format!("wrote {} images to {} ({})", report.files.len(), out.display(), report.truth_csv.display())
            })
        }
        Command::Report { model_id } => report(&ctx, model_id),
        Command::ImportLabels { csv, labeler } => {
            let rows: Vec<(PathBuf, String)> = read_truth_csv(&csv)?
                .into_iter()
                .map(|f| (std::path::absolute(&f.path).unwrap_or(f.path), f.class_name))
                .collect();
            let n = import_labels(&ctx.catalog, &rows, &labeler)?;
            ctx.emit(&serde_json::json!({ "imported": n }), || format!("imported {n} labels"))
        }
        Command::User { action } => match action {
            UserAction::Add { user, admin } => {
                ctx.catalog.add_user(&user, admin)?;
                let token = ctx.catalog.issue_token(&user)?;
                ctx.emit(&serde_json::json!({ "user": user, "admin": admin, "token": token }), || token.clone())
            }
            UserAction::Token { user } => {
                let token = ctx.catalog.issue_token(&user)?;
                ctx.emit(&serde_json::json!({ "user": user, "token": token }), || token.clone())
            }
        },
        Command::Grant { user, plot_type } => {
            let p = ctx.catalog.insert_permission(&user, &plot_type)?;
            ctx.emit(&p, || format!("{user} may label {plot_type}"))
        }
    }
}

#[derive(Serialize)]
struct SynthSummary {
    root: PathBuf,
    truth_csv: PathBuf,
    class_counts: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct ScanSummary {
    root: String,
    registered: usize,
    existing: usize,
    skipped: Vec<PathBuf>,
}

fn scan(ctx: &Ctx, only: Option<String>) -> CliResult {
    let roots = match only {
        Some(r) => vec![r],
        None => ctx.cfg.root_ids(),
    };
    let mut out = Vec::new();
    for root in roots {
        let r = ctx.catalog.scan_root(&root)?;
        out.push(ScanSummary {
            root,
            registered: r.registered.len(),
            existing: r.existing,
            skipped: r.skipped,
        });
    }
    ctx.emit(&out, || {
        out.iter()
            .map(|s| format!("{}: {} new, {} known, {} skipped", s.root, s.registered, s.existing, s.skipped.len()))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

#[derive(Serialize)]
struct Evaluation {
    model_id: i64,
    inferred: usize,
    accuracy: f64,
    disagreements: Vec<Disagreement>,
}

fn evaluate(ctx: &Ctx, model_id: i64) -> CliResult {
    let inferred = infer_all(&ctx.catalog, &BackendRegistry::default(), model_id, &Default::default())?;
    let matrix = confusion_with_confidence(&ctx.catalog, model_id)?;
    let eval = Evaluation {
        model_id,
        inferred,
        accuracy: matrix.accuracy(),
        disagreements: disagreement_report(&ctx.catalog, model_id)?,
    };
    ctx.emit(&eval, || {
        let mut s = format!(
            "model {model_id}: {inferred} images inferred, accuracy {:.4} on {} labeled, {} disagreements",
            eval.accuracy,
            matrix.total(),
            eval.disagreements.len()
        );
        for d in eval.disagreements.iter().take(20) {
            s.push_str(&format!(
                "\n  image {}: labeled {}, predicted {} ({:.4})",
                d.image_id, d.ground_truth, d.predicted_class, d.confidence
            ));
        }
        s
    })
}

#[derive(Serialize)]
struct Report {
    model: ModelRecord,
    confusion: AugmentedConfusionMatrix,
    disagreements: Vec<Disagreement>,
    thresholds: Option<ThresholdTable>,
}

fn report(ctx: &Ctx, model_id: i64) -> CliResult {
    let r = Report {
        model: ctx.catalog.model(model_id)?,
        confusion: confusion_with_confidence(&ctx.catalog, model_id)?,
        disagreements: disagreement_report(&ctx.catalog, model_id)?,
        thresholds: ctx.catalog.latest_threshold_table(model_id)?,
    };
    ctx.emit(&r, || {
        let names = &r.confusion.class_names;
        let mut s = format!("model {} ({}), truth by row\n{:>10}", model_id, r.model.plot_type, "");
        for n in names {
            s.push_str(&format!(" {n:>16}"));
        }
        for (i, truth) in names.iter().enumerate() {
            s.push_str(&format!("\n{truth:>10}"));
            for cell in &r.confusion.cells[i] {
                s.push_str(&format!(" {:>6} @ {:>7.4}", cell.count, cell.mean_confidence));
            }
        }
        s.push_str(&format!("\naccuracy {:.4}, {} disagreements", r.confusion.accuracy(), r.disagreements.len()));
        if let Some(t) = &r.thresholds {
            let entries: Vec<String> = t.entries.iter().map(|(c, v)| format!("{c}={v:.6}")).collect();
            s.push_str(&format!("\nthresholds (target FPR {}): {}", t.target_fpr, entries.join(" ")));
        }
        s
    })
}

fn print_record(json: bool, r: &OperationalRecord) {
    if json {
        println!("{}", serde_json::to_string(r).unwrap_or_default());
    } else {
        println!("{}", log_line(r));
    }
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Resolves on SIGINT or SIGTERM.
async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn watch(ctx: &Ctx, once: bool) -> CliResult {
    let gk = ctx.gatekeeper()?;
    let roots = ctx.cfg.root_ids();
    if once {
        for r in gk.poll_once(&roots)? {
            print_record(ctx.json, &r);
        }
        return Ok(());
    }
    let interval = Duration::from_secs(ctx.cfg.gatekeeper.poll_interval_s);
    let handle = gk.spawn_watch(roots, interval)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let rt = runtime()?;
    std::thread::spawn(move || {
        rt.block_on(shutdown_signal());
        flag.store(true, Ordering::SeqCst);
    });
    info!("watching every {}s", interval.as_secs());
    while !stop.load(Ordering::SeqCst) {
        if let Ok(r) = handle.records.recv_timeout(Duration::from_millis(200)) {
            print_record(ctx.json, &r);
        }
    }
    while let Ok(r) = handle.records.try_recv() {
        print_record(ctx.json, &r);
    }
    handle.stop()?;
    Ok(())
}

fn serve(ctx: &Ctx, bind: Option<String>, with_watch: bool) -> CliResult {
    let addr = bind.unwrap_or_else(|| ctx.cfg.service.bind_addr.clone());
    let gk = ctx.gatekeeper()?;
    let watcher = if with_watch {
        Some(gk.spawn_watch(ctx.cfg.root_ids(), Duration::from_secs(ctx.cfg.gatekeeper.poll_interval_s))?)
    } else {
        None
    };
    let state = dqm_service::AppState::new(
        Arc::clone(&gk),
        BackendRegistry::default(),
        ctx.cfg.dataset.split(),
        ctx.cfg.dataset.class_weight.clone(),
    );
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::Op("IoFailure", format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr()?;
        eprintln!("listening on http://{local}");
        dqm_service::serve(listener, state, shutdown_signal()).await?;
        Ok::<_, Failure>(())
    })?;
    if let Some(w) = watcher {
        w.stop()?;
    }
    Ok(())
}
