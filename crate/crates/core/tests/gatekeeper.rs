mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use dqm_core::catalog::{layout_path, Catalog, Decision};
use dqm_core::classifier::{BackendRegistry, TrainConfig};
use dqm_core::dataset::SplitConfig;
use dqm_core::evaluation::calibrate_thresholds;
use dqm_core::gatekeeper::{trailing_view_at, Gatekeeper, GatekeeperConfig, SampleConfig};
use dqm_core::pipeline::train_plot_type;
use dqm_core::synthgen::{generate_plot, CorpusConfig, FaultKind, FaultSpec, PlotGeometry};

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        input_dims: (32, 24),
        ..TrainConfig::default()
    }
}

fn trained(dir: &std::path::Path) -> (Arc<Catalog>, i64) {
    let cfg = CorpusConfig::balanced(20, 21);
    let (cat, _) = common::labeled_corpus(dir, &cfg);
    let split = SplitConfig {
        train_fraction: 0.8,
        ..SplitConfig::default()
    };
    let report =
        train_plot_type(&cat, &BackendRegistry::default(), &cfg.plot_type, &split, &BTreeMap::new(), &small_train())
            .unwrap();
    (Arc::new(cat), report.model.model_id)
}

fn drop_image(base: &std::path::Path, run: i64, name: &str, bytes: &[u8]) {
    let path = layout_path(base, "RunPeriod-SYN-01", run, name);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::File::create(path).unwrap().write_all(bytes).unwrap();
}

fn gatekeeper(cat: &Arc<Catalog>, log: Option<std::path::PathBuf>) -> Gatekeeper {
    Gatekeeper::new(
        Arc::clone(cat),
        BackendRegistry::default(),
        GatekeeperConfig {
            sample: SampleConfig { sample_rate: 1.0, seed: 1 },
            log_path: log,
        },
    )
    .unwrap()
}

#[test]
fn images_without_a_model_are_recorded_as_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let cat = Arc::new(Catalog::open_in_memory().unwrap());
    cat.add_root("live", dir.path()).unwrap();
    drop_image(dir.path(), 1, "other_20200827T000000Z.png", b"not a png");
    let gk = gatekeeper(&cat, None);
    let recs = gk.poll_once(&["live".into()]).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].decision, Decision::NoModel);
    assert!(recs[0].sampled);
    assert_eq!(gk.sampled_queue().unwrap(), vec![recs[0].image_id]);
    // a second poll sees nothing new
    assert!(gk.poll_once(&["live".into()]).unwrap().is_empty());
}

#[test]
fn live_images_are_gated_logged_and_surface_in_views() {
    let corpus = tempfile::tempdir().unwrap();
    let (cat, model_id) = trained(corpus.path());
    let live = tempfile::tempdir().unwrap();
    cat.add_root("live", live.path()).unwrap();
    let log = live.path().join("logs/gk.log");
    let gk = gatekeeper(&cat, Some(log.clone()));
    assert_eq!(gk.deployment("synth_occupancy").unwrap(), Some((model_id, 0)));

    let g = PlotGeometry::default();
    let (bad, _) = generate_plot(&FaultSpec::new(FaultKind::HalfColumnsDead, 0.0, 5), g);
    let (good, _) = generate_plot(&FaultSpec::new(FaultKind::None, 0.0, 6), g);
    drop_image(live.path(), 7, "synth_occupancy_20300101T000000Z.png", &bad);
    drop_image(live.path(), 7, "synth_occupancy_20300101T000100Z.png", &good);
    drop_image(live.path(), 7, "synth_occupancy_20300101T000200Z.png", b"\x89PNG truncated");
    let recs = gk.poll_once(&["live".into()]).unwrap();
    let decisions: Vec<Decision> = recs.iter().map(|r| r.decision).collect();
    // uncalibrated models use zero thresholds, so Bad predictions alarm
    assert_eq!(decisions, [Decision::Alarm, Decision::Ok, Decision::NoModel]);
    assert!(recs[2].note.as_deref().unwrap().starts_with("CorruptImage"));
    assert!(recs[0].confidence_vector.is_normalized(1e-9));

    let lines: Vec<String> = std::fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields.len(), 7);
    assert_eq!((fields[3], fields[5], fields[6]), ("Bad", "Alarm", "true"));
    assert_eq!(lines[2].split('\t').nth(3), Some("-"));

    let status = gk.latest_status().unwrap();
    let live_tile = status.iter().find(|s| s.image_id == recs[2].image_id).unwrap();
    assert_eq!(live_tile.decision, Decision::NoModel);
    assert!(!live_tile.highlight);

    let review = gk.trailing_view(Duration::from_secs(3600)).unwrap();
    assert_eq!(review.iter().map(|r| r.image_id).collect::<Vec<_>>(), vec![recs[0].image_id]);
    let later = dqm_core::now() + chrono::Duration::hours(3);
    assert!(trailing_view_at(&cat, later, Duration::from_secs(3600)).unwrap().is_empty());
    assert!(gk.trailing_view(Duration::ZERO).is_err());

    // new thresholds apply after a reload
    let table = calibrate_thresholds(&cat, model_id, &["Bad".into()], 0.05).unwrap();
    assert_eq!(gk.deployment("synth_occupancy").unwrap(), Some((model_id, 0)));
    gk.reload();
    assert_eq!(gk.deployment("synth_occupancy").unwrap(), Some((model_id, table.table_id)));
}

#[test]
fn unreachable_roots_are_retried() {
    let parent = tempfile::tempdir().unwrap();
    let base = parent.path().join("mount");
    let cat = Arc::new(Catalog::open_in_memory().unwrap());
    cat.add_root("live", &base).unwrap();
    let gk = gatekeeper(&cat, None);
    assert!(gk.poll_once(&["live".into()]).unwrap().is_empty());
    drop_image(&base, 1, "occ_20200101T000000Z.png", b"x");
    assert_eq!(gk.poll_once(&["live".into()]).unwrap().len(), 1);
}

#[test]
fn watch_rejects_sub_second_polling() {
    let cat = Arc::new(Catalog::open_in_memory().unwrap());
    let gk = Arc::new(gatekeeper(&cat, None));
    assert!(gk.spawn_watch(vec![], Duration::from_millis(500)).is_err());
    let handle = gk.spawn_watch(vec![], Duration::from_secs(1)).unwrap();
    handle.stop().unwrap();
}
