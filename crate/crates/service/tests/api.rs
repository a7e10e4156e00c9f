use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dqm_core::catalog::Catalog;
use dqm_core::classifier::BackendRegistry;
use dqm_core::dataset::SplitConfig;
use dqm_core::evaluation::confusion_with_confidence;
use dqm_core::gatekeeper::{Gatekeeper, GatekeeperConfig, SampleConfig};
use dqm_core::labeling::{get_unlabeled_grid, grant_permission, import_labels};
use dqm_core::synthgen::{generate_corpus, CorpusConfig, CorpusReport};
use dqm_service::{router, AppState};

const PLOT: &str = "synth_occupancy";

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: CorpusReport,
    catalog: Arc<Catalog>,
    gatekeeper: Arc<Gatekeeper>,
    state: AppState,
    admin: String,
    ann: String,
    bob: String,
}

impl Fixture {
    fn new(per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(dir.path(), &CorpusConfig::balanced(per_class, 8)).unwrap();
        let catalog = Arc::new(Catalog::open_in_memory().unwrap());
        catalog.add_root("syn", dir.path()).unwrap();
        catalog.scan_root("syn").unwrap();
        catalog.add_user("admin", true).unwrap();
        catalog.add_user("ann", false).unwrap();
        catalog.add_user("bob", false).unwrap();
        grant_permission(&catalog, "admin", "ann", PLOT).unwrap();
        let gatekeeper = Arc::new(
            Gatekeeper::new(
                Arc::clone(&catalog),
                BackendRegistry::default(),
                GatekeeperConfig {
                    sample: SampleConfig { sample_rate: 0.5, seed: 3 },
                    log_path: None,
                },
            )
            .unwrap(),
        );
        let split = SplitConfig {
            train_fraction: 0.75,
            ..SplitConfig::default()
        };
        let state = AppState::new(Arc::clone(&gatekeeper), BackendRegistry::default(), split, BTreeMap::new());
        Self {
            admin: catalog.issue_token("admin").unwrap(),
            ann: catalog.issue_token("ann").unwrap(),
            bob: catalog.issue_token("bob").unwrap(),
            _dir: dir,
            corpus,
            catalog,
            gatekeeper,
            state,
        }
    }

    fn app(&self) -> Router {
        router(self.state.clone())
    }

    fn label_everything(&self) {
        let rows: Vec<(PathBuf, String)> =
            self.corpus.files.iter().map(|f| (f.path.clone(), f.class_name.clone())).collect();
        import_labels(&self.catalog, &rows, "truth").unwrap();
    }

    fn image_ids(&self) -> Vec<i64> {
        self.catalog
            .query_images(&Default::default())
            .unwrap()
            .into_iter()
            .map(|(i, _)| i.image_id)
            .collect()
    }
}

async fn call(app: Router, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: Router, uri: &str, token: Option<&str>) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::GET, uri, token, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_json(app: Router, uri: &str, token: Option<&str>, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::POST, uri, token, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap())
}

#[tokio::test]
async fn status_and_review_are_public_pass_throughs() {
    let f = Fixture::new(3);
    let (s, v) = get_json(f.app(), "/status", None).await;
    assert_eq!((s, v), (StatusCode::OK, json!([])));

    f.label_everything();
    let (s, _) = post_json(f.app(), "/admin/train", Some(&f.admin), json!({
        "plot_type": PLOT, "config": {"epochs": 30, "input_dims": [32, 24]}
    }))
    .await;
    assert_eq!(s, StatusCode::OK);
    for id in f.image_ids() {
        f.gatekeeper.process_image(id).unwrap();
    }
    let (s, v) = get_json(f.app(), "/status", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, serde_json::to_value(f.gatekeeper.latest_status().unwrap()).unwrap());
    assert_eq!(v.as_array().unwrap().len(), 1);
    let entry = &v[0];
    assert_eq!(entry["highlight"].as_bool().unwrap(), entry["decision"] == "Alarm");

    let (s, v) = get_json(f.app(), "/review", None).await;
    assert_eq!(s, StatusCode::OK);
    let expected = f.gatekeeper.trailing_view(Duration::from_secs(24 * 3600)).unwrap();
    assert_eq!(v, serde_json::to_value(&expected).unwrap());
    assert!(!expected.is_empty(), "uncalibrated model alarms on every Bad prediction");
    for bad in ["0", "-3", "abc"] {
        let (s, _) = call(f.app(), Method::GET, &format!("/review?window_hours={bad}"), None, None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "window_hours={bad}");
    }

    let (s, _) = call(f.app(), Method::GET, "/queue", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, v) = get_json(f.app(), "/queue", Some(&f.ann)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, serde_json::to_value(f.gatekeeper.sampled_queue().unwrap()).unwrap());
}

#[tokio::test]
async fn grid_requires_a_token_and_matches_the_labeling_module() {
    let f = Fixture::new(4);
    let (s, v) = get_json(f.app(), &format!("/label/grid?plot_type={PLOT}&page=1&size=5"), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"], "Unauthorized");
    let (s, _) = call(f.app(), Method::GET, "/label/grid?plot_type=x", Some("forged"), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);

    let (s, v) = get_json(f.app(), &format!("/label/grid?plot_type={PLOT}&page=1&size=5"), Some(&f.bob)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, serde_json::to_value(get_unlabeled_grid(&f.catalog, PLOT, 1, 5).unwrap()).unwrap());
    assert_eq!(v["items"].as_array().unwrap().len(), 5);

    let (s, v) = get_json(f.app(), "/label/grid?plot_type=nope", Some(&f.bob)).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownPlotType")));
}

#[tokio::test]
async fn labeling_enforces_permissions() {
    let f = Fixture::new(2);
    let ids = f.image_ids();
    let body = json!({"image_id": ids[0], "class": "Bad"});
    let (s, _) = post_json(f.app(), "/label", None, body.clone()).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, v) = post_json(f.app(), "/label", Some(&f.bob), body.clone()).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::FORBIDDEN, Some("PermissionDenied")));
    assert_eq!(f.catalog.label_count().unwrap(), 0);

    let (s, v) = post_json(f.app(), "/label", Some(&f.ann), body).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["labeler"], "ann");
    assert_eq!(f.catalog.effective_label(ids[0]).unwrap().as_deref(), Some("Bad"));

    let (s, _) = post_json(f.app(), "/label", Some(&f.ann), json!({"image_id": 999_999, "class": "Bad"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = post_json(f.app(), "/label", Some(&f.ann), json!({"image_id": ids[1], "class": "Mauve"})).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("UnknownClass")));
}

#[tokio::test]
async fn range_label_across_a_page_boundary() {
    let f = Fixture::new(4);
    let page0 = get_unlabeled_grid(&f.catalog, PLOT, 0, 3).unwrap();
    let page1 = get_unlabeled_grid(&f.catalog, PLOT, 1, 3).unwrap();
    // last tile of page 0 to last tile of page 1: four images inclusive
    let anchor = page0.items[2].image.image_id;
    let target = page1.items[2].image.image_id;
    let body = json!({"anchor_id": anchor, "target_id": target, "class": "NoData"});
    let (s, _) = post_json(f.app(), "/label/range", Some(&f.bob), body.clone()).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, v) = post_json(f.app(), "/label/range", Some(&f.ann), body).await;
    assert_eq!((s, v), (StatusCode::OK, json!({"labeled": 4})));
    let (s, _) = post_json(f.app(), "/label/range", Some(&f.ann), json!({"anchor_id": anchor, "target_id": -1, "class": "Bad"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn images_are_served_as_png() {
    let f = Fixture::new(1);
    let id = f.image_ids()[0];
    let path = f.catalog.resolve_path(id).unwrap();
    let req = Request::get(format!("/images/{id}/full")).body(Body::empty()).unwrap();
    let resp = f.app().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(bytes.as_ref(), std::fs::read(&path).unwrap().as_slice());

    let (s, thumb) = call(f.app(), Method::GET, &format!("/images/{id}/thumb"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(thumb.starts_with(b"\x89PNG"));
    assert!(thumb.len() < bytes.len());

    for uri in ["/images/424242/full", "/images/424242/thumb"] {
        let (s, _) = call(f.app(), Method::GET, uri, None, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
    }
}

#[tokio::test]
async fn admin_endpoints_train_list_and_calibrate() {
    let f = Fixture::new(6);
    f.label_everything();
    let train = json!({"plot_type": PLOT, "config": {"epochs": 20, "input_dims": [32, 24]}});
    let (s, _) = post_json(f.app(), "/admin/train", None, train.clone()).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, v) = post_json(f.app(), "/admin/train", Some(&f.ann), train.clone()).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::FORBIDDEN, Some("NotAdmin")));

    let (s, first) = post_json(f.app(), "/admin/train", Some(&f.admin), train.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let (s, second) = post_json(f.app(), "/admin/train", Some(&f.admin), train).await;
    assert_eq!(s, StatusCode::OK);
    let (first_id, second_id) = (first["model"]["model_id"].as_i64().unwrap(), second["model"]["model_id"].as_i64().unwrap());

    let (s, models) = get_json(f.app(), "/models", Some(&f.ann)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(models, serde_json::to_value(f.catalog.models().unwrap()).unwrap());
    let ids: Vec<i64> = models.as_array().unwrap().iter().map(|m| m["model_id"].as_i64().unwrap()).collect();
    assert_eq!(ids, vec![second_id, first_id]);

    let (s, cm) = get_json(f.app(), &format!("/models/{first_id}/confusion"), Some(&f.ann)).await;
    assert_eq!(s, StatusCode::OK);
    let expected = confusion_with_confidence(&f.catalog, first_id).unwrap();
    assert_eq!(cm, serde_json::to_value(&expected).unwrap());
    let back: dqm_core::evaluation::AugmentedConfusionMatrix = serde_json::from_value(cm).unwrap();
    assert_eq!(back, expected);
    let (s, _) = call(f.app(), Method::GET, "/models/777/confusion", Some(&f.ann), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let cal = json!({"model_id": second_id, "alarm_classes": ["Bad"], "target_fpr": 0.05});
    let (s, _) = post_json(f.app(), "/admin/thresholds", Some(&f.bob), cal.clone()).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, table) = post_json(f.app(), "/admin/thresholds", Some(&f.admin), cal).await;
    assert_eq!(s, StatusCode::OK);
    let stored = f.catalog.latest_threshold_table(second_id).unwrap().unwrap();
    assert_eq!(table, serde_json::to_value(&stored).unwrap());
    assert_eq!(f.gatekeeper.deployment(PLOT).unwrap(), Some((second_id, stored.table_id)));
    let (s, _) = post_json(f.app(), "/admin/thresholds", Some(&f.admin), json!({"model_id": second_id, "alarm_classes": ["Bad"], "target_fpr": 1.5})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn training_an_unlabeled_class_fails_cleanly() {
    let f = Fixture::new(2);
    let (s, v) = post_json(f.app(), "/admin/train", Some(&f.admin), json!({"plot_type": PLOT})).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("EmptyClass")));
    assert!(!f.state.is_training(PLOT));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_training_of_one_plot_type_conflicts() {
    let f = Fixture::new(6);
    f.label_everything();
    let slow = json!({"plot_type": PLOT, "config": {"epochs": 4000, "input_dims": [32, 24]}});
    let app = f.app();
    let admin = f.admin.clone();
    let body = slow.clone();
    let first = tokio::spawn(async move { post_json(app, "/admin/train", Some(&admin), body).await });
    while !f.state.is_training(PLOT) {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let (s, v) = post_json(f.app(), "/admin/train", Some(&f.admin), slow).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("TrainingInProgress")));
    let (s, _) = first.await.unwrap();
    assert_eq!(s, StatusCode::OK);
    assert!(!f.state.is_training(PLOT));
}
