//! HTTP/JSON facade over labeling, evaluation and gatekeeper state.
//!
//! `/status`, `/review` and the image endpoints are public; everything else
//! needs `Authorization: Bearer <token>`, and `/admin/*` needs an admin.

use std::collections::{BTreeMap, HashSet};
use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use dqm_core::catalog::{Catalog, LabelRecord, ModelRecord, OperationalRecord, User};
use dqm_core::classifier::{BackendRegistry, TrainConfig};
use dqm_core::dataset::SplitConfig;
use dqm_core::evaluation::{calibrate_thresholds, confusion_with_confidence, AugmentedConfusionMatrix, ThresholdTable};
use dqm_core::gatekeeper::{Gatekeeper, StatusEntry};
use dqm_core::labeling::{self, GridPage};
use dqm_core::pipeline::{train_plot_type, TrainingReport};
use dqm_core::Error;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const DEFAULT_WINDOW_HOURS: f64 = 24.0;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    catalog: Arc<Catalog>,
    registry: BackendRegistry,
    gatekeeper: Arc<Gatekeeper>,
    split: SplitConfig,
    class_weights: BTreeMap<String, u32>,
    training: Mutex<HashSet<String>>,
}

impl AppState {
    /// `split` and `class_weights` apply to every training request.
    pub fn new(
        gatekeeper: Arc<Gatekeeper>,
        registry: BackendRegistry,
        split: SplitConfig,
        class_weights: BTreeMap<String, u32>,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                catalog: Arc::clone(gatekeeper.catalog()),
                registry,
                gatekeeper,
                split,
                class_weights,
                training: Mutex::new(HashSet::new()),
            }),
        }
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.inner.catalog
    }

    pub fn is_training(&self, plot_type: &str) -> bool {
        self.inner.training.lock().unwrap_or_else(|p| p.into_inner()).contains(plot_type)
    }
}

/// JSON error body: `{"error": <kind>, "message": <text>}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.to_string(),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownImage(_)
            | Error::UnknownModel(_)
            | Error::UnknownPlotType(_)
            | Error::UnknownRoot(_) => StatusCode::NOT_FOUND,
            Error::PermissionDenied { .. } | Error::NotAdmin(_) => StatusCode::FORBIDDEN,
            Error::Io(_)
            | Error::Store(_)
            | Error::Json(_)
            | Error::BackendUnavailable(_)
            | Error::MalformedModel(_)
            | Error::RootUnreachable(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.kind, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// A request carrying a valid bearer token.
pub struct AuthUser(pub User);

impl FromRequestParts<AppState> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let unauthorized = || ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid bearer token");
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(unauthorized)?;
        match state.catalog().user_for_token(token)? {
            Some(user) => Ok(AuthUser(user)),
            None => Err(unauthorized()),
        }
    }
}

/// A request carrying an administrator's token.
pub struct AdminUser(pub User);

impl FromRequestParts<AppState> for AdminUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let AuthUser(user) = AuthUser::from_request_parts(parts, state).await?;
        if user.is_admin {
            Ok(AdminUser(user))
        } else {
            Err(Error::NotAdmin(user.user_id).into())
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/review", get(review))
        .route("/queue", get(queue))
        .route("/label/grid", get(grid))
        .route("/label", post(label))
        .route("/label/range", post(label_range))
        .route("/images/{id}/thumb", get(thumb))
        .route("/images/{id}/full", get(full))
        .route("/models", get(models))
        .route("/models/{id}/confusion", get(confusion))
        .route("/admin/train", post(admin_train))
        .route("/admin/thresholds", post(admin_thresholds))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn status(State(s): State<AppState>) -> ApiResult<Vec<StatusEntry>> {
    Ok(Json(s.inner.gatekeeper.latest_status()?))
}

#[derive(Debug, Deserialize)]
pub struct ReviewParams {
    pub window_hours: Option<f64>,
}

async fn review(State(s): State<AppState>, Query(q): Query<ReviewParams>) -> ApiResult<Vec<OperationalRecord>> {
    let hours = q.window_hours.unwrap_or(DEFAULT_WINDOW_HOURS);
    let window = Duration::try_from_secs_f64(hours * 3600.0)
        .ok()
        .filter(|w| !w.is_zero() && hours > 0.0)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "InvalidConfig", "window_hours must be positive"))?;
    Ok(Json(s.inner.gatekeeper.trailing_view(window)?))
}

async fn queue(State(s): State<AppState>, _: AuthUser) -> ApiResult<Vec<i64>> {
    Ok(Json(s.inner.gatekeeper.sampled_queue()?))
}

#[derive(Debug, Deserialize)]
pub struct GridParams {
    pub plot_type: String,
    #[serde(default)]
    pub page: usize,
    pub size: Option<usize>,
}

async fn grid(State(s): State<AppState>, _: AuthUser, Query(q): Query<GridParams>) -> ApiResult<GridPage> {
    let size = q.size.unwrap_or(DEFAULT_PAGE_SIZE);
    Ok(Json(labeling::get_unlabeled_grid(s.catalog(), &q.plot_type, q.page, size)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub image_id: i64,
    pub class: String,
}

async fn label(State(s): State<AppState>, AuthUser(user): AuthUser, Json(r): Json<LabelRequest>) -> ApiResult<LabelRecord> {
    Ok(Json(labeling::apply_label(s.catalog(), &user.user_id, r.image_id, &r.class)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RangeLabelRequest {
    pub anchor_id: i64,
    pub target_id: i64,
    pub class: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RangeLabelResponse {
    pub labeled: usize,
}

async fn label_range(
    State(s): State<AppState>,
    AuthUser(user): AuthUser,
    Json(r): Json<RangeLabelRequest>,
) -> ApiResult<RangeLabelResponse> {
    let labeled = labeling::apply_range_label(s.catalog(), &user.user_id, r.anchor_id, r.target_id, &r.class)?;
    Ok(Json(RangeLabelResponse { labeled }))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn read_image(s: &AppState, id: i64) -> Result<Vec<u8>, ApiError> {
    let path = s.catalog().resolve_path(id)?;
    std::fs::read(&path).map_err(|e| {
        ApiError::new(StatusCode::NOT_FOUND, "ImageMissing", format!("{}: {e}", path.display()))
    })
}

async fn full(State(s): State<AppState>, Path(id): Path<i64>) -> Result<Response, ApiError> {
    Ok(png(read_image(&s, id)?))
}

async fn thumb(State(s): State<AppState>, Path(id): Path<i64>) -> Result<Response, ApiError> {
    Ok(png(labeling::thumbnail(&read_image(&s, id)?)?))
}

async fn models(State(s): State<AppState>, _: AuthUser) -> ApiResult<Vec<ModelRecord>> {
    Ok(Json(s.catalog().models()?))
}

async fn confusion(State(s): State<AppState>, _: AuthUser, Path(id): Path<i64>) -> ApiResult<AugmentedConfusionMatrix> {
    Ok(Json(confusion_with_confidence(s.catalog(), id)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainRequest {
    pub plot_type: String,
    #[serde(default)]
    pub config: TrainConfig,
}

/// Removes the plot type from the in-progress set when training ends,
/// including on panic or cancellation.
struct TrainingGuard {
    state: AppState,
    plot_type: String,
}

impl Drop for TrainingGuard {
    fn drop(&mut self) {
        self.state
            .inner
            .training
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&self.plot_type);
    }
}

async fn admin_train(
    State(s): State<AppState>,
    _: AdminUser,
    Json(r): Json<TrainRequest>,
) -> ApiResult<TrainingReport> {
    let fresh = s
        .inner
        .training
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .insert(r.plot_type.clone());
    if !fresh {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "TrainingInProgress",
            format!("a model for `{}` is already training", r.plot_type),
        ));
    }
    let guard = TrainingGuard {
        state: s.clone(),
        plot_type: r.plot_type.clone(),
    };
    let report = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let inner = &s.inner;
        let report = train_plot_type(
            &inner.catalog,
            &inner.registry,
            &r.plot_type,
            &inner.split,
            &inner.class_weights,
            &r.config,
        );
        inner.gatekeeper.reload();
        report
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(report))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThresholdRequest {
    pub model_id: i64,
    pub alarm_classes: Vec<String>,
    pub target_fpr: f64,
}

async fn admin_thresholds(
    State(s): State<AppState>,
    _: AdminUser,
    Json(r): Json<ThresholdRequest>,
) -> ApiResult<ThresholdTable> {
    let table = calibrate_thresholds(s.catalog(), r.model_id, &r.alarm_classes, r.target_fpr)?;
    s.inner.gatekeeper.reload();
    Ok(Json(table))
}
