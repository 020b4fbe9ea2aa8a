//! HTTP replan service.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | POST | `/api/session` | optional `{phantom, planning}`; creates a session, freezes its baseline and plans revision 0 with all controls at zero |
//! | POST | `/api/session/{id}/replan` | `{s_bladder, s_rectum, lambda_plus, lambda_minus, iters}`, all optional; unset fields keep their current values |
//! | GET | `/api/session/{id}/dvh` | DVH curves of the latest delivered dose |
//! | GET | `/api/session/{id}/fluence/{cp}` | optimized and delivered fluence and the aperture of one control point |
//! | GET | `/api/session/{id}/metrics` | latest and baseline metrics |
//!
//! Every session response carries `revision`, which increases by one per
//! completed replan. A replan arriving while another runs on the same session
//! gets `409` with a `Retry-After` header. Validation failures give `400` with
//! the offending `field`; unknown sessions and control points give `404`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use arcplan_core::analytics::{dvh, DvhCurve};
use arcplan_core::phantom::{BLADDER, RECTUM};
use arcplan_core::{
    evaluate_dose, generate_phantom, prepare_case, replan, Aperture, MetricReport, PhantomSpec, PlanningConfig,
    PreparedCase, ReplanOutcome, Timings,
};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

/// Upper bound of the OAR suppression controls accepted over HTTP.
pub const MAX_SUPPRESSION: f64 = 0.2;
pub const MAX_ITERS: usize = 200;
pub const DVH_BINS: usize = 100;
/// Suggested client back-off for busy sessions.
pub const RETRY_AFTER_SECONDS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub s_bladder: f64,
    pub s_rectum: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplanBody {
    pub s_bladder: Option<f64>,
    pub s_rectum: Option<f64>,
    pub lambda_plus: Option<f64>,
    pub lambda_minus: Option<f64>,
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateBody {
    pub phantom: PhantomSpec,
    pub planning: PlanningConfig,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad_field(field: &str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into(), field: Some(field.to_string()) }
    }

    fn not_found(message: impl Into<String>, field: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into(), field: Some(field.to_string()) }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.into(), field: None }
    }

    fn busy() -> Self {
        Self {
            status: StatusCode::CONFLICT,
            message: "a replan is already running on this session".into(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "error": self.message });
        if let Some(f) = &self.field {
            body["field"] = f.clone().into();
        }
        if self.status == StatusCode::CONFLICT {
            body["retry_after_ms"] = (RETRY_AFTER_SECONDS * 1000).into();
        }
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::CONFLICT {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECONDS));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Snapshot {
    revision: u64,
    controls: Controls,
    outcome: ReplanOutcome<f64>,
    dvh: Vec<DvhCurve>,
}

pub struct Session {
    id: String,
    case: PreparedCase<f64>,
    /// metrics of the frozen baseline dose
    baseline_metrics: MetricReport,
    busy: AtomicBool,
    latest: Mutex<Arc<Snapshot>>,
}

impl Session {
    fn snapshot(&self) -> Arc<Snapshot> {
        self.latest.lock().expect("snapshot lock").clone()
    }
}

/// Clears the busy flag when the replan ends, however it ends.
struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next_id: AtomicU64,
}

impl AppState {
    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'"), "id"))
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/replan", post(replan_session))
        .route("/api/session/{id}/dvh", get(get_dvh))
        .route("/api/session/{id}/fluence/{cp}", get(get_fluence))
        .route("/api/session/{id}/metrics", get(get_metrics))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback(move |uri: axum::http::Uri| serve_static(dir.clone(), uri)),
        None => api,
    }
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

/// Static UI assets; `/` maps to `index.html`. Paths with `..` or other
/// non-plain components are refused.
async fn serve_static(dir: PathBuf, uri: axum::http::Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = std::path::Path::new(rel);
    if !rel.components().all(|c| matches!(c, std::path::Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = dir.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

fn dvh_curves(outcome: &ReplanOutcome<f64>, case: &PreparedCase<f64>) -> arcplan_core::Result<Vec<DvhCurve>> {
    case.phantom
        .structures
        .masks
        .iter()
        .map(|(name, mask)| dvh(&outcome.delivered_dose, mask, name, DVH_BINS))
        .collect()
}

fn run_replan(case: &PreparedCase<f64>, c: &Controls) -> arcplan_core::Result<(ReplanOutcome<f64>, Vec<DvhCurve>)> {
    let mut request = case.default_request();
    request.objective.oar_controls.insert(BLADDER.into(), c.s_bladder);
    request.objective.oar_controls.insert(RECTUM.into(), c.s_rectum);
    request.objective.lambda_plus = c.lambda_plus;
    request.objective.lambda_minus = c.lambda_minus;
    request.optimizer.max_iters = c.iters;
    let outcome = replan(case, &request)?;
    let curves = dvh_curves(&outcome, case)?;
    Ok((outcome, curves))
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| {
        let text = e.to_string();
        // serde names the offending field in backticks
        let field = text.split('`').nth(1).unwrap_or("body").to_string();
        ApiError::bad_field(&field, text)
    })
}

#[derive(Serialize)]
struct SessionResponse<'a> {
    session_id: &'a str,
    revision: u64,
    controls: Controls,
    metrics: &'a MetricReport,
    baseline_metrics: &'a MetricReport,
    dvh: &'a [DvhCurve],
    timings: &'a Timings,
    leaf_positions_adjusted: usize,
}

fn session_response(s: &Session, snap: &Snapshot) -> Response {
    Json(SessionResponse {
        session_id: &s.id,
        revision: snap.revision,
        controls: snap.controls,
        metrics: &snap.outcome.metrics,
        baseline_metrics: &s.baseline_metrics,
        dvh: &snap.dvh,
        timings: &snap.outcome.timings,
        leaf_positions_adjusted: snap.outcome.travel.adjusted,
    })
    .into_response()
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: CreateBody = parse_body(&body)?;
    body.phantom.validate().map_err(|e| ApiError::bad_field("phantom", e.to_string()))?;
    body.planning.validate().map_err(|e| ApiError::bad_field("planning", e.to_string()))?;
    let id = (state.next_id.fetch_add(1, Ordering::Relaxed) + 1).to_string();
    let built = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        let phantom =
            generate_phantom::<f64>(&body.phantom).map_err(|e| ApiError::bad_field("phantom", e.to_string()))?;
        let case = prepare_case(&body.planning, phantom).map_err(|e| ApiError::bad_field("planning", e.to_string()))?;
        let baseline_metrics =
            evaluate_dose(&case.baseline, &case.phantom.structures).map_err(|e| ApiError::internal(e.to_string()))?;
        let objective = &case.config.objective;
        let controls = Controls {
            s_bladder: 0.0,
            s_rectum: 0.0,
            lambda_plus: objective.lambda_plus,
            lambda_minus: objective.lambda_minus,
            iters: case.config.optimizer.max_iters,
        };
        let (outcome, dvh) = run_replan(&case, &controls).map_err(|e| ApiError::internal(e.to_string()))?;
        let snapshot = Snapshot { revision: 0, controls, outcome, dvh };
        Ok(Session { id, case, baseline_metrics, busy: AtomicBool::new(false), latest: Mutex::new(Arc::new(snapshot)) })
    })
    .await
    .map_err(|e| ApiError::internal(format!("session setup failed: {e}")))??;
    let session = Arc::new(built);
    state.sessions.write().expect("session table lock").insert(session.id.clone(), session.clone());
    let mut resp = session_response(&session, &session.snapshot());
    *resp.status_mut() = StatusCode::CREATED;
    Ok(resp)
}

fn merge_controls(current: Controls, body: &ReplanBody) -> ApiResult<Controls> {
    let mut c = current;
    for (field, value, slot) in
        [("s_bladder", body.s_bladder, &mut c.s_bladder), ("s_rectum", body.s_rectum, &mut c.s_rectum)]
    {
        if let Some(s) = value {
            if !(0.0..=MAX_SUPPRESSION).contains(&s) {
                return Err(ApiError::bad_field(field, format!("{field} must lie in [0, {MAX_SUPPRESSION}], got {s}")));
            }
            *slot = s;
        }
    }
    if let Some(v) = body.lambda_minus {
        c.lambda_minus = v;
    }
    if let Some(v) = body.lambda_plus {
        c.lambda_plus = v;
    }
    if !(c.lambda_minus > 0.0) || !c.lambda_minus.is_finite() {
        return Err(ApiError::bad_field("lambda_minus", format!("lambda_minus must be > 0, got {}", c.lambda_minus)));
    }
    if !(c.lambda_plus > c.lambda_minus) || !c.lambda_plus.is_finite() {
        return Err(ApiError::bad_field(
            "lambda_plus",
            format!("lambda_plus ({}) must exceed lambda_minus ({})", c.lambda_plus, c.lambda_minus),
        ));
    }
    if let Some(n) = body.iters {
        if !(1..=MAX_ITERS).contains(&n) {
            return Err(ApiError::bad_field("iters", format!("iters must lie in [1, {MAX_ITERS}], got {n}")));
        }
        c.iters = n;
    }
    Ok(c)
}

async fn replan_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let body: ReplanBody = parse_body(&body)?;
    let controls = merge_controls(session.snapshot().controls, &body)?;
    if session.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::busy());
    }
    let guard = BusyGuard(session.clone());
    let snap = tokio::task::spawn_blocking(move || -> ApiResult<Arc<Snapshot>> {
        let s = &guard.0;
        let (outcome, dvh) = run_replan(&s.case, &controls).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut latest = s.latest.lock().expect("snapshot lock");
        let snap = Arc::new(Snapshot { revision: latest.revision + 1, controls, outcome, dvh });
        *latest = snap.clone();
        Ok(snap)
    })
    .await
    .map_err(|e| ApiError::internal(format!("replan failed: {e}")))??;
    Ok(session_response(&session, &snap))
}

#[derive(Serialize)]
struct DvhResponse<'a> {
    session_id: &'a str,
    revision: u64,
    prescription_dose: f64,
    curves: &'a [DvhCurve],
}

async fn get_dvh(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let snap = s.snapshot();
    Ok(Json(DvhResponse {
        session_id: &s.id,
        revision: snap.revision,
        prescription_dose: s.case.phantom.structures.prescription_dose,
        curves: &snap.dvh,
    })
    .into_response())
}

#[derive(Serialize)]
struct FluenceResponse<'a> {
    session_id: &'a str,
    revision: u64,
    cp: usize,
    gantry_angle: f64,
    height: usize,
    width: usize,
    /// mm per pixel at the isocenter plane
    spacing: f64,
    /// row-major `height x width`
    optimized: &'a [f64],
    delivered: &'a [f64],
    aperture: &'a Aperture,
}

async fn get_fluence(
    State(state): State<Arc<AppState>>,
    Path((id, cp)): Path<(String, String)>,
) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let cp: usize =
        cp.parse().map_err(|_| ApiError::bad_field("cp", format!("'{cp}' is not a control point index")))?;
    let snap = s.snapshot();
    let f = &snap.outcome.result.fluence;
    if cp >= f.n_cp {
        return Err(ApiError::not_found(format!("control point {cp} out of range (arc has {})", f.n_cp), "cp"));
    }
    let aperture = &snap.outcome.plan.apertures[cp];
    Ok(Json(FluenceResponse {
        session_id: &s.id,
        revision: snap.revision,
        cp,
        gantry_angle: aperture.gantry_angle,
        height: f.height,
        width: f.width,
        spacing: f.spacing,
        optimized: f.slice(cp),
        delivered: snap.outcome.delivered_fluence.slice(cp),
        aperture,
    })
    .into_response())
}

#[derive(Serialize)]
struct MetricsResponse<'a> {
    session_id: &'a str,
    revision: u64,
    controls: Controls,
    metrics: &'a MetricReport,
    baseline_metrics: &'a MetricReport,
}

async fn get_metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let snap = s.snapshot();
    Ok(Json(MetricsResponse {
        session_id: &s.id,
        revision: snap.revision,
        controls: snap.controls,
        metrics: &snap.outcome.metrics,
        baseline_metrics: &s.baseline_metrics,
    })
    .into_response())
}
