//! HTTP+JSON API for the reader-verified tracking loop.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/cases` | case summaries ordered by id |
//! | GET | `/cases/{id}` | case detail with lesion sessions |
//! | GET | `/cases/{id}/slice?tp=&axis=&index=&window=&level=` | 8-bit slice with overlays |
//! | GET | `/cases/{id}/lesions/{lid}/proposal` | registration-proposed click (cached) |
//! | POST | `/cases/{id}/lesions/{lid}/verify` | `{"point": [z, y, x]}` corrects, `{}` accepts |
//! | GET | `/cases/{id}/lesions/{lid}/segmentation` | session with its RLE mask |
//! | DELETE | `/cases/{id}/lesions/{lid}/session` | discards a session |

pub mod queue;
pub mod render;
pub mod rle;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use longitrack_core::harness::load_manifest;
use longitrack_core::net::Model;
use longitrack_core::registration::{propose_followup_prompt, AffineConfig, RegistrationConfig, RegistrationResult};
use longitrack_core::volume::in_bounds;
use longitrack_core::{CaseKind, LongitudinalCase, PromptPoint, PromptRole};

pub use queue::{InferenceQueue, BASELINE_CACHE_ENTRIES};
pub use render::SliceAxis;
pub use rle::RleMask;
pub use session::{SessionState, SessionStatus};

/// Points within this many slices of the displayed one are overlaid.
pub const OVERLAY_SLICE_RANGE: i64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<longitrack_core::Error> for ApiError {
    fn from(e: longitrack_core::Error) -> Self {
        use longitrack_core::Error as E;
        match e {
            E::MissingLesion(_) => ApiError::NotFound(e.to_string()),
            E::OutOfBounds { .. } | E::Validation(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct CaseEntry {
    case: Arc<LongitudinalCase>,
    /// Auto `(window, level)` per timepoint.
    windows: [(f64, f64); 2],
}

/// Shared server state: read-only cases plus per-lesion sessions.
pub struct AppState {
    cases: BTreeMap<String, CaseEntry>,
    registration: RegistrationConfig,
    fields: Mutex<HashMap<String, Arc<RegistrationResult>>>,
    sessions: Mutex<HashMap<(String, u32), SessionState>>,
    queue: Option<InferenceQueue>,
}

impl AppState {
    pub fn new(cases: Vec<LongitudinalCase>, model: Option<Model>, registration: RegistrationConfig) -> Self {
        let cases = cases
            .into_iter()
            .map(|c| {
                let windows = [
                    render::auto_window(c.baseline.volume.data()),
                    render::auto_window(c.followup.volume.data()),
                ];
                (c.case_id.clone(), CaseEntry { case: Arc::new(c), windows })
            })
            .collect();
        Self {
            cases,
            registration,
            fields: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            queue: model.map(InferenceQueue::start),
        }
    }

    /// Loads `DIR/manifest.json`; a directory without one serves no cases.
    pub fn load(data_dir: &Path, model: Option<Model>, registration: RegistrationConfig) -> longitrack_core::Result<Self> {
        let manifest = data_dir.join("manifest.json");
        let cases = if manifest.exists() { load_manifest(&manifest)? } else { Vec::new() };
        Ok(Self::new(cases, model, registration))
    }

    fn entry(&self, id: &str) -> ApiResult<&CaseEntry> {
        self.cases.get(id).ok_or_else(|| ApiError::NotFound(format!("unknown case {id}")))
    }

    fn session(&self, id: &str, lid: u32) -> Option<SessionState> {
        self.sessions.lock().expect("session lock").get(&(id.to_string(), lid)).cloned()
    }

    fn registration_for(&self, case: &LongitudinalCase) -> RegistrationConfig {
        match (&self.registration, &case.truth_field) {
            (RegistrationConfig::Truth { .. }, None) => RegistrationConfig::Affine(AffineConfig::default()),
            (r, _) => r.clone(),
        }
    }

    fn field(&self, case: &LongitudinalCase) -> ApiResult<Arc<RegistrationResult>> {
        if let Some(f) = self.fields.lock().expect("field lock").get(&case.case_id) {
            return Ok(Arc::clone(f));
        }
        let reg = Arc::new(self.registration_for(case).register(case)?);
        let mut fields = self.fields.lock().expect("field lock");
        Ok(Arc::clone(fields.entry(case.case_id.clone()).or_insert(reg)))
    }

    /// Cached proposal for a lesion, opening its session on first use. With a
    /// model loaded this also encodes the baseline VOI, so it blocks until the
    /// inference worker gets to it.
    pub fn proposal(&self, id: &str, lid: u32) -> ApiResult<SessionState> {
        let session = self.open_session(id, lid)?;
        if let Some(queue) = &self.queue {
            let case = Arc::clone(&self.entry(id)?.case);
            let p0 = case.baseline_prompts[&lid];
            queue
                .prepare_blocking(case, p0)
                .ok_or_else(|| ApiError::Internal("inference worker stopped".into()))??;
        }
        Ok(session)
    }

    fn open_session(&self, id: &str, lid: u32) -> ApiResult<SessionState> {
        let entry = self.entry(id)?;
        if !entry.case.baseline_prompts.contains_key(&lid) {
            return Err(ApiError::NotFound(format!("case {id} has no baseline lesion {lid}")));
        }
        if let Some(s) = self.session(id, lid) {
            return Ok(s);
        }
        let field = self.field(&entry.case)?;
        let proposed = propose_followup_prompt(&entry.case, lid, &field)?;
        let mut sessions = self.sessions.lock().expect("session lock");
        Ok(sessions.entry((id.to_string(), lid)).or_insert_with(|| SessionState::new(id, lid, proposed)).clone())
    }

    /// Accepts (no point) or corrects the proposal, then segments.
    pub async fn verify(&self, id: &str, lid: u32, point: Option<[i64; 3]>) -> ApiResult<SessionState> {
        let queue = self.queue.as_ref().ok_or_else(|| ApiError::Unavailable("no model loaded".into()))?;
        let session = self.open_session(id, lid)?;
        if session.status != SessionStatus::Proposed {
            return Err(ApiError::Conflict(format!("lesion {lid} of {id} is already {:?}", session.status)));
        }
        let case = Arc::clone(&self.entry(id)?.case);
        let shape = case.shape();
        let verified = match point {
            Some(p) if !in_bounds(p, shape) => {
                return Err(ApiError::BadRequest(format!("point {p:?} lies outside volume {shape:?}")));
            }
            Some(p) => PromptPoint::new(p, PromptRole::Verified, lid),
            None => session.proposed.with_role(PromptRole::Verified),
        };
        let p0 = case.baseline_prompts[&lid];
        let pred = queue
            .predict(Arc::clone(&case), p0, verified)
            .await
            .ok_or_else(|| ApiError::Internal("inference worker stopped".into()))??;
        let (offset, extent) = clip_window(pred.window.start, pred.window.size, shape);
        let rle = RleMask::encode_box(&pred.mask, offset, extent).map_err(|e| ApiError::Internal(e.to_string()))?;

        let mut sessions = self.sessions.lock().expect("session lock");
        let s = sessions.get_mut(&(id.to_string(), lid)).ok_or_else(|| ApiError::Conflict("session was discarded".into()))?;
        let mut next = s.clone();
        next.verify(verified).map_err(|e| ApiError::Conflict(e.to_string()))?;
        next.segment(rle).map_err(|e| ApiError::Conflict(e.to_string()))?;
        *s = next.clone();
        Ok(next)
    }

    pub fn reset(&self, id: &str, lid: u32) -> ApiResult<()> {
        self.entry(id)?;
        self.sessions.lock().expect("session lock").remove(&(id.to_string(), lid));
        Ok(())
    }

    pub fn summaries(&self) -> Vec<CaseSummary> {
        self.cases.values().map(|e| self.summary(&e.case)).collect()
    }

    fn summary(&self, c: &LongitudinalCase) -> CaseSummary {
        let sessions = self.sessions.lock().expect("session lock");
        let states: Vec<SessionStatus> = c
            .lesion_ids()
            .iter()
            .filter_map(|&l| sessions.get(&(c.case_id.clone(), l)).map(|s| s.status))
            .collect();
        let status = if states.is_empty() {
            "new"
        } else if states.len() == c.lesion_ids().len() && states.iter().all(|&s| s == SessionStatus::Segmented) {
            "segmented"
        } else {
            "in_progress"
        };
        CaseSummary {
            case_id: c.case_id.clone(),
            kind: c.kind,
            timepoints: vec!["baseline".into(), "followup".into()],
            shape: c.shape(),
            lesion_count: c.baseline_prompts.len(),
            status: status.into(),
        }
    }

    pub fn slice(&self, id: &str, q: &SliceQuery) -> ApiResult<SlicePayload> {
        let entry = self.entry(id)?;
        let c = &entry.case;
        let (tp_index, tp) = match q.tp.as_deref().unwrap_or("followup") {
            "baseline" => (0, &c.baseline),
            "followup" => (1, &c.followup),
            other => return Err(ApiError::BadRequest(format!("unknown timepoint {other:?}"))),
        };
        let axis = q.axis.unwrap_or(SliceAxis::Z);
        let depth = c.shape()[axis.index()];
        if q.index >= depth {
            return Err(ApiError::NotFound(format!("slice {} outside 0..{depth} along {axis:?}", q.index)));
        }
        let (aw, al) = entry.windows[tp_index];
        let (window, level) = (q.window.unwrap_or(aw), q.level.unwrap_or(al));
        let img = render::slice(tp.volume.data(), axis, q.index);
        let (height, width) = img.dim();
        let pixels = base64::engine::general_purpose::STANDARD.encode(render::to_u8(&img, window, level));

        let mut points = Vec::new();
        let mut contours = Vec::new();
        let mut overlay = |p: &PromptPoint| {
            let (s, row, col) = axis.project(p.coord);
            let off = s - q.index as i64;
            if off.abs() <= OVERLAY_SLICE_RANGE {
                points.push(PointOverlay { lesion_id: p.lesion_id, role: p.role, row, col, slice_offset: off });
            }
        };
        if tp_index == 0 {
            c.baseline_prompts.values().for_each(&mut overlay);
        } else {
            let sessions = self.sessions.lock().expect("session lock");
            for lid in c.lesion_ids() {
                let Some(s) = sessions.get(&(id.to_string(), lid)) else { continue };
                overlay(&s.proposed);
                if let Some(v) = &s.verified {
                    overlay(v);
                }
                if let Some(rle) = &s.segmentation {
                    let dense = rle.decode().map_err(|e| ApiError::Internal(e.to_string()))?;
                    let ring = render::contour(&render::slice_bool(&dense, axis, q.index));
                    if !ring.is_empty() {
                        contours.push(ContourOverlay { lesion_id: lid, pixels: ring });
                    }
                }
            }
        }
        Ok(SlicePayload {
            case_id: id.to_string(),
            timepoint: if tp_index == 0 { "baseline" } else { "followup" }.into(),
            axis,
            index: q.index,
            width,
            height,
            window,
            level,
            pixels,
            points,
            contours,
        })
    }
}

/// Intersection of a window with the volume as `(offset, extent)`.
fn clip_window(start: [i64; 3], size: [usize; 3], shape: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut offset = [0usize; 3];
    let mut extent = [0usize; 3];
    for i in 0..3 {
        let lo = start[i].clamp(0, shape[i] as i64);
        let hi = (start[i] + size[i] as i64).clamp(0, shape[i] as i64);
        offset[i] = lo as usize;
        extent[i] = (hi - lo) as usize;
    }
    (offset, extent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub kind: CaseKind,
    pub timepoints: Vec<String>,
    pub shape: [usize; 3],
    pub lesion_count: usize,
    pub status: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SliceQuery {
    pub tp: Option<String>,
    pub axis: Option<SliceAxis>,
    pub index: usize,
    pub window: Option<f64>,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointOverlay {
    pub lesion_id: u32,
    pub role: PromptRole,
    pub row: i64,
    pub col: i64,
    pub slice_offset: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourOverlay {
    pub lesion_id: u32,
    pub pixels: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePayload {
    pub case_id: String,
    pub timepoint: String,
    pub axis: SliceAxis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub window: f64,
    pub level: f64,
    /// Row-major 8-bit grayscale, base64.
    pub pixels: String,
    pub points: Vec<PointOverlay>,
    pub contours: Vec<ContourOverlay>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyRequest {
    #[serde(default)]
    point: Option<[i64; 3]>,
}

type Shared = Arc<AppState>;

async fn list_cases(State(s): State<Shared>) -> Json<Vec<CaseSummary>> {
    Json(s.summaries())
}

async fn get_case(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let entry = s.entry(&id)?;
    let c = &entry.case;
    let lesions: Vec<_> = c
        .baseline_prompts
        .values()
        .map(|p| json!({ "lesion_id": p.lesion_id, "baseline_prompt": p, "session": s.session(&id, p.lesion_id) }))
        .collect();
    Ok(Json(json!({
        "summary": s.summary(c),
        "spacing": c.baseline.volume.spacing(),
        "lesions": lesions,
    })))
}

async fn get_slice(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<SliceQuery>, QueryRejection>,
) -> ApiResult<Json<SlicePayload>> {
    let Query(q) = q.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    Ok(Json(s.slice(&id, &q)?))
}

async fn get_proposal(State(s): State<Shared>, UrlPath((id, lid)): UrlPath<(String, u32)>) -> ApiResult<Json<PromptPoint>> {
    let state = Arc::clone(&s);
    let session = tokio::task::spawn_blocking(move || state.proposal(&id, lid))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(session.proposed))
}

async fn verify(State(s): State<Shared>, UrlPath((id, lid)): UrlPath<(String, u32)>, body: Bytes) -> ApiResult<Json<SessionState>> {
    let req: VerifyRequest = if body.iter().all(|b| b.is_ascii_whitespace()) {
        VerifyRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid body: {e}")))?
    };
    let state = Arc::clone(&s);
    let (pid, plid) = (id.clone(), lid);
    tokio::task::spawn_blocking(move || state.proposal(&pid, plid))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(s.verify(&id, lid, req.point).await?))
}

async fn get_segmentation(State(s): State<Shared>, UrlPath((id, lid)): UrlPath<(String, u32)>) -> ApiResult<Json<SessionState>> {
    s.entry(&id)?;
    match s.session(&id, lid) {
        Some(sess) if sess.status == SessionStatus::Segmented => Ok(Json(sess)),
        _ => Err(ApiError::NotFound(format!("lesion {lid} of {id} is not segmented"))),
    }
}

async fn reset_session(State(s): State<Shared>, UrlPath((id, lid)): UrlPath<(String, u32)>) -> ApiResult<StatusCode> {
    s.reset(&id, lid)?;
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/slice", get(get_slice))
        .route("/cases/{id}/lesions/{lid}/proposal", get(get_proposal))
        .route("/cases/{id}/lesions/{lid}/verify", post(verify))
        .route("/cases/{id}/lesions/{lid}/segmentation", get(get_segmentation))
        .route("/cases/{id}/lesions/{lid}/session", delete(reset_session))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
