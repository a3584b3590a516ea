//! HTTP task service under `/api/v1`.
//!
//! | method | path | response |
//! |---|---|---|
//! | GET | `/hits/next?worker_id=` | 200 [`HitView`], or 204 when nothing is available |
//! | POST | `/hits/{id}/answers` | 200 [`AnswerResponse`]; 400 malformed answer; 409 lease not held |
//! | GET | `/progress` | 200 [`Progress`] |
//! | GET | `/examples/{class}` | 200 list of [`Example`]; 404 unknown class |
//!
//! Errors are `{"error": "..."}`. Responses never carry gold flags, gold
//! truth or annotation ids.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iterlabel::crowdgate::{CrowdError, CrowdSession, HitStatus, HitView, SubtaskAnswer};
use iterlabel::geometry::BBox;
use iterlabel::labelstore::{AnnotationState, ClassLabel, StoreHandle};
use serde::{Deserialize, Serialize};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    })
}

#[derive(Clone)]
pub struct AppState {
    pub store: StoreHandle,
    pub session: Arc<CrowdSession>,
    pub clock: Clock,
    /// Most examples returned per class.
    pub example_limit: usize,
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub worker_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub worker_id: String,
    pub subtasks: Vec<SubtaskAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub hit_id: String,
    pub status: HitStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Verified object labels per class.
    pub labels: BTreeMap<String, u64>,
    pub background: u64,
    pub states: BTreeMap<AnnotationState, u64>,
    pub live_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub image_id: String,
    pub image_uri: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<CrowdError> for ApiError {
    fn from(e: CrowdError) -> Self {
        let code = match &e {
            CrowdError::BadAnswerCount { .. } | CrowdError::BadAnswer { .. } => StatusCode::BAD_REQUEST,
            CrowdError::StaleLease { .. } => StatusCode::CONFLICT,
            CrowdError::UnknownHit(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/hits/next", get(next_hit))
        .route("/api/v1/hits/{hit_id}/answers", post(submit_answers))
        .route("/api/v1/progress", get(progress))
        .route("/api/v1/examples/{class}", get(examples))
        .with_state(state)
}

async fn next_hit(State(st): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let now = (st.clock)();
    let view: Option<HitView> = st.store.write(|s| st.session.lease(s, &q.worker_id, now))?;
    Ok(match view {
        Some(v) => Json(v).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_answers(
    State(st): State<AppState>,
    Path(hit_id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let now = (st.clock)();
    let report = st
        .store
        .write(|s| st.session.submit(s, &hit_id, &req.worker_id, &req.subtasks, now))?;
    if report.stale {
        return Err(ApiError(StatusCode::CONFLICT, report.reason));
    }
    Ok(Json(AnswerResponse {
        hit_id: report.hit_id,
        status: report.status,
    }))
}

async fn progress(State(st): State<AppState>) -> Json<Progress> {
    let (labels, background, states) = st.store.read(|s| {
        let data = s.dataset();
        let verified = data.class_counts(&[AnnotationState::Seed, AnnotationState::Approved]);
        let labels = data
            .catalog
            .labels()
            .map(|c| (c.to_string(), verified.get(&c).copied().unwrap_or(0)))
            .collect();
        let states = data.state_counts();
        let background = states.get(&AnnotationState::BackgroundConfirmed).copied().unwrap_or(0);
        (labels, background, states)
    });
    Json(Progress {
        labels,
        background,
        states,
        live_hits: st.session.pool().live_count(),
    })
}

/// Crowd-approved boxes of a class. Seed boxes double as gold truth, so
/// they are never shown here, nor are approved boxes when those feed the
/// gold pool.
async fn examples(State(st): State<AppState>, Path(class): Path<String>) -> Result<Json<Vec<Example>>, ApiError> {
    let label = ClassLabel::object(class.clone());
    st.store.read(|s| {
        let data = s.dataset();
        if !data.catalog.knows(&label) {
            return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown class {class}")));
        }
        if st.session.config().gold_from_approved {
            return Ok(Json(Vec::new()));
        }
        let state = if label.is_background() {
            AnnotationState::BackgroundConfirmed
        } else {
            AnnotationState::Approved
        };
        let out = data
            .annotations_in(&[state])
            .filter(|a| a.class_label == label)
            .take(st.example_limit)
            .map(|a| Example {
                image_id: a.image_id.clone(),
                image_uri: data.image(&a.image_id).map(|i| i.uri.clone()).unwrap_or_default(),
                bbox: a.bbox,
            })
            .collect();
        Ok(Json(out))
    })
}
