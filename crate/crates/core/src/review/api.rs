//! JSON API over the review service.
//!
//! | method | path               | body / query                                   |
//! |--------|--------------------|------------------------------------------------|
//! | GET    | `/api/candidates`  | `status=proposed,kept&sort=count_desc&k=3&offset=0&limit=50` |
//! | GET    | `/api/registry`    |                                                |
//! | GET    | `/api/decisions`   |                                                |
//! | POST   | `/api/decisions`   | `{"subject": "...", "action": "merge", "target": "..."}` |
//! | POST   | `/api/finalize`    | `{"actor": "...", "timestamp": "..."}` (both optional) |
//! | GET    | `/api/final`       |                                                |
//!
//! Refused decisions answer 409 (registry finalized) or 422 with
//! `{"error": "<reason>"}`.

use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{CandidateQuery, CandidateSort, DecisionInput, ReviewAction, ReviewError, ReviewService};
use crate::classgen::ClassStatus;

type Shared = Arc<Mutex<ReviewService>>;

fn error_response(e: ReviewError) -> Response {
    let status = match e {
        ReviewError::Finalized | ReviewError::NotFinalized => StatusCode::CONFLICT,
        ReviewError::UnknownSubject(_) => StatusCode::NOT_FOUND,
        ReviewError::Store(_) | ReviewError::NoRegistry => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    };
    (status, Json(json!({"error": e.to_string()}))).into_response()
}

#[derive(Debug, Default, Deserialize)]
struct CandidateParams {
    status: Option<String>,
    sort: Option<CandidateSort>,
    k: Option<usize>,
    offset: Option<usize>,
    limit: Option<usize>,
}

fn parse_statuses(raw: &str) -> Result<Vec<ClassStatus>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_value(json!(s)).map_err(|_| format!("unknown status {s:?}")))
        .collect()
}

async fn candidates(State(svc): State<Shared>, Query(p): Query<CandidateParams>) -> Response {
    let status = match p.status.as_deref().map(parse_statuses).transpose() {
        Ok(s) => s.unwrap_or_default(),
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({"error": e}))).into_response(),
    };
    let query = CandidateQuery {
        status,
        sort: p.sort.unwrap_or_default(),
        examples: p.k,
        offset: p.offset.unwrap_or(0),
        limit: p.limit,
    };
    let svc = svc.lock().expect("review lock poisoned");
    Json(svc.list_candidates(&query)).into_response()
}

async fn registry(State(svc): State<Shared>) -> Response {
    let svc = svc.lock().expect("review lock poisoned");
    Json(json!({
        "registry": svc.state().registry,
        "finalized": svc.is_finalized(),
        "finalized_at": svc.state().finalized_at,
        "decision_count": svc.decisions().len(),
        "registry_hash": svc.registry_hash(),
    }))
    .into_response()
}

async fn list_decisions(State(svc): State<Shared>) -> Response {
    let svc = svc.lock().expect("review lock poisoned");
    Json(svc.decisions()).into_response()
}

async fn post_decision(State(svc): State<Shared>, Json(input): Json<DecisionInput>) -> Response {
    let mut svc = svc.lock().expect("review lock poisoned");
    match svc.apply_decision(input) {
        Ok(state) => Json(state).into_response(),
        Err(e) => error_response(e),
    }
}

#[derive(Debug, Default, Deserialize)]
struct FinalizeBody {
    actor: Option<String>,
    timestamp: Option<String>,
}

async fn finalize(State(svc): State<Shared>, body: Option<Json<FinalizeBody>>) -> Response {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let mut svc = svc.lock().expect("review lock poisoned");
    let input = DecisionInput {
        actor: body.actor,
        timestamp: body.timestamp,
        subject: None,
        action: ReviewAction::Finalize,
    };
    if let Err(e) = svc.apply_decision(input) {
        return error_response(e);
    }
    match svc.export_final() {
        Ok(f) => Json(f).into_response(),
        Err(e) => error_response(e),
    }
}

async fn final_set(State(svc): State<Shared>) -> Response {
    let svc = svc.lock().expect("review lock poisoned");
    match svc.export_final() {
        Ok(f) => Json(f).into_response(),
        Err(e) => error_response(e),
    }
}

pub fn review_router(service: Arc<Mutex<ReviewService>>) -> Router {
    Router::new()
        .route("/api/candidates", get(candidates))
        .route("/api/registry", get(registry))
        .route("/api/decisions", get(list_decisions).post(post_decision))
        .route("/api/finalize", axum::routing::post(finalize))
        .route("/api/final", get(final_set))
        .with_state(service)
}
