//! HTTP front end of the annotation service.
//!
//! ```text
//! GET  /api/tasks/next?annotator=<tag>   200 task | 204 nothing open
//! POST /api/tasks/{task_id}/keywords     {annotator, positions} -> 200 | 400 | 409
//! GET  /api/progress                     {total, done}
//! ```
//!
//! Anything else is served from the static directory, when one is given.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crowdtsc::{AnnotationService, Error};
use serde::Deserialize;
use tower_http::services::ServeDir;

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub annotator: String,
}

#[derive(Debug, Deserialize)]
pub struct Submission {
    pub annotator: String,
    pub positions: Vec<usize>,
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::Validation(_) | Error::Argument(_) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::State(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

async fn next_task(
    State(svc): State<Arc<AnnotationService>>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    Ok(match svc.next_task(&q.annotator)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(
    State(svc): State<Arc<AnnotationService>>,
    Path(task_id): Path<u64>,
    Json(body): Json<Submission>,
) -> Result<Response, ApiError> {
    let record = svc.submit(task_id, &body.annotator, &body.positions)?;
    log::info!("task {task_id} annotated by {}: {:?}", record.annotator, record.tokens);
    Ok(Json(record).into_response())
}

async fn progress(State(svc): State<Arc<AnnotationService>>) -> Result<Response, ApiError> {
    Ok(Json(svc.progress()?).into_response())
}

pub fn router(service: Arc<AnnotationService>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{task_id}/keywords", post(submit))
        .route("/api/progress", get(progress))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
