//! HTTP/JSON routes over [`Service`].
//!
//! The annotator is named by an `Authorization: Bearer <annotator_id>`
//! header and is not authenticated; requests without one are recorded as
//! `anonymous`.

use std::fmt::Display;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gradia_core::dataset::InstanceId;
use serde::{Deserialize, Serialize};

use super::jobs::JobRequest;
use super::store::Answers;
use super::{InstanceFilter, Service};

pub const ANONYMOUS: &str = "anonymous";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn internal(err: impl Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string())
    }
}

impl Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status.as_u16(), self.body.code, self.body.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBody {
    pub mask_rle: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertBody {
    pub rating: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivateBody {
    pub job_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activated {
    pub job_id: u64,
    pub model_version: u64,
}

fn annotator_id(headers: &HeaderMap) -> String {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .unwrap_or(ANONYMOUS)
        .to_string()
}

fn instance_id(raw: &str) -> Result<InstanceId, ApiError> {
    raw.parse()
        .map(InstanceId)
        .map_err(|_| ApiError::bad_request(format!("invalid instance id {raw:?}")))
}

/// Runs model-touching work off the async workers.
async fn blocking<T: Send + 'static>(
    service: &Arc<Service>,
    f: impl FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    let service = Arc::clone(service);
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

async fn list_instances(
    State(s): State<Arc<Service>>,
    filter: Result<Query<InstanceFilter>, QueryRejection>,
) -> ApiResult<super::InstancePage> {
    let Query(filter) = filter?;
    blocking(&s, move |s| s.list_instances(&filter)).await
}

async fn get_instance(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<super::InstanceDetail> {
    let id = instance_id(&id)?;
    blocking(&s, move |s| s.get_instance(id)).await
}

async fn post_verdict(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<Answers>, JsonRejection>,
) -> ApiResult<super::WriteAck> {
    let id = instance_id(&id)?;
    let Json(answers) = body?;
    let who = annotator_id(&headers);
    blocking(&s, move |s| s.post_verdict(id, &who, answers)).await
}

async fn post_mask(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<MaskBody>, JsonRejection>,
) -> ApiResult<super::WriteAck> {
    let id = instance_id(&id)?;
    let Json(body) = body?;
    let who = annotator_id(&headers);
    blocking(&s, move |s| s.post_mask(id, &who, body.mask_rle)).await
}

async fn post_likert(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<LikertBody>, JsonRejection>,
) -> ApiResult<super::WriteAck> {
    let id = instance_id(&id)?;
    let Json(body) = body?;
    let who = annotator_id(&headers);
    blocking(&s, move |s| s.post_likert(id, &who, body.rating)).await
}

async fn get_matrix(State(s): State<Arc<Service>>) -> ApiResult<super::MatrixView> {
    blocking(&s, |s| s.get_matrix()).await
}

async fn submit_job(
    State(s): State<Arc<Service>>,
    body: Result<Json<JobRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<super::JobStatus>), ApiError> {
    let Json(request) = body?;
    let status = s.submit_job(request)?;
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn get_job(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<super::JobStatus> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("invalid job id {id:?}")))?;
    s.get_job(id).map(Json)
}

async fn activate(
    State(s): State<Arc<Service>>,
    body: Result<Json<ActivateBody>, JsonRejection>,
) -> ApiResult<Activated> {
    let Json(body) = body?;
    blocking(&s, move |s| {
        s.activate(body.job_id).map(|model_version| Activated {
            job_id: body.job_id,
            model_version,
        })
    })
    .await
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/instances", get(list_instances))
        .route("/api/instances/{id}", get(get_instance))
        .route("/api/instances/{id}/verdict", post(post_verdict))
        .route("/api/instances/{id}/mask", post(post_mask))
        .route("/api/instances/{id}/likert", post(post_likert))
        .route("/api/matrix", get(get_matrix))
        .route("/api/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/model/activate", post(activate))
        .fallback(fallback)
        .with_state(service)
}
