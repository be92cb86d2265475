//! JSON HTTP API over [`Service`].
//!
//! | method | path | body → response |
//! |---|---|---|
//! | POST | `/api/annotators` | `{annotator_id, role}` → profile (201) |
//! | GET | `/api/annotators/{id}` | profile, submitted count, pending task |
//! | GET | `/api/onboarding` | `{items, pass_threshold}` |
//! | POST | `/api/annotators/{id}/onboarding` | `{answers: [label]}` → grade |
//! | GET | `/api/annotators/{id}/next-task` | `{task: TaskView \| null}` |
//! | POST | `/api/annotators/{id}/labels` | `{task_id, label}` → event and new task state |
//! | GET | `/api/progress` | progress counts |
//! | POST | `/api/double-check` | `{annotator_id, n?, seed?}` → `{task_ids}` |
//! | GET | `/api/kappa` | kappa report |
//! | POST | `/api/export` | export summary |
//! | GET | `/images/*` | files under the image root |
//!
//! Other paths fall through to the static UI bundle when one is configured.
//! Errors are `{"error": kind, "message": text}` with a matching status.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::protocol::{AnnLabel, PASS_DENOMINATOR, PASS_NUMERATOR};
use crate::service::{Service, TaskView};
use crate::state::{AnnotationEvent, Role, TaskState};
use crate::Error;

pub const DEFAULT_DOUBLE_CHECK_SIZE: usize = 1000;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(Error::Argument(r.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Unauthorized(_) => StatusCode::FORBIDDEN,
            Error::Conflict(_) | Error::Unresolved(_) => StatusCode::CONFLICT,
            Error::Argument(_) => StatusCode::BAD_REQUEST,
            Error::Core(e) if matches!(e.kind(), "argument" | "validation") => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": self.0.kind(), "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<Service>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    annotator_id: String,
    #[serde(default = "default_role")]
    role: Role,
}

fn default_role() -> Role {
    Role::Worker
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OnboardingBody {
    answers: Vec<AnnLabel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    task_id: String,
    label: AnnLabel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DoubleCheckBody {
    annotator_id: String,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct NextTask {
    pub task: Option<TaskView>,
}

#[derive(Serialize, Deserialize)]
pub struct LabelResponse {
    pub event: AnnotationEvent,
    pub state: TaskState,
}

async fn register(
    State(svc): State<Shared>,
    body: Result<Json<RegisterBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    Ok((
        StatusCode::CREATED,
        Json(svc.register(&b.annotator_id, b.role)?),
    ))
}

async fn annotator(
    State(svc): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.annotator(&id)?))
}

async fn onboarding(State(svc): State<Shared>) -> impl IntoResponse {
    Json(json!({
        "items": svc.onboarding_batch(),
        "pass_threshold": PASS_NUMERATOR as f64 / PASS_DENOMINATOR as f64,
    }))
}

async fn submit_onboarding(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<OnboardingBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    Ok(Json(svc.submit_onboarding(&id, &b.answers)?))
}

async fn next_task(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<NextTask>> {
    Ok(Json(NextTask {
        task: svc.next_task(&id)?,
    }))
}

async fn submit_label(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> ApiResult<Json<LabelResponse>> {
    let Json(b) = body?;
    let (event, state) = svc.submit_label(&id, &b.task_id, b.label)?;
    Ok(Json(LabelResponse { event, state }))
}

async fn progress(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.progress())
}

async fn double_check(
    State(svc): State<Shared>,
    body: Result<Json<DoubleCheckBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    let n = b.n.unwrap_or(DEFAULT_DOUBLE_CHECK_SIZE);
    let task_ids = svc.start_double_check(&b.annotator_id, n, b.seed)?;
    Ok(Json(json!({ "task_ids": task_ids })))
}

async fn kappa(State(svc): State<Shared>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.kappa()?))
}

async fn export(State(svc): State<Shared>) -> ApiResult<impl IntoResponse> {
    let (_, summary) = svc.export()?;
    Ok(Json(summary))
}

async fn api_not_found() -> ApiError {
    ApiError(Error::NotFound("no such API route".into()))
}

#[derive(Clone, Debug, Default)]
pub struct Assets {
    /// Root that image references are resolved against.
    pub images: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    pub ui: Option<PathBuf>,
}

pub fn router(service: Arc<Service>, assets: &Assets) -> Router {
    let api = Router::new()
        .route("/annotators", post(register))
        .route("/annotators/{id}", get(annotator))
        .route("/onboarding", get(onboarding))
        .route("/annotators/{id}/onboarding", post(submit_onboarding))
        .route("/annotators/{id}/next-task", get(next_task))
        .route("/annotators/{id}/labels", post(submit_label))
        .route("/progress", get(progress))
        .route("/double-check", post(double_check))
        .route("/kappa", get(kappa))
        .route("/export", post(export))
        .fallback(api_not_found)
        .with_state(service);
    let mut app = Router::new().nest("/api", api);
    if let Some(dir) = &assets.images {
        app = app.nest_service("/images", ServeDir::new(dir));
    }
    if let Some(dir) = &assets.ui {
        app = app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app
}

/// Serves until ctrl-c, then writes the snapshot.
pub async fn serve(service: Arc<Service>, assets: Assets, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("tcp://{addr}"), e))?;
    axum::serve(listener, router(service.clone(), &assets))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(format!("tcp://{addr}"), e))?;
    service.write_snapshot()
}
