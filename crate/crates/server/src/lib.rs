//! HTTP/JSON front end for [`ReviewService`]. Every route lives under `/v1`.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET  | `/v1/health` | |
//! | POST | `/v1/sessions` | `CreateSession` → 201 new, 200 existing |
//! | GET  | `/v1/sessions/{id}` | |
//! | GET  | `/v1/sessions/{id}/next` | |
//! | POST | `/v1/sessions/{id}/decisions` | `DecisionInput` |
//! | POST | `/v1/sessions/{id}/acknowledge` | `AcknowledgeInput` |
//! | POST | `/v1/sessions/{id}/surveys` | `SurveyInput` |
//! | GET  | `/v1/export` | `format=json\|csv`, `table`, `condition`, `participant`, `completed_only` |
//! | GET  | `/v1/assets/{case}/{file}` | PNG |
//!
//! Errors come back as `{"error": kind, "message": text}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use regverify_core::review::{
    decisions_csv, summary_csv, surveys_csv, AcknowledgeInput, CreateSession, DecisionInput,
    ExportFilter, ReviewService, StudyCondition, SurveyInput,
};
use regverify_core::Error;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

/// An error rendered as a JSON response.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn status_of(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        Error::Protocol(_) => (StatusCode::CONFLICT, "protocol"),
        Error::Duplicate(_) => (StatusCode::CONFLICT, "duplicate"),
        Error::Validation(_) | Error::InvalidInput(_) | Error::Config(_) | Error::Json(_) => {
            (StatusCode::UNPROCESSABLE_ENTITY, "validation")
        }
        Error::Dependency(_) | Error::Shortage { .. } => {
            (StatusCode::SERVICE_UNAVAILABLE, "dependency")
        }
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = status_of(&self.0);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (
            status,
            Json(json!({ "error": kind, "message": self.0.to_string() })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<ReviewService>;

/// Parses a JSON body ourselves so malformed input maps to the same 422
/// error shape as semantic validation failures.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError(Error::Json(e)))
}

/// Session operations take locks and touch the event log.
async fn blocking<T, F>(svc: Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&ReviewService) -> regverify_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(Error::InvalidState(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

pub fn router(service: Arc<ReviewService>) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_case))
        .route("/sessions/{id}/decisions", post(submit_decision))
        .route("/sessions/{id}/acknowledge", post(acknowledge))
        .route("/sessions/{id}/surveys", post(submit_survey))
        .route("/export", get(export))
        .route("/assets/{case}/{file}", get(asset));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError(Error::NotFound("no such route".into())) })
        .with_state(service)
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

/// Serves on `listener` until the process is stopped.
pub async fn serve(
    service: Arc<ReviewService>,
    listener: tokio::net::TcpListener,
) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

async fn health(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let meta = &svc.bank().meta;
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "cases": svc.bank().cases.len(),
        "alpha": meta.alpha,
        "held_out_specimen": meta.held_out_specimen,
    }))
}

async fn create_session(State(svc): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse(&body)?;
    let (view, created) = blocking(svc, move |s| s.create_session(req)).await?;
    let status = if created {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    Ok((status, Json(view)).into_response())
}

async fn get_session(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let view = blocking(svc, move |s| s.session(&id)).await?;
    Ok(Json(view).into_response())
}

async fn next_case(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let next = blocking(svc, move |s| s.next_case(&id)).await?;
    Ok(Json(next).into_response())
}

async fn submit_decision(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let input: DecisionInput = parse(&body)?;
    let ack = blocking(svc, move |s| s.submit_decision(&id, input)).await?;
    Ok(Json(ack).into_response())
}

async fn acknowledge(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let input: AcknowledgeInput = parse(&body)?;
    let ack = blocking(svc, move |s| s.acknowledge(&id, input)).await?;
    Ok(Json(ack).into_response())
}

async fn submit_survey(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let input: SurveyInput = parse(&body)?;
    let ack = blocking(svc, move |s| s.submit_survey(&id, input)).await?;
    Ok(Json(ack).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportQuery {
    #[serde(default)]
    pub format: Option<String>,
    /// CSV table: `summary` (default), `decisions` or `surveys`.
    #[serde(default)]
    pub table: Option<String>,
    #[serde(default)]
    pub condition: Option<String>,
    #[serde(default)]
    pub participant: Option<String>,
    #[serde(default)]
    pub completed_only: Option<bool>,
}

impl ExportQuery {
    pub fn filter(&self) -> regverify_core::Result<ExportFilter> {
        Ok(ExportFilter {
            condition: self
                .condition
                .as_deref()
                .map(str::parse::<StudyCondition>)
                .transpose()?,
            participant: self.participant.clone(),
            completed_only: self.completed_only.unwrap_or(false),
        })
    }
}

async fn export(
    State(svc): State<Shared>,
    query: Result<Query<ExportQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError(Error::Validation(e.body_text())))?;
    let filter = q.filter()?;
    let format = q.format.as_deref().unwrap_or("json");
    let table = q.table.as_deref().unwrap_or("summary");
    if !matches!(format, "json" | "csv") {
        return Err(ApiError(Error::Validation(format!(
            "unknown format {format:?}"
        ))));
    }
    if !matches!(table, "summary" | "decisions" | "surveys") {
        return Err(ApiError(Error::Validation(format!(
            "unknown table {table:?}"
        ))));
    }
    let format = format.to_string();
    let table = table.to_string();
    blocking(svc, move |s| {
        let export = s.export(&filter);
        if format == "json" {
            return Ok(Json(export).into_response());
        }
        let text = match table.as_str() {
            "summary" => summary_csv(&export)?,
            "decisions" => decisions_csv(&export)?,
            _ => surveys_csv(&export)?,
        };
        Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response())
    })
    .await
}

async fn asset(
    State(svc): State<Shared>,
    Path((case, file)): Path<(String, String)>,
) -> ApiResult<Response> {
    let bytes = blocking(svc, move |s| s.asset(&case, &file)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "private, max-age=3600"),
        ],
        bytes,
    )
        .into_response())
}
