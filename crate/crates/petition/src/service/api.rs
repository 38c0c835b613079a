//! HTTP/JSON surface of [`Service`].
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/cases` | multipart `image`, `lat`, `lon`, `channel`; `Idempotency-Key` header |
//! | GET | `/cases` | `status`, `class`, `from`, `to`, `cursor`, `limit` |
//! | GET | `/cases/{id}` | |
//! | GET | `/cases/{id}/image` | the submitted pixmap |
//! | GET | `/cases/{id}/report` | |
//! | GET | `/cases/{id}/message` | |
//! | POST | `/cases/{id}/override` | `{class, operator}` |
//! | POST | `/cases/{id}/reject` | `{operator, reason}` |
//! | GET | `/metrics/classification` | |
//! | GET | `/metrics/heatmap` | `rows`, `cols`, bounds, `status`, `class` |
//! | GET | `/config` | triage threshold and class list |
//! | GET | `/healthz` | |
//!
//! Errors are `{"error": message}` with 400 for validation, 404 for unknown
//! cases, 409 for decisions that lost a race or do not fit the case's state.

use std::future::Future;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use petition_core::corpus::{GeoBounds, GeoPoint, IssueClass};
use petition_core::workflow::{CaseStatus, Channel};
use serde::Deserialize;
use serde_json::json;

use super::store::{CaseFilter, DEFAULT_PAGE_SIZE};
use super::{Service, ServiceError};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// Largest accepted request body.
pub const MAX_UPLOAD_BYTES: usize = 64 << 20;

type Shared = Arc<Service>;

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Validation { .. } => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/cases", post(submit).get(list))
        .route("/cases/{id}", get(case))
        .route("/cases/{id}/image", get(image))
        .route("/cases/{id}/report", get(report))
        .route("/cases/{id}/message", get(message))
        .route("/cases/{id}/override", post(override_case))
        .route("/cases/{id}/reject", post(reject_case))
        .route("/metrics/classification", get(classification))
        .route("/metrics/heatmap", get(heatmap))
        .route("/config", get(config))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    service: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

fn parse_number(field: &'static str, text: &str) -> ApiResult<f64> {
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ApiError::bad_request(format!("invalid {field}: `{text}` is not a number")))
}

async fn submit(State(svc): State<Shared>, headers: HeaderMap, mut form: Multipart) -> ApiResult<Response> {
    let (mut image, mut lat, mut lon, mut channel) = (None, None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        let text = || String::from_utf8_lossy(&data).into_owned();
        match name.as_str() {
            "image" => image = Some(data.to_vec()),
            "lat" => lat = Some(parse_number("lat", &text())?),
            "lon" => lon = Some(parse_number("lon", &text())?),
            "channel" => {
                let t = text();
                channel = Some(Channel::parse(t.trim()).ok_or_else(|| {
                    ApiError::bad_request(format!("invalid channel: `{t}` (expected mobile_app, web or email)"))
                })?)
            }
            other => return Err(ApiError::bad_request(format!("unexpected field `{other}`"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing field image"))?;
    let lat = lat.ok_or_else(|| ApiError::bad_request("missing field lat"))?;
    let lon = lon.ok_or_else(|| ApiError::bad_request("missing field lon"))?;
    let channel = channel.unwrap_or(Channel::Web);
    let key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let out = blocking(move || svc.submit(&image, GeoPoint { lat, lon }, channel, key)).await?;
    let status = if out.duplicate { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(out)).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    status: Option<String>,
    class: Option<String>,
    from: Option<DateTime<Utc>>,
    to: Option<DateTime<Utc>>,
    cursor: Option<String>,
    limit: Option<usize>,
}

fn filter_of(status: Option<&str>, class: Option<&str>) -> ApiResult<CaseFilter> {
    let status = status
        .filter(|s| !s.is_empty())
        .map(|s| CaseStatus::parse(s).ok_or_else(|| ApiError::bad_request(format!("invalid status: `{s}`"))))
        .transpose()?;
    let class = class
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<IssueClass>().map_err(|e| ApiError::bad_request(format!("invalid class: {e}"))))
        .transpose()?;
    Ok(CaseFilter { status, class, ..Default::default() })
}

async fn list(State(svc): State<Shared>, Query(q): Query<ListQuery>) -> ApiResult<Response> {
    let mut filter = filter_of(q.status.as_deref(), q.class.as_deref())?;
    filter.from = q.from;
    filter.to = q.to;
    let page = svc.query(&filter, q.cursor.as_deref(), q.limit.unwrap_or(DEFAULT_PAGE_SIZE))?;
    Ok(Json(page).into_response())
}

fn found(svc: &Service, id: &str) -> ApiResult<petition_core::workflow::Case> {
    svc.get(id).ok_or_else(|| ServiceError::NotFound(id.into()).into())
}

async fn case(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(found(&svc, &id)?).into_response())
}

async fn image(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let c = found(&svc, &id)?;
    let path = svc.blob_path(&c);
    let data = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("reading image: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/x-portable-anymap")], data).into_response())
}

async fn report(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let c = found(&svc, &id)?;
    let r = c.report.ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("case {id} has no dispatch report")))?;
    Ok(Json(r).into_response())
}

async fn message(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let c = found(&svc, &id)?;
    let m = c.message.ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("case {id} has no citizen message")))?;
    Ok(Json(m).into_response())
}

#[derive(Debug, Deserialize)]
struct OverrideBody {
    class: String,
    operator: String,
}

#[derive(Debug, Deserialize)]
struct RejectBody {
    operator: String,
    #[serde(default)]
    reason: String,
}

fn json_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn override_case(State(svc): State<Shared>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let b: OverrideBody = json_body(&body)?;
    let class = b.class.parse::<IssueClass>().map_err(|e| ApiError::bad_request(format!("invalid class: {e}")))?;
    let case = blocking(move || svc.override_case(&id, class, &b.operator)).await?;
    Ok(Json(case).into_response())
}

async fn reject_case(State(svc): State<Shared>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let b: RejectBody = json_body(&body)?;
    let case = blocking(move || svc.reject_case(&id, &b.operator, &b.reason)).await?;
    Ok(Json(case).into_response())
}

async fn classification(State(svc): State<Shared>) -> Json<super::store::ClassificationMetrics> {
    Json(svc.classification_metrics())
}

#[derive(Debug, Default, Deserialize)]
struct HeatmapQuery {
    rows: Option<usize>,
    cols: Option<usize>,
    lat_min: Option<f64>,
    lat_max: Option<f64>,
    lon_min: Option<f64>,
    lon_max: Option<f64>,
    status: Option<String>,
    class: Option<String>,
}

async fn heatmap(State(svc): State<Shared>, Query(q): Query<HeatmapQuery>) -> ApiResult<Response> {
    let filter = filter_of(q.status.as_deref(), q.class.as_deref())?;
    let d = GeoBounds::default();
    let bounds = GeoBounds {
        lat_min: q.lat_min.unwrap_or(d.lat_min),
        lat_max: q.lat_max.unwrap_or(d.lat_max),
        lon_min: q.lon_min.unwrap_or(d.lon_min),
        lon_max: q.lon_max.unwrap_or(d.lon_max),
    };
    let grid = svc.heatmap(&filter, bounds, q.rows.unwrap_or(10), q.cols.unwrap_or(10))?;
    Ok(Json(grid).into_response())
}

async fn config(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let c = svc.config();
    Json(json!({
        "threshold": c.threshold,
        "workers": c.workers,
        "classes": IssueClass::ALL.iter().map(|k| json!({"class": k.token(), "label": k.label()})).collect::<Vec<_>>(),
    }))
}

async fn healthz(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let (cases, last_seq) = svc.counts();
    Json(json!({ "status": "ok", "cases": cases, "queued": svc.queue_len(), "last_seq": last_seq }))
}
