//! Axum routes over [`Service`]. Model work runs on the blocking pool.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;

use crate::api::{CreateSessionJson, ErrorBody, ErrorDetail, PromptRequest};
use crate::error::ServiceError;
use crate::service::Service;

/// Request bodies above this size are refused before decoding.
pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code().to_string(),
                message: self.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/prompts", post(prompt))
        .route("/healthz", get(healthz))
        .route("/debug/counters", get(counters))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(service)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

/// Image bytes from a multipart form (first file field, or a field named `image`),
/// a JSON `{"image_base64": ...}` body, or a raw `image/*` body.
async fn image_bytes(req: Request) -> Result<Bytes, ServiceError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        while let Some(field) = form.next_field().await.map_err(|e| ServiceError::BadRequest(e.body_text()))? {
            if field.name() == Some("image") || field.file_name().is_some() {
                return field.bytes().await.map_err(|e| ServiceError::BadRequest(e.body_text()));
            }
        }
        return Err(ServiceError::BadRequest("multipart body has no `image` field".into()));
    }
    if content_type.starts_with("application/json") {
        let Json(body) = Json::<CreateSessionJson>::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(body.image_base64.trim())
            .map_err(|e| ServiceError::ImageDecode(format!("base64: {e}")))?;
        return Ok(bytes.into());
    }
    if content_type.starts_with("image/") {
        return Bytes::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()));
    }
    Err(ServiceError::BadRequest(format!(
        "unsupported content type `{content_type}`; send multipart/form-data, JSON or image/*"
    )))
}

async fn create_session(State(svc): State<Arc<Service>>, req: Request) -> Response {
    let bytes = match image_bytes(req).await {
        Ok(b) => b,
        Err(e) => return e.into_response(),
    };
    match blocking(move || svc.encode_bytes(&bytes)).await {
        Ok(created) => (StatusCode::CREATED, Json(created)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn prompt(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> Response {
    let req: PromptRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ServiceError::BadRequest(format!("prompt body: {e}")).into_response(),
    };
    match blocking(move || svc.prompt(&id, &req)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn healthz(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.health()).into_response()
}

async fn counters(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.counters()).into_response()
}

/// Serves until ctrl-c.
pub async fn serve(service: Arc<Service>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
