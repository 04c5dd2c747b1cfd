//! Stateless HTTP front end for the shaping pipeline.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use http_body_util::{BodyExt, LengthLimitError, Limited};

use grsp_core::pipeline::{handle_shape_request, ServiceError};
use grsp_core::EngineConfig;

pub fn router(cfg: EngineConfig) -> Router {
    Router::new()
        .route("/v1/shape", post(shape))
        .route("/v1/health", get(health))
        // The shape handler enforces the configured limit itself so that
        // oversized bodies get the same JSON error shape as other failures.
        .layer(DefaultBodyLimit::disable())
        .with_state(Arc::new(cfg))
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    cfg: EngineConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(cfg)).with_graceful_shutdown(shutdown).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn error_response(e: ServiceError) -> Response {
    let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    if status.is_server_error() {
        tracing::error!(kind = %e.kind, message = %e.message, "request failed");
    } else {
        tracing::debug!(kind = %e.kind, message = %e.message, "request rejected");
    }
    (status, Json(e)).into_response()
}

fn internal(message: String) -> ServiceError {
    ServiceError {
        status: 500,
        kind: "internal".into(),
        field: None,
        message,
    }
}

async fn shape(State(cfg): State<Arc<EngineConfig>>, headers: HeaderMap, body: Body) -> Response {
    let limit = cfg.service.max_request_bytes;
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit) {
        return error_response(ServiceError::too_large(limit));
    }
    let bytes = match Limited::new(body, limit).collect().await {
        Ok(collected) => collected.to_bytes(),
        Err(e) if e.downcast_ref::<LengthLimitError>().is_some() => {
            return error_response(ServiceError::too_large(limit));
        }
        Err(e) => {
            return error_response(ServiceError {
                status: 400,
                kind: "parse".into(),
                field: None,
                message: format!("could not read request body: {e}"),
            })
        }
    };

    let timeout = Duration::from_millis(cfg.service.request_timeout_ms);
    let work = tokio::task::spawn_blocking(move || handle_shape_request(&bytes, &cfg));
    match tokio::time::timeout(timeout, work).await {
        Ok(Ok(Ok(resp))) => Json(resp).into_response(),
        Ok(Ok(Err(e))) => error_response(e),
        Ok(Err(join)) => error_response(internal(format!("worker failed: {join}"))),
        Err(_) => error_response(ServiceError {
            status: 503,
            kind: "timeout".into(),
            field: None,
            message: format!("request exceeded {} ms", timeout.as_millis()),
        }),
    }
}
