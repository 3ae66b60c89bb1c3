use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::{Engine, LocalizeRequest, ServiceError};
use crate::error::{Error, Result};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.to_json())).into_response()
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/localize", post(localize))
        .route("/health", get(health))
        .route("/gallery", get(gallery))
        .route("/categories", get(categories))
        .with_state(engine)
}

async fn localize(State(engine): State<Arc<Engine>>, body: Bytes) -> Response {
    let req: LocalizeRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return ServiceError {
                status: 400,
                code: "bad_request".into(),
                field: None,
                message: format!("request body: {e}"),
            }
            .into_response()
        }
    };
    // inference is CPU bound; keep it off the async workers
    match tokio::task::spawn_blocking(move || engine.localize(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::from(Error::Config(format!("worker failed: {e}"))).into_response(),
    }
}

async fn health(State(engine): State<Arc<Engine>>) -> Response {
    Json(json!({
        "status": "ok",
        "model_digest": engine.digest(),
        "stage": engine.stage().number(),
        "uptime_s": engine.uptime_s(),
    }))
    .into_response()
}

async fn gallery(State(engine): State<Arc<Engine>>) -> Response {
    match engine.gallery().entries() {
        Ok(entries) => Json(json!({ "scenes": entries })).into_response(),
        Err(e) => ServiceError::from(e).into_response(),
    }
}

async fn categories(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.categories()).into_response()
}

/// Binds `addr`; a bind failure is returned before anything is served.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    engine: Arc<Engine>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))
}
