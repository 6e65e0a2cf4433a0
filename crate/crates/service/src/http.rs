//! axum routes over a [`ModelSlot`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::State;
use axum::http::header::{self, HeaderValue, InvalidHeaderValue};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::api::{ApiError, CompleteRequest, InstancesRequest};
use crate::engine::{Engine, ModelSlot};

type Slot = Arc<ModelSlot>;

/// Router with CORS open to any origin.
pub fn router(slot: Slot) -> Router {
    router_with_cors(slot, cors(None).expect("no origin to parse"))
}

pub fn router_with_cors(slot: Slot, cors: CorsLayer) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/images", get(images))
        .route("/complete", post(complete))
        .route("/instances", post(instances))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(cors)
        .with_state(slot)
}

/// CORS for the demo UI: a single allowed origin, or any origin if `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, InvalidHeaderValue> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o)?),
        None => AllowOrigin::any(),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]))
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json_response(status, &self)
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn engine(slot: &ModelSlot) -> Result<Arc<Engine>, ApiError> {
    slot.get().ok_or_else(|| ApiError::unavailable("no model is loaded"))
}

fn parse<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let body = body.map_err(|r| ApiError::new(r.status().as_u16(), "bad_body", r.body_text()))?;
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))
}

/// Runs model work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn reply<T: Serialize>(result: Result<T, ApiError>) -> Response {
    match result {
        Ok(body) => json_response(StatusCode::OK, &body),
        Err(e) => {
            log::debug!("request failed: {e}");
            e.into_response()
        }
    }
}

async fn health(State(slot): State<Slot>) -> Response {
    reply(engine(&slot).map(|e| e.health()))
}

async fn images(State(slot): State<Slot>) -> Response {
    reply(engine(&slot).map(|e| e.images()))
}

async fn complete(State(slot): State<Slot>, body: Result<Bytes, BytesRejection>) -> Response {
    let result = async {
        let req: CompleteRequest = parse(body)?;
        let engine = engine(&slot)?;
        blocking(move || engine.complete(&req)).await
    };
    reply(result.await)
}

async fn instances(State(slot): State<Slot>, body: Result<Bytes, BytesRejection>) -> Response {
    let result = async {
        let req: InstancesRequest = parse(body)?;
        let engine = engine(&slot)?;
        blocking(move || engine.instances(&req)).await
    };
    reply(result.await)
}

async fn not_found() -> Response {
    ApiError::not_found("not_found", "no such endpoint").into_response()
}

async fn method_not_allowed() -> Response {
    ApiError::new(405, "method_not_allowed", "method not allowed for this endpoint").into_response()
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve<F>(listener: tokio::net::TcpListener, app: Router, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
