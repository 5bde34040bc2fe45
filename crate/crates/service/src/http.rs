//! axum routes over [`Service`]. Handlers parse JSON strictly and run each
//! operation on the blocking pool, since journal appends fsync.

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{AnswerRequest, CreateSessionRequest};
use crate::config::ServiceConfig;
use crate::service::{Service, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_required(body)
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::bad_request(format!("malformed request: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::internal(format!("worker failed: {e}")))?
}

fn reply<T: Serialize>(status: StatusCode, r: Result<T, ServiceError>) -> Response {
    match r {
        Ok(body) => (status, Json(body)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn create_session(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    let r = match parse::<CreateSessionRequest>(&body) {
        Ok(req) => blocking(move || svc.create_session(req)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::CREATED, r)
}

async fn answer(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> Response {
    let r = match parse_required::<AnswerRequest>(&body) {
        Ok(req) => blocking(move || svc.answer(&id, req)).await,
        Err(e) => Err(e),
    };
    reply(StatusCode::OK, r)
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, svc.session_view(&id))
}

async fn get_estimates(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    reply(StatusCode::OK, svc.estimates(&id))
}

async fn get_bank(State(svc): State<Arc<Service>>) -> Response {
    reply(StatusCode::OK, Ok::<_, ServiceError>(svc.bank_view()))
}

async fn fallback() -> Response {
    ServiceError::not_found("not_found", "no such route").into_response()
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/answer", post(answer))
        .route("/v1/sessions/{id}/estimates", get(get_estimates))
        .route("/v1/bank", get(get_bank))
        .fallback(fallback)
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve<S>(service: Arc<Service>, listener: tokio::net::TcpListener, shutdown: S) -> std::io::Result<()>
where
    S: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}

/// Loads everything from `config`, binds, and serves until Ctrl-C.
pub async fn run(config: &ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let cfg = config.clone();
    let service = tokio::task::spawn_blocking(move || Service::from_config(&cfg)).await??;
    let listener = tokio::net::TcpListener::bind((config.bind.as_str(), config.port)).await?;
    eprintln!(
        "serving bank `{}` on http://{} ({} stored sessions)",
        service.engine().bank_id(),
        listener.local_addr()?,
        service.session_ids().len()
    );
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve(Arc::new(service), listener, shutdown).await?;
    Ok(())
}
