//! HTTP inference service over one immutable stage-3 checkpoint.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gramsr_core::guidance::infer;
use gramsr_core::pipeline::Pipeline;
use gramsr_core::trainer::{Checkpoint, RunConfig};

use crate::api::{
    decode_request_parts, encode_response_image, ErrorBody, Health, InferRequest, InferResponse,
    RequestError, Timings,
};

/// Shared, read-only service state.
#[derive(Debug)]
pub struct AppState {
    ckpt: Checkpoint,
    pipeline: Pipeline,
    started: Instant,
}

impl AppState {
    pub fn new(ckpt: Checkpoint) -> gramsr_core::Result<Self> {
        if ckpt.stage != 3 {
            return Err(gramsr_core::Error::Config(format!(
                "the service needs a stage-3 checkpoint, got stage {}",
                ckpt.stage
            )));
        }
        let pipeline = Pipeline::new(&ckpt.config)?;
        Ok(Self {
            ckpt,
            pipeline,
            started: Instant::now(),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn config(&self) -> &RunConfig {
        &self.ckpt.config
    }

    pub fn health(&self) -> Health {
        Health::of(&self.ckpt, self.started.elapsed().as_secs_f64())
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            ApiError::BadRequest(m) | ApiError::Internal(m) => m,
        }
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message().to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Decodes the request, runs guided inference and encodes the result.
pub fn handle_infer(state: &AppState, req: &InferRequest) -> Result<InferResponse, ApiError> {
    let t0 = Instant::now();
    let (lq, scales) = decode_request_parts(req)?;
    let decode_ms = ms(t0);
    let t1 = Instant::now();
    let sr = infer(&state.pipeline, &lq, &scales, req.mode, &state.ckpt).map_err(|e| match e {
        gramsr_core::Error::Size(_) | gramsr_core::Error::Shape(_) => {
            ApiError::BadRequest(e.to_string())
        }
        other => ApiError::Internal(other.to_string()),
    })?;
    let infer_ms = ms(t1);
    let t2 = Instant::now();
    let image = encode_response_image(&sr).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(InferResponse {
        image,
        width: sr.width(),
        height: sr.height(),
        scales,
        mode: req.mode,
        timings: Timings {
            decode_ms,
            infer_ms,
            encode_ms: ms(t2),
            total_ms: ms(t0),
        },
    })
}

async fn infer_route(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<InferResponse>, ApiError> {
    let req: InferRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::from(RequestError::Json(e)))?;
    let resp = tokio::task::spawn_blocking(move || handle_infer(&state, &req))
        .await
        .map_err(|e| ApiError::Internal(format!("inference task failed: {e}")))??;
    Ok(Json(resp))
}

async fn health_route(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health())
}

async fn model_route(State(state): State<Arc<AppState>>) -> Json<RunConfig> {
    Json(state.config().clone())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/infer", post(infer_route))
        .route("/api/health", get(health_route))
        .route("/api/model", get(model_route))
        .with_state(state)
}

/// Binds `addr` and serves until the task is dropped or ctrl-c arrives.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
