//! HTTP inference service.
//!
//! - `POST /calc` with `{"expr": "5+2"}` returns a [`CalcResponse`].
//! - `GET /healthz` is 503 until both checkpoints are loaded, then
//!   `{"status":"ok"}`.
//! - `GET /` serves the web UI assets from a directory, when configured.

use std::collections::hash_map::RandomState;
use std::hash::BuildHasher;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use neurocalc::rng::named_stream;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::calc::{CalcResponse, Calculator};
use crate::grammar::parse_expr;

#[derive(Debug, Deserialize)]
pub struct CalcRequest {
    pub expr: String,
}

#[derive(Default)]
pub struct AppState {
    calculator: RwLock<Option<Arc<Calculator>>>,
    /// Fixed per-request render seed; `None` draws a fresh seed per request.
    render_seed: Option<u64>,
}

impl AppState {
    pub fn new(render_seed: Option<u64>) -> Self {
        Self {
            calculator: RwLock::new(None),
            render_seed,
        }
    }

    pub fn install(&self, calculator: Calculator) {
        *self.calculator.write().expect("state lock") = Some(Arc::new(calculator));
    }

    pub fn calculator(&self) -> Option<Arc<Calculator>> {
        self.calculator.read().expect("state lock").clone()
    }

    fn seed_for(&self, expr: &str) -> (u64, String) {
        match self.render_seed {
            Some(seed) => (seed, expr.to_string()),
            None => (RandomState::new().hash_one(expr), expr.to_string()),
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    match state.calculator() {
        Some(_) => Json(json!({"status": "ok"})).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "checkpoints not loaded"),
    }
}

async fn calc(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CalcRequest>, JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(req)) => req,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let triple = match parse_expr(&req.expr) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(calculator) = state.calculator() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "checkpoints not loaded");
    };
    let (seed, key) = state.seed_for(&req.expr);
    let result = tokio::task::spawn_blocking(move || -> neurocalc::Result<CalcResponse> {
        calculator.respond(triple, &mut named_stream(seed, &key))
    })
    .await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    let app = Router::new()
        .route("/calc", post(calc))
        .route("/healthz", get(healthz))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.layer(cors)
}
