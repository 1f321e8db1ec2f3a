//! HTTP tool endpoint over the read-only SQL executor.
//!
//! Routes:
//!
//! * `POST /execute` takes `{"name": "sql_executor", "arguments": {"sql": ...}, "database_id": ...}`
//!   and answers `{"ok", "feedback", "elapsed_ms"}`. Execution failures are
//!   still 200 with `ok = false`; a malformed body is 400 and an unknown
//!   database is 404.
//! * `GET /health` lists the registered databases.
//! * `POST /reload` re-reads the registry directory.
//!
//! Limits are fixed at startup and cannot be overridden per request.

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use stepcredit_core::executor::{serialize_feedback, Limits, SqlExecutor, DEFAULT_FEEDBACK_ROWS, DEFAULT_TIMEOUT};
use stepcredit_core::harness::DEFAULT_FEEDBACK_CAP;
use stepcredit_core::trajectory::TOOL_NAME;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub timeout: Duration,
    pub max_rows: usize,
    pub feedback_cap: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            timeout: DEFAULT_TIMEOUT,
            max_rows: DEFAULT_FEEDBACK_ROWS,
            feedback_cap: DEFAULT_FEEDBACK_CAP,
        }
    }
}

impl ServiceConfig {
    fn limits(&self) -> Limits {
        Limits {
            timeout: self.timeout,
            max_rows: Some(self.max_rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolArguments {
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolRequest {
    pub name: String,
    pub arguments: ToolArguments,
    pub database_id: String,
}

impl ToolRequest {
    pub fn new(sql: impl Into<String>, database_id: impl Into<String>) -> Self {
        ToolRequest {
            name: TOOL_NAME.to_string(),
            arguments: ToolArguments { sql: sql.into() },
            database_id: database_id.into(),
        }
    }

    /// Parses and checks a request body: the tool name must match and the
    /// SQL must not be blank.
    pub fn from_json(body: &[u8]) -> Result<Self, String> {
        let req: ToolRequest = serde_json::from_slice(body).map_err(|e| format!("invalid request body: {e}"))?;
        if req.name != TOOL_NAME {
            return Err(format!("unknown tool: {}", req.name));
        }
        if req.arguments.sql.trim().is_empty() {
            return Err("arguments.sql must not be empty".into());
        }
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub ok: bool,
    pub feedback: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub registered_databases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone)]
pub struct AppState {
    executor: SqlExecutor,
    config: ServiceConfig,
    // Tokio's semaphore grants permits in request order.
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(executor: SqlExecutor, config: ServiceConfig) -> Self {
        let permits = Arc::new(Semaphore::new(executor.workers()));
        AppState {
            executor,
            config,
            permits,
        }
    }

    pub fn executor(&self) -> &SqlExecutor {
        &self.executor
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            registered_databases: self.executor.database_ids(),
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

async fn execute(State(state): State<AppState>, body: Bytes) -> Response {
    let req = match ToolRequest::from_json(&body) {
        Ok(req) => req,
        Err(message) => return error(StatusCode::BAD_REQUEST, message),
    };
    if !state.executor.has_database(&req.database_id) {
        return error(
            StatusCode::NOT_FOUND,
            format!("unknown database: {}", req.database_id),
        );
    }
    let Ok(_permit) = state.permits.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "executor pool closed");
    };
    let executor = state.executor.clone();
    let limits = state.config.limits();
    let cap = state.config.feedback_cap;
    let started = Instant::now();
    let joined = tokio::task::spawn_blocking(move || {
        let outcome = executor.execute(&req.arguments.sql, &req.database_id, &limits);
        (outcome.is_ok(), serialize_feedback(&outcome, cap))
    })
    .await;
    let elapsed_ms = u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX);
    match joined {
        Ok((ok, feedback)) => Json(ToolResponse {
            ok,
            feedback,
            elapsed_ms,
        })
        .into_response(),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "executor task failed"),
    }
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(state.health())
}

async fn reload(State(state): State<AppState>) -> Response {
    let executor = state.executor.clone();
    match tokio::task::spawn_blocking(move || executor.reload()).await {
        Ok(Ok(_)) => Json(state.health()).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "reload task failed"),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/execute", post(execute))
        .route("/health", get(health))
        .route("/reload", post(reload))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve_until(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Serves until Ctrl-C.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    serve_until(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let ok = br#"{"name":"sql_executor","arguments":{"sql":"SELECT 1"},"database_id":"people"}"#;
        assert_eq!(ToolRequest::from_json(ok).unwrap(), ToolRequest::new("SELECT 1", "people"));
        for bad in [
            &br#"{"name":"shell","arguments":{"sql":"SELECT 1"},"database_id":"people"}"#[..],
            br#"{"name":"sql_executor","arguments":{"sql":"  "},"database_id":"people"}"#,
            br#"{"name":"sql_executor","arguments":{},"database_id":"people"}"#,
            br#"{"name":"sql_executor","arguments":{"sql":"SELECT 1"}}"#,
            br#"{"name":"sql_executor","arguments":{"sql":"SELECT 1"},"database_id":"people","timeout_ms":1}"#,
            b"not json",
        ] {
            assert!(ToolRequest::from_json(bad).is_err(), "{}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn default_limits() {
        let cfg = ServiceConfig::default();
        assert_eq!(cfg.limits().max_rows, Some(50));
        assert_eq!(cfg.feedback_cap, 1024);
        assert_eq!(cfg.timeout, Duration::from_secs(5));
    }
}
