//! HTTP control plane over the engine and the metadata store.
//!
//! Every body is JSON carrying `api_version`. Reads come straight from the
//! store's folded state; mutations go through the engine. The server keeps
//! no state of its own.

use std::collections::{BTreeMap, HashMap};

use axum::extract::{Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE, WWW_AUTHENTICATE};
use axum::http::{HeaderMap, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use std::sync::Arc;

use flowgate_core::config::{parse_config, run_output_dir, ConfigError};
use flowgate_core::dag::{topological_order, validate_dag, DagSpec};
use flowgate_core::dagfile;
use flowgate_core::pipeline::{config_to_dag, PIPELINE_DAG_ID};
use flowgate_core::run::{ExecutorKind, RunFilter};
use flowgate_core::state::{RunState, TaskState};
use flowgate_core::store::StoreError;
use flowgate_core::workspace::list_files;
use flowgate_core::{Engine, EngineError};

use crate::auth::{Role, TokenTable};

pub const API_VERSION: u32 = 1;
/// Executor used when a trigger names none.
pub const DEFAULT_EXECUTOR: &str = "local";

#[derive(Clone)]
pub struct AppState {
    pub engine: Engine,
    pub tokens: Arc<TokenTable>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "api_version": API_VERSION,
            "error": { "code": self.code, "message": self.message, "details": self.details },
        });
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(WWW_AUTHENTICATE, "Bearer".parse().expect("static header"));
        }
        resp
    }
}

fn config_error(e: &ConfigError) -> ApiError {
    let details = match e {
        ConfigError::Syntax { line, .. } => json!({ "line": line }),
        ConfigError::Invalid { key, .. } | ConfigError::MissingKey { key } => json!({ "key": key }),
    };
    ApiError::unprocessable("INVALID_CONFIG", e.to_string()).with_details(details)
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::UnknownRun(_) => ApiError::not_found("UNKNOWN_RUN", msg),
            StoreError::UnknownTask { .. } => ApiError::not_found("UNKNOWN_TASK", msg),
            StoreError::UnknownDag { .. } => ApiError::not_found("UNKNOWN_DAG", msg),
            StoreError::VersionConflict { .. } => ApiError::conflict("VERSION_CONFLICT", msg),
            StoreError::Transition(_) => ApiError::conflict("ILLEGAL_TRANSITION", msg),
            StoreError::InvalidDag(report) => ApiError::unprocessable("INVALID_DAG", msg)
                .with_details(serde_json::to_value(report).expect("report serializes")),
            StoreError::Io(_) | StoreError::Rejected(_) | StoreError::Corrupt(_) => {
                ApiError::internal(msg)
            }
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::InvalidDag(report) => ApiError::unprocessable("INVALID_DAG", msg)
                .with_details(serde_json::to_value(report).expect("report serializes")),
            EngineError::Config(c) => config_error(&c),
            EngineError::ExecutorUnavailable(_) => {
                ApiError::unprocessable("EXECUTOR_UNAVAILABLE", msg)
            }
            EngineError::DuplicateExecutor(_) => ApiError::conflict("DUPLICATE_EXECUTOR", msg),
            EngineError::Workspace { .. } => ApiError::internal(msg),
            EngineError::UnknownRun(_) => ApiError::not_found("UNKNOWN_RUN", msg),
            EngineError::UnknownTask { .. } => ApiError::not_found("UNKNOWN_TASK", msg),
            EngineError::WrongState { state, .. } => ApiError::conflict("ILLEGAL_TRANSITION", msg)
                .with_details(json!({ "state": state })),
            EngineError::NotRetriable { state, .. } => ApiError::conflict("NOT_RETRIABLE", msg)
                .with_details(json!({ "task_state": state })),
            EngineError::Busy(_) => ApiError::conflict("BUSY", msg),
            EngineError::Store(s) => s.into(),
        }
    }
}

type ApiResult = Result<(StatusCode, Json<Value>), ApiError>;

fn ok(body: Value) -> ApiResult {
    Ok((StatusCode::OK, Json(body)))
}

/// Adds `api_version` to an object body.
fn versioned(mut body: Value) -> Value {
    body["api_version"] = json!(API_VERSION);
    body
}

/// Reads need a viewer token, everything else an operator token.
pub fn required_role(method: &Method) -> Role {
    if method == Method::GET || method == Method::HEAD {
        Role::Viewer
    } else {
        Role::Operator
    }
}

async fn authorize(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let header = req
        .headers()
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok());
    let Some(role) = state.tokens.role_for_header(header) else {
        return ApiError::new(
            StatusCode::UNAUTHORIZED,
            "UNAUTHORIZED",
            "missing or unknown bearer token",
        )
        .into_response();
    };
    let needed = required_role(req.method());
    if !role.allows(needed) {
        return ApiError::new(
            StatusCode::FORBIDDEN,
            "FORBIDDEN",
            format!(
                "{role:?} tokens cannot {} {}",
                req.method(),
                req.uri().path()
            ),
        )
        .into_response();
    }
    next.run(req).await
}

/// Every route, as `(method, path template)`. Kept next to the router so
/// tests can walk the whole table.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/api/dags"),
    ("POST", "/api/dags"),
    ("GET", "/api/dags/{dag_id}"),
    ("POST", "/api/dags/{dag_id}/runs"),
    ("GET", "/api/runs"),
    ("GET", "/api/runs/{run_id}"),
    ("POST", "/api/runs/{run_id}/pause"),
    ("POST", "/api/runs/{run_id}/resume"),
    ("POST", "/api/runs/{run_id}/tasks/{task_id}/retry"),
    ("GET", "/api/runs/{run_id}/tasks/{task_id}/log"),
    ("GET", "/api/runs/{run_id}/artifacts"),
];

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/dags", get(list_dags).post(register_dag))
        .route("/api/dags/{dag_id}", get(get_dag))
        .route("/api/dags/{dag_id}/runs", post(trigger_run))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{run_id}", get(get_run))
        .route("/api/runs/{run_id}/pause", post(pause_run))
        .route("/api/runs/{run_id}/resume", post(resume_run))
        .route("/api/runs/{run_id}/tasks/{task_id}/retry", post(retry_task))
        .route("/api/runs/{run_id}/tasks/{task_id}/log", get(task_log))
        .route("/api/runs/{run_id}/artifacts", get(artifacts))
        .route_layer(middleware::from_fn_with_state(state.clone(), authorize))
        .with_state(state)
}

/// Engine calls may wait on a run's coordinator; keep them off the
/// async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))
}

async fn list_dags(State(s): State<AppState>) -> ApiResult {
    let dags: Vec<Value> = s
        .engine
        .store()
        .state()
        .dags()
        .values()
        .map(|d| json!({ "dag_id": d.dag_id, "version": d.version, "task_count": d.tasks.len() }))
        .collect();
    ok(versioned(json!({ "dags": dags })))
}

async fn get_dag(State(s): State<AppState>, Path(dag_id): Path<String>) -> ApiResult {
    let store = s.engine.store();
    let dag = store
        .state()
        .latest_dag(&dag_id)
        .ok_or_else(|| ApiError::not_found("UNKNOWN_DAG", format!("unknown DAG '{dag_id}'")))?;
    let order = topological_order(dag).unwrap_or_default();
    ok(versioned(json!({ "dag": dag, "topological_order": order })))
}

fn parse_dag_body(headers: &HeaderMap, body: &str) -> Result<DagSpec, ApiError> {
    let is_json = headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.contains("json"));
    if is_json {
        serde_json::from_str(body).map_err(|e| {
            ApiError::unprocessable("PARSE_ERROR", e.to_string())
                .with_details(json!({ "line": e.line() }))
        })
    } else {
        dagfile::parse_text(body).map_err(|e| {
            ApiError::unprocessable("PARSE_ERROR", e.to_string())
                .with_details(json!({ "line": e.line }))
        })
    }
}

async fn register_dag(State(s): State<AppState>, headers: HeaderMap, body: String) -> ApiResult {
    let spec = parse_dag_body(&headers, &body)?;
    let report = validate_dag(&spec);
    if !report.ok {
        return Err(
            ApiError::unprocessable("INVALID_DAG", "DAG failed validation")
                .with_details(serde_json::to_value(&report).expect("report serializes")),
        );
    }
    if spec.dag_id == PIPELINE_DAG_ID {
        return Err(ApiError::conflict(
            "RESERVED_DAG",
            format!("'{PIPELINE_DAG_ID}' is generated from the run configuration"),
        ));
    }
    let mut store = s.engine.store();
    let existed = store.state().dag(&spec.dag_id, spec.version) == Some(&spec);
    let version = store.register_dag(&spec)?;
    let status = if existed {
        StatusCode::OK
    } else {
        StatusCode::CREATED
    };
    Ok((
        status,
        Json(versioned(
            json!({ "dag_id": spec.dag_id, "version": version, "created": !existed }),
        )),
    ))
}

async fn trigger_run(
    State(s): State<AppState>,
    Path(dag_id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    body: String,
) -> ApiResult {
    let builtin = dag_id == PIPELINE_DAG_ID;
    if !builtin && s.engine.store().state().latest_dag(&dag_id).is_none() {
        return Err(ApiError::not_found(
            "UNKNOWN_DAG",
            format!("unknown DAG '{dag_id}'"),
        ));
    }
    let parsed = parse_config(&body).map_err(|e| config_error(&e))?;
    let config = parsed.config;
    let executor_text = q
        .get("executor")
        .map(String::as_str)
        .unwrap_or(DEFAULT_EXECUTOR);
    let executor = ExecutorKind::parse(executor_text).ok_or_else(|| {
        ApiError::unprocessable(
            "INVALID_EXECUTOR",
            format!("unknown executor '{executor_text}'"),
        )
    })?;
    let engine = s.engine.clone();
    let run = blocking(move || -> Result<_, ApiError> {
        let spec = if builtin {
            config.check_input_dir().map_err(|e| config_error(&e))?;
            config.validate().map_err(|e| config_error(&e))?;
            engine.store().register_generated(&config_to_dag(&config))?
        } else {
            engine
                .store()
                .state()
                .latest_dag(&dag_id)
                .cloned()
                .ok_or_else(|| {
                    ApiError::not_found("UNKNOWN_DAG", format!("unknown DAG '{dag_id}'"))
                })?
        };
        // The drive thread is detached; progress is observed through the store.
        let (run, _handle) = engine.trigger(&spec, &config, executor)?;
        Ok(run)
    })
    .await??;
    let warnings: Vec<String> = parsed.warnings.iter().map(ToString::to_string).collect();
    Ok((
        StatusCode::ACCEPTED,
        Json(versioned(json!({
            "run_id": run.run_id,
            "dag_id": run.dag_id,
            "version": run.version,
            "state": run.state,
            "executor": run.executor.to_string(),
            "warnings": warnings,
        }))),
    ))
}

async fn list_runs(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let state = match q.get("state").filter(|v| !v.is_empty()) {
        None => None,
        Some(v) => Some(RunState::parse(v).ok_or_else(|| {
            ApiError::unprocessable("INVALID_QUERY", format!("unknown run state '{v}'"))
        })?),
    };
    let filter = RunFilter {
        dag_id: q.get("dag_id").filter(|v| !v.is_empty()).cloned(),
        state,
        since: None,
    };
    let runs = s.engine.store().query_runs(&filter);
    ok(versioned(json!({ "runs": runs })))
}

async fn get_run(State(s): State<AppState>, Path(run_id): Path<String>) -> ApiResult {
    let run = s
        .engine
        .run(&run_id)
        .ok_or_else(|| ApiError::not_found("UNKNOWN_RUN", format!("unknown run '{run_id}'")))?;
    ok(versioned(json!({ "run": run })))
}

fn run_state_body(run_id: &str, state: RunState) -> Value {
    versioned(json!({ "run_id": run_id, "state": state }))
}

async fn pause_run(State(s): State<AppState>, Path(run_id): Path<String>) -> ApiResult {
    let engine = s.engine.clone();
    let run = blocking(move || engine.pause_run(&run_id)).await??;
    ok(run_state_body(&run.run_id, run.state))
}

async fn resume_run(State(s): State<AppState>, Path(run_id): Path<String>) -> ApiResult {
    let engine = s.engine.clone();
    let (run, _handle) = blocking(move || engine.start_resume(&run_id)).await??;
    ok(run_state_body(&run.run_id, run.state))
}

async fn retry_task(
    State(s): State<AppState>,
    Path((run_id, task_id)): Path<(String, String)>,
) -> ApiResult {
    let engine = s.engine.clone();
    let body = blocking(move || -> Result<Value, ApiError> {
        let before = engine
            .run(&run_id)
            .ok_or_else(|| EngineError::UnknownRun(run_id.clone()))?;
        let after = engine.retry_task(&run_id, &task_id)?;
        let requeued: Vec<&String> = after
            .task_instances
            .iter()
            .filter(|(id, t)| {
                t.state == TaskState::Queued
                    && before.task_instances[*id].state != TaskState::Queued
            })
            .map(|(id, _)| id)
            .collect();
        // A run that had settled as FAILED is resumed so the retry takes
        // effect; an operator-paused run stays paused.
        let state = if before.state == RunState::Failed {
            let (run, _handle) = engine.start_resume(&run_id)?;
            run.state
        } else {
            after.state
        };
        Ok(versioned(json!({
            "run_id": run_id,
            "task_id": task_id,
            "state": state,
            "requeued": requeued,
        })))
    })
    .await??;
    ok(body)
}

async fn task_log(
    State(s): State<AppState>,
    Path((run_id, task_id)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let offset = match q.get("offset").filter(|v| !v.is_empty()) {
        None => 0,
        Some(v) => v.parse::<u64>().map_err(|_| {
            ApiError::unprocessable(
                "INVALID_QUERY",
                format!("offset must be a byte count, got '{v}'"),
            )
        })?,
    };
    let store = s.engine.store();
    let chunk = store.read_log(&run_id, &task_id, offset)?;
    let task_state = store
        .state()
        .run(&run_id)
        .and_then(|r| r.task_instances.get(&task_id))
        .map(|t| t.state);
    ok(versioned(json!({
        "run_id": run_id,
        "task_id": task_id,
        "task_state": task_state,
        "offset": offset.min(chunk.total),
        "next_offset": chunk.next_offset,
        "total": chunk.total,
        "text": chunk.text,
    })))
}

async fn artifacts(State(s): State<AppState>, Path(run_id): Path<String>) -> ApiResult {
    let run = s
        .engine
        .run(&run_id)
        .ok_or_else(|| ApiError::not_found("UNKNOWN_RUN", format!("unknown run '{run_id}'")))?;
    let root = run_output_dir(&run.config_snapshot, &run_id);
    let files = if root.is_dir() {
        let dir = root.clone();
        blocking(move || list_files(&dir))
            .await?
            .map_err(|e| ApiError::internal(format!("{}: {e}", root.display())))?
    } else {
        Vec::new()
    };
    let total: u64 = files.iter().map(|f| f.size).sum();
    let by_kind: BTreeMap<&str, usize> = files.iter().fold(BTreeMap::new(), |mut m, f| {
        let kind = f.path.rsplit('.').next().unwrap_or("");
        *m.entry(kind).or_default() += 1;
        m
    });
    ok(versioned(json!({
        "run_id": run_id,
        "root": root,
        "files": files,
        "total_bytes": total,
        "counts_by_extension": by_kind,
    })))
}
