//! In-process API contract checks. Each check returns a description on
//! success so callers can report what ran.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::Value;
use tower::ServiceExt;

use flowgate_core::store::MetadataStore;
use flowgate_core::testkit::DeterministicRunner;
use flowgate_core::{Engine, EngineOptions};
use flowgate_server::api::{router, AppState, ROUTES};
use flowgate_server::auth::{Role, TokenTable};

pub const OPERATOR: &str = "op-secret";
pub const VIEWER: &str = "view-secret";

pub struct Harness {
    pub app: Router,
    pub engine: Engine,
    pub runner: Arc<DeterministicRunner>,
    pub data_dir: tempfile::TempDir,
    pub input_dir: tempfile::TempDir,
    pub scratch: tempfile::TempDir,
}

pub fn tokens() -> Arc<TokenTable> {
    Arc::new(TokenTable::new([
        (OPERATOR, Role::Operator),
        (VIEWER, Role::Viewer),
    ]))
}

pub fn app_for(engine: Engine) -> Router {
    router(AppState {
        engine,
        tokens: tokens(),
    })
}

pub fn harness() -> Harness {
    let data_dir = tempfile::tempdir().unwrap();
    let input_dir = tempfile::tempdir().unwrap();
    let scratch = tempfile::tempdir().unwrap();
    let (store, _) = MetadataStore::open(data_dir.path()).unwrap();
    let runner = Arc::new(DeterministicRunner::new());
    let engine = Engine::new(
        store,
        runner.clone(),
        EngineOptions {
            workspace_root: scratch.path().to_path_buf(),
            keep_workspaces: false,
        },
    );
    Harness {
        app: app_for(engine.clone()),
        engine,
        runner,
        data_dir,
        input_dir,
        scratch,
    }
}

pub async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    token: Option<&str>,
    body: Option<(&str, String)>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some((ct, text)) => req.header("content-type", ct).body(Body::from(text)),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 16 << 20).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, Some(VIEWER), None).await
}

pub async fn post(app: &Router, uri: &str, body: Option<(&str, String)>) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(OPERATOR), body).await
}

fn text(s: &str) -> Option<(&'static str, String)> {
    Some(("text/plain", s.to_string()))
}

pub fn cfg_text(input: &Path) -> String {
    format!("[project]\nname = api\ninput_dir = {}\n", input.display())
}

macro_rules! expect {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

/// Polls the run until `done` holds for its state or the deadline passes.
pub async fn wait_state(app: &Router, run_id: &str, want: &str) -> Result<Value, String> {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let (s, v) = get(app, &format!("/api/runs/{run_id}")).await;
        expect!(s == StatusCode::OK, "GET run {run_id}: {s}");
        if v["run"]["state"] == want {
            return Ok(v);
        }
        if Instant::now() > deadline {
            return Err(format!(
                "run {run_id} stuck in {} waiting for {want}",
                v["run"]["state"]
            ));
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

async fn wait_idle(engine: &Engine, run_id: &str) -> Result<(), String> {
    let deadline = Instant::now() + Duration::from_secs(20);
    while engine.is_active(run_id) {
        expect!(Instant::now() < deadline, "run {run_id} never went idle");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    Ok(())
}

const CHAIN: &str = "dag_id = chain\nversion = 1\n\n[task a]\nkind = shell\n\n[task b]\nkind = shell\nupstream = a\n\n[task c]\nkind = shell\nupstream = b\n";
const FLAKY: &str = "dag_id = flaky\nversion = 1\n\n[task x]\nkind = shell\nmax_retries = 0\nparam.fail_first = 1\n\n[task y]\nkind = shell\nupstream = x\n";

fn fill(template: &str) -> String {
    template
        .replace("{dag_id}", "chain")
        .replace("{run_id}", "no-such-run")
        .replace("{task_id}", "a")
}

/// 401 for every route without a valid bearer token, 403 for viewers on
/// every mutating route.
pub async fn check_auth(h: &Harness) -> Result<String, String> {
    for (method, path) in ROUTES {
        let uri = fill(path);
        for bad in [None, Some("wrong-token")] {
            let (s, v) = call(&h.app, method, &uri, bad, None).await;
            expect!(
                s == StatusCode::UNAUTHORIZED,
                "{method} {uri} with {bad:?}: {s}"
            );
            expect!(
                v["api_version"] == 1,
                "{method} {uri}: 401 body lacks api_version"
            );
        }
        if *method != "GET" {
            let (s, _) = call(&h.app, method, &uri, Some(VIEWER), None).await;
            expect!(s == StatusCode::FORBIDDEN, "viewer {method} {uri}: {s}");
        }
    }
    Ok(format!(
        "{} routes reject missing/unknown tokens; viewers cannot mutate",
        ROUTES.len()
    ))
}

pub async fn check_dags(h: &Harness) -> Result<String, String> {
    let app = &h.app;
    let (s, v) = post(app, "/api/dags", text(CHAIN)).await;
    expect!(s == StatusCode::CREATED, "register chain: {s} {v}");
    expect!(
        v["dag_id"] == "chain" && v["version"] == 1,
        "register body {v}"
    );
    let (s, v) = post(app, "/api/dags", text(CHAIN)).await;
    expect!(
        s == StatusCode::OK && v["created"] == false,
        "re-register identical: {s} {v}"
    );
    let changed = CHAIN.replace("upstream = b", "upstream = a");
    let (s, v) = post(app, "/api/dags", text(&changed)).await;
    expect!(
        s == StatusCode::CONFLICT && code(&v) == "VERSION_CONFLICT",
        "changed v1: {s} {v}"
    );
    let cyclic = "dag_id = loop\nversion = 1\n[task a]\nkind = shell\nupstream = b\n[task b]\nkind = shell\nupstream = a\n";
    let (s, v) = post(app, "/api/dags", text(cyclic)).await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY && code(&v) == "INVALID_DAG",
        "cycle: {s} {v}"
    );
    expect!(
        v["error"]["details"]["errors"]
            .as_array()
            .is_some_and(|e| e.iter().any(|x| x["code"] == "CYCLE")),
        "cycle report missing: {v}"
    );
    let (s, v) = post(app, "/api/dags", text("this is not a dag")).await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY && code(&v) == "PARSE_ERROR",
        "garbage: {s} {v}"
    );
    let json_spec = r#"{"dag_id":"flaky","version":1,"tasks":[]}"#;
    let (s, _) = post(
        app,
        "/api/dags",
        Some(("application/json", json_spec.into())),
    )
    .await;
    expect!(s == StatusCode::UNPROCESSABLE_ENTITY, "empty JSON DAG: {s}");
    let (s, v) = post(app, "/api/dags", text(FLAKY)).await;
    expect!(s == StatusCode::CREATED, "register flaky: {s} {v}");
    let reserved = CHAIN.replace("dag_id = chain", "dag_id = post-event-analysis");
    let (s, v) = post(app, "/api/dags", text(&reserved)).await;
    expect!(
        s == StatusCode::CONFLICT && code(&v) == "RESERVED_DAG",
        "reserved id: {s} {v}"
    );

    let (s, v) = get(app, "/api/dags").await;
    expect!(s == StatusCode::OK, "list dags: {s}");
    let ids: Vec<&str> = v["dags"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|d| d["dag_id"].as_str())
        .collect();
    expect!(ids == ["chain", "flaky"], "dag list {ids:?}");
    let (s, v) = get(app, "/api/dags/chain").await;
    expect!(
        s == StatusCode::OK && v["topological_order"] == serde_json::json!(["a", "b", "c"]),
        "get dag: {s} {v}"
    );
    let (s, v) = get(app, "/api/dags/nope").await;
    expect!(
        s == StatusCode::NOT_FOUND && code(&v) == "UNKNOWN_DAG",
        "unknown dag: {s}"
    );
    Ok("register 201/200/409/422, list, get, 404".into())
}

/// Trigger, pause mid-flight, resume, and the 404/409/422 paths around
/// them. Returns the settled run id.
pub async fn check_run_lifecycle(h: &Harness) -> Result<String, String> {
    let app = &h.app;
    let cfg = cfg_text(h.input_dir.path());
    let (s, v) = post(app, "/api/dags/nope/runs", text(&cfg)).await;
    expect!(s == StatusCode::NOT_FOUND, "trigger unknown dag: {s} {v}");
    let (s, v) = post(app, "/api/dags/chain/runs", text("[project\n")).await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY && v["error"]["details"]["line"] == 1,
        "syntax error cfg: {s} {v}"
    );
    let (s, v) = post(app, "/api/dags/chain/runs", text("[project]\nname = x\n")).await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY
            && v["error"]["details"]["key"] == "project.input_dir",
        "missing key: {s} {v}"
    );
    let (s, v) = post(app, "/api/dags/chain/runs?executor=warp-drive", text(&cfg)).await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY && code(&v) == "INVALID_EXECUTOR",
        "bad executor: {s} {v}"
    );
    let (s, v) = post(
        app,
        "/api/dags/chain/runs?executor=external:ghost",
        text(&cfg),
    )
    .await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY && code(&v) == "EXECUTOR_UNAVAILABLE",
        "ghost executor: {s} {v}"
    );

    h.runner.hold("b");
    let (s, v) = post(app, "/api/dags/chain/runs?executor=sequential", text(&cfg)).await;
    expect!(s == StatusCode::ACCEPTED, "trigger: {s} {v}");
    let run_id = v["run_id"].as_str().ok_or("no run_id")?.to_string();
    let (_, list) = get(app, "/api/runs").await;
    expect!(
        list["runs"]
            .as_array()
            .unwrap()
            .iter()
            .any(|r| r["run_id"] == run_id.as_str()),
        "triggered run not listed"
    );
    expect!(
        h.runner.wait_started("b", Duration::from_secs(10)),
        "task b never started"
    );

    let (s, v) = post(app, &format!("/api/runs/{run_id}/pause"), None).await;
    expect!(
        s == StatusCode::OK && v["state"] == "PAUSED",
        "pause: {s} {v}"
    );
    let (s, v) = post(app, &format!("/api/runs/{run_id}/pause"), None).await;
    expect!(s == StatusCode::CONFLICT, "pause twice: {s} {v}");
    let (s, v) = post(app, &format!("/api/runs/{run_id}/resume"), None).await;
    expect!(
        s == StatusCode::CONFLICT && code(&v) == "BUSY",
        "resume while draining: {s} {v}"
    );
    h.runner.release("b");
    wait_idle(&h.engine, &run_id).await?;
    let (_, v) = get(app, &format!("/api/runs/{run_id}")).await;
    expect!(v["run"]["state"] == "PAUSED", "paused run moved on: {v}");
    expect!(
        v["run"]["task_instances"]["b"]["state"] == "SUCCESS",
        "in-flight task result lost: {v}"
    );
    expect!(
        v["run"]["task_instances"]["c"]["state"] == "QUEUED",
        "task dispatched while paused: {v}"
    );

    let (s, v) = post(app, &format!("/api/runs/{run_id}/resume"), None).await;
    expect!(
        s == StatusCode::OK && v["state"] == "RUNNING",
        "resume: {s} {v}"
    );
    wait_state(app, &run_id, "SUCCESS").await?;
    wait_idle(&h.engine, &run_id).await?;

    let (s, v) = post(app, &format!("/api/runs/{run_id}/pause"), None).await;
    expect!(
        s == StatusCode::CONFLICT && code(&v) == "ILLEGAL_TRANSITION",
        "pause SUCCESS run: {s} {v}"
    );
    let (s, _) = post(app, &format!("/api/runs/{run_id}/resume"), None).await;
    expect!(s == StatusCode::CONFLICT, "resume SUCCESS run: {s}");
    let (s, v) = post(app, &format!("/api/runs/{run_id}/tasks/a/retry"), None).await;
    expect!(s == StatusCode::CONFLICT, "retry a SUCCESS task: {s} {v}");
    for uri in [
        "/api/runs/ghost/pause",
        "/api/runs/ghost/resume",
        "/api/runs/ghost/tasks/a/retry",
    ] {
        let (s, _) = post(app, uri, None).await;
        expect!(s == StatusCode::NOT_FOUND, "{uri}: {s}");
    }
    let (s, _) = post(app, &format!("/api/runs/{run_id}/tasks/zzz/retry"), None).await;
    expect!(s == StatusCode::NOT_FOUND, "retry unknown task: {s}");
    let (s, _) = get(app, "/api/runs/ghost").await;
    expect!(s == StatusCode::NOT_FOUND, "get unknown run: {s}");
    Ok(run_id)
}

pub async fn check_retry(h: &Harness) -> Result<String, String> {
    let app = &h.app;
    let (s, v) = post(
        app,
        "/api/dags/flaky/runs?executor=local:2",
        text(&cfg_text(h.input_dir.path())),
    )
    .await;
    expect!(s == StatusCode::ACCEPTED, "trigger flaky: {s} {v}");
    let run_id = v["run_id"].as_str().unwrap().to_string();
    let v = wait_state(app, &run_id, "FAILED").await?;
    wait_idle(&h.engine, &run_id).await?;
    expect!(
        v["run"]["task_instances"]["y"]["state"] == "UPSTREAM_FAILED",
        "downstream not failed: {v}"
    );
    // Retrying only the downstream task cannot help while its upstream is FAILED.
    let (s, v) = post(app, &format!("/api/runs/{run_id}/tasks/y/retry"), None).await;
    expect!(s == StatusCode::OK, "retry y: {s} {v}");
    let v = wait_state(app, &run_id, "FAILED").await?;
    wait_idle(&h.engine, &run_id).await?;
    expect!(
        v["run"]["task_instances"]["y"]["state"] == "UPSTREAM_FAILED",
        "y after lone retry: {v}"
    );
    let (s, v) = post(app, &format!("/api/runs/{run_id}/tasks/x/retry"), None).await;
    expect!(
        s == StatusCode::OK && v["requeued"].as_array().is_some_and(|r| r.len() == 2),
        "retry x: {s} {v}"
    );
    wait_state(app, &run_id, "SUCCESS").await?;
    wait_idle(&h.engine, &run_id).await?;
    let (_, v) = get(app, &format!("/api/runs/{run_id}")).await;
    expect!(
        v["run"]["task_instances"]["x"]["attempt"] == 2,
        "x attempts: {v}"
    );
    Ok(format!("{run_id}: failed, retried, succeeded"))
}

/// Offsets, polling idempotence and the artifacts manifest.
pub async fn check_reads(h: &Harness, run_id: &str) -> Result<String, String> {
    let app = &h.app;
    let base = format!("/api/runs/{run_id}/tasks/a/log");
    let (s, first) = get(app, &format!("{base}?offset=0")).await;
    expect!(s == StatusCode::OK, "log: {s}");
    let total = first["total"].as_u64().unwrap();
    expect!(
        total > 0 && first["next_offset"] == total,
        "log chunk {first}"
    );
    expect!(
        first["text"].as_str().unwrap().contains("a attempt 1"),
        "log text {first}"
    );
    let (_, tail) = get(app, &format!("{base}?offset={total}")).await;
    expect!(
        tail["text"] == "" && tail["next_offset"] == total,
        "log tail {tail}"
    );
    let (_, mid) = get(app, &format!("{base}?offset=2")).await;
    expect!(
        mid["text"].as_str().unwrap() == &first["text"].as_str().unwrap()[2..],
        "log offset slicing {mid}"
    );
    let (s, _) = get(app, &format!("{base}?offset=minus-one")).await;
    expect!(s == StatusCode::UNPROCESSABLE_ENTITY, "bad offset: {s}");
    let (s, _) = get(app, &format!("/api/runs/{run_id}/tasks/zzz/log")).await;
    expect!(s == StatusCode::NOT_FOUND, "unknown task log: {s}");
    let (s, _) = get(app, "/api/runs/ghost/tasks/a/log").await;
    expect!(s == StatusCode::NOT_FOUND, "unknown run log: {s}");

    let (s, v) = get(app, &format!("/api/runs/{run_id}/artifacts")).await;
    expect!(
        s == StatusCode::OK && v["files"] == serde_json::json!([]),
        "artifacts of a shell run: {s} {v}"
    );
    let (s, _) = get(app, "/api/runs/ghost/artifacts").await;
    expect!(s == StatusCode::NOT_FOUND, "unknown run artifacts: {s}");

    let (s, v) = get(app, "/api/runs?state=SUCCESS&dag_id=chain").await;
    expect!(
        s == StatusCode::OK && v["runs"].as_array().unwrap().len() == 1,
        "filtered list {v}"
    );
    let (_, v) = get(app, "/api/runs?state=FAILED&dag_id=chain").await;
    expect!(v["runs"] == serde_json::json!([]), "filter by state {v}");
    let (s, _) = get(app, "/api/runs?state=EXPLODED").await;
    expect!(
        s == StatusCode::UNPROCESSABLE_ENTITY,
        "bad state filter: {s}"
    );

    let polled = [
        "/api/runs".to_string(),
        format!("/api/runs/{run_id}"),
        format!("{base}?offset=0"),
        format!("/api/runs/{run_id}/artifacts"),
        "/api/dags".to_string(),
        "/api/dags/chain".to_string(),
    ];
    for uri in &polled {
        let a = get(app, uri).await;
        let b = get(app, uri).await;
        expect!(a == b, "two polls of {uri} differ");
        expect!(a.1["api_version"] == 1, "{uri} lacks api_version");
    }
    Ok(format!(
        "log offsets, filters, artifacts, {} idempotent polls",
        polled.len()
    ))
}

/// A fresh engine over the same data directory serves identical bodies.
pub async fn check_store_reconstruction(h: &Harness) -> Result<String, String> {
    let (store, report) = MetadataStore::open(h.data_dir.path()).map_err(|e| e.to_string())?;
    expect!(
        report.recovered_runs == 0 && report.truncation.is_none(),
        "settled store needed recovery"
    );
    let other = Engine::new(
        store,
        Arc::new(DeterministicRunner::new()),
        EngineOptions {
            workspace_root: h.scratch.path().to_path_buf(),
            keep_workspaces: false,
        },
    );
    let app2 = app_for(other);
    let (_, runs) = get(&h.app, "/api/runs").await;
    let mut uris = vec!["/api/runs".to_string(), "/api/dags".to_string()];
    for r in runs["runs"].as_array().unwrap() {
        let id = r["run_id"].as_str().unwrap();
        uris.push(format!("/api/runs/{id}"));
        uris.push(format!("/api/runs/{id}/tasks/a/log"));
    }
    for uri in &uris {
        let live = get(&h.app, uri).await;
        let replayed = get(&app2, uri).await;
        expect!(live == replayed, "{uri}: live and replayed bodies differ");
    }
    Ok(format!(
        "{} GET bodies identical after replaying the store",
        uris.len()
    ))
}

/// Runs every check in order.
pub async fn contract_suite() -> Result<Vec<String>, String> {
    let h = harness();
    let mut done = vec![check_auth(&h).await?, check_dags(&h).await?];
    let run_id = check_run_lifecycle(&h).await?;
    done.push(format!("run lifecycle {run_id}"));
    done.push(check_retry(&h).await?);
    done.push(check_reads(&h, &run_id).await?);
    done.push(check_store_reconstruction(&h).await?);
    done.push(check_pipeline_trigger().await?);
    Ok(done)
}

/// Triggers the built-in pipeline over HTTP against a synthetic survey and
/// checks the artifact listing against the output directory on disk.
pub async fn check_pipeline_trigger() -> Result<String, String> {
    use flowgate_pipelines::synthetic::{generate_survey, SurveySpec};
    use flowgate_pipelines::PipelineRunner;

    let data_dir = tempfile::tempdir().unwrap();
    let input = tempfile::tempdir().unwrap();
    let output = tempfile::tempdir().unwrap();
    let scratch = tempfile::tempdir().unwrap();
    let images =
        generate_survey(input.path(), &SurveySpec::default()).map_err(|e| e.to_string())?;
    let (store, _) = MetadataStore::open(data_dir.path()).map_err(|e| e.to_string())?;
    let engine = Engine::new(
        store,
        Arc::new(PipelineRunner::default()),
        EngineOptions {
            workspace_root: scratch.path().to_path_buf(),
            keep_workspaces: false,
        },
    );
    let app = app_for(engine.clone());
    let cfg = format!(
        "[project]\nname = api-survey\ninput_dir = {}\noutput_dir = {}\nflavour = vanilla\n\n[photogrammetry]\nvariant = point_cloud_first\ngrid_resolution = 24\n\n[ml]\nenabled = true\nclass_count = 3\n",
        input.path().display(),
        output.path().display()
    );
    let (s, v) = post(&app, "/api/dags/post-event-analysis/runs", text(&cfg)).await;
    expect!(s == StatusCode::ACCEPTED, "trigger pipeline: {s} {v}");
    expect!(
        v["warnings"].as_array().is_some_and(|w| w
            .iter()
            .any(|x| x.as_str().unwrap_or("").contains("flavour"))),
        "unknown key not reported: {v}"
    );
    let run_id = v["run_id"].as_str().unwrap().to_string();
    wait_state(&app, &run_id, "SUCCESS").await?;
    wait_idle(&engine, &run_id).await?;

    let (s, v) = get(&app, &format!("/api/runs/{run_id}/artifacts")).await;
    expect!(s == StatusCode::OK, "artifacts: {s}");
    let files = v["files"].as_array().unwrap();
    let root = output.path().join(&run_id);
    let mut total = 0;
    for f in files {
        let rel = f["path"].as_str().unwrap();
        let meta = std::fs::metadata(root.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        expect!(f["size"] == meta.len(), "{rel}: size mismatch");
        let digest = f["sha256"].as_str().unwrap_or("");
        expect!(
            digest.len() == 64 && digest.bytes().all(|b| b.is_ascii_hexdigit()),
            "{rel}: digest {digest}"
        );
        total += meta.len();
    }
    expect!(
        v["total_bytes"] == total,
        "total_bytes {} vs {total}",
        v["total_bytes"]
    );
    let masks = images.len() * 3;
    expect!(
        v["counts_by_extension"]["png"].as_u64() >= Some(masks as u64 + 1),
        "png count {v}"
    );
    for ext in ["ply", "obj", "mtl"] {
        expect!(
            v["counts_by_extension"][ext].as_u64() >= Some(1),
            "no .{ext} artifact: {v}"
        );
    }
    Ok(format!(
        "pipeline run {run_id}: {} artifacts, {total} bytes",
        files.len()
    ))
}
