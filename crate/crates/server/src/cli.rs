//! The `flowgate` command line.

use std::io::Read as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::json;

use flowgate_core::config::parse_config;
use flowgate_core::dag::validate_dag;
use flowgate_core::dagfile;
use flowgate_core::engine::LogSink;
use flowgate_core::executor::{LocalProcessExecutor, TaskPayload};
use flowgate_core::pipeline::config_to_dag;
use flowgate_core::run::ExecutorKind;
use flowgate_core::shell::OUTPUT_MARKER;
use flowgate_core::state::RunState;
use flowgate_core::store::MetadataStore;
use flowgate_core::workspace;
use flowgate_core::{Engine, EngineOptions, TaskContext, TaskRunner};
use flowgate_pipelines::PipelineRunner;

use crate::api::{router, AppState};
use crate::auth::TokenTable;

/// Adapter name under which the process-per-task executor is registered.
pub const LOCAL_PROCESS_ADAPTER: &str = "local-process";

#[derive(Debug, Parser)]
#[command(
    name = "flowgate",
    version,
    about = "DAG workflow gateway for survey processing pipelines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the REST API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory holding the event log, snapshots and task logs.
        #[arg(long)]
        data_dir: PathBuf,
        /// File with one `<token> <role>` pair per line.
        #[arg(long)]
        tokens_file: PathBuf,
        /// Parent directory of per-run workspaces.
        #[arg(long)]
        workspace_root: Option<PathBuf>,
    },
    /// Validate a DAG file, or a `.cfg` run configuration and the DAG it generates.
    Validate { file: PathBuf },
    /// Print the pipeline DAG a run configuration generates.
    RenderDag {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the pipeline for a configuration to completion in this process.
    Run {
        config: PathBuf,
        /// `sequential`, `local`, `local:<n>` or `external:local-process`.
        #[arg(long, default_value = "local")]
        executor: String,
        /// Persist run state here; without it the run is kept in memory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        workspace_root: Option<PathBuf>,
        /// Keep the workspace even if the run succeeds.
        #[arg(long)]
        keep_workspace: bool,
    },
    /// Execute one task from a JSON payload on stdin (used by the
    /// process executor).
    RunTask,
}

fn engine_options(workspace_root: Option<PathBuf>, keep_workspaces: bool) -> EngineOptions {
    EngineOptions {
        workspace_root: workspace_root.unwrap_or_else(workspace::default_root),
        keep_workspaces,
    }
}

/// An engine over `store` with the pipeline runner and the process
/// executor registered.
pub fn build_engine(store: MetadataStore, options: EngineOptions) -> Result<Engine, String> {
    let engine = Engine::new(store, Arc::new(PipelineRunner::default()), options);
    let program =
        std::env::current_exe().map_err(|e| format!("cannot locate own executable: {e}"))?;
    engine
        .register_external_executor(
            LOCAL_PROCESS_ADAPTER,
            Arc::new(LocalProcessExecutor::new(program)),
        )
        .map_err(|e| e.to_string())?;
    Ok(engine)
}

pub fn open_engine(data_dir: &Path, options: EngineOptions) -> Result<Engine, String> {
    let (store, report) =
        MetadataStore::open(data_dir).map_err(|e| format!("{}: {e}", data_dir.display()))?;
    if let Some(t) = &report.truncation {
        log::warn!(
            "event log truncated after seq {} ({} bytes dropped): {}",
            t.last_valid_seq,
            t.discarded_bytes,
            t.reason
        );
    }
    if report.recovered_runs > 0 || report.recovered_tasks > 0 {
        log::warn!(
            "recovered {} interrupted runs ({} tasks re-queued); resume them to continue",
            report.recovered_runs,
            report.recovered_tasks
        );
    }
    build_engine(store, options)
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Runs the command; the returned value is the process exit code.
pub fn run(cli: Cli) -> Result<i32, String> {
    match cli.command {
        Command::Serve {
            bind,
            data_dir,
            tokens_file,
            workspace_root,
        } => {
            let tokens = TokenTable::load(&tokens_file).map_err(|e| e.to_string())?;
            if tokens.is_empty() {
                return Err(format!("{} defines no tokens", tokens_file.display()));
            }
            let engine = open_engine(&data_dir, engine_options(workspace_root, false))?;
            let state = AppState {
                engine,
                tokens: Arc::new(tokens),
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(bind)
                    .await
                    .map_err(|e| format!("bind {bind}: {e}"))?;
                log::info!("listening on {bind}");
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(|e| e.to_string())
            })?;
            Ok(0)
        }
        Command::Validate { file } => {
            let text = read(&file)?;
            let is_config = file.extension().is_some_and(|e| e == "cfg");
            let spec = if is_config {
                let parsed = match parse_config(&text) {
                    Ok(p) => p,
                    Err(e) => {
                        println!("{}", json!({ "ok": false, "config_error": e.to_string() }));
                        return Ok(1);
                    }
                };
                for w in &parsed.warnings {
                    eprintln!("warning: {w}");
                }
                config_to_dag(&parsed.config)
            } else {
                match dagfile::parse_text(&text) {
                    Ok(s) => s,
                    Err(e) => {
                        println!("{}", json!({ "ok": false, "parse_error": e.to_string() }));
                        return Ok(1);
                    }
                }
            };
            let report = validate_dag(&spec);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(if report.ok { 0 } else { 1 })
        }
        Command::RenderDag { config, json } => {
            let parsed = parse_config(&read(&config)?).map_err(|e| e.to_string())?;
            let spec = config_to_dag(&parsed.config);
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&spec).expect("spec serializes")
                );
            } else {
                print!("{}", dagfile::to_text(&spec));
            }
            Ok(0)
        }
        Command::Run {
            config,
            executor,
            data_dir,
            workspace_root,
            keep_workspace,
        } => {
            let parsed = parse_config(&read(&config)?).map_err(|e| e.to_string())?;
            for w in &parsed.warnings {
                eprintln!("warning: {w}");
            }
            parsed.config.check_input_dir().map_err(|e| e.to_string())?;
            let executor = ExecutorKind::parse(&executor)
                .ok_or_else(|| format!("unknown executor '{executor}'"))?;
            let options = engine_options(workspace_root, keep_workspace);
            let engine = match &data_dir {
                Some(dir) => open_engine(dir, options)?,
                None => build_engine(MetadataStore::in_memory(), options)?,
            };
            let spec = engine
                .store()
                .register_generated(&config_to_dag(&parsed.config))
                .map_err(|e| e.to_string())?;
            let run = engine
                .execute_run(&spec, &parsed.config, executor)
                .map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&run.summary()).expect("summary serializes")
            );
            if let Some(ws) = &run.retained_workspace {
                eprintln!("workspace retained at {}", ws.display());
            }
            Ok(if run.state == RunState::Success { 0 } else { 1 })
        }
        Command::RunTask => {
            let mut body = String::new();
            std::io::stdin()
                .read_to_string(&mut body)
                .map_err(|e| format!("read payload: {e}"))?;
            let payload: TaskPayload =
                serde_json::from_str(&body).map_err(|e| format!("bad payload: {e}"))?;
            let ctx = TaskContext::from_payload(&payload, LogSink::Stdout);
            match PipelineRunner::default().run(&payload.task, &ctx) {
                Ok(output) => {
                    if let Some(out) = output {
                        println!("{OUTPUT_MARKER}{out}");
                    }
                    Ok(0)
                }
                Err(e) => {
                    eprintln!("{e}");
                    Ok(1)
                }
            }
        }
    }
}
