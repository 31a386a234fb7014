//! The EXTERNAL executor contract and its registry.
//!
//! An external executor receives one [`TaskPayload`] per attempt and answers
//! with a [`CompletionReport`]; the engine never dispatches the same attempt
//! twice. This is where a cluster scheduler would plug in.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dag::{TaskKind, TaskSpec};
use crate::shell::{self, OUTPUT_MARKER, PARAM_COMMAND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub run_id: String,
    pub task: TaskSpec,
    pub attempt: u32,
    pub workspace: PathBuf,
    pub output_dir: PathBuf,
    pub config: RunConfig,
    pub upstream_outputs: BTreeMap<String, Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionReport {
    /// 0 = SUCCESS, anything else = FAILED.
    pub exit_status: i32,
    pub log: String,
    #[serde(default)]
    pub output: Option<String>,
}

impl CompletionReport {
    pub fn failed(message: impl Into<String>) -> Self {
        CompletionReport {
            exit_status: -1,
            log: message.into(),
            output: None,
        }
    }
}

pub trait ExternalExecutor: Send + Sync {
    fn dispatch(&self, payload: &TaskPayload) -> CompletionReport;

    /// Attempts the adapter accepts at once.
    fn capacity(&self) -> u32 {
        1
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("an external executor named '{0}' is already registered")]
pub struct DuplicateExecutor(pub String);

/// Proof of registration; dropping it does not unregister.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorHandle {
    pub adapter_name: String,
}

#[derive(Default)]
pub struct ExecutorRegistry {
    adapters: RwLock<HashMap<String, Arc<dyn ExternalExecutor>>>,
}

impl ExecutorRegistry {
    pub fn register(
        &self,
        adapter_name: &str,
        executor: Arc<dyn ExternalExecutor>,
    ) -> Result<ExecutorHandle, DuplicateExecutor> {
        let mut map = self.adapters.write().expect("registry lock");
        if map.contains_key(adapter_name) {
            return Err(DuplicateExecutor(adapter_name.to_string()));
        }
        map.insert(adapter_name.to_string(), executor);
        Ok(ExecutorHandle {
            adapter_name: adapter_name.to_string(),
        })
    }

    pub fn get(&self, adapter_name: &str) -> Option<Arc<dyn ExternalExecutor>> {
        self.adapters
            .read()
            .expect("registry lock")
            .get(adapter_name)
            .cloned()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .adapters
            .read()
            .expect("registry lock")
            .keys()
            .cloned()
            .collect();
        names.sort();
        names
    }
}

/// Runs each attempt as a child process on this host.
///
/// Shell tasks run their command directly; every other kind is handed to
/// `<program> run-task` with the JSON payload on stdin.
pub struct LocalProcessExecutor {
    program: PathBuf,
}

impl LocalProcessExecutor {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        LocalProcessExecutor {
            program: program.into(),
        }
    }

    fn command(&self, payload: &TaskPayload) -> Result<(Command, Option<Vec<u8>>), String> {
        let cwd = if payload.workspace.is_dir() {
            payload.workspace.clone()
        } else {
            std::env::temp_dir()
        };
        let env = [
            ("FLOWGATE_RUN_ID", payload.run_id.clone()),
            ("FLOWGATE_TASK_ID", payload.task.task_id.clone()),
            ("FLOWGATE_ATTEMPT", payload.attempt.to_string()),
            (
                "FLOWGATE_WORKSPACE",
                payload.workspace.display().to_string(),
            ),
            (
                "FLOWGATE_OUTPUT_DIR",
                payload.output_dir.display().to_string(),
            ),
        ];
        if payload.task.kind == TaskKind::Shell {
            let command = payload
                .task
                .params
                .get(PARAM_COMMAND)
                .ok_or_else(|| format!("shell task has no '{PARAM_COMMAND}' param"))?;
            let mut cmd = shell::shell_command(command, &cwd);
            cmd.envs(env);
            return Ok((cmd, None));
        }
        let mut cmd = Command::new(&self.program);
        cmd.arg("run-task")
            .current_dir(cwd)
            .envs(env)
            .stdin(Stdio::piped());
        let body = serde_json::to_vec(payload).map_err(|e| e.to_string())?;
        Ok((cmd, Some(body)))
    }
}

impl ExternalExecutor for LocalProcessExecutor {
    fn dispatch(&self, payload: &TaskPayload) -> CompletionReport {
        let (mut cmd, stdin) = match self.command(payload) {
            Ok(c) => c,
            Err(e) => return CompletionReport::failed(e),
        };
        let child = cmd.stdout(Stdio::piped()).stderr(Stdio::piped()).spawn();
        let mut child = match child {
            Ok(c) => c,
            Err(e) => {
                return CompletionReport::failed(format!("spawn {}: {e}", self.program.display()))
            }
        };
        if let (Some(body), Some(mut pipe)) = (stdin, child.stdin.take()) {
            if let Err(e) = pipe.write_all(&body) {
                let _ = child.kill();
                return CompletionReport::failed(format!("write payload: {e}"));
            }
        }
        let out = match child.wait_with_output() {
            Ok(o) => o,
            Err(e) => return CompletionReport::failed(format!("wait: {e}")),
        };
        let mut log = String::from_utf8_lossy(&out.stdout).into_owned();
        log.push_str(&String::from_utf8_lossy(&out.stderr));
        let output = log
            .lines()
            .filter_map(|l| l.strip_prefix(OUTPUT_MARKER))
            .next_back()
            .map(|s| s.trim().to_string());
        CompletionReport {
            exit_status: out.status.code().unwrap_or(-1),
            log,
            output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(i32);
    impl ExternalExecutor for Fixed {
        fn dispatch(&self, _: &TaskPayload) -> CompletionReport {
            CompletionReport {
                exit_status: self.0,
                log: String::new(),
                output: None,
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let reg = ExecutorRegistry::default();
        reg.register("a", Arc::new(Fixed(0))).unwrap();
        assert_eq!(
            reg.register("a", Arc::new(Fixed(1))).unwrap_err(),
            DuplicateExecutor("a".into())
        );
        assert!(reg.get("a").is_some());
        assert!(reg.get("b").is_none());
    }

    #[test]
    fn local_process_runs_shell_tasks() {
        let exec = LocalProcessExecutor::new("/nonexistent/flowgate");
        let payload = TaskPayload {
            run_id: "r".into(),
            task: TaskSpec::new("t", TaskKind::Shell)
                .param(PARAM_COMMAND, "echo hi; echo ::output::x; exit 2"),
            attempt: 1,
            workspace: std::env::temp_dir(),
            output_dir: std::env::temp_dir(),
            config: RunConfig::with_input_dir("/in"),
            upstream_outputs: BTreeMap::new(),
        };
        let report = exec.dispatch(&payload);
        assert_eq!(report.exit_status, 2);
        assert!(report.log.starts_with("hi\n"));
        assert_eq!(report.output.as_deref(), Some("x"));

        let mut other = payload.clone();
        other.task.kind = TaskKind::Align;
        assert_ne!(exec.dispatch(&other).exit_status, 0);
    }
}
