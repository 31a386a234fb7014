//! Per-run execution records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::state::{RunState, TaskState};

/// How a run's tasks are dispatched.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutorKind {
    Sequential,
    LocalParallel { worker_count: u32 },
    External { adapter_name: String },
}

impl ExecutorKind {
    /// Local pool sized to the machine.
    pub fn local_default() -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get() as u32);
        ExecutorKind::LocalParallel {
            worker_count: cores,
        }
    }

    /// Parses `sequential`, `local`, `local:<n>` or `external:<name>`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("sequential") {
            return Some(ExecutorKind::Sequential);
        }
        if s.eq_ignore_ascii_case("local") {
            return Some(ExecutorKind::local_default());
        }
        if let Some(n) = s.strip_prefix("local:") {
            let worker_count: u32 = n.parse().ok()?;
            return (worker_count >= 1).then_some(ExecutorKind::LocalParallel { worker_count });
        }
        if let Some(name) = s.strip_prefix("external:") {
            return (!name.is_empty()).then(|| ExecutorKind::External {
                adapter_name: name.to_string(),
            });
        }
        None
    }
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutorKind::Sequential => f.write_str("sequential"),
            ExecutorKind::LocalParallel { worker_count } => write!(f, "local:{worker_count}"),
            ExecutorKind::External { adapter_name } => write!(f, "external:{adapter_name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub state: TaskState,
    /// Number of times the task has been started in this run.
    pub attempt: u32,
    /// Operator retries so far; each one extends the retry budget.
    #[serde(default)]
    pub manual_retries: u32,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    /// Store-relative path of the task's log file.
    pub log_ref: String,
    /// Short result summary reported by the last successful attempt.
    #[serde(default)]
    pub output: Option<String>,
}

impl TaskInstance {
    pub fn queued(run_id: &str, task_id: &str) -> Self {
        TaskInstance {
            task_id: task_id.to_string(),
            state: TaskState::Queued,
            attempt: 0,
            manual_retries: 0,
            started_at: None,
            ended_at: None,
            log_ref: log_ref(run_id, task_id),
            output: None,
        }
    }
}

pub fn log_ref(run_id: &str, task_id: &str) -> String {
    format!("runs/{run_id}/logs/{task_id}.txt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub dag_id: String,
    pub version: u64,
    pub config_snapshot: RunConfig,
    pub executor: ExecutorKind,
    pub state: RunState,
    pub task_instances: BTreeMap<String, TaskInstance>,
    pub created_at: DateTime<Utc>,
    /// Scratch directory for intermediate files.
    pub workspace: PathBuf,
    /// Set when a failed run leaves its workspace behind for debugging.
    #[serde(default)]
    pub retained_workspace: Option<PathBuf>,
}

impl RunRecord {
    pub fn task_states(&self) -> BTreeMap<String, TaskState> {
        self.task_instances
            .iter()
            .map(|(id, t)| (id.clone(), t.state))
            .collect()
    }

    pub fn summary(&self) -> RunSummary {
        let mut counts = BTreeMap::new();
        for t in self.task_instances.values() {
            *counts.entry(t.state).or_insert(0usize) += 1;
        }
        RunSummary {
            run_id: self.run_id.clone(),
            dag_id: self.dag_id.clone(),
            version: self.version,
            state: self.state,
            created_at: self.created_at,
            task_count: self.task_instances.len(),
            task_state_counts: counts,
        }
    }

    /// The state a run settles in once nothing is left to dispatch.
    pub fn settled_state(&self) -> RunState {
        let failed = self
            .task_instances
            .values()
            .any(|t| matches!(t.state, TaskState::Failed | TaskState::UpstreamFailed));
        if failed {
            RunState::Failed
        } else {
            RunState::Success
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dag_id: String,
    pub version: u64,
    pub state: RunState,
    pub created_at: DateTime<Utc>,
    pub task_count: usize,
    pub task_state_counts: BTreeMap<TaskState, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFilter {
    pub dag_id: Option<String>,
    pub state: Option<RunState>,
    pub since: Option<DateTime<Utc>>,
}
