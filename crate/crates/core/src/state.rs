//! Task and run state machines.
//!
//! Legal task transitions:
//! - QUEUED -> RUNNING | UPSTREAM_FAILED | SKIPPED
//! - RUNNING -> SUCCESS | FAILED
//! - FAILED -> QUEUED (retry, bounded by the retry policy)
//!
//! SUCCESS, UPSTREAM_FAILED and SKIPPED are terminal for the engine. An
//! operator retry may re-queue FAILED and UPSTREAM_FAILED tasks; crash
//! recovery may put a RUNNING task back to QUEUED. Both are recorded with
//! an explicit [`TransitionCause`] so they are distinguishable in the log.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Queued,
    Running,
    Success,
    Failed,
    UpstreamFailed,
    Skipped,
}

impl TaskState {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Queued => "QUEUED",
            TaskState::Running => "RUNNING",
            TaskState::Success => "SUCCESS",
            TaskState::Failed => "FAILED",
            TaskState::UpstreamFailed => "UPSTREAM_FAILED",
            TaskState::Skipped => "SKIPPED",
        }
    }

    pub fn parse(s: &str) -> Option<TaskState> {
        [
            TaskState::Queued,
            TaskState::Running,
            TaskState::Success,
            TaskState::Failed,
            TaskState::UpstreamFailed,
            TaskState::Skipped,
        ]
        .into_iter()
        .find(|t| t.as_str().eq_ignore_ascii_case(s))
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::Success | TaskState::UpstreamFailed | TaskState::Skipped
        )
    }

    /// Whether `self -> to` is an ordinary engine transition.
    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Queued, Running)
                | (Running, Success)
                | (Running, Failed)
                | (Failed, Queued)
                | (Queued, UpstreamFailed)
                | (Queued, Skipped)
        )
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransitionCause {
    /// Decided by the engine while driving the run.
    #[default]
    Engine,
    /// Operator-requested retry of a failed task.
    ManualRetry,
    /// Reset of in-flight work after the store was reopened.
    CrashRecovery,
}

/// Checks a task transition against the state machine and the retry budget.
///
/// `attempt` is the number of times the task has been started. Each manual
/// retry opens a fresh budget of `max_retries + 1` starts.
pub fn check_task_transition(
    from: TaskState,
    to: TaskState,
    cause: TransitionCause,
    attempt: u32,
    max_retries: u32,
    manual_retries: u32,
) -> Result<(), TransitionError> {
    let ok = match cause {
        TransitionCause::Engine => {
            if (from, to) == (TaskState::Failed, TaskState::Queued) {
                attempt < attempt_budget(max_retries, manual_retries)
            } else {
                from.can_transition(to)
            }
        }
        TransitionCause::ManualRetry => {
            to == TaskState::Queued && matches!(from, TaskState::Failed | TaskState::UpstreamFailed)
        }
        TransitionCause::CrashRecovery => (from, to) == (TaskState::Running, TaskState::Queued),
    };
    if ok {
        Ok(())
    } else {
        Err(TransitionError::Task { from, to, cause })
    }
}

/// Total starts allowed after `manual_retries` operator retries.
pub fn attempt_budget(max_retries: u32, manual_retries: u32) -> u32 {
    (max_retries + 1).saturating_mul(manual_retries + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Running,
    Paused,
    Success,
    Failed,
}

impl RunState {
    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Running => "RUNNING",
            RunState::Paused => "PAUSED",
            RunState::Success => "SUCCESS",
            RunState::Failed => "FAILED",
        }
    }

    pub fn parse(s: &str) -> Option<RunState> {
        [
            RunState::Running,
            RunState::Paused,
            RunState::Success,
            RunState::Failed,
        ]
        .into_iter()
        .find(|r| r.as_str().eq_ignore_ascii_case(s))
    }

    /// RUNNING <-> PAUSED, RUNNING -> SUCCESS | FAILED, and FAILED -> PAUSED
    /// when an operator re-queues a failed task.
    pub fn can_transition(self, to: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, to),
            (Running, Paused)
                | (Paused, Running)
                | (Running, Success)
                | (Running, Failed)
                | (Failed, Paused)
        )
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("illegal task transition {from} -> {to} ({cause:?})")]
    Task {
        from: TaskState,
        to: TaskState,
        cause: TransitionCause,
    },
    #[error("illegal run transition {from} -> {to}")]
    Run { from: RunState, to: RunState },
}
