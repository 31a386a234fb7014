//! Deterministic task runners for tests and demos.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::dag::TaskSpec;
use crate::engine::{TaskContext, TaskResult, TaskRunner};
use crate::workspace::sha256_bytes;

/// Fails attempts `1..=n`.
pub const PARAM_FAIL_FIRST: &str = "fail_first";
/// `true`: every attempt fails.
pub const PARAM_ALWAYS_FAIL: &str = "always_fail";
pub const PARAM_SLEEP_MS: &str = "sleep_ms";

/// Output of a task: a digest of its id and its upstream outputs, so equal
/// inputs give equal outputs on any executor.
pub fn expected_output(task_id: &str, upstream: &[(String, Option<String>)]) -> String {
    let mut s = task_id.to_string();
    for (id, out) in upstream {
        s.push('|');
        s.push_str(id);
        s.push('=');
        s.push_str(out.as_deref().unwrap_or("-"));
    }
    sha256_bytes(s.as_bytes())[..16].to_string()
}

#[derive(Default)]
struct Gates {
    held: BTreeSet<String>,
    started: Vec<String>,
}

/// Runs every task as a pure function of its inputs. Individual tasks can
/// be held at start until released, to observe a run mid-flight.
#[derive(Default)]
pub struct DeterministicRunner {
    gates: Mutex<Gates>,
    cv: Condvar,
}

impl DeterministicRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tasks with this id block after starting until [`Self::release`].
    pub fn hold(&self, task_id: &str) {
        self.gates.lock().unwrap().held.insert(task_id.to_string());
    }

    pub fn release(&self, task_id: &str) {
        self.gates.lock().unwrap().held.remove(task_id);
        self.cv.notify_all();
    }

    /// Task ids in the order their attempts started.
    pub fn started(&self) -> Vec<String> {
        self.gates.lock().unwrap().started.clone()
    }

    /// Waits until `task_id` has started at least once.
    pub fn wait_started(&self, task_id: &str, timeout: Duration) -> bool {
        let g = self.gates.lock().unwrap();
        let (g, res) = self
            .cv
            .wait_timeout_while(g, timeout, |g| !g.started.iter().any(|t| t == task_id))
            .unwrap();
        drop(g);
        !res.timed_out()
    }
}

impl TaskRunner for DeterministicRunner {
    fn run(&self, task: &TaskSpec, ctx: &TaskContext) -> TaskResult {
        {
            let mut g = self.gates.lock().unwrap();
            g.started.push(task.task_id.clone());
            self.cv.notify_all();
            let _g = self
                .cv
                .wait_while(g, |g| g.held.contains(&task.task_id))
                .unwrap();
        }
        ctx.log(format!("{} attempt {}", task.task_id, ctx.attempt));
        if let Some(ms) = task.params.get(PARAM_SLEEP_MS).and_then(|v| v.parse().ok()) {
            std::thread::sleep(Duration::from_millis(ms));
        }
        if task
            .params
            .get(PARAM_ALWAYS_FAIL)
            .is_some_and(|v| v == "true")
        {
            return Err("configured to fail".into());
        }
        let fail_first: u32 = task
            .params
            .get(PARAM_FAIL_FIRST)
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        if ctx.attempt <= fail_first {
            return Err(format!("attempt {} configured to fail", ctx.attempt));
        }
        let upstream: Vec<(String, Option<String>)> = ctx
            .upstream_outputs
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Some(expected_output(&task.task_id, &upstream)))
    }
}

/// Counts starts per task id; handy when checking retry bounds.
pub fn start_counts(started: &[String]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for s in started {
        *m.entry(s.clone()).or_insert(0) += 1;
    }
    m
}
