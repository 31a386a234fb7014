//! Drives DAG runs through an executor.
//!
//! Each run being driven has one coordinator thread that owns dispatch
//! decisions and is the only writer of that run's events. Task bodies run on
//! a fixed pool of worker threads and report back over the coordinator's
//! channel; control requests (pause) travel over the same channel, so every
//! state change for a run is serialized in one place.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::Utc;

use crate::config::{run_output_dir, ConfigError, RunConfig};
use crate::dag::{topological_order, validate_dag, DagSpec, TaskSpec, ValidationReport};
use crate::executor::{
    CompletionReport, DuplicateExecutor, ExecutorHandle, ExecutorRegistry, ExternalExecutor,
    TaskPayload,
};
use crate::run::{ExecutorKind, RunRecord, TaskInstance};
use crate::state::{attempt_budget, RunState, TaskState, TransitionCause};
use crate::store::{EventPayload, MetadataStore, StoreError};
use crate::workspace;

/// `Ok(output)` on success, `Err(message)` on failure.
pub type TaskResult = Result<Option<String>, String>;

pub trait TaskRunner: Send + Sync {
    fn run(&self, task: &TaskSpec, ctx: &TaskContext) -> TaskResult;
}

/// Where task log lines go.
#[derive(Clone)]
pub enum LogSink {
    Discard,
    Stdout,
    Buffer(Arc<Mutex<String>>),
    Coordinator { task_id: String, tx: Sender<Msg> },
}

impl LogSink {
    pub fn buffer() -> (LogSink, Arc<Mutex<String>>) {
        let buf = Arc::new(Mutex::new(String::new()));
        (LogSink::Buffer(buf.clone()), buf)
    }

    fn write(&self, text: String) {
        match self {
            LogSink::Discard => {}
            LogSink::Stdout => print!("{text}"),
            LogSink::Buffer(b) => b.lock().expect("log buffer").push_str(&text),
            LogSink::Coordinator { task_id, tx } => {
                let _ = tx.send(Msg::Log {
                    task_id: task_id.clone(),
                    text,
                });
            }
        }
    }
}

/// What a task body can see of its run.
#[derive(Clone)]
pub struct TaskContext {
    pub run_id: String,
    pub attempt: u32,
    pub config: Arc<RunConfig>,
    pub workspace: PathBuf,
    pub output_dir: PathBuf,
    /// Output of each direct upstream task.
    pub upstream_outputs: BTreeMap<String, Option<String>>,
    log: LogSink,
}

impl TaskContext {
    /// A context outside any engine run (tests, `run-task`).
    pub fn detached(run_id: &str, workspace: &Path, log: LogSink) -> Self {
        TaskContext {
            run_id: run_id.to_string(),
            attempt: 1,
            config: Arc::new(RunConfig::with_input_dir(workspace)),
            workspace: workspace.to_path_buf(),
            output_dir: workspace.join("output"),
            upstream_outputs: BTreeMap::new(),
            log,
        }
    }

    pub fn from_payload(payload: &TaskPayload, log: LogSink) -> Self {
        TaskContext {
            run_id: payload.run_id.clone(),
            attempt: payload.attempt,
            config: Arc::new(payload.config.clone()),
            workspace: payload.workspace.clone(),
            output_dir: payload.output_dir.clone(),
            upstream_outputs: payload.upstream_outputs.clone(),
            log,
        }
    }

    pub fn with_config(mut self, config: RunConfig) -> Self {
        self.config = Arc::new(config);
        self
    }

    /// Appends one line to the task log.
    pub fn log(&self, line: impl AsRef<str>) {
        let mut text = line.as_ref().to_string();
        if !text.ends_with('\n') {
            text.push('\n');
        }
        self.log.write(text);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid DAG: {0}")]
    InvalidDag(ValidationReport),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("executor unavailable: no external adapter named '{0}'")]
    ExecutorUnavailable(String),
    #[error(transparent)]
    DuplicateExecutor(#[from] DuplicateExecutor),
    #[error("cannot create workspace {path}: {source}")]
    Workspace {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown run '{0}'")]
    UnknownRun(String),
    #[error("unknown task '{task_id}' in run '{run_id}'")]
    UnknownTask { run_id: String, task_id: String },
    #[error("cannot {action} run '{run_id}' in state {state}")]
    WrongState {
        run_id: String,
        state: RunState,
        action: &'static str,
    },
    #[error("task '{task_id}' is {state}; only FAILED or UPSTREAM_FAILED tasks can be retried")]
    NotRetriable { task_id: String, state: TaskState },
    #[error("run '{0}' is still finishing in-flight tasks")]
    Busy(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Messages handled by a run's coordinator.
pub enum Msg {
    Log {
        task_id: String,
        text: String,
    },
    Done {
        task_id: String,
        result: TaskResult,
    },
    Pause {
        ack: Sender<Result<RunRecord, EngineError>>,
    },
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Parent of the per-run workspaces.
    pub workspace_root: PathBuf,
    /// Keep workspaces of successful runs instead of deleting them.
    pub keep_workspaces: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            workspace_root: workspace::default_root(),
            keep_workspaces: false,
        }
    }
}

struct Inner {
    store: Mutex<MetadataStore>,
    runner: Arc<dyn TaskRunner>,
    executors: ExecutorRegistry,
    options: EngineOptions,
    active: Mutex<HashMap<String, Sender<Msg>>>,
}

#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

/// Removes the run from the active set when its coordinator exits.
struct ActiveGuard {
    inner: Arc<Inner>,
    run_id: String,
}

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        if let Ok(mut active) = self.inner.active.lock() {
            active.remove(&self.run_id);
        }
    }
}

struct Claim {
    guard: ActiveGuard,
    tx: Sender<Msg>,
    rx: Receiver<Msg>,
}

fn new_run_id() -> String {
    let id = uuid::Uuid::new_v4().simple().to_string();
    format!("{}-{}", Utc::now().format("%Y%m%dT%H%M%S"), &id[..8])
}

enum Dispatch {
    Local(Arc<dyn TaskRunner>),
    External(Arc<dyn ExternalExecutor>),
}

struct Job {
    task: TaskSpec,
    ctx: TaskContext,
    config: RunConfig,
}

impl Engine {
    pub fn new(store: MetadataStore, runner: Arc<dyn TaskRunner>, options: EngineOptions) -> Self {
        Engine {
            inner: Arc::new(Inner {
                store: Mutex::new(store),
                runner,
                executors: ExecutorRegistry::default(),
                options,
                active: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn options(&self) -> &EngineOptions {
        &self.inner.options
    }

    /// Locked access to the store; keep the guard short-lived.
    pub fn store(&self) -> MutexGuard<'_, MetadataStore> {
        self.inner.store.lock().expect("store lock")
    }

    pub fn run(&self, run_id: &str) -> Option<RunRecord> {
        self.store().state().run(run_id).cloned()
    }

    fn require_run(&self, run_id: &str) -> Result<RunRecord, EngineError> {
        self.run(run_id)
            .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))
    }

    pub fn is_active(&self, run_id: &str) -> bool {
        self.inner
            .active
            .lock()
            .expect("active lock")
            .contains_key(run_id)
    }

    pub fn register_external_executor(
        &self,
        adapter_name: &str,
        executor: Arc<dyn ExternalExecutor>,
    ) -> Result<ExecutorHandle, EngineError> {
        Ok(self.inner.executors.register(adapter_name, executor)?)
    }

    pub fn external_executors(&self) -> Vec<String> {
        self.inner.executors.names()
    }

    fn check_executor(&self, executor: &ExecutorKind) -> Result<(), EngineError> {
        if let ExecutorKind::External { adapter_name } = executor {
            if self.inner.executors.get(adapter_name).is_none() {
                return Err(EngineError::ExecutorUnavailable(adapter_name.clone()));
            }
        }
        Ok(())
    }

    /// Registers `spec` (if needed), creates the workspace and records the
    /// run as RUNNING with every task QUEUED. Nothing is dispatched yet.
    pub fn create_run(
        &self,
        spec: &DagSpec,
        config: &RunConfig,
        executor: ExecutorKind,
    ) -> Result<RunRecord, EngineError> {
        let report = validate_dag(spec);
        if !report.ok {
            return Err(EngineError::InvalidDag(report));
        }
        config.validate()?;
        self.check_executor(&executor)?;
        let run_id = new_run_id();
        let root = &self.inner.options.workspace_root;
        let ws = workspace::create(root, &run_id).map_err(|source| EngineError::Workspace {
            path: root.join(&run_id),
            source,
        })?;
        let mut store = self.store();
        let created = store.register_dag(spec).and_then(|_| {
            store.append(EventPayload::RunCreated {
                run_id: run_id.clone(),
                dag_id: spec.dag_id.clone(),
                version: spec.version,
                config: config.clone(),
                executor,
                workspace: ws.clone(),
            })
        });
        if let Err(e) = created {
            let _ = workspace::remove(&ws);
            return Err(e.into());
        }
        Ok(store.state().run(&run_id).cloned().expect("just created"))
    }

    /// Creates a run and drives it to completion on the calling thread.
    pub fn execute_run(
        &self,
        spec: &DagSpec,
        config: &RunConfig,
        executor: ExecutorKind,
    ) -> Result<RunRecord, EngineError> {
        let run = self.create_run(spec, config, executor)?;
        self.drive(&run.run_id)
    }

    fn claim(&self, run_id: &str) -> Result<Claim, EngineError> {
        let mut active = self.inner.active.lock().expect("active lock");
        if active.contains_key(run_id) {
            return Err(EngineError::Busy(run_id.to_string()));
        }
        let (tx, rx) = mpsc::channel();
        active.insert(run_id.to_string(), tx.clone());
        Ok(Claim {
            guard: ActiveGuard {
                inner: self.inner.clone(),
                run_id: run_id.to_string(),
            },
            tx,
            rx,
        })
    }

    /// Drives a RUNNING run until it settles or is paused.
    pub fn drive(&self, run_id: &str) -> Result<RunRecord, EngineError> {
        let claim = self.claim(run_id)?;
        self.coordinate(run_id, claim)
    }

    /// Like [`Engine::drive`] on a background thread.
    pub fn spawn_drive(
        &self,
        run_id: &str,
    ) -> Result<JoinHandle<Result<RunRecord, EngineError>>, EngineError> {
        let claim = self.claim(run_id)?;
        let engine = self.clone();
        let run_id = run_id.to_string();
        Ok(std::thread::spawn(move || {
            engine.coordinate(&run_id, claim)
        }))
    }

    /// Creates a run and starts driving it in the background.
    pub fn trigger(
        &self,
        spec: &DagSpec,
        config: &RunConfig,
        executor: ExecutorKind,
    ) -> Result<(RunRecord, JoinHandle<Result<RunRecord, EngineError>>), EngineError> {
        let run = self.create_run(spec, config, executor)?;
        let handle = self.spawn_drive(&run.run_id)?;
        Ok((run, handle))
    }

    /// Stops dispatching new tasks. In-flight tasks finish and record their
    /// result; the run is PAUSED as soon as this returns.
    pub fn pause_run(&self, run_id: &str) -> Result<RunRecord, EngineError> {
        let tx = self
            .inner
            .active
            .lock()
            .expect("active lock")
            .get(run_id)
            .cloned();
        if let Some(tx) = tx {
            let (ack_tx, ack_rx) = mpsc::channel();
            if tx.send(Msg::Pause { ack: ack_tx }).is_ok() {
                if let Ok(reply) = ack_rx.recv() {
                    return reply;
                }
            }
            // The coordinator exited before handling the request; fall
            // through and judge by the recorded state.
        }
        let mut store = self.store();
        let run = store
            .state()
            .run(run_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
        if run.state != RunState::Running || self.is_active(run_id) {
            return Err(EngineError::WrongState {
                run_id: run_id.to_string(),
                state: run.state,
                action: "pause",
            });
        }
        store.append(EventPayload::RunStateChanged {
            run_id: run_id.to_string(),
            from: RunState::Running,
            to: RunState::Paused,
            retained_workspace: None,
        })?;
        Ok(store.state().run(run_id).cloned().expect("exists"))
    }

    fn mark_resumed(&self, run_id: &str) -> Result<Claim, EngineError> {
        let run = self.require_run(run_id)?;
        if run.state != RunState::Paused {
            return Err(EngineError::WrongState {
                run_id: run_id.to_string(),
                state: run.state,
                action: "resume",
            });
        }
        self.check_executor(&run.executor)?;
        let claim = self.claim(run_id)?;
        self.store().append(EventPayload::RunStateChanged {
            run_id: run_id.to_string(),
            from: RunState::Paused,
            to: RunState::Running,
            retained_workspace: None,
        })?;
        Ok(claim)
    }

    /// Continues a PAUSED run from its recorded state, on the calling thread.
    pub fn resume_run(&self, run_id: &str) -> Result<RunRecord, EngineError> {
        let claim = self.mark_resumed(run_id)?;
        self.coordinate(run_id, claim)
    }

    /// Resumes in the background; returns once the run is RUNNING again.
    pub fn start_resume(
        &self,
        run_id: &str,
    ) -> Result<(RunRecord, JoinHandle<Result<RunRecord, EngineError>>), EngineError> {
        let claim = self.mark_resumed(run_id)?;
        let run = self.require_run(run_id)?;
        let engine = self.clone();
        let id = run_id.to_string();
        Ok((
            run,
            std::thread::spawn(move || engine.coordinate(&id, claim)),
        ))
    }

    /// Re-queues a FAILED or UPSTREAM_FAILED task together with its
    /// transitive downstream tasks. A FAILED run becomes PAUSED; resume it to
    /// execute the re-queued tasks.
    pub fn retry_task(&self, run_id: &str, task_id: &str) -> Result<RunRecord, EngineError> {
        if self.is_active(run_id) {
            let state = self.require_run(run_id)?.state;
            return Err(EngineError::WrongState {
                run_id: run_id.to_string(),
                state,
                action: "retry a task of",
            });
        }
        let mut store = self.store();
        let run = store
            .state()
            .run(run_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
        let dag = store
            .state()
            .run_dag(run_id)
            .cloned()
            .expect("run has a dag");
        let inst = run
            .task_instances
            .get(task_id)
            .ok_or_else(|| EngineError::UnknownTask {
                run_id: run_id.to_string(),
                task_id: task_id.to_string(),
            })?;
        if !matches!(run.state, RunState::Failed | RunState::Paused) {
            return Err(EngineError::WrongState {
                run_id: run_id.to_string(),
                state: run.state,
                action: "retry a task of",
            });
        }
        if !matches!(inst.state, TaskState::Failed | TaskState::UpstreamFailed) {
            return Err(EngineError::NotRetriable {
                task_id: task_id.to_string(),
                state: inst.state,
            });
        }
        if run.state == RunState::Failed {
            store.append(EventPayload::RunStateChanged {
                run_id: run_id.to_string(),
                from: RunState::Failed,
                to: RunState::Paused,
                retained_workspace: run.retained_workspace.clone(),
            })?;
        }
        let mut targets = vec![task_id.to_string()];
        targets.extend(dag.transitive_downstream(task_id));
        for id in targets {
            let inst = &run.task_instances[&id];
            if matches!(inst.state, TaskState::Failed | TaskState::UpstreamFailed) {
                store.append(EventPayload::TaskStateChanged {
                    run_id: run_id.to_string(),
                    task_id: id.clone(),
                    from: inst.state,
                    to: TaskState::Queued,
                    attempt: inst.attempt,
                    cause: TransitionCause::ManualRetry,
                    output: None,
                })?;
            }
        }
        Ok(store.state().run(run_id).cloned().expect("exists"))
    }

    fn dispatcher(&self, executor: &ExecutorKind) -> Result<(Dispatch, u32), EngineError> {
        Ok(match executor {
            ExecutorKind::Sequential => (Dispatch::Local(self.inner.runner.clone()), 1),
            ExecutorKind::LocalParallel { worker_count } => (
                Dispatch::Local(self.inner.runner.clone()),
                (*worker_count).max(1),
            ),
            ExecutorKind::External { adapter_name } => {
                let exec = self
                    .inner
                    .executors
                    .get(adapter_name)
                    .ok_or_else(|| EngineError::ExecutorUnavailable(adapter_name.clone()))?;
                let cap = exec.capacity().max(1);
                (Dispatch::External(exec), cap)
            }
        })
    }

    fn coordinate(&self, run_id: &str, claim: Claim) -> Result<RunRecord, EngineError> {
        let Claim { guard, tx, rx } = claim;
        let (run, dag) = {
            let store = self.store();
            let run = store
                .state()
                .run(run_id)
                .cloned()
                .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
            let dag = store
                .state()
                .run_dag(run_id)
                .cloned()
                .expect("run has a dag");
            (run, dag)
        };
        if run.state != RunState::Running {
            return Err(EngineError::WrongState {
                run_id: run_id.to_string(),
                state: run.state,
                action: "drive",
            });
        }
        let (dispatch, slots) = self.dispatcher(&run.executor)?;
        let _ = std::fs::create_dir_all(&run.workspace);

        let mut coord = Coordinator {
            engine: self,
            run_id: run_id.to_string(),
            dag: &dag,
            tasks: run.task_instances.clone(),
            topo: topological_order(&dag).expect("registered DAGs are valid"),
            config: Arc::new(run.config_snapshot.clone()),
            workspace: run.workspace.clone(),
            output_dir: run_output_dir(&run.config_snapshot, run_id),
            slots,
            free: slots,
            inflight: HashMap::new(),
            not_before: HashMap::new(),
            paused: false,
            halted: None,
            pending_pause_acks: Vec::new(),
        };

        let outcome = std::thread::scope(|s| {
            let (job_tx, job_rx) = mpsc::channel::<Job>();
            let job_rx = Arc::new(Mutex::new(job_rx));
            for _ in 0..slots {
                let job_rx = job_rx.clone();
                let done_tx = tx.clone();
                let dispatch = &dispatch;
                s.spawn(move || worker(job_rx, done_tx, dispatch));
            }
            coord.run_loop(&rx, &tx, &job_tx)
            // job_tx dropped here: workers see the closed channel and exit.
        });
        drop(guard);
        outcome
    }
}

fn worker(jobs: Arc<Mutex<Receiver<Job>>>, done: Sender<Msg>, dispatch: &Dispatch) {
    loop {
        let job = {
            let rx = jobs.lock().expect("job queue");
            rx.recv()
        };
        let Ok(job) = job else { return };
        let task_id = job.task.task_id.clone();
        let result = panic::catch_unwind(AssertUnwindSafe(|| match dispatch {
            Dispatch::Local(runner) => runner.run(&job.task, &job.ctx),
            Dispatch::External(exec) => {
                let payload = TaskPayload {
                    run_id: job.ctx.run_id.clone(),
                    task: job.task.clone(),
                    attempt: job.ctx.attempt,
                    workspace: job.ctx.workspace.clone(),
                    output_dir: job.ctx.output_dir.clone(),
                    config: job.config.clone(),
                    upstream_outputs: job.ctx.upstream_outputs.clone(),
                };
                let CompletionReport {
                    exit_status,
                    log,
                    output,
                } = exec.dispatch(&payload);
                for line in log.lines() {
                    job.ctx.log(line);
                }
                if exit_status == 0 {
                    Ok(output)
                } else {
                    Err(format!("exit status {exit_status}"))
                }
            }
        }))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            Err(format!("task panicked: {msg}"))
        });
        let _ = done.send(Msg::Done { task_id, result });
    }
}

struct Coordinator<'a> {
    engine: &'a Engine,
    run_id: String,
    dag: &'a DagSpec,
    tasks: BTreeMap<String, TaskInstance>,
    topo: Vec<String>,
    config: Arc<RunConfig>,
    workspace: PathBuf,
    output_dir: PathBuf,
    slots: u32,
    free: u32,
    /// Running task -> slots it occupies.
    inflight: HashMap<String, u32>,
    /// Re-queued tasks waiting out their backoff.
    not_before: HashMap<String, Instant>,
    paused: bool,
    halted: Option<EngineError>,
    pending_pause_acks: Vec<Sender<Result<RunRecord, EngineError>>>,
}

impl Coordinator<'_> {
    fn spec(&self, task_id: &str) -> &TaskSpec {
        self.dag.task(task_id).expect("task in dag")
    }

    fn budget(&self, task_id: &str) -> u32 {
        attempt_budget(
            self.spec(task_id).retry_policy.max_retries,
            self.tasks[task_id].manual_retries,
        )
    }

    fn exhausted(&self, task_id: &str) -> bool {
        let t = &self.tasks[task_id];
        match t.state {
            TaskState::Failed => t.attempt >= self.budget(task_id),
            TaskState::UpstreamFailed => true,
            _ => false,
        }
    }

    fn set(
        &mut self,
        task_id: &str,
        to: TaskState,
        output: Option<String>,
    ) -> Result<(), EngineError> {
        let inst = &self.tasks[task_id];
        let attempt = if to == TaskState::Running {
            inst.attempt + 1
        } else {
            inst.attempt
        };
        let mut store = self.engine.store();
        store.append(EventPayload::TaskStateChanged {
            run_id: self.run_id.clone(),
            task_id: task_id.to_string(),
            from: inst.state,
            to,
            attempt,
            cause: TransitionCause::Engine,
            output,
        })?;
        let updated = store.state().run(&self.run_id).expect("run").task_instances[task_id].clone();
        self.tasks.insert(task_id.to_string(), updated);
        Ok(())
    }

    fn set_run(&self, to: RunState, retained: Option<PathBuf>) -> Result<RunRecord, EngineError> {
        let mut store = self.engine.store();
        store.append(EventPayload::RunStateChanged {
            run_id: self.run_id.clone(),
            from: RunState::Running,
            to,
            retained_workspace: retained,
        })?;
        Ok(store.state().run(&self.run_id).cloned().expect("run"))
    }

    fn record(&self) -> RunRecord {
        self.engine.run(&self.run_id).expect("run")
    }

    /// Settles tasks whose fate is already decided: variant-skipped tasks,
    /// tasks below an exhausted failure and failures with budget left.
    fn prepare(&mut self) -> Result<(), EngineError> {
        for id in self.topo.clone() {
            let state = self.tasks[&id].state;
            if state == TaskState::Failed && !self.exhausted(&id) {
                self.set(&id, TaskState::Queued, None)?;
                continue;
            }
            if state != TaskState::Queued {
                continue;
            }
            let spec = self.spec(&id);
            let skip = spec.skip
                || spec
                    .upstream
                    .iter()
                    .any(|u| self.tasks[u].state == TaskState::Skipped);
            let blocked = spec.upstream.iter().any(|u| self.exhausted(u));
            if skip {
                self.set(&id, TaskState::Skipped, None)?;
            } else if blocked {
                self.set(&id, TaskState::UpstreamFailed, None)?;
            }
        }
        Ok(())
    }

    fn ready(&self, now: Instant) -> Vec<String> {
        self.tasks
            .iter()
            .filter(|(id, t)| {
                t.state == TaskState::Queued
                    && !self.inflight.contains_key(*id)
                    && self.not_before.get(*id).is_none_or(|d| *d <= now)
                    && self
                        .spec(id)
                        .upstream
                        .iter()
                        .all(|u| self.tasks[u].state == TaskState::Success)
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn weight(&self, task_id: &str) -> u32 {
        self.spec(task_id).resource_hint.cpus.clamp(1, self.slots)
    }

    fn dispatch_ready(&mut self, jobs: &Sender<Job>, tx: &Sender<Msg>) -> Result<(), EngineError> {
        let now = Instant::now();
        // Smallest id first; stop at the first task that does not fit so a
        // wide task is not starved by narrow ones behind it.
        for id in self.ready(now) {
            let w = self.weight(&id);
            if w > self.free {
                break;
            }
            self.set(&id, TaskState::Running, None)?;
            self.not_before.remove(&id);
            self.free -= w;
            self.inflight.insert(id.clone(), w);
            let spec = self.spec(&id).clone();
            let upstream_outputs = spec
                .upstream
                .iter()
                .map(|u| (u.clone(), self.tasks[u].output.clone()))
                .collect();
            let ctx = TaskContext {
                run_id: self.run_id.clone(),
                attempt: self.tasks[&id].attempt,
                config: self.config.clone(),
                workspace: self.workspace.clone(),
                output_dir: self.output_dir.clone(),
                upstream_outputs,
                log: LogSink::Coordinator {
                    task_id: id.clone(),
                    tx: tx.clone(),
                },
            };
            let job = Job {
                task: spec,
                ctx,
                config: (*self.config).clone(),
            };
            jobs.send(job)
                .expect("workers alive while coordinator runs");
        }
        Ok(())
    }

    fn on_done(&mut self, task_id: String, result: TaskResult) -> Result<(), EngineError> {
        if let Some(w) = self.inflight.remove(&task_id) {
            self.free += w;
        }
        match result {
            Ok(output) => self.set(&task_id, TaskState::Success, output)?,
            Err(message) => {
                self.engine.store().append_log(
                    &self.run_id,
                    &task_id,
                    &format!("[flowgate] attempt failed: {message}\n"),
                )?;
                self.set(&task_id, TaskState::Failed, None)?;
                if !self.exhausted(&task_id) {
                    self.set(&task_id, TaskState::Queued, None)?;
                    let backoff = self.spec(&task_id).retry_policy.backoff_seconds;
                    self.not_before.insert(
                        task_id.clone(),
                        Instant::now() + Duration::from_secs_f64(backoff.max(0.0)),
                    );
                } else {
                    let below: BTreeSet<String> = self.dag.transitive_downstream(&task_id);
                    for id in self.topo.clone() {
                        if below.contains(&id) && self.tasks[&id].state == TaskState::Queued {
                            self.set(&id, TaskState::UpstreamFailed, None)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn on_msg(&mut self, msg: Msg) {
        let res = match msg {
            Msg::Log { task_id, text } => {
                if self.halted.is_some() {
                    return;
                }
                self.engine
                    .store()
                    .append_log(&self.run_id, &task_id, &text)
                    .map(|_| ())
                    .map_err(EngineError::from)
            }
            Msg::Done { task_id, result } => {
                if self.halted.is_some() {
                    if let Some(w) = self.inflight.remove(&task_id) {
                        self.free += w;
                    }
                    return;
                }
                self.on_done(task_id, result)
            }
            Msg::Pause { ack } => {
                if self.halted.is_some() {
                    let _ = ack.send(Err(EngineError::Busy(self.run_id.clone())));
                    return;
                }
                if self.paused {
                    let _ = ack.send(Err(EngineError::WrongState {
                        run_id: self.run_id.clone(),
                        state: RunState::Paused,
                        action: "pause",
                    }));
                    return;
                }
                match self.set_run(RunState::Paused, None) {
                    Ok(record) => {
                        self.paused = true;
                        let _ = ack.send(Ok(record));
                        Ok(())
                    }
                    Err(e) => {
                        self.pending_pause_acks.push(ack);
                        Err(e)
                    }
                }
            }
        };
        if let Err(e) = res {
            log::error!("run {} halted: {e}", self.run_id);
            self.halted = Some(e);
        }
    }

    fn run_loop(
        &mut self,
        rx: &Receiver<Msg>,
        tx: &Sender<Msg>,
        jobs: &Sender<Job>,
    ) -> Result<RunRecord, EngineError> {
        self.prepare()?;
        loop {
            if !self.paused && self.halted.is_none() {
                if let Err(e) = self.dispatch_ready(jobs, tx) {
                    self.halted = Some(e);
                }
            }
            if self.inflight.is_empty() {
                let waiting = !self.not_before.is_empty();
                if self.paused || self.halted.is_some() || !waiting {
                    // Anything queued for this run before we stop (typically a
                    // pause request racing with completion) is still handled.
                    match rx.try_recv() {
                        Ok(msg) => {
                            self.on_msg(msg);
                            continue;
                        }
                        Err(_) => break,
                    }
                }
            }
            let next_deadline = if self.paused {
                None
            } else {
                self.not_before.values().min().copied()
            };
            let msg = match next_deadline {
                Some(d) => match rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                },
                None => match rx.recv() {
                    Ok(m) => m,
                    Err(_) => break,
                },
            };
            self.on_msg(msg);
        }

        if let Some(e) = self.halted.take() {
            for ack in self.pending_pause_acks.drain(..) {
                let _ = ack.send(Err(EngineError::Busy(self.run_id.clone())));
            }
            return Err(e);
        }
        if self.paused {
            return Ok(self.record());
        }
        let record = self.record();
        match record.settled_state() {
            RunState::Failed => {
                let retained = self.workspace.exists().then(|| self.workspace.clone());
                self.set_run(RunState::Failed, retained)
            }
            _ => {
                if !self.engine.inner.options.keep_workspaces {
                    if let Err(e) = workspace::remove(&self.workspace) {
                        log::warn!(
                            "could not remove workspace {}: {e}",
                            self.workspace.display()
                        );
                    }
                }
                self.set_run(RunState::Success, None)
            }
        }
    }
}
