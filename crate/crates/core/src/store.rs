//! Event-sourced metadata store.
//!
//! Every change to DAGs, runs and task states is an event appended to an
//! ordered log; the current state is the fold of that log. On disk:
//!
//! ```text
//! <data_dir>/events.log                     one JSON event per line
//! <data_dir>/snapshots/<seq>.snap           folded state after event <seq>
//! <data_dir>/runs/<run_id>/logs/<task>.txt  task output, referenced by LOG_APPENDED
//! ```
//!
//! An event is validated against the folded state before it is written, so
//! the log never holds an illegal transition. Opening a store replays the
//! log (from the newest usable snapshot), drops a torn or corrupt tail, and
//! records a crash-recovery reset for work that was in flight.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dag::{validate_dag, DagSpec, ValidationReport};
use crate::run::{ExecutorKind, RunFilter, RunRecord, RunSummary, TaskInstance};
use crate::state::{check_task_transition, RunState, TaskState, TransitionCause, TransitionError};

pub const EVENTS_FILE: &str = "events.log";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const DEFAULT_SNAPSHOT_INTERVAL: u64 = 100;
const SNAPSHOTS_KEPT: usize = 3;
const MAX_LOG_CHUNK: u64 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    DagRegistered,
    RunCreated,
    TaskStateChanged,
    RunStateChanged,
    LogAppended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventPayload {
    DagRegistered {
        spec: DagSpec,
    },
    RunCreated {
        run_id: String,
        dag_id: String,
        version: u64,
        config: RunConfig,
        executor: ExecutorKind,
        workspace: PathBuf,
    },
    TaskStateChanged {
        run_id: String,
        task_id: String,
        from: TaskState,
        to: TaskState,
        /// Attempt counter after the transition.
        attempt: u32,
        #[serde(default)]
        cause: TransitionCause,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
    },
    RunStateChanged {
        run_id: String,
        from: RunState,
        to: RunState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retained_workspace: Option<PathBuf>,
    },
    LogAppended {
        run_id: String,
        task_id: String,
        offset: u64,
        len: u64,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::DagRegistered { .. } => EventKind::DagRegistered,
            EventPayload::RunCreated { .. } => EventKind::RunCreated,
            EventPayload::TaskStateChanged { .. } => EventKind::TaskStateChanged,
            EventPayload::RunStateChanged { .. } => EventKind::RunStateChanged,
            EventPayload::LogAppended { .. } => EventKind::LogAppended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("unknown run '{0}'")]
    UnknownRun(String),
    #[error("unknown task '{task_id}' in run '{run_id}'")]
    UnknownTask { run_id: String, task_id: String },
    #[error("unknown DAG '{dag_id}' version {version}")]
    UnknownDag { dag_id: String, version: u64 },
    #[error("DAG '{dag_id}' version {given} is not newer than registered version {latest}")]
    VersionConflict {
        dag_id: String,
        latest: u64,
        given: u64,
    },
    #[error("invalid DAG: {0}")]
    InvalidDag(ValidationReport),
    #[error("rejected event: {0}")]
    Rejected(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

/// Folded state of the event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    dags: BTreeMap<String, BTreeMap<u64, DagSpec>>,
    runs: BTreeMap<String, RunRecord>,
    log_lengths: BTreeMap<String, BTreeMap<String, u64>>,
    last_seq: u64,
    last_at: Option<DateTime<Utc>>,
}

fn rejected(msg: impl Into<String>) -> StoreError {
    StoreError::Rejected(msg.into())
}

impl StoreState {
    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Latest registered version of every DAG.
    pub fn dags(&self) -> BTreeMap<String, DagSpec> {
        self.dags
            .iter()
            .filter_map(|(id, versions)| {
                versions
                    .values()
                    .next_back()
                    .map(|d| (id.clone(), d.clone()))
            })
            .collect()
    }

    pub fn latest_dag(&self, dag_id: &str) -> Option<&DagSpec> {
        self.dags.get(dag_id).and_then(|v| v.values().next_back())
    }

    pub fn dag(&self, dag_id: &str, version: u64) -> Option<&DagSpec> {
        self.dags.get(dag_id).and_then(|v| v.get(&version))
    }

    pub fn run(&self, run_id: &str) -> Option<&RunRecord> {
        self.runs.get(run_id)
    }

    pub fn runs(&self) -> &BTreeMap<String, RunRecord> {
        &self.runs
    }

    /// Dag the run was created from.
    pub fn run_dag(&self, run_id: &str) -> Option<&DagSpec> {
        let run = self.runs.get(run_id)?;
        self.dag(&run.dag_id, run.version)
    }

    pub fn log_len(&self, run_id: &str, task_id: &str) -> u64 {
        self.log_lengths
            .get(run_id)
            .and_then(|m| m.get(task_id))
            .copied()
            .unwrap_or(0)
    }

    /// Most recent first.
    pub fn query_runs(&self, filter: &RunFilter) -> Vec<RunSummary> {
        let mut out: Vec<&RunRecord> = self
            .runs
            .values()
            .filter(|r| filter.dag_id.as_ref().is_none_or(|d| &r.dag_id == d))
            .filter(|r| filter.state.is_none_or(|s| r.state == s))
            .filter(|r| filter.since.is_none_or(|t| r.created_at >= t))
            .collect();
        out.sort_by(|a, b| {
            b.created_at
                .cmp(&a.created_at)
                .then_with(|| b.run_id.cmp(&a.run_id))
        });
        out.into_iter().map(RunRecord::summary).collect()
    }

    /// Validates `ev` against the current state and, when `commit` is set,
    /// folds it in. Nothing is mutated unless every check passes.
    fn apply(&mut self, ev: &StoreEvent, commit: bool) -> Result<(), StoreError> {
        if ev.seq != self.last_seq + 1 {
            return Err(rejected(format!(
                "sequence gap: expected {}, got {}",
                self.last_seq + 1,
                ev.seq
            )));
        }
        match &ev.payload {
            EventPayload::DagRegistered { spec } => {
                let report = validate_dag(spec);
                if !report.ok {
                    return Err(StoreError::InvalidDag(report));
                }
                if let Some(latest) = self.latest_dag(&spec.dag_id) {
                    if spec.version <= latest.version {
                        return Err(StoreError::VersionConflict {
                            dag_id: spec.dag_id.clone(),
                            latest: latest.version,
                            given: spec.version,
                        });
                    }
                }
                if commit {
                    self.dags
                        .entry(spec.dag_id.clone())
                        .or_default()
                        .insert(spec.version, spec.clone());
                }
            }
            EventPayload::RunCreated {
                run_id,
                dag_id,
                version,
                config,
                executor,
                workspace,
            } => {
                if self.runs.contains_key(run_id) {
                    return Err(rejected(format!("run '{run_id}' already exists")));
                }
                let dag = self
                    .dag(dag_id, *version)
                    .ok_or_else(|| StoreError::UnknownDag {
                        dag_id: dag_id.clone(),
                        version: *version,
                    })?;
                if commit {
                    let task_instances = dag
                        .tasks
                        .iter()
                        .map(|t| (t.task_id.clone(), TaskInstance::queued(run_id, &t.task_id)))
                        .collect();
                    self.runs.insert(
                        run_id.clone(),
                        RunRecord {
                            run_id: run_id.clone(),
                            dag_id: dag_id.clone(),
                            version: *version,
                            config_snapshot: config.clone(),
                            executor: executor.clone(),
                            state: RunState::Running,
                            task_instances,
                            created_at: ev.at,
                            workspace: workspace.clone(),
                            retained_workspace: None,
                        },
                    );
                }
            }
            EventPayload::TaskStateChanged {
                run_id,
                task_id,
                from,
                to,
                attempt,
                cause,
                output,
            } => {
                let run = self
                    .runs
                    .get(run_id)
                    .ok_or_else(|| StoreError::UnknownRun(run_id.clone()))?;
                if !matches!(run.state, RunState::Running | RunState::Paused) {
                    return Err(rejected(format!(
                        "task change in run '{run_id}' which is {}",
                        run.state
                    )));
                }
                let unknown = || StoreError::UnknownTask {
                    run_id: run_id.clone(),
                    task_id: task_id.clone(),
                };
                let spec = self
                    .dag(&run.dag_id, run.version)
                    .and_then(|d| d.task(task_id))
                    .ok_or_else(unknown)?;
                let inst = run.task_instances.get(task_id).ok_or_else(unknown)?;
                if inst.state != *from {
                    return Err(rejected(format!(
                        "task '{task_id}' is {}, event says {from}",
                        inst.state
                    )));
                }
                check_task_transition(
                    *from,
                    *to,
                    *cause,
                    inst.attempt,
                    spec.retry_policy.max_retries,
                    inst.manual_retries,
                )?;
                let expected_attempt = if *to == TaskState::Running {
                    inst.attempt + 1
                } else {
                    inst.attempt
                };
                if *attempt != expected_attempt {
                    return Err(rejected(format!(
                        "task '{task_id}' attempt {attempt}, expected {expected_attempt}"
                    )));
                }
                if commit {
                    let inst = self
                        .runs
                        .get_mut(run_id)
                        .and_then(|r| r.task_instances.get_mut(task_id))
                        .expect("checked above");
                    inst.state = *to;
                    inst.attempt = *attempt;
                    match to {
                        TaskState::Running => {
                            inst.started_at = Some(ev.at);
                            inst.ended_at = None;
                            inst.output = None;
                        }
                        TaskState::Success => {
                            inst.ended_at = Some(ev.at);
                            inst.output = output.clone();
                        }
                        TaskState::Failed | TaskState::UpstreamFailed | TaskState::Skipped => {
                            inst.ended_at = Some(ev.at);
                        }
                        TaskState::Queued => {
                            if *cause == TransitionCause::ManualRetry && *from == TaskState::Failed
                            {
                                inst.manual_retries += 1;
                            }
                        }
                    }
                }
            }
            EventPayload::RunStateChanged {
                run_id,
                from,
                to,
                retained_workspace,
            } => {
                let run = self
                    .runs
                    .get(run_id)
                    .ok_or_else(|| StoreError::UnknownRun(run_id.clone()))?;
                if run.state != *from {
                    return Err(rejected(format!(
                        "run '{run_id}' is {}, event says {from}",
                        run.state
                    )));
                }
                if !from.can_transition(*to) {
                    return Err(TransitionError::Run {
                        from: *from,
                        to: *to,
                    }
                    .into());
                }
                let states = || run.task_instances.values().map(|t| t.state);
                let bad = match to {
                    RunState::Success => {
                        states().any(|s| !matches!(s, TaskState::Success | TaskState::Skipped))
                    }
                    RunState::Failed => {
                        states().any(|s| s == TaskState::Running)
                            || !states()
                                .any(|s| matches!(s, TaskState::Failed | TaskState::UpstreamFailed))
                    }
                    _ => false,
                };
                if bad {
                    return Err(rejected(format!(
                        "run '{run_id}' cannot become {to} with its current task states"
                    )));
                }
                if commit {
                    let run = self.runs.get_mut(run_id).expect("checked above");
                    run.state = *to;
                    run.retained_workspace = retained_workspace.clone();
                }
            }
            EventPayload::LogAppended {
                run_id,
                task_id,
                offset,
                len,
            } => {
                let run = self
                    .runs
                    .get(run_id)
                    .ok_or_else(|| StoreError::UnknownRun(run_id.clone()))?;
                if !run.task_instances.contains_key(task_id) {
                    return Err(StoreError::UnknownTask {
                        run_id: run_id.clone(),
                        task_id: task_id.clone(),
                    });
                }
                let current = self.log_len(run_id, task_id);
                if *offset != current {
                    return Err(rejected(format!(
                        "log offset {offset} for '{task_id}', expected {current}"
                    )));
                }
                if commit {
                    self.log_lengths
                        .entry(run_id.clone())
                        .or_default()
                        .insert(task_id.clone(), offset + len);
                }
            }
        }
        if commit {
            self.last_seq = ev.seq;
            self.last_at = Some(ev.at);
        }
        Ok(())
    }

    /// Events that put in-flight work back into a resumable state.
    fn recovery_events(&self) -> Vec<EventPayload> {
        let mut out = Vec::new();
        for run in self.runs.values() {
            if !matches!(run.state, RunState::Running | RunState::Paused) {
                continue;
            }
            for inst in run.task_instances.values() {
                if inst.state == TaskState::Running {
                    out.push(EventPayload::TaskStateChanged {
                        run_id: run.run_id.clone(),
                        task_id: inst.task_id.clone(),
                        from: TaskState::Running,
                        to: TaskState::Queued,
                        attempt: inst.attempt,
                        cause: TransitionCause::CrashRecovery,
                        output: None,
                    });
                }
            }
            if run.state == RunState::Running {
                out.push(EventPayload::RunStateChanged {
                    run_id: run.run_id.clone(),
                    from: RunState::Running,
                    to: RunState::Paused,
                    retained_workspace: None,
                });
            }
        }
        out
    }

    /// Applies the recovery reset in memory without sequence numbers.
    fn reset_in_flight(&mut self) {
        for run in self.runs.values_mut() {
            if !matches!(run.state, RunState::Running | RunState::Paused) {
                continue;
            }
            for inst in run.task_instances.values_mut() {
                if inst.state == TaskState::Running {
                    inst.state = TaskState::Queued;
                }
            }
            run.state = RunState::Paused;
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// Write a snapshot after every this many events (0 disables).
    pub snapshot_interval: u64,
    /// fsync the log after every append.
    pub sync: bool,
    /// Fault injection: appends fail once this many events exist.
    pub fail_appends_after: Option<u64>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            snapshot_interval: DEFAULT_SNAPSHOT_INTERVAL,
            sync: true,
            fail_appends_after: None,
        }
    }
}

/// Where a replay stopped reading because the log was damaged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Truncation {
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// Bytes discarded after it.
    pub discarded_bytes: u64,
    pub last_valid_seq: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub state: StoreState,
    pub truncation: Option<Truncation>,
    /// Snapshot the replay started from, if any.
    pub snapshot_seq: Option<u64>,
}

impl Replay {
    pub fn dags(&self) -> BTreeMap<String, DagSpec> {
        self.state.dags()
    }

    pub fn runs(&self) -> &BTreeMap<String, RunRecord> {
        self.state.runs()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    /// Byte length of the event log up to and including `seq`.
    offset: u64,
    state: StoreState,
}

/// Reads the state held in `data_dir` without modifying anything.
///
/// Tasks that were RUNNING are reported as QUEUED (attempt counters kept)
/// and their runs as PAUSED, which is the state the store reaches when it
/// is reopened.
pub fn replay(data_dir: &Path) -> Result<Replay, StoreError> {
    let mut loaded = load(data_dir)?;
    loaded.state.reset_in_flight();
    Ok(Replay {
        state: loaded.state,
        truncation: loaded.truncation,
        snapshot_seq: loaded.snapshot_seq,
    })
}

struct Loaded {
    state: StoreState,
    valid_len: u64,
    truncation: Option<Truncation>,
    snapshot_seq: Option<u64>,
}

fn snapshot_paths(data_dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let dir = data_dir.join(SNAPSHOT_DIR);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let seq = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".snap"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(seq) = seq {
            out.push((seq, path));
        }
    }
    out.sort_by_key(|e| std::cmp::Reverse(e.0));
    Ok(out)
}

fn load(data_dir: &Path) -> Result<Loaded, StoreError> {
    let log_path = data_dir.join(EVENTS_FILE);
    let mut bytes = Vec::new();
    match File::open(&log_path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }

    // Newest snapshot whose offset lines up with an event boundary in the log.
    let mut start: Option<(StoreState, u64, u64)> = None;
    for (seq, path) in snapshot_paths(data_dir)? {
        let Ok(text) = fs::read_to_string(&path) else {
            continue;
        };
        let Ok(snap) = serde_json::from_str::<Snapshot>(&text) else {
            log::warn!("ignoring unreadable snapshot {}", path.display());
            continue;
        };
        let offset = snap.offset as usize;
        let on_boundary = snap.seq == seq
            && snap.state.last_seq == seq
            && offset <= bytes.len()
            && (offset == 0 || bytes[offset - 1] == b'\n');
        if on_boundary {
            start = Some((snap.state, snap.offset, seq));
            break;
        }
    }
    let snapshot_seq = start.as_ref().map(|s| s.2);
    let (mut state, mut pos) = match start {
        Some((state, offset, _)) => (state, offset as usize),
        None => (StoreState::default(), 0),
    };

    let mut truncation = None;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            truncation = Some("torn final record (no line terminator)".to_string());
            break;
        };
        let line = &rest[..nl];
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<StoreEvent>(s).map_err(|e| e.to_string()));
        let ev = match parsed {
            Ok(ev) => ev,
            Err(e) => {
                truncation = Some(format!("unparseable record: {e}"));
                break;
            }
        };
        if let Err(e) = state.apply(&ev, true) {
            truncation = Some(format!("invalid record seq {}: {e}", ev.seq));
            break;
        }
        pos += nl + 1;
    }
    let truncation = truncation.map(|reason| Truncation {
        valid_len: pos as u64,
        discarded_bytes: (bytes.len() - pos) as u64,
        last_valid_seq: state.last_seq,
        reason,
    });
    Ok(Loaded {
        state,
        valid_len: pos as u64,
        truncation,
        snapshot_seq,
    })
}

/// Reads every event in `data_dir` up to the first damaged record.
pub fn read_events(data_dir: &Path) -> Result<Vec<StoreEvent>, StoreError> {
    let file = match File::open(data_dir.join(EVENTS_FILE)) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let Ok(line) = line else { break };
        match serde_json::from_str(&line) {
            Ok(ev) => out.push(ev),
            Err(_) => break,
        }
    }
    Ok(out)
}

struct DiskBackend {
    dir: PathBuf,
    log: File,
    len: u64,
}

enum Backend {
    Memory {
        events: Vec<StoreEvent>,
        logs: HashMap<(String, String), String>,
    },
    Disk(DiskBackend),
}

/// A chunk of a task log returned by [`MetadataStore::read_log`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogChunk {
    pub text: String,
    pub next_offset: u64,
    /// Total bytes recorded for the task so far.
    pub total: u64,
}

/// Result of opening a store.
#[derive(Debug, Clone, Default)]
pub struct OpenReport {
    pub truncation: Option<Truncation>,
    pub recovered_tasks: usize,
    pub recovered_runs: usize,
}

pub struct MetadataStore {
    state: StoreState,
    backend: Backend,
    options: StoreOptions,
}

impl MetadataStore {
    pub fn in_memory() -> Self {
        MetadataStore {
            state: StoreState::default(),
            backend: Backend::Memory {
                events: Vec::new(),
                logs: HashMap::new(),
            },
            options: StoreOptions {
                snapshot_interval: 0,
                sync: false,
                fail_appends_after: None,
            },
        }
    }

    pub fn open(data_dir: impl AsRef<Path>) -> Result<(Self, OpenReport), StoreError> {
        Self::open_with(data_dir, StoreOptions::default())
    }

    pub fn open_with(
        data_dir: impl AsRef<Path>,
        options: StoreOptions,
    ) -> Result<(Self, OpenReport), StoreError> {
        let dir = data_dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
        fs::create_dir_all(dir.join("runs"))?;
        let loaded = load(&dir)?;
        let log_path = dir.join(EVENTS_FILE);
        let log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)?;
        if let Some(t) = &loaded.truncation {
            log::warn!(
                "truncating {} to {} bytes after seq {}: {}",
                log_path.display(),
                t.valid_len,
                t.last_valid_seq,
                t.reason
            );
            log.set_len(loaded.valid_len)?;
            log.sync_all()?;
            for (seq, path) in snapshot_paths(&dir)? {
                if seq > loaded.state.last_seq {
                    fs::remove_file(path)?;
                }
            }
        }
        // Task log bytes not covered by a LOG_APPENDED event are dropped.
        for (run_id, tasks) in &loaded.state.log_lengths {
            for (task_id, &len) in tasks {
                let path = dir.join(crate::run::log_ref(run_id, task_id));
                if let Ok(meta) = fs::metadata(&path) {
                    if meta.len() > len {
                        OpenOptions::new().write(true).open(&path)?.set_len(len)?;
                    }
                }
            }
        }

        let mut store = MetadataStore {
            state: loaded.state,
            backend: Backend::Disk(DiskBackend {
                dir,
                log,
                len: loaded.valid_len,
            }),
            options,
        };
        let mut report = OpenReport {
            truncation: loaded.truncation,
            ..OpenReport::default()
        };
        for ev in store.state.recovery_events() {
            match ev.kind() {
                EventKind::TaskStateChanged => report.recovered_tasks += 1,
                _ => report.recovered_runs += 1,
            }
            store.append(ev)?;
        }
        Ok((store, report))
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn data_dir(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Disk(d) => Some(&d.dir),
            Backend::Memory { .. } => None,
        }
    }

    /// Appends an event; the store assigns its sequence number and timestamp.
    /// The event is durable before the sequence number is returned.
    pub fn append(&mut self, payload: EventPayload) -> Result<u64, StoreError> {
        if let Some(limit) = self.options.fail_appends_after {
            if self.state.last_seq >= limit {
                return Err(StoreError::Io(io::Error::other("injected append failure")));
            }
        }
        let now = Utc::now();
        let at = match self.state.last_at {
            Some(last) if last > now => last,
            _ => now,
        };
        let ev = StoreEvent {
            seq: self.state.last_seq + 1,
            at,
            payload,
        };
        self.state.apply(&ev, false)?;
        match &mut self.backend {
            Backend::Memory { events, .. } => events.push(ev.clone()),
            Backend::Disk(disk) => {
                let mut line = serde_json::to_vec(&ev)
                    .map_err(|e| StoreError::Corrupt(format!("serialize event: {e}")))?;
                line.push(b'\n');
                disk.log.write_all(&line)?;
                if self.options.sync {
                    disk.log.sync_data()?;
                }
                disk.len += line.len() as u64;
            }
        }
        self.state.apply(&ev, true)?;
        if self.options.snapshot_interval > 0
            && ev.seq.is_multiple_of(self.options.snapshot_interval)
        {
            if let Err(e) = self.write_snapshot() {
                log::warn!("snapshot at seq {} failed: {e}", ev.seq);
            }
        }
        Ok(ev.seq)
    }

    fn write_snapshot(&self) -> Result<(), StoreError> {
        let Backend::Disk(disk) = &self.backend else {
            return Ok(());
        };
        let snap = Snapshot {
            seq: self.state.last_seq,
            offset: disk.len,
            state: self.state.clone(),
        };
        let dir = disk.dir.join(SNAPSHOT_DIR);
        let tmp = dir.join(format!("{}.snap.tmp", snap.seq));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer(&mut f, &snap)
                .map_err(|e| StoreError::Corrupt(format!("serialize snapshot: {e}")))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, dir.join(format!("{}.snap", snap.seq)))?;
        for (_, path) in snapshot_paths(&disk.dir)?.into_iter().skip(SNAPSHOTS_KEPT) {
            let _ = fs::remove_file(path);
        }
        Ok(())
    }

    /// Registers `spec` unless an identical spec is already its latest
    /// version. Returns the registered version.
    pub fn register_dag(&mut self, spec: &DagSpec) -> Result<u64, StoreError> {
        if let Some(existing) = self.state.dag(&spec.dag_id, spec.version) {
            if existing == spec {
                return Ok(spec.version);
            }
        }
        self.append(EventPayload::DagRegistered { spec: spec.clone() })?;
        Ok(spec.version)
    }

    /// Registers a generated DAG, assigning the next version when its tasks
    /// differ from the latest registered version.
    pub fn register_generated(&mut self, spec: &DagSpec) -> Result<DagSpec, StoreError> {
        let mut spec = spec.clone();
        match self.state.latest_dag(&spec.dag_id) {
            Some(latest) if latest.tasks == spec.tasks => return Ok(latest.clone()),
            Some(latest) => spec.version = latest.version + 1,
            None => {}
        }
        self.register_dag(&spec)?;
        Ok(spec)
    }

    /// Appends task output to the run's log file for `task_id`.
    pub fn append_log(
        &mut self,
        run_id: &str,
        task_id: &str,
        text: &str,
    ) -> Result<u64, StoreError> {
        if text.is_empty() {
            return Ok(self.state.last_seq);
        }
        let run = self
            .state
            .run(run_id)
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_string()))?;
        if !run.task_instances.contains_key(task_id) {
            return Err(StoreError::UnknownTask {
                run_id: run_id.to_string(),
                task_id: task_id.to_string(),
            });
        }
        let offset = self.state.log_len(run_id, task_id);
        match &mut self.backend {
            Backend::Memory { logs, .. } => {
                logs.entry((run_id.to_string(), task_id.to_string()))
                    .or_default()
                    .push_str(text);
            }
            Backend::Disk(disk) => {
                let path = disk.dir.join(crate::run::log_ref(run_id, task_id));
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
                f.write_all(text.as_bytes())?;
                if self.options.sync {
                    f.sync_data()?;
                }
            }
        }
        self.append(EventPayload::LogAppended {
            run_id: run_id.to_string(),
            task_id: task_id.to_string(),
            offset,
            len: text.len() as u64,
        })
    }

    /// Reads recorded log bytes from `offset`, at most 64 KiB per call.
    pub fn read_log(
        &self,
        run_id: &str,
        task_id: &str,
        offset: u64,
    ) -> Result<LogChunk, StoreError> {
        let run = self
            .state
            .run(run_id)
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_string()))?;
        if !run.task_instances.contains_key(task_id) {
            return Err(StoreError::UnknownTask {
                run_id: run_id.to_string(),
                task_id: task_id.to_string(),
            });
        }
        let total = self.state.log_len(run_id, task_id);
        let start = offset.min(total);
        let end = (start + MAX_LOG_CHUNK).min(total);
        let bytes = match &self.backend {
            Backend::Memory { logs, .. } => logs
                .get(&(run_id.to_string(), task_id.to_string()))
                .map(|s| s.as_bytes()[start as usize..end as usize].to_vec())
                .unwrap_or_default(),
            Backend::Disk(disk) => {
                let path = disk.dir.join(crate::run::log_ref(run_id, task_id));
                let mut buf = vec![0u8; (end - start) as usize];
                if !buf.is_empty() {
                    let mut f = File::open(path)?;
                    f.seek(SeekFrom::Start(start))?;
                    f.read_exact(&mut buf)?;
                }
                buf
            }
        };
        Ok(LogChunk {
            text: String::from_utf8_lossy(&bytes).into_owned(),
            next_offset: end,
            total,
        })
    }

    /// Full event history, oldest first.
    pub fn events(&self) -> Result<Vec<StoreEvent>, StoreError> {
        match &self.backend {
            Backend::Memory { events, .. } => Ok(events.clone()),
            Backend::Disk(disk) => read_events(&disk.dir),
        }
    }

    pub fn query_runs(&self, filter: &RunFilter) -> Vec<RunSummary> {
        self.state.query_runs(filter)
    }
}
