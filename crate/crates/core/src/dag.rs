//! Workflow graph model: tasks as nodes, upstream dependencies as edges.
//!
//! Everything here is a pure function over immutable values. Structural
//! problems are reported as data through [`ValidationReport`]; only the
//! scheduling helpers that require a valid graph return errors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::state::TaskState;

/// What a task does when it is dispatched.
///
/// Every pipeline operation has its own kind; [`TaskKind::Shell`] runs an
/// arbitrary command so graphs beyond the built-in pipelines can be expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Configure,
    ImportImages,
    QualityFilter,
    Align,
    BuildDepthMaps,
    BuildPointCloud,
    BuildTiledModel,
    BuildMesh,
    TextureMesh,
    ExportArtifacts,
    MlSetup,
    Downscale,
    Inference,
    ValidateMasks,
    UpscaleMasks,
    SplitMasks,
    ClassifyPointCloud,
    ExportMasks,
    Shell,
}

impl TaskKind {
    pub const ALL: [TaskKind; 19] = [
        TaskKind::Configure,
        TaskKind::ImportImages,
        TaskKind::QualityFilter,
        TaskKind::Align,
        TaskKind::BuildDepthMaps,
        TaskKind::BuildPointCloud,
        TaskKind::BuildTiledModel,
        TaskKind::BuildMesh,
        TaskKind::TextureMesh,
        TaskKind::ExportArtifacts,
        TaskKind::MlSetup,
        TaskKind::Downscale,
        TaskKind::Inference,
        TaskKind::ValidateMasks,
        TaskKind::UpscaleMasks,
        TaskKind::SplitMasks,
        TaskKind::ClassifyPointCloud,
        TaskKind::ExportMasks,
        TaskKind::Shell,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Configure => "configure",
            TaskKind::ImportImages => "import_images",
            TaskKind::QualityFilter => "quality_filter",
            TaskKind::Align => "align",
            TaskKind::BuildDepthMaps => "build_depth_maps",
            TaskKind::BuildPointCloud => "build_point_cloud",
            TaskKind::BuildTiledModel => "build_tiled_model",
            TaskKind::BuildMesh => "build_mesh",
            TaskKind::TextureMesh => "texture_mesh",
            TaskKind::ExportArtifacts => "export_artifacts",
            TaskKind::MlSetup => "ml_setup",
            TaskKind::Downscale => "downscale",
            TaskKind::Inference => "inference",
            TaskKind::ValidateMasks => "validate_masks",
            TaskKind::UpscaleMasks => "upscale_masks",
            TaskKind::SplitMasks => "split_masks",
            TaskKind::ClassifyPointCloud => "classify_point_cloud",
            TaskKind::ExportMasks => "export_masks",
            TaskKind::Shell => "shell",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_seconds: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 0,
            backoff_seconds: 0.0,
        }
    }
}

/// Scheduling hint. `cpus` is the number of worker slots the task occupies
/// under a parallel executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceHint {
    pub cpus: u32,
    pub memory_mb: u64,
    pub gpus: u32,
}

impl Default for ResourceHint {
    fn default() -> Self {
        ResourceHint {
            cpus: 1,
            memory_mb: 512,
            gpus: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    #[serde(default)]
    pub upstream: Vec<String>,
    #[serde(default)]
    pub retry_policy: RetryPolicy,
    #[serde(default)]
    pub resource_hint: ResourceHint,
    /// Excluded by variant selection: the task is kept in the graph and
    /// ends the run as SKIPPED.
    #[serde(default)]
    pub skip: bool,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, kind: TaskKind) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind,
            params: BTreeMap::new(),
            upstream: Vec::new(),
            retry_policy: RetryPolicy::default(),
            resource_hint: ResourceHint::default(),
            skip: false,
        }
    }

    pub fn after<I, S>(mut self, upstream: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.upstream.extend(upstream.into_iter().map(Into::into));
        self
    }

    pub fn param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn retries(mut self, max_retries: u32, backoff_seconds: f64) -> Self {
        self.retry_policy = RetryPolicy {
            max_retries,
            backoff_seconds,
        };
        self
    }

    pub fn skipped(mut self, skip: bool) -> Self {
        self.skip = skip;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagSpec {
    pub dag_id: String,
    pub version: u64,
    pub tasks: Vec<TaskSpec>,
}

impl DagSpec {
    pub fn new(dag_id: impl Into<String>, version: u64) -> Self {
        DagSpec {
            dag_id: dag_id.into(),
            version,
            tasks: Vec::new(),
        }
    }

    pub fn with_task(mut self, task: TaskSpec) -> Self {
        self.tasks.push(task);
        self
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.task_id.as_str())
    }

    /// Direct downstream adjacency, keyed by task id.
    pub fn downstream_map(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = self
            .tasks
            .iter()
            .map(|t| (t.task_id.as_str(), Vec::new()))
            .collect();
        for task in &self.tasks {
            for up in &task.upstream {
                if let Some(children) = map.get_mut(up.as_str()) {
                    children.push(task.task_id.as_str());
                }
            }
        }
        map
    }

    /// All tasks reachable downstream of `task_id`, excluding itself.
    pub fn transitive_downstream(&self, task_id: &str) -> BTreeSet<String> {
        let down = self.downstream_map();
        let mut seen = BTreeSet::new();
        let mut stack = vec![task_id];
        while let Some(current) = stack.pop() {
            for &child in down.get(current).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(child.to_string()) {
                    stack.push(child);
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValidationCode {
    Cycle,
    DuplicateId,
    DanglingRef,
    EmptyDag,
    /// Empty task id, or one the text format cannot carry.
    InvalidId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub code: ValidationCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<ValidationError>,
}

impl ValidationReport {
    fn from_errors(errors: Vec<ValidationError>) -> Self {
        ValidationReport {
            ok: errors.is_empty(),
            errors,
        }
    }

    pub fn has(&self, code: ValidationCode) -> bool {
        self.errors.iter().any(|e| e.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return f.write_str("ok");
        }
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{:?}: {}", e.code, e.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DagError {
    #[error("invalid DAG: {0}")]
    Invalid(ValidationReport),
    #[error("task state map names unknown task '{0}'")]
    UnknownTask(String),
    #[error("task state map is missing task '{0}'")]
    MissingTask(String),
}

/// Task ids must be non-empty and free of whitespace and `[]`, which the
/// text format uses as delimiters.
pub fn is_valid_task_id(id: &str) -> bool {
    !id.is_empty()
        && !id
            .chars()
            .any(|c| c.is_whitespace() || c == '[' || c == ']')
}

/// Reports every structural violation. Never fails.
pub fn validate_dag(spec: &DagSpec) -> ValidationReport {
    let mut errors = Vec::new();
    if spec.tasks.is_empty() {
        errors.push(ValidationError {
            code: ValidationCode::EmptyDag,
            detail: format!("DAG '{}' has no tasks", spec.dag_id),
        });
        return ValidationReport::from_errors(errors);
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut reported_dupes = BTreeSet::new();
    for (i, task) in spec.tasks.iter().enumerate() {
        if !is_valid_task_id(&task.task_id) {
            errors.push(ValidationError {
                code: ValidationCode::InvalidId,
                detail: format!("task #{i} has invalid id {:?}", task.task_id),
            });
        }
        if index.contains_key(task.task_id.as_str()) {
            if reported_dupes.insert(task.task_id.as_str()) {
                errors.push(ValidationError {
                    code: ValidationCode::DuplicateId,
                    detail: task.task_id.clone(),
                });
            }
        } else {
            index.insert(task.task_id.as_str(), i);
        }
    }

    for task in &spec.tasks {
        for up in &task.upstream {
            if !index.contains_key(up.as_str()) {
                errors.push(ValidationError {
                    code: ValidationCode::DanglingRef,
                    detail: format!("{} -> {up}", task.task_id),
                });
            }
        }
    }

    for cycle in find_cycles(spec, &index) {
        errors.push(ValidationError {
            code: ValidationCode::Cycle,
            detail: cycle.join(" -> "),
        });
    }

    ValidationReport::from_errors(errors)
}

/// Depth-first search over the upstream edges. Each back edge yields one
/// cycle path, closed back onto its first node (`A -> B -> A`).
fn find_cycles(spec: &DagSpec, index: &HashMap<&str, usize>) -> Vec<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }

    // Edges point from upstream to downstream (execution order); only the
    // first occurrence of a duplicated id takes part.
    let n = spec.tasks.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, task) in spec.tasks.iter().enumerate() {
        if index.get(task.task_id.as_str()) != Some(&i) {
            continue;
        }
        for up in &task.upstream {
            if let Some(&u) = index.get(up.as_str()) {
                children[u].push(i);
            }
        }
    }
    for c in &mut children {
        c.sort_by(|a, b| spec.tasks[*a].task_id.cmp(&spec.tasks[*b].task_id));
        c.dedup();
    }

    let mut roots: Vec<usize> = index.values().copied().collect();
    roots.sort_by(|a, b| spec.tasks[*a].task_id.cmp(&spec.tasks[*b].task_id));

    let mut marks = vec![Mark::White; n];
    let mut cycles = Vec::new();
    for root in roots {
        if marks[root] != Mark::White {
            continue;
        }
        // Explicit stack of (node, next child position) plus the current path.
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut path: Vec<usize> = vec![root];
        marks[root] = Mark::Grey;
        while let Some(top) = stack.last_mut() {
            let node = top.0;
            if let Some(&child) = children[node].get(top.1) {
                top.1 += 1;
                match marks[child] {
                    Mark::White => {
                        marks[child] = Mark::Grey;
                        stack.push((child, 0));
                        path.push(child);
                    }
                    Mark::Grey => {
                        let start = path.iter().position(|&p| p == child).unwrap_or(0);
                        let mut cycle: Vec<String> = path[start..]
                            .iter()
                            .map(|&p| spec.tasks[p].task_id.clone())
                            .collect();
                        cycle.push(spec.tasks[child].task_id.clone());
                        cycles.push(cycle);
                    }
                    Mark::Black => {}
                }
            } else {
                marks[node] = Mark::Black;
                stack.pop();
                path.pop();
            }
        }
    }
    cycles
}

/// Execution order honouring every edge; among simultaneously ready tasks
/// the lexicographically smallest id goes first.
pub fn topological_order(spec: &DagSpec) -> Result<Vec<String>, DagError> {
    let report = validate_dag(spec);
    if !report.ok {
        return Err(DagError::Invalid(report));
    }
    let mut indegree: BTreeMap<&str, usize> = spec
        .tasks
        .iter()
        .map(|t| {
            (
                t.task_id.as_str(),
                t.upstream.iter().collect::<BTreeSet<_>>().len(),
            )
        })
        .collect();
    let down = spec.downstream_map();
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut order = Vec::with_capacity(spec.tasks.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_string());
        let mut children = down[next].clone();
        children.sort_unstable();
        children.dedup();
        for child in children {
            let d = indegree.get_mut(child).expect("child indexed");
            *d -= 1;
            if *d == 0 {
                ready.insert(child);
            }
        }
    }
    Ok(order)
}

/// Tasks that are QUEUED and whose upstreams have all succeeded.
pub fn ready_tasks(
    spec: &DagSpec,
    states: &HashMap<String, TaskState>,
) -> Result<BTreeSet<String>, DagError> {
    for id in states.keys() {
        if spec.task(id).is_none() {
            return Err(DagError::UnknownTask(id.clone()));
        }
    }
    let mut ready = BTreeSet::new();
    for task in &spec.tasks {
        let state = states
            .get(&task.task_id)
            .ok_or_else(|| DagError::MissingTask(task.task_id.clone()))?;
        if *state != TaskState::Queued {
            continue;
        }
        let upstream_done = task
            .upstream
            .iter()
            .all(|up| states.get(up) == Some(&TaskState::Success));
        if upstream_done {
            ready.insert(task.task_id.clone());
        }
    }
    Ok(ready)
}
