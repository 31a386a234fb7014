//! Seeded randomized suites over the DAG model, the executors and the
//! event log. Shared by the property tests and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use flowgate_core::config::RunConfig;
use flowgate_core::dag::{
    topological_order, validate_dag, DagSpec, TaskKind, TaskSpec, ValidationCode,
};
use flowgate_core::run::{ExecutorKind, RunRecord};
use flowgate_core::state::{RunState, TaskState};
use flowgate_core::store::{MetadataStore, EVENTS_FILE};
use flowgate_core::testkit::{
    DeterministicRunner, PARAM_ALWAYS_FAIL, PARAM_FAIL_FIRST, PARAM_SLEEP_MS,
};
use flowgate_core::{Engine, EngineOptions};

/// Per-task outcome compared across executions.
pub type Outcome = BTreeMap<String, (TaskState, u32, Option<String>)>;

pub fn outcome(run: &RunRecord) -> Outcome {
    run.task_instances
        .iter()
        .map(|(id, t)| (id.clone(), (t.state, t.attempt, t.output.clone())))
        .collect()
}

/// A random DAG of 1..=max_tasks tasks. Edges only point from lower to
/// higher index, so the result is acyclic by construction. With
/// `behaviours`, some tasks fail once (and retry), fail permanently or
/// sleep briefly to perturb interleavings.
pub fn random_dag(rng: &mut StdRng, id: &str, max_tasks: usize, behaviours: bool) -> DagSpec {
    let n = rng.gen_range(1..=max_tasks);
    let density: f64 = rng.gen_range(0.0..0.3);
    let mut spec = DagSpec::new(id, 1);
    for i in 0..n {
        let mut task = TaskSpec::new(format!("t{i:02}"), TaskKind::Shell);
        let upstream: Vec<String> = (0..i)
            .filter(|_| rng.gen_bool(density))
            .map(|j| format!("t{j:02}"))
            .collect();
        task = task.after(upstream);
        if behaviours {
            match rng.gen_range(0..20) {
                0 => task = task.param(PARAM_ALWAYS_FAIL, "true"),
                1 | 2 => task = task.param(PARAM_FAIL_FIRST, "1").retries(1, 0.0),
                3 => task = task.param(PARAM_FAIL_FIRST, "2").retries(1, 0.0),
                _ => {}
            }
            if rng.gen_bool(0.2) {
                task = task.param(PARAM_SLEEP_MS, rng.gen_range(0..3).to_string());
            }
        }
        spec = spec.with_task(task);
    }
    spec
}

/// Independent reachability: every task reachable from `from` following
/// upstream→downstream edges (excluding `from` itself unless on a cycle).
fn descendants(spec: &DagSpec, from: &str) -> BTreeSet<String> {
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for t in &spec.tasks {
        for u in &t.upstream {
            children
                .entry(u.as_str())
                .or_default()
                .push(t.task_id.as_str());
        }
    }
    let mut seen = BTreeSet::new();
    let mut stack: Vec<&str> = children.get(from).cloned().unwrap_or_default();
    while let Some(cur) = stack.pop() {
        if seen.insert(cur.to_string()) {
            stack.extend(children.get(cur).into_iter().flatten());
        }
    }
    seen
}

fn check_order(spec: &DagSpec) -> Result<(), String> {
    let report = validate_dag(spec);
    if !report.ok {
        return Err(format!(
            "{}: acyclic DAG rejected: {:?}",
            spec.dag_id, report.errors
        ));
    }
    let order = topological_order(spec).map_err(|e| format!("{}: {e}", spec.dag_id))?;
    let pos: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if order.len() != spec.tasks.len() || pos.len() != order.len() {
        return Err(format!("{}: order is not a permutation", spec.dag_id));
    }
    for t in &spec.tasks {
        let me = *pos
            .get(t.task_id.as_str())
            .ok_or_else(|| format!("{} missing from order", t.task_id))?;
        for u in &t.upstream {
            if pos[u.as_str()] >= me {
                return Err(format!(
                    "{}: {u} ordered after its downstream {}",
                    spec.dag_id, t.task_id
                ));
            }
        }
    }
    if topological_order(spec).ok().as_ref() != Some(&order) {
        return Err(format!("{}: order not deterministic", spec.dag_id));
    }
    Ok(())
}

/// Adds an edge that closes a cycle: either a self-loop or an edge from a
/// task back to one of its ancestors.
fn inject_back_edge(rng: &mut StdRng, spec: &DagSpec) -> DagSpec {
    let mut spec = spec.clone();
    let n = spec.tasks.len();
    let pairs: Vec<(usize, String)> = (0..n)
        .flat_map(|i| {
            descendants(&spec, &spec.tasks[i].task_id)
                .into_iter()
                .map(move |d| (i, d))
        })
        .collect();
    if pairs.is_empty() || rng.gen_bool(0.1) {
        let i = rng.gen_range(0..n);
        let id = spec.tasks[i].task_id.clone();
        spec.tasks[i].upstream.push(id);
    } else {
        let (anc, desc) = pairs[rng.gen_range(0..pairs.len())].clone();
        spec.tasks[anc].upstream.push(desc);
    }
    spec
}

/// Validates `count` random acyclic DAGs, then the same DAGs with a back
/// edge injected. Returns the number of DAGs checked.
pub fn dag_correctness(count: usize, max_tasks: usize, seed: u64) -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..count {
        let spec = random_dag(&mut rng, &format!("rand-{i}"), max_tasks, false);
        check_order(&spec)?;
        let cyclic = inject_back_edge(&mut rng, &spec);
        let report = validate_dag(&cyclic);
        if report.ok || !report.has(ValidationCode::Cycle) {
            return Err(format!(
                "rand-{i}: back edge not reported: {:?}",
                report.errors
            ));
        }
        if topological_order(&cyclic).is_ok() {
            return Err(format!("rand-{i}: cyclic DAG was ordered"));
        }
    }
    Ok(count)
}

fn fresh_engine(store: MetadataStore, root: &Path) -> Engine {
    Engine::new(
        store,
        Arc::new(DeterministicRunner::new()),
        EngineOptions {
            workspace_root: root.to_path_buf(),
            keep_workspaces: false,
        },
    )
}

pub fn config() -> RunConfig {
    RunConfig::with_input_dir("/survey")
}

/// Runs `spec` to completion on a fresh in-memory engine.
pub fn execute(spec: &DagSpec, executor: ExecutorKind, root: &Path) -> Result<RunRecord, String> {
    fresh_engine(MetadataStore::in_memory(), root)
        .execute_run(spec, &config(), executor)
        .map_err(|e| e.to_string())
}

/// Each random DAG under SEQUENTIAL and LOCAL_PARALLEL(2, 4, 8) must end in
/// identical task states, attempt counts and outputs.
pub fn executor_equivalence(count: usize, max_tasks: usize, seed: u64) -> Result<usize, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..count {
        let spec = random_dag(&mut rng, &format!("eq-{i}"), max_tasks, true);
        let reference = execute(&spec, ExecutorKind::Sequential, root.path())?;
        let expected = outcome(&reference);
        for workers in [2, 4, 8] {
            let run = execute(
                &spec,
                ExecutorKind::LocalParallel {
                    worker_count: workers,
                },
                root.path(),
            )?;
            if run.state != reference.state {
                return Err(format!(
                    "eq-{i}: local:{workers} ended {} vs {}",
                    run.state, reference.state
                ));
            }
            let got = outcome(&run);
            if got != expected {
                let diff: Vec<&String> = expected
                    .keys()
                    .filter(|k| expected[*k] != got[*k])
                    .collect();
                return Err(format!("eq-{i}: local:{workers} differs on {diff:?}"));
            }
        }
    }
    Ok(count)
}

/// Ten tasks: two roots, a fan-in, a retried task, a fan-out and a
/// permanently failing branch.
pub fn recovery_dag() -> DagSpec {
    let t = |id: &str| TaskSpec::new(id, TaskKind::Shell);
    DagSpec::new("crash", 1)
        .with_task(t("load_a"))
        .with_task(t("load_b"))
        .with_task(t("merge").after(["load_a", "load_b"]))
        .with_task(
            t("flaky")
                .after(["merge"])
                .param(PARAM_FAIL_FIRST, "1")
                .retries(2, 0.0),
        )
        .with_task(t("left").after(["flaky"]))
        .with_task(t("right").after(["flaky"]))
        .with_task(t("join").after(["left", "right"]))
        .with_task(
            t("broken")
                .after(["merge"])
                .param(PARAM_ALWAYS_FAIL, "true"),
        )
        .with_task(t("orphan").after(["broken"]))
        .with_task(t("report").after(["join"]))
}

#[derive(Debug, Default)]
pub struct RecoveryStats {
    pub cut_points: usize,
    pub torn_writes: usize,
}

/// Replays a prefix of the reference event log, resumes whatever was
/// interrupted and returns the settled outcome.
fn recover(
    dir: &Path,
    reference: &RunRecord,
    root: &Path,
) -> Result<BTreeMap<String, (TaskState, Option<String>)>, String> {
    let (store, _) =
        MetadataStore::open(dir).map_err(|e| format!("reopen {}: {e}", dir.display()))?;
    let engine = fresh_engine(store, root);
    let existing = engine.run(&reference.run_id);
    let run = match existing {
        // Crashed before the run was recorded: the operator triggers it again.
        None => engine.execute_run(&recovery_dag(), &config(), reference.executor.clone()),
        Some(run) if run.state == RunState::Paused => engine.resume_run(&run.run_id),
        Some(run) if run.state == RunState::Running => {
            return Err(format!("{} still RUNNING after recovery", run.run_id));
        }
        Some(run) => Ok(run),
    }
    .map_err(|e| e.to_string())?;
    if run.state != reference.state {
        return Err(format!(
            "recovered run ended {} vs {}",
            run.state, reference.state
        ));
    }
    Ok(state_map(&run))
}

/// States and outputs only: an attempt cut short by a crash still counts
/// as an attempt, so attempt numbers may legitimately differ.
pub fn state_map(run: &RunRecord) -> BTreeMap<String, (TaskState, Option<String>)> {
    run.task_instances
        .iter()
        .map(|(id, t)| (id.clone(), (t.state, t.output.clone())))
        .collect()
}

/// Kills the reference run at every event boundary (and mid-append after
/// each one) by truncating a copy of its event log, then recovers.
pub fn crash_recovery(executor: ExecutorKind) -> Result<RecoveryStats, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ref_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (store, _) = MetadataStore::open(ref_dir.path()).map_err(|e| e.to_string())?;
    let reference = fresh_engine(store, root.path())
        .execute_run(&recovery_dag(), &config(), executor)
        .map_err(|e| e.to_string())?;
    if reference.state != RunState::Failed {
        return Err(format!("reference run ended {}", reference.state));
    }
    let expected = state_map(&reference);
    let log = fs::read(ref_dir.path().join(EVENTS_FILE)).map_err(|e| e.to_string())?;
    let mut boundaries = vec![0];
    boundaries.extend(
        log.iter()
            .enumerate()
            .filter(|(_, b)| **b == b'\n')
            .map(|(i, _)| i + 1),
    );

    let mut stats = RecoveryStats::default();
    for (k, &end) in boundaries.iter().enumerate() {
        let mut cuts = vec![(end, false)];
        if let Some(&next) = boundaries.get(k + 1) {
            cuts.push((end + (next - end) / 2, true));
        }
        for (cut, torn) in cuts {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            fs::write(dir.path().join(EVENTS_FILE), &log[..cut]).map_err(|e| e.to_string())?;
            let got = recover(dir.path(), &reference, root.path())
                .map_err(|e| format!("cut after {k} events (torn: {torn}): {e}"))?;
            if got != expected {
                let diff: Vec<&String> = expected
                    .keys()
                    .filter(|id| expected[*id] != got[*id])
                    .collect();
                return Err(format!(
                    "cut after {k} events (torn: {torn}): tasks differ {diff:?}"
                ));
            }
            if torn {
                stats.torn_writes += 1;
            } else {
                stats.cut_points += 1;
            }
        }
    }
    Ok(stats)
}
