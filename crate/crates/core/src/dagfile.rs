//! Text serialization of [`DagSpec`].
//!
//! ```text
//! # comments start with '#'
//! dag_id = survey
//! version = 3
//!
//! [task align]
//! kind = align
//! upstream = quality_filter
//! max_retries = 2
//! backoff_seconds = 0.5
//! cpus = 4
//! memory_mb = 2048
//! gpus = 0
//! skip = false
//! param.command = echo "hello"
//! ```
//!
//! Top-level keys come before the first `[task <id>]` block. Inside a block
//! every key is optional except `kind`; omitted keys take the [`TaskSpec`]
//! defaults. `upstream` is a comma-separated list. A value is taken verbatim
//! after trimming, unless it starts with `"`, in which case it is a JSON
//! string literal (used for values with surrounding whitespace, newlines or
//! a leading quote).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::dag::{is_valid_task_id, DagSpec, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct DagParseError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> DagParseError {
    DagParseError {
        line,
        message: message.into(),
    }
}

fn encode_value(v: &str) -> String {
    let needs_quoting = v.trim() != v
        || v.starts_with('"')
        || v.contains(['\n', '\r'])
        || v.chars().any(char::is_control);
    if needs_quoting {
        serde_json::to_string(v).expect("string serializes")
    } else {
        v.to_string()
    }
}

fn decode_value(raw: &str, line: usize) -> Result<String, DagParseError> {
    if raw.starts_with('"') {
        serde_json::from_str::<String>(raw).map_err(|e| err(line, format!("bad quoted value: {e}")))
    } else {
        Ok(raw.to_string())
    }
}

pub fn to_text(spec: &DagSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dag_id = {}", encode_value(&spec.dag_id));
    let _ = writeln!(out, "version = {}", spec.version);
    for task in &spec.tasks {
        out.push('\n');
        let _ = writeln!(out, "[task {}]", task.task_id);
        let _ = writeln!(out, "kind = {}", task.kind);
        let _ = writeln!(out, "upstream = {}", task.upstream.join(", "));
        let _ = writeln!(out, "max_retries = {}", task.retry_policy.max_retries);
        let _ = writeln!(
            out,
            "backoff_seconds = {}",
            task.retry_policy.backoff_seconds
        );
        let _ = writeln!(out, "cpus = {}", task.resource_hint.cpus);
        let _ = writeln!(out, "memory_mb = {}", task.resource_hint.memory_mb);
        let _ = writeln!(out, "gpus = {}", task.resource_hint.gpus);
        let _ = writeln!(out, "skip = {}", task.skip);
        for (k, v) in &task.params {
            let _ = writeln!(out, "param.{k} = {}", encode_value(v));
        }
    }
    out
}

fn parse_num<T: std::str::FromStr>(
    value: &str,
    key: &str,
    line: usize,
) -> Result<T, DagParseError> {
    value
        .parse()
        .map_err(|_| err(line, format!("'{key}' expects a number, got {value:?}")))
}

pub fn parse_text(text: &str) -> Result<DagSpec, DagParseError> {
    let mut dag_id: Option<String> = None;
    let mut version: Option<u64> = None;
    let mut tasks: Vec<TaskSpec> = Vec::new();
    let mut current: Option<(TaskSpec, bool, BTreeSet<String>)> = None;

    fn finish(
        current: &mut Option<(TaskSpec, bool, BTreeSet<String>)>,
        tasks: &mut Vec<TaskSpec>,
        line: usize,
    ) -> Result<(), DagParseError> {
        if let Some((task, has_kind, _)) = current.take() {
            if !has_kind {
                return Err(err(line, format!("task '{}' has no kind", task.task_id)));
            }
            tasks.push(task);
        }
        Ok(())
    }

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let inner = header
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, "unterminated block header"))?;
            let id = inner
                .strip_prefix("task")
                .filter(|rest| rest.starts_with(char::is_whitespace))
                .map(str::trim)
                .ok_or_else(|| err(line_no, format!("unknown block [{inner}]")))?;
            if !is_valid_task_id(id) {
                return Err(err(line_no, format!("invalid task id {id:?}")));
            }
            finish(&mut current, &mut tasks, line_no)?;
            current = Some((TaskSpec::new(id, TaskKind::Shell), false, BTreeSet::new()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, "expected 'key = value'"))?;
        let key = key.trim();
        let value = decode_value(value.trim(), line_no)?;

        let Some((task, has_kind, seen)) = current.as_mut() else {
            match key {
                "dag_id" if dag_id.is_none() => dag_id = Some(value),
                "version" if version.is_none() => version = Some(parse_num(&value, key, line_no)?),
                "dag_id" | "version" => return Err(err(line_no, format!("duplicate key '{key}'"))),
                _ => return Err(err(line_no, format!("unknown top-level key '{key}'"))),
            }
            continue;
        };
        if !seen.insert(key.to_string()) {
            return Err(err(line_no, format!("duplicate key '{key}'")));
        }
        match key {
            "kind" => {
                task.kind = TaskKind::parse(&value)
                    .ok_or_else(|| err(line_no, format!("unknown task kind {value:?}")))?;
                *has_kind = true;
            }
            "upstream" => {
                task.upstream = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
            }
            "max_retries" => task.retry_policy.max_retries = parse_num(&value, key, line_no)?,
            "backoff_seconds" => {
                let b: f64 = parse_num(&value, key, line_no)?;
                if !b.is_finite() || b < 0.0 {
                    return Err(err(
                        line_no,
                        "backoff_seconds must be a non-negative number",
                    ));
                }
                task.retry_policy.backoff_seconds = b;
            }
            "cpus" => {
                task.resource_hint.cpus = parse_num(&value, key, line_no)?;
                if task.resource_hint.cpus == 0 {
                    return Err(err(line_no, "cpus must be positive"));
                }
            }
            "memory_mb" => {
                task.resource_hint.memory_mb = parse_num(&value, key, line_no)?;
                if task.resource_hint.memory_mb == 0 {
                    return Err(err(line_no, "memory_mb must be positive"));
                }
            }
            "gpus" => task.resource_hint.gpus = parse_num(&value, key, line_no)?,
            "skip" => {
                task.skip = match value.as_str() {
                    "true" => true,
                    "false" => false,
                    _ => return Err(err(line_no, "skip expects true or false")),
                }
            }
            other => {
                let Some(param) = other.strip_prefix("param.") else {
                    return Err(err(line_no, format!("unknown task key '{other}'")));
                };
                if param.is_empty() || param.contains(char::is_whitespace) {
                    return Err(err(line_no, format!("invalid param key {param:?}")));
                }
                task.params.insert(param.to_string(), value);
            }
        }
    }
    let last = text.lines().count();
    finish(&mut current, &mut tasks, last)?;

    Ok(DagSpec {
        dag_id: dag_id.ok_or_else(|| err(last, "missing 'dag_id'"))?,
        version: version.ok_or_else(|| err(last, "missing 'version'"))?,
        tasks,
    })
}
