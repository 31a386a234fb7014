//! Runner for `shell` tasks: `sh -c <param.command>`, exit 0 = SUCCESS.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};

use crate::dag::{TaskKind, TaskSpec};
use crate::engine::{TaskContext, TaskResult, TaskRunner};

pub const PARAM_COMMAND: &str = "command";
/// A stdout line starting with this marker sets the task's output.
pub const OUTPUT_MARKER: &str = "::output::";

/// Environment variables describing the task to the child process.
pub fn task_env(ctx: &TaskContext, task_id: &str) -> Vec<(&'static str, String)> {
    vec![
        ("FLOWGATE_RUN_ID", ctx.run_id.clone()),
        ("FLOWGATE_TASK_ID", task_id.to_string()),
        ("FLOWGATE_ATTEMPT", ctx.attempt.to_string()),
        ("FLOWGATE_WORKSPACE", ctx.workspace.display().to_string()),
        ("FLOWGATE_OUTPUT_DIR", ctx.output_dir.display().to_string()),
    ]
}

/// Runs `cmd`, passing every output line to `on_line` as it arrives.
/// Lines carrying [`OUTPUT_MARKER`] are collected into the returned output.
pub fn run_streaming(
    mut cmd: Command,
    mut on_line: impl FnMut(&str) + Send,
) -> std::io::Result<(ExitStatus, Option<String>)> {
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::piped()).spawn()?;
    let stdout = child.stdout.take().expect("piped");
    let stderr = child.stderr.take().expect("piped");
    let (tx, rx) = std::sync::mpsc::channel::<String>();
    let mut output = None;
    std::thread::scope(|s| {
        let pump = |r: Box<dyn Read + Send>, tx: std::sync::mpsc::Sender<String>| {
            move || {
                for line in BufReader::new(r).lines() {
                    let Ok(line) = line else { break };
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            }
        };
        s.spawn(pump(Box::new(stdout), tx.clone()));
        s.spawn(pump(Box::new(stderr), tx));
        for line in rx {
            if let Some(out) = line.strip_prefix(OUTPUT_MARKER) {
                output = Some(out.trim().to_string());
            }
            on_line(&line);
        }
    });
    let status = child.wait()?;
    Ok((status, output))
}

pub fn shell_command(command: &str, cwd: &Path) -> Command {
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(cwd)
        .stdin(Stdio::null());
    cmd
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ShellRunner;

impl TaskRunner for ShellRunner {
    fn run(&self, task: &TaskSpec, ctx: &TaskContext) -> TaskResult {
        if task.kind != TaskKind::Shell {
            return Err(format!("no runner for task kind '{}'", task.kind));
        }
        let command = task.params.get(PARAM_COMMAND).ok_or_else(|| {
            format!(
                "shell task '{}' has no '{PARAM_COMMAND}' param",
                task.task_id
            )
        })?;
        let cwd = if ctx.workspace.is_dir() {
            ctx.workspace.clone()
        } else {
            std::env::temp_dir()
        };
        let mut cmd = shell_command(command, &cwd);
        cmd.envs(task_env(ctx, &task.task_id));
        let (status, output) =
            run_streaming(cmd, |line| ctx.log(line)).map_err(|e| format!("spawn failed: {e}"))?;
        if status.success() {
            Ok(output)
        } else {
            Err(match status.code() {
                Some(code) => format!("exit status {code}"),
                None => "terminated by signal".to_string(),
            })
        }
    }
}
