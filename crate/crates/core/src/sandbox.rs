//! Runs a generated analysis script against the interchange table in a
//! private workspace.
//!
//! The workspace gets `data.json` and `script.py`; the script is expected to
//! leave `code_answer.txt` and `data_p.json` behind. The interpreter runs
//! with the workspace as working directory, a cleared environment (only
//! `PATH` survives; `HOME` and `TMPDIR` point into the workspace), its own
//! process group, a wall-clock limit and capped output. This keeps honest
//! scripts contained; it is not a defence against hostile code.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Semaphore;
use crate::tabular::{to_interchange_json, DataTable};

pub const INTERPRETER_ENV: &str = "NUMPIPE_SANDBOX_INTERPRETER";
pub const DATA_FILE: &str = "data.json";
pub const PROCESSED_FILE: &str = "data_p.json";
pub const ANSWER_FILE: &str = "code_answer.txt";
pub const SCRIPT_FILE: &str = "script.py";

/// Exit status reported for a run killed at the time limit (128 + SIGKILL).
pub const KILLED_STATUS: i32 = 137;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SandboxError {
    #[error("script is empty")]
    EmptyScript,
    #[error("no sandbox interpreter configured; set {INTERPRETER_ENV} or pass --sandbox-interpreter")]
    NoInterpreter,
    #[error("sandbox interpreter {0:?} not found")]
    InterpreterMissing(String),
    #[error("workspace {0} already has files in it")]
    WorkspaceNotEmpty(String),
    #[error("sandbox i/o error: {0}")]
    Io(String),
    #[error("script produced no answer")]
    NoAnswer,
}

fn io_err(e: std::io::Error) -> SandboxError {
    SandboxError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxLimits {
    pub timeout_ms: u64,
    /// Cap on each of stdout and stderr; the rest is discarded.
    pub max_output_bytes: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self { timeout_ms: 60_000, max_output_bytes: 1 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    /// Contents of `code_answer.txt`, if it exists and holds more than
    /// whitespace.
    pub answer_text: Option<String>,
    /// Contents of `data_p.json`.
    pub processed_table: Option<String>,
    pub timed_out: bool,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0 && !self.timed_out
    }
}

/// The answer file's text, else trimmed stdout, else [`SandboxError::NoAnswer`].
pub fn resolve_answer(result: &ExecutionResult) -> Result<String, SandboxError> {
    if let Some(a) = result.answer_text.as_deref().map(str::trim).filter(|a| !a.is_empty()) {
        return Ok(a.to_string());
    }
    let out = result.stdout.trim();
    if out.is_empty() {
        Err(SandboxError::NoAnswer)
    } else {
        Ok(out.to_string())
    }
}

/// Interpreter to use: the environment variable wins over the command-line
/// flag, which wins over the config file. There is no built-in default.
pub fn resolve_interpreter(flag: Option<&str>, config: Option<&str>) -> Option<String> {
    std::env::var(INTERPRETER_ENV)
        .ok()
        .into_iter()
        .chain(flag.map(str::to_string))
        .chain(config.map(str::to_string))
        .find(|s| !s.trim().is_empty())
}

fn read_capped(mut src: impl Read, cap: usize) -> String {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match src.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    String::from_utf8_lossy(&kept).into_owned()
}

fn read_optional(path: &Path) -> Result<Option<String>, SandboxError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(String::from_utf8_lossy(&bytes).into_owned())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(e)),
    }
}

/// Runs `script` over `table` with a fresh workspace at `workspace` (created
/// if missing, must be empty if present). The workspace is left in place.
pub fn execute(
    interpreter: &str,
    script: &str,
    table: &DataTable,
    limits: SandboxLimits,
    workspace: &Path,
) -> Result<ExecutionResult, SandboxError> {
    if script.trim().is_empty() {
        return Err(SandboxError::EmptyScript);
    }
    if workspace.exists() {
        if std::fs::read_dir(workspace).map_err(io_err)?.next().is_some() {
            return Err(SandboxError::WorkspaceNotEmpty(workspace.display().to_string()));
        }
    } else {
        std::fs::create_dir_all(workspace).map_err(io_err)?;
    }
    let workspace = workspace.canonicalize().map_err(io_err)?;
    std::fs::write(workspace.join(DATA_FILE), to_interchange_json(table)).map_err(io_err)?;
    std::fs::write(workspace.join(SCRIPT_FILE), script).map_err(io_err)?;

    let mut command = Command::new(interpreter);
    command
        .arg(SCRIPT_FILE)
        .current_dir(&workspace)
        .env_clear()
        .env("HOME", &workspace)
        .env("TMPDIR", &workspace)
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTHONIOENCODING", "utf-8")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if let Some(path) = std::env::var_os("PATH") {
        command.env("PATH", path);
    }

    let started = Instant::now();
    let mut child = command.spawn().map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
            SandboxError::InterpreterMissing(interpreter.to_string())
        }
        _ => io_err(e),
    })?;
    let cap = limits.max_output_bytes;
    let stdout = child.stdout.take().expect("piped");
    let stderr = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || read_capped(stdout, cap));
    let err_reader = std::thread::spawn(move || read_capped(stderr, cap));

    let deadline = started + Duration::from_millis(limits.timeout_ms);
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait().map_err(io_err)? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            let pgid = child.id() as libc::pid_t;
            // SAFETY: signalling a process group we created; no memory is touched.
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            break child.wait().map_err(io_err)?;
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let wall_time = started.elapsed();
    // Background children left by the script would keep the pipes open.
    // SAFETY: as above.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    let exit_status = if timed_out {
        KILLED_STATUS
    } else {
        status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
    };

    let answer_text = if timed_out {
        None
    } else {
        read_optional(&workspace.join(ANSWER_FILE))?.filter(|a| !a.trim().is_empty())
    };
    let processed_table = if timed_out { None } else { read_optional(&workspace.join(PROCESSED_FILE))? };
    Ok(ExecutionResult { exit_status, stdout, stderr, answer_text, processed_table, timed_out, wall_time })
}

/// An interpreter plus limits, with a cap on concurrent executions.
#[derive(Debug, Clone)]
pub struct Sandbox {
    interpreter: Option<String>,
    limits: SandboxLimits,
    slots: Arc<Semaphore>,
}

pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Sandbox {
    pub fn new(interpreter: Option<String>, limits: SandboxLimits, max_concurrent: usize) -> Self {
        Self { interpreter, limits, slots: Arc::new(Semaphore::new(max_concurrent)) }
    }

    pub fn interpreter(&self) -> Option<&str> {
        self.interpreter.as_deref()
    }

    pub fn limits(&self) -> SandboxLimits {
        self.limits
    }

    pub fn run(&self, script: &str, table: &DataTable, workspace: &Path) -> Result<ExecutionResult, SandboxError> {
        let interpreter = self.interpreter.as_deref().ok_or(SandboxError::NoInterpreter)?;
        let _slot = self.slots.acquire();
        execute(interpreter, script, table, self.limits, workspace)
    }
}
