//! Isolated workspaces and time-limited command execution.
//!
//! Every validation runs against a fresh recursive copy of the bug's root, so
//! the original tree is never written. Commands run under `sh -c` in their own
//! process group; on timeout the whole group is killed.

use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use thiserror::Error;

use crate::model::{BugInstance, Config, OutcomeKind, ValidationOutcome};
use crate::probe::{GUARD_RECORD, SENTINEL};

/// Environment variable telling the program under test which sentinel prefix to emit.
pub const SENTINEL_ENV: &str = "TRACEREPAIR_SENTINEL";

const OUTPUT_TAIL_BYTES: usize = 256 * 1024;
const MAX_LINE_BYTES: usize = 64 * 1024;
const DETAIL_BYTES: usize = 2000;
const POLL: Duration = Duration::from_millis(5);

/// Infrastructure failures. These never count as a patch-quality signal.
#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("cannot create workspace for `{bug}` from {root}: {source}")]
    Workspace { bug: String, root: PathBuf, source: std::io::Error },
    #[error("workspace I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Patch(#[from] PatchError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("empty patch")]
    Empty,
    #[error("scope lines {start}-{end} out of range for a {lines}-line file")]
    OutOfRange { start: usize, end: usize, lines: usize },
}

/// A private copy of a bug's root directory. Removed on drop.
#[derive(Debug)]
pub struct Workspace {
    dir: TempDir,
    pub bug_id: String,
    pub generation: u32,
}

impl Workspace {
    pub fn dir(&self) -> &Path {
        self.dir.path()
    }

    pub fn source_path(&self, bug: &BugInstance) -> PathBuf {
        self.dir().join(&bug.source_file)
    }

    pub fn read_source(&self, bug: &BugInstance) -> Result<String, SandboxError> {
        let path = self.source_path(bug);
        fs::read_to_string(&path).map_err(|source| SandboxError::Io { path, source })
    }

    /// Replaces the whole source file, e.g. with an instrumented version.
    pub fn write_source(&mut self, bug: &BugInstance, text: &str) -> Result<(), SandboxError> {
        let path = self.source_path(bug);
        fs::write(&path, text).map_err(|source| SandboxError::Io { path, source })?;
        self.generation += 1;
        Ok(())
    }
}

pub fn create_workspace(bug: &BugInstance) -> Result<Workspace, SandboxError> {
    let err = |source| SandboxError::Workspace { bug: bug.id.clone(), root: bug.root.clone(), source };
    let meta = fs::metadata(&bug.root).map_err(err)?;
    if !meta.is_dir() {
        return Err(err(std::io::Error::new(std::io::ErrorKind::NotADirectory, "root is not a directory")));
    }
    let dir = tempfile::Builder::new().prefix("trq-ws-").tempdir().map_err(err)?;
    copy_tree(&bug.root, dir.path()).map_err(err)?;
    Ok(Workspace { dir, bug_id: bug.id.clone(), generation: 0 })
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(from).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(from).map_err(std::io::Error::other)?;
        let target = to.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target)?;
        } else if ft.is_file() {
            fs::copy(entry.path(), &target)?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path())?;
            std::os::unix::fs::symlink(link, &target)?;
        }
    }
    Ok(())
}

/// Replaces lines `start..=end` (1-based) of `original` with `patch`.
///
/// A single trailing newline on the patch is normalized to match the
/// replaced span, so re-inserting the original span is byte-identical.
pub fn splice_lines(original: &str, start: usize, end: usize, patch: &str) -> Result<String, PatchError> {
    if patch.is_empty() {
        return Err(PatchError::Empty);
    }
    let lines: Vec<&str> = original.split_inclusive('\n').collect();
    if start == 0 || end < start || end > lines.len() {
        return Err(PatchError::OutOfRange { start, end, lines: lines.len() });
    }
    let span_ends_with_newline = lines[end - 1].ends_with('\n');
    let mut body = patch.strip_suffix('\n').unwrap_or(patch).to_string();
    if span_ends_with_newline {
        body.push('\n');
    }
    let mut out = String::with_capacity(original.len() + patch.len());
    lines[..start - 1].iter().for_each(|l| out.push_str(l));
    out.push_str(&body);
    lines[end..].iter().for_each(|l| out.push_str(l));
    Ok(out)
}

/// Text of the scoped lines in `source`, or `None` if the scope does not fit.
pub fn scope_text(source: &str, bug: &BugInstance) -> Option<String> {
    let (start, end) = bug.scope.span();
    let lines: Vec<&str> = source.split_inclusive('\n').collect();
    (start >= 1 && end <= lines.len()).then(|| lines[start - 1..end].concat())
}

pub fn apply_patch(ws: &mut Workspace, bug: &BugInstance, patch: &str) -> Result<(), SandboxError> {
    let original = ws.read_source(bug)?;
    let (start, end) = bug.scope.span();
    let patched = splice_lines(&original, start, end, patch)?;
    ws.write_source(bug, &patched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Exited(i32),
    TimedOut,
    /// Spawn failed, or the shell reported 126/127.
    NotExecutable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    /// Sentinel lines extracted from the output, plus the guard record when the cap was hit.
    pub trace_raw: Vec<u8>,
    pub guard_triggered: bool,
    pub duration_secs: f64,
}

impl ExecutionRecord {
    pub fn succeeded(&self) -> bool {
        self.status == ExecStatus::Exited(0)
    }

    pub fn timed_out(&self) -> bool {
        self.status == ExecStatus::TimedOut
    }

    /// Tail of stderr followed by stdout, bounded for prompts and outcome details.
    pub fn excerpt(&self, max: usize) -> String {
        let mut s = String::new();
        if !self.stderr.is_empty() {
            s.push_str(&self.stderr);
        }
        if !self.stdout.is_empty() {
            if !s.is_empty() && !s.ends_with('\n') {
                s.push('\n');
            }
            s.push_str(&self.stdout);
        }
        tail_str(&s, max).to_string()
    }
}

fn tail_str(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut cut = s.len() - max;
    while !s.is_char_boundary(cut) {
        cut += 1;
    }
    &s[cut..]
}

/// Shared capture budget for sentinel lines across stdout and stderr.
struct CaptureGuard {
    limit: usize,
    used: AtomicUsize,
    tripped: AtomicBool,
}

impl CaptureGuard {
    fn admit(&self, len: usize) -> bool {
        if self.tripped.load(Ordering::Acquire) {
            return false;
        }
        let prev = self.used.fetch_add(len, Ordering::AcqRel);
        if prev + len <= self.limit {
            return true;
        }
        self.used.fetch_sub(len, Ordering::AcqRel);
        self.tripped.store(true, Ordering::Release);
        false
    }
}

struct StreamCapture {
    tail: Vec<u8>,
    sentinels: Vec<u8>,
}

fn capture_stream<R: Read>(mut reader: R, guard: &CaptureGuard) -> StreamCapture {
    let prefix = format!("{SENTINEL}|");
    let mut cap = StreamCapture { tail: Vec::new(), sentinels: Vec::new() };
    let mut line: Vec<u8> = Vec::new();
    let mut overlong = false;
    let mut buf = [0u8; 16 * 1024];
    let on_line = |line: &[u8], cap: &mut StreamCapture| {
        if line.starts_with(prefix.as_bytes()) && guard.admit(line.len()) {
            cap.sentinels.extend_from_slice(line);
        }
    };
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        let chunk = &buf[..n];
        cap.tail.extend_from_slice(chunk);
        if cap.tail.len() > 2 * OUTPUT_TAIL_BYTES {
            let drop = cap.tail.len() - OUTPUT_TAIL_BYTES;
            cap.tail.drain(..drop);
        }
        for &b in chunk {
            if !overlong {
                line.push(b);
            }
            if b == b'\n' {
                if !overlong {
                    on_line(&line, &mut cap);
                }
                line.clear();
                overlong = false;
            } else if line.len() > MAX_LINE_BYTES {
                line.clear();
                overlong = true;
            }
        }
    }
    if !overlong && !line.is_empty() {
        line.push(b'\n');
        on_line(&line, &mut cap);
    }
    if cap.tail.len() > OUTPUT_TAIL_BYTES {
        let drop = cap.tail.len() - OUTPUT_TAIL_BYTES;
        cap.tail.drain(..drop);
    }
    cap
}

fn kill_group(pid: u32) {
    // SAFETY: signalling a process group we created; errors (ESRCH) are ignored.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

/// Runs `cmd` through `sh -c` inside `dir`.
///
/// Sentinel lines (`TRQ|...`) are copied into `trace_raw` until
/// `guard_bytes` is reached, after which one guard record is appended and
/// further sentinel output is dropped. The process keeps running until it
/// exits or the timeout kills its process group.
pub fn run_command(dir: &Path, cmd: &str, timeout: Duration, guard_bytes: usize) -> ExecutionRecord {
    let started = Instant::now();
    let spawned = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(dir)
        .env(SENTINEL_ENV, SENTINEL)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => {
            return ExecutionRecord {
                status: ExecStatus::NotExecutable,
                stdout: String::new(),
                stderr: format!("failed to spawn `{cmd}`: {e}"),
                trace_raw: Vec::new(),
                guard_triggered: false,
                duration_secs: started.elapsed().as_secs_f64(),
            }
        }
    };
    let pid = child.id();
    let guard = Arc::new(CaptureGuard { limit: guard_bytes, used: AtomicUsize::new(0), tripped: AtomicBool::new(false) });
    let out = child.stdout.take().map(|s| {
        let g = Arc::clone(&guard);
        thread::spawn(move || capture_stream(s, &g))
    });
    let err = child.stderr.take().map(|s| {
        let g = Arc::clone(&guard);
        thread::spawn(move || capture_stream(s, &g))
    });

    let deadline = started + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(st)) => break Some(st),
            Ok(None) => {}
            Err(_) => break None,
        }
        if Instant::now() >= deadline {
            kill_group(pid);
            let _ = child.wait();
            break None;
        }
        thread::sleep(POLL);
    };
    let timed_out = status.is_none();
    // Reap anything the command left behind in its group.
    kill_group(pid);
    let duration_secs = started.elapsed().as_secs_f64();

    let empty = || StreamCapture { tail: Vec::new(), sentinels: Vec::new() };
    let out = out.and_then(|h| h.join().ok()).unwrap_or_else(empty);
    let err = err.and_then(|h| h.join().ok()).unwrap_or_else(empty);

    let status = if timed_out {
        ExecStatus::TimedOut
    } else {
        match status.and_then(|s| s.code()) {
            Some(126) | Some(127) => ExecStatus::NotExecutable,
            Some(code) => ExecStatus::Exited(code),
            None => ExecStatus::Exited(-1),
        }
    };
    let guard_triggered = guard.tripped.load(Ordering::Acquire);
    let mut trace_raw = out.sentinels;
    trace_raw.extend_from_slice(&err.sentinels);
    if guard_triggered {
        trace_raw.extend_from_slice(GUARD_RECORD.as_bytes());
    }
    let scrub = |bytes: Vec<u8>| scrub_paths(&String::from_utf8_lossy(&bytes), dir);
    ExecutionRecord {
        status,
        stdout: scrub(out.tail),
        stderr: scrub(err.tail),
        trace_raw,
        guard_triggered,
        duration_secs,
    }
}

fn scrub_paths(text: &str, dir: &Path) -> String {
    let mut s = text.to_string();
    if let Ok(canon) = dir.canonicalize() {
        s = s.replace(&*canon.to_string_lossy(), "<workspace>");
    }
    s.replace(&*dir.to_string_lossy(), "<workspace>")
}

pub fn run_in(ws: &Workspace, cmd: &str, cfg: &Config) -> ExecutionRecord {
    run_command(ws.dir(), cmd, Duration::from_secs(cfg.test_timeout_secs), cfg.trace_file_guard_bytes)
}

/// Classifies the compile step of a workspace. `None` means it compiled.
pub fn compile_failure(rec: &ExecutionRecord) -> Option<ValidationOutcome> {
    (!rec.succeeded()).then(|| ValidationOutcome::new(OutcomeKind::CompileError, rec.excerpt(DETAIL_BYTES)))
}

fn classify_test(rec: &ExecutionRecord, timeout_secs: u64) -> Option<ValidationOutcome> {
    match rec.status {
        ExecStatus::Exited(0) => None,
        ExecStatus::TimedOut => Some(ValidationOutcome::new(
            OutcomeKind::Timeout,
            format!("timed out after {timeout_secs}s"),
        )),
        ExecStatus::NotExecutable => Some(ValidationOutcome::new(OutcomeKind::CompileError, rec.excerpt(DETAIL_BYTES))),
        ExecStatus::Exited(_) => Some(ValidationOutcome::new(OutcomeKind::TestFail, rec.excerpt(DETAIL_BYTES))),
    }
}

/// Compiles and tests `patch` in a fresh workspace.
///
/// `Pass` means the failing test and, when present, the regression command
/// both succeeded.
pub fn validate(bug: &BugInstance, patch: &str, cfg: &Config) -> Result<ValidationOutcome, SandboxError> {
    let mut ws = create_workspace(bug)?;
    apply_patch(&mut ws, bug, patch)?;
    Ok(validate_workspace(&ws, bug, cfg))
}

pub fn validate_workspace(ws: &Workspace, bug: &BugInstance, cfg: &Config) -> ValidationOutcome {
    let compile = run_in(ws, &bug.compile_cmd, cfg);
    if let Some(o) = compile_failure(&compile) {
        return o;
    }
    let failing = run_in(ws, &bug.failing_test_cmd, cfg);
    if let Some(o) = classify_test(&failing, cfg.test_timeout_secs) {
        return o;
    }
    if let Some(reg) = &bug.regression_test_cmd {
        let rec = run_in(ws, reg, cfg);
        if let Some(o) = classify_test(&rec, cfg.test_timeout_secs) {
            return o;
        }
    }
    ValidationOutcome::pass()
}

/// Records of the unpatched program: compile step and failing-test run.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub compile: ExecutionRecord,
    pub failing: Option<ExecutionRecord>,
}

pub fn run_baseline(bug: &BugInstance, cfg: &Config) -> Result<Baseline, SandboxError> {
    let ws = create_workspace(bug)?;
    let compile = run_in(&ws, &bug.compile_cmd, cfg);
    if !compile.succeeded() {
        return Ok(Baseline { compile, failing: None });
    }
    let failing = run_in(&ws, &bug.failing_test_cmd, cfg);
    Ok(Baseline { compile, failing: Some(failing) })
}

/// Anything that can judge a patch for one bug.
pub trait Validator: Sync {
    fn validate(&self, patch: &str) -> Result<ValidationOutcome, SandboxError>;
}

pub struct SandboxValidator<'a> {
    pub bug: &'a BugInstance,
    pub cfg: &'a Config,
}

impl Validator for SandboxValidator<'_> {
    fn validate(&self, patch: &str) -> Result<ValidationOutcome, SandboxError> {
        validate(self.bug, patch, self.cfg)
    }
}
