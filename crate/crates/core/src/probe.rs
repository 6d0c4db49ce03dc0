//! Diagnostic probing: pick what to observe, obtain an instrumented program
//! that still compiles, run it, and turn its sentinel output into a trace.
//!
//! Sentinel lines have the shape `TRQ|<step>|<site>|<var>=<value>`. The step
//! field the program prints is only checked for shape; entries are numbered
//! by the order they were captured.

use serde::{Deserialize, Serialize};

use crate::llm::{Message, RoleTag};
use crate::model::{BugInstance, ProbeStatus, RuntimeTrace, TraceEntry};
use crate::prompt::{extract_fenced, render};
use crate::sandbox::{self, ExecutionRecord, SandboxError, Workspace};
use crate::session::{Event, Session};

pub const SENTINEL: &str = "TRQ";
/// Appended once when sentinel capture hits the size guard.
pub const GUARD_RECORD: &str = "TRQ|GUARD|capture limit reached\n";

const OUTPUT_EXCERPT: usize = 4000;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub suspicious_sites: Vec<String>,
    pub critical_variables: Vec<String>,
    pub rationale: String,
}

impl ProbePlan {
    pub fn is_empty(&self) -> bool {
        self.suspicious_sites.is_empty() && self.critical_variables.is_empty()
    }

    fn describe(&self) -> String {
        let mut s = String::new();
        for site in &self.suspicious_sites {
            s.push_str(&format!("- site: {site}\n"));
        }
        for var in &self.critical_variables {
            s.push_str(&format!("- record: {var}\n"));
        }
        if !self.rationale.is_empty() {
            s.push_str(&format!("why: {}\n", self.rationale));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentedProgram {
    pub source_text: String,
    pub attempt: u32,
    pub status: ProbeStatus,
}

/// Reads `SITE:`, `VAR:` and `RATIONALE:` lines. Values may be comma separated.
/// Anything else yields an empty plan whose rationale keeps the raw reply.
pub fn parse_plan(text: &str) -> ProbePlan {
    let mut plan = ProbePlan::default();
    let mut rationale = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((key, value)) = line.split_once(':') else { continue };
        let items = || value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        match key.trim().to_ascii_uppercase().as_str() {
            "SITE" | "SITES" => plan.suspicious_sites.extend(items()),
            "VAR" | "VARS" | "VARIABLE" | "VARIABLES" => plan.critical_variables.extend(items()),
            "RATIONALE" => rationale.push(value.trim().to_string()),
            _ => {}
        }
    }
    if plan.is_empty() {
        plan.rationale = format!("unparseable probe plan: {}", text.trim());
    } else {
        plan.rationale = rationale.join(" ");
    }
    plan
}

pub fn identify_targets(bug: &BugInstance, failure: &ExecutionRecord, session: &Session<'_>) -> ProbePlan {
    let source = match std::fs::read_to_string(bug.source_path()) {
        Ok(s) => s,
        Err(e) => {
            return ProbePlan { rationale: format!("cannot read source: {e}"), ..ProbePlan::default() };
        }
    };
    let Some(ticket) = session.reserve_logged(RoleTag::Probe, 0) else {
        return ProbePlan { rationale: "invocation budget exhausted".into(), ..ProbePlan::default() };
    };
    let t = session.templates;
    let user = render(
        &t.probe_identify,
        &[
            ("source", &source),
            ("failing_test_output", &failure.excerpt(OUTPUT_EXCERPT)),
            ("scope", &bug.scope.to_string()),
        ],
    );
    match session.call(&ticket, vec![Message::system(t.probe_system.clone()), Message::user(user)]) {
        Some(resp) => parse_plan(&resp.content),
        None => ProbePlan { rationale: "probe backend unavailable".into(), ..ProbePlan::default() },
    }
}

/// Asks for an instrumented program, compile-checking each attempt in `ws`.
///
/// A failed attempt restores the original source before retrying with the
/// compiler output. On return `ws` holds either the compiling instrumented
/// source or the original bytes.
pub fn instrument_in(
    ws: &mut Workspace,
    bug: &BugInstance,
    plan: &ProbePlan,
    session: &Session<'_>,
) -> Result<InstrumentedProgram, SandboxError> {
    let original = ws.read_source(bug)?;
    let cfg = session.cfg;
    let t = session.templates;
    let failed = |attempt| InstrumentedProgram { source_text: original.clone(), attempt, status: ProbeStatus::Failed };
    let mut feedback = String::new();
    for attempt in 1..=cfg.max_instrument_attempts {
        let Some(ticket) = session.reserve_logged(RoleTag::Probe, 0) else {
            return Ok(failed(attempt - 1));
        };
        let retry = if feedback.is_empty() {
            String::new()
        } else {
            render(&t.probe_retry, &[("compiler_errors", &feedback)])
        };
        let user = render(
            &t.probe_instrument,
            &[("source", &original), ("plan", &plan.describe()), ("compiler_errors", &retry), ("sentinel", SENTINEL)],
        );
        let Some(resp) = session.call(&ticket, vec![Message::system(t.probe_system.clone()), Message::user(user)]) else {
            return Ok(failed(attempt));
        };
        let Some(candidate) = extract_fenced(&resp.content) else {
            session.log(Event::ProbeCompile { attempt, ok: false });
            feedback = "the reply contained no fenced code block".into();
            continue;
        };
        let mut text = candidate;
        if original.ends_with('\n') && !text.ends_with('\n') {
            text.push('\n');
        }
        ws.write_source(bug, &text)?;
        let rec = sandbox::run_in(ws, &bug.compile_cmd, cfg);
        session.log(Event::ProbeCompile { attempt, ok: rec.succeeded() });
        if rec.succeeded() {
            return Ok(InstrumentedProgram { source_text: text, attempt, status: ProbeStatus::Success });
        }
        ws.write_source(bug, &original)?;
        feedback = rec.excerpt(OUTPUT_EXCERPT);
    }
    Ok(failed(cfg.max_instrument_attempts))
}

pub fn instrument(
    bug: &BugInstance,
    plan: &ProbePlan,
    session: &Session<'_>,
) -> Result<InstrumentedProgram, SandboxError> {
    let mut ws = sandbox::create_workspace(bug)?;
    instrument_in(&mut ws, bug, plan, session)
}

/// Parses sentinel lines; malformed lines are skipped. Steps are 1-based capture order.
pub fn parse_trace(raw: &[u8]) -> Vec<TraceEntry> {
    let text = String::from_utf8_lossy(raw);
    let mut entries = Vec::new();
    for line in text.lines() {
        let mut parts = line.splitn(4, '|');
        let (Some(prefix), Some(step), Some(site), Some(assign)) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            continue;
        };
        if prefix != SENTINEL || step.trim().parse::<u64>().is_err() {
            continue;
        }
        let Some((var, value)) = assign.split_once('=') else { continue };
        if var.is_empty() {
            continue;
        }
        entries.push(TraceEntry {
            step: entries.len() as u64 + 1,
            site: site.to_string(),
            variable: var.to_string(),
            value: value.trim_end_matches('\r').to_string(),
        });
    }
    entries
}

pub fn trace_from_record(rec: &ExecutionRecord) -> RuntimeTrace {
    RuntimeTrace {
        entries: parse_trace(&rec.trace_raw),
        truncated: false,
        guard_triggered: rec.guard_triggered,
        raw_bytes: rec.trace_raw.len(),
    }
}

/// Runs the failing test against the instrumented program. A crashing run
/// still yields whatever was captured.
pub fn execute_and_capture(
    bug: &BugInstance,
    inst: &InstrumentedProgram,
    session: &Session<'_>,
) -> Result<RuntimeTrace, SandboxError> {
    let mut ws = sandbox::create_workspace(bug)?;
    ws.write_source(bug, &inst.source_text)?;
    let compile = sandbox::run_in(&ws, &bug.compile_cmd, session.cfg);
    if !compile.succeeded() {
        tracing::warn!(bug = %bug.id, "instrumented program no longer compiles");
        return Ok(RuntimeTrace::empty());
    }
    let rec = sandbox::run_in(&ws, &bug.failing_test_cmd, session.cfg);
    Ok(trace_from_record(&rec))
}

/// Keeps the longest suffix of whole entries whose serialized size fits
/// `budget_bytes`; at least the final entry is always kept.
pub fn truncate_trace(trace: &RuntimeTrace, budget_bytes: usize) -> RuntimeTrace {
    if trace.serialized_len() <= budget_bytes {
        return trace.clone();
    }
    let mut used = 0usize;
    let mut keep_from = trace.entries.len();
    for (i, e) in trace.entries.iter().enumerate().rev() {
        let len = e.serialized_len();
        if used + len > budget_bytes {
            break;
        }
        used += len;
        keep_from = i;
    }
    if keep_from == trace.entries.len() {
        keep_from = trace.entries.len().saturating_sub(1);
    }
    RuntimeTrace {
        entries: trace.entries[keep_from..].to_vec(),
        truncated: true,
        guard_triggered: trace.guard_triggered,
        raw_bytes: trace.raw_bytes,
    }
}

/// Phase 1. Never fails: any problem degrades to an empty trace and
/// `ProbeStatus::Failed`, so the debate can proceed statically.
pub fn run_phase1(bug: &BugInstance, failure: &ExecutionRecord, session: &Session<'_>) -> (RuntimeTrace, ProbeStatus) {
    let failed = (RuntimeTrace::empty(), ProbeStatus::Failed);
    if !session.cfg.probe_enabled {
        return failed;
    }
    let plan = identify_targets(bug, failure, session);
    if plan.is_empty() {
        tracing::info!(bug = %bug.id, "no probe plan: {}", plan.rationale);
        return failed;
    }
    let inst = match instrument(bug, &plan, session) {
        Ok(i) if i.status == ProbeStatus::Success => i,
        Ok(_) => return failed,
        Err(e) => {
            tracing::warn!(bug = %bug.id, "instrumentation environment error: {e}");
            return failed;
        }
    };
    match execute_and_capture(bug, &inst, session) {
        Ok(trace) => (truncate_trace(&trace, session.cfg.trace_prompt_budget_bytes), ProbeStatus::Success),
        Err(e) => {
            tracing::warn!(bug = %bug.id, "trace capture environment error: {e}");
            failed
        }
    }
}
