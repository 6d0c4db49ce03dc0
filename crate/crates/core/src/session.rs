//! Per-bug run state: budget ledger, event log and transcript.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::exec::Executor;
use crate::llm::{self, Backend, CompletionResponse, Message, PromptRequest, RoleTag, Ticket, UsageLedger};
use crate::model::{BugInstance, Config, OutcomeKind, RuntimeTrace};
use crate::prompt::Templates;
use crate::sandbox::Validator;

/// Observable steps of a run. The log is appended in a fixed order that does
/// not depend on how parallel sections were scheduled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Call { seq: u32, role: RoleTag, round: u32, ordinal: u32 },
    Refused { role: RoleTag, round: u32 },
    ProbeCompile { attempt: u32, ok: bool },
    Validate { hypothesis: String, outcome: OutcomeKind },
    EarlyExit { round: u32, hypothesis: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u32,
    pub role_tag: RoleTag,
    pub round: u32,
    pub ordinal: u32,
    pub messages: Vec<Message>,
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct Session<'a> {
    pub cfg: &'a Config,
    pub templates: &'a Templates,
    pub ledger: UsageLedger,
    pub exec: Executor,
    backend: &'a dyn Backend,
    events: Mutex<Vec<Event>>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &'a Config, templates: &'a Templates, backend: &'a dyn Backend) -> Self {
        Self::with_executor(cfg, templates, backend, Executor::new(cfg.parallelism))
    }

    pub fn with_executor(cfg: &'a Config, templates: &'a Templates, backend: &'a dyn Backend, exec: Executor) -> Self {
        Self {
            cfg,
            templates,
            ledger: UsageLedger::new(cfg.max_invocations, cfg.input_cost_per_mtok, cfg.output_cost_per_mtok),
            exec,
            backend,
            events: Mutex::new(Vec::new()),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend
    }

    pub fn reserve(&self, role: RoleTag, round: u32) -> Option<Ticket> {
        self.ledger.reserve(role, round)
    }

    /// Reserves and logs the outcome immediately; for sequential sections.
    pub fn reserve_logged(&self, role: RoleTag, round: u32) -> Option<Ticket> {
        let ticket = self.reserve(role, round);
        self.log_reservation(role, round, ticket.as_ref());
        ticket
    }

    pub fn log_reservation(&self, role: RoleTag, round: u32, ticket: Option<&Ticket>) {
        self.log(match ticket {
            Some(t) => Event::Call { seq: t.seq, role: t.role, round: t.round, ordinal: t.ordinal },
            None => Event::Refused { role, round },
        });
    }

    /// Performs a reserved call. Safe to use from worker threads.
    pub fn call(&self, ticket: &Ticket, messages: Vec<Message>) -> Option<CompletionResponse> {
        let req = PromptRequest::new(ticket.role, ticket.round, messages, self.cfg.temperature);
        let (req, result) = llm::dispatch(ticket, req, &self.ledger, self.backend);
        let entry = TranscriptEntry {
            seq: ticket.seq,
            role_tag: ticket.role,
            round: ticket.round,
            ordinal: ticket.ordinal,
            messages: req.messages,
            content: result.as_ref().map(|r| r.content.clone()).unwrap_or_default(),
            prompt_tokens: result.as_ref().map_or(0, |r| r.prompt_tokens),
            completion_tokens: result.as_ref().map_or(0, |r| r.completion_tokens),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        self.transcript.lock().unwrap_or_else(|p| p.into_inner()).push(entry);
        result.ok()
    }

    pub fn log(&self, e: Event) {
        self.events.lock().unwrap_or_else(|p| p.into_inner()).push(e);
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Transcript in reservation order.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        let mut t = self.transcript.lock().unwrap_or_else(|p| p.into_inner()).clone();
        t.sort_by_key(|e| e.seq);
        t
    }
}

/// Everything the repair agents see about one bug.
pub struct RepairContext<'s, 'a> {
    pub bug: &'s BugInstance,
    pub source: String,
    pub scope_text: String,
    pub failing_output: String,
    /// Truncated trace as shown to the agents; empty when probing failed.
    pub trace: RuntimeTrace,
    pub session: &'s Session<'a>,
    pub validator: &'s dyn Validator,
}

impl RepairContext<'_, '_> {
    pub fn cfg(&self) -> &Config {
        self.session.cfg
    }
}
