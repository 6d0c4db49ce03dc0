//! Chat-completion backends and the per-bug invocation ledger.

mod ledger;
mod openai;
mod scripted;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::Strategy;

pub use ledger::{Ticket, Usage, UsageLedger};
pub use openai::{OpenAiBackend, API_BASE_ENV, API_KEY_ENV};
pub use scripted::{load_script, parse_script, ScriptError, ScriptRecord, ScriptedBackend};

/// Which agent issued a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleTag {
    Probe,
    Generator(Strategy),
    Critic(Strategy),
    Judge,
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoleTag::Probe => f.write_str("probe"),
            RoleTag::Generator(s) => write!(f, "generator:{s}"),
            RoleTag::Critic(s) => write!(f, "critic:{s}"),
            RoleTag::Judge => f.write_str("judge"),
        }
    }
}

impl FromStr for RoleTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let strategy = |name: &str| Strategy::parse(name).ok_or_else(|| format!("unknown strategy `{name}`"));
        match s.split_once(':') {
            None if s.eq_ignore_ascii_case("probe") => Ok(RoleTag::Probe),
            None if s.eq_ignore_ascii_case("judge") => Ok(RoleTag::Judge),
            Some((kind, name)) if kind.eq_ignore_ascii_case("generator") => Ok(RoleTag::Generator(strategy(name)?)),
            Some((kind, name)) if kind.eq_ignore_ascii_case("critic") => Ok(RoleTag::Critic(strategy(name)?)),
            _ => Err(format!("unknown role tag `{s}`")),
        }
    }
}

impl Serialize for RoleTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RoleTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: ChatRole,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub role_tag: RoleTag,
    pub round: u32,
    /// Position of this request among requests with the same `(role_tag, round)`.
    /// Assigned by the ledger at reservation time.
    pub ordinal: u32,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

impl PromptRequest {
    pub fn new(role_tag: RoleTag, round: u32, messages: Vec<Message>, temperature: f64) -> Self {
        Self { role_tag, round, ordinal: 0, messages, temperature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no scripted record for {role} round {round} #{ordinal}")]
    NoRecord { role: RoleTag, round: u32, ordinal: u32 },
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// A chat-completion provider. Must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<CompletionResponse, BackendError>;

    fn name(&self) -> &str;
}

/// Performs one pre-reserved call and records its token usage.
pub fn dispatch(
    ticket: &Ticket,
    mut req: PromptRequest,
    ledger: &UsageLedger,
    backend: &dyn Backend,
) -> (PromptRequest, Result<CompletionResponse, BackendError>) {
    req.role_tag = ticket.role;
    req.round = ticket.round;
    req.ordinal = ticket.ordinal;
    let result = backend.complete(&req);
    match &result {
        Ok(resp) => ledger.record(resp),
        Err(e) => tracing::warn!(role = %ticket.role, round = ticket.round, "backend call failed: {e}"),
    }
    (req, result)
}

/// Reserves one invocation and performs the call.
///
/// Returns `None` without touching the backend when the budget is spent.
/// A failed call still consumes its reservation.
pub fn chat(req: PromptRequest, ledger: &UsageLedger, backend: &dyn Backend) -> Option<CompletionResponse> {
    let ticket = ledger.reserve(req.role_tag, req.round)?;
    dispatch(&ticket, req, ledger, backend).1.ok()
}
