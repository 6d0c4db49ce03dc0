//! Deterministic replay backend.
//!
//! A script is JSON Lines, one record per line:
//!
//! ```text
//! {"role_tag": "generator:causal", "round": 0, "content": "...", "prompt_tokens": 120, "completion_tokens": 85}
//! ```
//!
//! The n-th request for a given `(role_tag, round)` receives the n-th record
//! with that key. Blank lines and lines starting with `#` are ignored, as are
//! unknown fields, so a run transcript can be replayed directly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, CompletionResponse, PromptRequest, RoleTag};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub role_tag: RoleTag,
    pub round: u32,
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    records: Vec<ScriptRecord>,
    index: HashMap<(RoleTag, u32), Vec<usize>>,
}

impl ScriptedBackend {
    pub fn new(records: Vec<ScriptRecord>) -> Self {
        let mut index: HashMap<(RoleTag, u32), Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry((r.role_tag, r.round)).or_default().push(i);
        }
        Self { records, index }
    }

    pub fn records(&self) -> &[ScriptRecord] {
        &self.records
    }

    pub fn total_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.prompt_tokens + r.completion_tokens).sum()
    }

    pub fn lookup(&self, role: RoleTag, round: u32, ordinal: u32) -> Option<&ScriptRecord> {
        let idx = *self.index.get(&(role, round))?.get(ordinal as usize)?;
        self.records.get(idx)
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &PromptRequest) -> Result<CompletionResponse, BackendError> {
        let rec = self.lookup(req.role_tag, req.round, req.ordinal).ok_or(BackendError::NoRecord {
            role: req.role_tag,
            round: req.round,
            ordinal: req.ordinal,
        })?;
        Ok(CompletionResponse {
            content: rec.content.clone(),
            prompt_tokens: rec.prompt_tokens,
            completion_tokens: rec.completion_tokens,
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

pub fn parse_script(text: &str) -> Result<ScriptedBackend, ScriptError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: ScriptRecord =
            serde_json::from_str(trimmed).map_err(|e| ScriptError::Parse { line: i + 1, message: e.to_string() })?;
        records.push(rec);
    }
    Ok(ScriptedBackend::new(records))
}

pub fn load_script(path: &Path) -> Result<ScriptedBackend, ScriptError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
    parse_script(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{chat, UsageLedger};
    use crate::model::Strategy;

    fn line(role: &str, round: u32, content: &str, p: u64, c: u64) -> String {
        serde_json::json!({"role_tag": role, "round": round, "content": content, "prompt_tokens": p, "completion_tokens": c})
            .to_string()
    }

    #[test]
    fn answers_in_declared_order() {
        let roles = ["probe", "generator:defensive", "generator:causal", "critic:semantic"];
        let mut text = String::new();
        for i in 0..12 {
            text.push_str(&line(roles[i % 4], 0, &format!("r{i}"), 1, 1));
            text.push('\n');
        }
        let backend = parse_script(&text).unwrap();
        let ledger = UsageLedger::with_budget(40);
        let mut answers = Vec::new();
        for i in 0..12 {
            let tag: RoleTag = roles[i % 4].parse().unwrap();
            let resp = chat(PromptRequest::new(tag, 0, vec![], 1.0), &ledger, &backend).unwrap();
            answers.push(resp.content);
        }
        let expected: Vec<String> = (0..12).map(|i| format!("r{i}")).collect();
        assert_eq!(answers, expected);
    }

    #[test]
    fn miss_returns_none_but_charges() {
        let backend = parse_script(&line("judge", 3, "x", 1, 1)).unwrap();
        let ledger = UsageLedger::with_budget(40);
        let req = PromptRequest::new(RoleTag::Generator(Strategy::Causal), 0, vec![], 1.0);
        assert!(chat(req, &ledger, &backend).is_none());
        assert_eq!(ledger.snapshot().invocations, 1);
        assert_eq!(ledger.snapshot().prompt_tokens, 0);
    }

    #[test]
    fn declared_tokens_reach_ledger() {
        let backend = parse_script(&line("judge", 0, "x", 120, 85)).unwrap();
        let ledger = UsageLedger::with_budget(40);
        chat(PromptRequest::new(RoleTag::Judge, 0, vec![], 1.0), &ledger, &backend).unwrap();
        let u = ledger.snapshot();
        assert_eq!((u.invocations, u.prompt_tokens, u.completion_tokens), (1, 120, 85));
    }

    #[test]
    fn exhausted_budget_skips_backend() {
        let backend = parse_script(&line("judge", 0, "x", 120, 85)).unwrap();
        let ledger = UsageLedger::with_budget(1);
        ledger.reserve(RoleTag::Probe, 0).unwrap();
        let before = ledger.snapshot();
        assert!(chat(PromptRequest::new(RoleTag::Judge, 0, vec![], 1.0), &ledger, &backend).is_none());
        assert_eq!(ledger.snapshot(), before);
    }

    #[test]
    fn parse_error_names_line() {
        let text = format!("{}\n\n# comment\n{{\"role_tag\": \"judge\"}}\n", line("judge", 0, "x", 1, 1));
        match parse_script(&text) {
            Err(ScriptError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_script(&line("wizard", 0, "x", 1, 1)), Err(ScriptError::Parse { line: 1, .. })));
    }

    #[test]
    fn extra_fields_ignored() {
        let text = r#"{"seq": 4, "role_tag": "probe", "round": 0, "ordinal": 0, "content": "c", "prompt_tokens": 2, "completion_tokens": 3, "messages": []}"#;
        let backend = parse_script(text).unwrap();
        assert_eq!(backend.records().len(), 1);
        assert_eq!(backend.total_tokens(), 5);
    }
}
