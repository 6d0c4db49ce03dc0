//! Domain types shared by every phase of a repair run.

use std::cmp::Ordering;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid bug instance: {field}: {reason}")]
    InvalidBug { field: &'static str, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
    #[error("invalid critique: {0}")]
    InvalidCritique(String),
}

/// Localized region of the source file handed to the repair agents.
///
/// Lines are 1-based and inclusive. `Method` carries the same line span as
/// `Lines`; it only records that the scope came from method-level
/// localization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scope {
    Lines { start: usize, end: usize },
    Method { name: String, start: usize, end: usize },
}

impl Scope {
    pub fn span(&self) -> (usize, usize) {
        match *self {
            Scope::Lines { start, end } | Scope::Method { start, end, .. } => (start, end),
        }
    }

    /// Parses `lines:5-7`, `5-7`, `5` or `method:name:5-12`.
    pub fn parse(text: &str) -> Result<Scope, String> {
        let text = text.trim();
        if let Some(rest) = text.strip_prefix("method:") {
            let (name, span) = rest
                .rsplit_once(':')
                .ok_or_else(|| format!("expected method:<name>:<start>-<end>, got `{text}`"))?;
            if name.is_empty() {
                return Err("method name is empty".into());
            }
            let (start, end) = parse_span(span)?;
            return Ok(Scope::Method { name: name.to_string(), start, end });
        }
        let span = text.strip_prefix("lines:").unwrap_or(text);
        let (start, end) = parse_span(span)?;
        Ok(Scope::Lines { start, end })
    }
}

fn parse_span(span: &str) -> Result<(usize, usize), String> {
    let (a, b) = match span.split_once('-') {
        Some((a, b)) => (a, b),
        None => (span, span),
    };
    let start: usize = a.trim().parse().map_err(|_| format!("bad line number `{a}`"))?;
    let end: usize = b.trim().parse().map_err(|_| format!("bad line number `{b}`"))?;
    if start == 0 || end < start {
        return Err(format!("invalid line span {start}-{end}"));
    }
    Ok((start, end))
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Lines { start, end } => write!(f, "lines {start}-{end}"),
            Scope::Method { name, start, end } => write!(f, "method `{name}` (lines {start}-{end})"),
        }
    }
}

/// One repair task: the buggy program, its failing test and regression suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugInstance {
    pub id: String,
    pub root: PathBuf,
    pub source_file: PathBuf,
    pub scope: Scope,
    pub compile_cmd: String,
    pub failing_test_cmd: String,
    pub regression_test_cmd: Option<String>,
    pub description: String,
}

impl BugInstance {
    pub fn source_path(&self) -> PathBuf {
        self.root.join(&self.source_file)
    }

    /// Checks the invariants that can be verified against the filesystem.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, reason: String| Err(ModelError::InvalidBug { field, reason });
        if self.id.trim().is_empty() {
            return bad("id", "empty".into());
        }
        if self.compile_cmd.trim().is_empty() {
            return bad("compile_cmd", "empty".into());
        }
        if self.failing_test_cmd.trim().is_empty() {
            return bad("failing_test_cmd", "empty".into());
        }
        if self.source_file.is_absolute() {
            return bad("source_file", "must be relative to root".into());
        }
        let path = self.source_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => return bad("source_file", format!("{}: {e}", path.display())),
        };
        let lines = text.split_inclusive('\n').count();
        let (_, end) = self.scope.span();
        if end > lines {
            return bad("scope", format!("{} exceeds file length of {lines} lines", self.scope));
        }
        Ok(())
    }
}

/// One `(t, v, val)` snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub site: String,
    pub variable: String,
    pub value: String,
}

impl TraceEntry {
    /// Canonical single-line form; its byte length is what the prompt budget counts.
    pub fn serialize_line(&self) -> String {
        format!("{}|{}|{}|{}={}\n", crate::probe::SENTINEL, self.step, self.site, self.variable, self.value)
    }

    pub fn serialized_len(&self) -> usize {
        // Keep in sync with `serialize_line`.
        crate::probe::SENTINEL.len()
            + 3
            + self.step.to_string().len()
            + self.site.len()
            + self.variable.len()
            + 1
            + self.value.len()
            + 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeTrace {
    pub entries: Vec<TraceEntry>,
    pub truncated: bool,
    pub guard_triggered: bool,
    pub raw_bytes: usize,
}

impl RuntimeTrace {
    /// The empty trace; phases 2 and 3 fall back to static reasoning.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn serialized_len(&self) -> usize {
        self.entries.iter().map(TraceEntry::serialized_len).sum()
    }

    pub fn serialize(&self) -> String {
        self.entries.iter().map(TraceEntry::serialize_line).collect()
    }

    pub fn entry(&self, step: u64) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.step == step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Defensive,
    Causal,
    Semantic,
}

impl Strategy {
    /// Declaration order doubles as the fallback tie-break order.
    pub const ALL: [Strategy; 3] = [Strategy::Defensive, Strategy::Causal, Strategy::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Defensive => "defensive",
            Strategy::Causal => "causal",
            Strategy::Semantic => "semantic",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|st| st.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Pass,
    TestFail,
    Timeout,
    CompileError,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 4] =
        [OutcomeKind::Pass, OutcomeKind::TestFail, OutcomeKind::Timeout, OutcomeKind::CompileError];
}

impl Ord for OutcomeKind {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_kind(*self).cmp(&rank_kind(*other))
    }
}

impl PartialOrd for OutcomeKind {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn rank_kind(kind: OutcomeKind) -> u8 {
    match kind {
        OutcomeKind::Pass => 3,
        OutcomeKind::TestFail => 2,
        OutcomeKind::Timeout => 1,
        OutcomeKind::CompileError => 0,
    }
}

/// Result of validating one patch; `detail` holds an excerpt of captured output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub kind: OutcomeKind,
    pub detail: String,
}

impl ValidationOutcome {
    pub fn new(kind: OutcomeKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }

    pub fn pass() -> Self {
        Self::new(OutcomeKind::Pass, "")
    }
}

/// Pass > TestFail > Timeout > CompileError.
pub fn rank_outcome(o: &ValidationOutcome) -> u8 {
    rank_kind(o.kind)
}

/// A patch is plausible when it passes both the failing test and the regression suite.
pub fn is_plausible(o: &ValidationOutcome) -> bool {
    o.kind == OutcomeKind::Pass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    /// `None` for the judge's synthesized patch.
    pub strategy: Option<Strategy>,
    pub patch: String,
    pub rationale: String,
    pub round: u32,
    pub outcome: Option<ValidationOutcome>,
}

impl Hypothesis {
    pub fn new(
        id: impl Into<String>,
        strategy: Option<Strategy>,
        patch: impl Into<String>,
        rationale: impl Into<String>,
        round: u32,
        max_rounds: u32,
    ) -> Result<Self, ModelError> {
        let patch = patch.into();
        if patch.trim().is_empty() {
            return Err(ModelError::InvalidHypothesis("empty patch".into()));
        }
        if round > max_rounds {
            return Err(ModelError::InvalidHypothesis(format!(
                "round {round} exceeds max_rounds {max_rounds}"
            )));
        }
        Ok(Self { id: id.into(), strategy, patch, rationale: rationale.into(), round, outcome: None })
    }

    pub fn outcome_kind(&self) -> Option<OutcomeKind> {
        self.outcome.as_ref().map(|o| o.kind)
    }

    pub fn passed(&self) -> bool {
        self.outcome.as_ref().is_some_and(is_plausible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Contradiction,
    Consistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub attacker: Strategy,
    pub defender_id: String,
    pub verdict: Verdict,
    /// Steps of the trace entries the critic cited.
    pub evidence: Vec<u64>,
    pub text: String,
}

impl Critique {
    pub fn new(
        attacker: Strategy,
        defender: &Hypothesis,
        verdict: Verdict,
        evidence: Vec<u64>,
        text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if defender.strategy == Some(attacker) {
            return Err(ModelError::InvalidCritique(format!("{attacker} cannot critique its own hypothesis")));
        }
        if verdict == Verdict::Contradiction && text.trim().is_empty() {
            return Err(ModelError::InvalidCritique("contradiction without explanation".into()));
        }
        Ok(Self { attacker, defender_id: defender.id.clone(), verdict, evidence, text })
    }
}

/// Run parameters. Defaults: 3 rounds, 40 invocations per bug, temperature 1.0,
/// 300 s per command, 10 MiB capture guard, 20 KiB trace prompt budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub max_rounds: u32,
    pub max_invocations: u32,
    pub temperature: f64,
    pub test_timeout_secs: u64,
    pub trace_file_guard_bytes: usize,
    pub trace_prompt_budget_bytes: usize,
    pub candidates_per_strategy: u32,
    pub max_instrument_attempts: u32,
    pub probe_enabled: bool,
    pub debate_enabled: bool,
    /// Worker threads for candidate evaluation and corpus runs; 1 runs serially.
    pub parallelism: usize,
    pub model: String,
    /// USD per million prompt tokens.
    pub input_cost_per_mtok: f64,
    /// USD per million completion tokens.
    pub output_cost_per_mtok: f64,
    /// Directory overriding the bundled prompt templates.
    pub templates_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            max_invocations: 40,
            temperature: 1.0,
            test_timeout_secs: 300,
            trace_file_guard_bytes: 10 * (1 << 20),
            trace_prompt_budget_bytes: 20 * (1 << 10),
            candidates_per_strategy: 3,
            max_instrument_attempts: 3,
            probe_enabled: true,
            debate_enabled: true,
            parallelism: 1,
            model: "deepseek-chat".into(),
            input_cost_per_mtok: 0.0,
            output_cost_per_mtok: 0.0,
            templates_dir: None,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&str, bool); 8] = [
            ("max_rounds", self.max_rounds > 0),
            ("max_invocations", self.max_invocations > 0),
            ("temperature", self.temperature > 0.0 && self.temperature.is_finite()),
            ("test_timeout_secs", self.test_timeout_secs > 0),
            ("trace_file_guard_bytes", self.trace_file_guard_bytes > 0),
            ("trace_prompt_budget_bytes", self.trace_prompt_budget_bytes > 0),
            ("candidates_per_strategy", self.candidates_per_strategy > 0),
            ("max_instrument_attempts", self.max_instrument_attempts > 0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.parallelism == 0 {
            return Err(ModelError::InvalidConfig("parallelism must be at least 1".into()));
        }
        if self.input_cost_per_mtok < 0.0 || self.output_cost_per_mtok < 0.0 {
            return Err(ModelError::InvalidConfig("cost rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// One debate step: the hypothesis set and the critiques raised against it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DebateRound {
    pub proposals: Vec<Hypothesis>,
    pub critiques: Vec<Critique>,
}

/// `rounds[k]` holds the hypothesis set after `k` update rounds (round 0 is
/// initialization) together with the critiques raised against it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DebateHistory {
    pub rounds: Vec<DebateRound>,
    pub trace: RuntimeTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairStatus {
    Plausible,
    FallbackReturned,
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeStatus {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub bug_id: String,
    pub status: RepairStatus,
    pub final_patch: Option<String>,
    /// Outcome of `final_patch` when it was last validated.
    pub final_outcome: Option<OutcomeKind>,
    pub rounds_used: u32,
    pub invocations: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_estimate: f64,
    pub wall_secs: f64,
    pub probe_status: ProbeStatus,
}

impl RepairReport {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(kind: OutcomeKind) -> ValidationOutcome {
        ValidationOutcome::new(kind, "")
    }

    #[test]
    fn rank_values() {
        assert_eq!(rank_outcome(&outcome(OutcomeKind::Pass)), 3);
        assert_eq!(rank_outcome(&outcome(OutcomeKind::TestFail)), 2);
        assert_eq!(rank_outcome(&outcome(OutcomeKind::Timeout)), 1);
        assert_eq!(rank_outcome(&outcome(OutcomeKind::CompileError)), 0);
    }

    #[test]
    fn comparator_is_total_order() {
        // Declared order, highest first.
        let declared = [OutcomeKind::Pass, OutcomeKind::TestFail, OutcomeKind::Timeout, OutcomeKind::CompileError];
        let pos = |k: OutcomeKind| declared.iter().position(|d| *d == k).unwrap();
        for a in OutcomeKind::ALL {
            for b in OutcomeKind::ALL {
                let expected = pos(b).cmp(&pos(a));
                assert_eq!(a.cmp(&b), expected, "{a:?} vs {b:?}");
                assert_eq!(a.cmp(&b), b.cmp(&a).reverse());
                for c in OutcomeKind::ALL {
                    if a >= b && b >= c {
                        assert!(a >= c);
                    }
                }
            }
        }
    }

    #[test]
    fn plausibility() {
        assert!(is_plausible(&outcome(OutcomeKind::Pass)));
        assert!(!is_plausible(&outcome(OutcomeKind::TestFail)));
        assert!(!is_plausible(&outcome(OutcomeKind::Timeout)));
        assert!(!is_plausible(&outcome(OutcomeKind::CompileError)));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!(Scope::parse("5-7").unwrap(), Scope::Lines { start: 5, end: 7 });
        assert_eq!(Scope::parse("lines:3").unwrap(), Scope::Lines { start: 3, end: 3 });
        assert_eq!(
            Scope::parse("method:read_all:4-12").unwrap(),
            Scope::Method { name: "read_all".into(), start: 4, end: 12 }
        );
        assert!(Scope::parse("7-5").is_err());
        assert!(Scope::parse("0-2").is_err());
        assert!(Scope::parse("abc").is_err());
    }

    #[test]
    fn hypothesis_round_bound() {
        assert!(Hypothesis::new("h", Some(Strategy::Causal), "x = 1", "", 3, 3).is_ok());
        assert!(Hypothesis::new("h", Some(Strategy::Causal), "x = 1", "", 4, 3).is_err());
        assert!(Hypothesis::new("h", Some(Strategy::Causal), "  \n", "", 0, 3).is_err());
    }

    #[test]
    fn critique_invariants() {
        let def = Hypothesis::new("d", Some(Strategy::Causal), "x", "", 0, 3).unwrap();
        assert!(Critique::new(Strategy::Causal, &def, Verdict::Contradiction, vec![], "no").is_err());
        assert!(Critique::new(Strategy::Semantic, &def, Verdict::Contradiction, vec![], " ").is_err());
        let k = Critique::new(Strategy::Semantic, &def, Verdict::Contradiction, vec![1], "loop never runs").unwrap();
        assert_eq!(k.defender_id, "d");
    }

    #[test]
    fn config_defaults() {
        let c = Config::default();
        assert_eq!(c.max_rounds, 3);
        assert_eq!(c.max_invocations, 40);
        assert_eq!(c.temperature, 1.0);
        assert_eq!(c.test_timeout_secs, 300);
        assert_eq!(c.trace_file_guard_bytes, 10_485_760);
        assert_eq!(c.trace_prompt_budget_bytes, 20_480);
        assert_eq!(c.candidates_per_strategy, 3);
        assert_eq!(c.max_instrument_attempts, 3);
        c.validate().unwrap();
        let bad = Config { max_invocations: 0, ..Config::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn entry_len_matches_line() {
        let e = TraceEntry { step: 12, site: "loop".into(), variable: "skipped".into(), value: "0".into() };
        assert_eq!(e.serialized_len(), e.serialize_line().len());
    }
}
