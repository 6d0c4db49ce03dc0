//! Trace-guided multi-agent program repair.
//!
//! A run has three phases: [`probe`] instruments the buggy program and
//! captures a runtime trace, [`debate`] lets three strategy agents propose,
//! critique and revise patches, and [`judge`] arbitrates when no patch passes.
//! [`harness`] wires the phases together for single bugs and corpora.

pub mod debate;
pub mod exec;
pub mod harness;
pub mod judge;
pub mod llm;
pub mod model;
pub mod probe;
pub mod prompt;
pub mod sandbox;
pub mod session;

pub use exec::Executor;
pub use harness::{load_config, load_manifest, run_bug, run_corpus, CorpusReport, RunError, RunOutput};
pub use llm::{Backend, OpenAiBackend, ScriptedBackend};
pub use model::{
    BugInstance, Config, Critique, Hypothesis, OutcomeKind, ProbeStatus, RepairReport, RepairStatus, RuntimeTrace, Scope, Strategy,
    TraceEntry, ValidationOutcome, Verdict,
};
pub use prompt::Templates;
pub use session::{Event, Session};
