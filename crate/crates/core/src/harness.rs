//! Manifest ingestion, single-bug and corpus runs, and report aggregation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debate::{run_debate, DebateResult};
use crate::exec::Executor;
use crate::judge::arbitrate;
use crate::llm::Backend;
use crate::model::{BugInstance, Config, ModelError, RepairReport, RepairStatus, RuntimeTrace, Scope};
use crate::probe::run_phase1;
use crate::prompt::Templates;
use crate::sandbox::{self, SandboxError, SandboxValidator, Validator};
use crate::session::{Event, RepairContext, Session, TranscriptEntry};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SCRIPT_FILE: &str = "script.jsonl";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("environment: {0}")]
    Sandbox(#[from] SandboxError),
    #[error("{0}: the buggy program does not compile")]
    BaselineCompile(String),
    #[error("{0}: not a failing test (it passes before repair)")]
    NotFailing(String),
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error("backend: {0}")]
    Backend(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Reads a flat TOML manifest. `root` defaults to the manifest's directory
/// and relative paths resolve against it.
pub fn load_manifest(path: &Path) -> Result<BugInstance, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
    let table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| ManifestError::Syntax { path: path.to_path_buf(), message: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let string = |field: &'static str| -> Result<Option<String>, ManifestError> {
        match table.get(field) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(ManifestError::InvalidField { field, reason: format!("expected string, got {}", other.type_str()) }),
        }
    };
    let required = |field: &'static str| string(field)?.ok_or(ManifestError::MissingField(field));
    let id = required("id")?;
    let root = string("root")?.map_or_else(|| base.to_path_buf(), |r| base.join(r));
    let source_file = PathBuf::from(required("source_file")?);
    let scope = Scope::parse(&required("scope")?).map_err(|reason| ManifestError::InvalidField { field: "scope", reason })?;
    let bug = BugInstance {
        id,
        root,
        source_file,
        scope,
        compile_cmd: required("compile_cmd")?,
        failing_test_cmd: required("failing_test_cmd")?,
        regression_test_cmd: string("regression_test_cmd")?.filter(|s| !s.trim().is_empty()),
        description: string("description")?.unwrap_or_default(),
    };
    bug.validate()?;
    Ok(bug)
}

pub fn load_config(path: &Path) -> Result<Config, RunError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
    let cfg: Config = toml::from_str(&text).map_err(|e| RunError::Config(ModelError::InvalidConfig(e.to_string())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RepairReport,
    pub events: Vec<Event>,
    pub transcript: Vec<TranscriptEntry>,
    pub trace: RuntimeTrace,
    pub debate: Option<DebateResult>,
}

pub fn run_bug(bug: &BugInstance, cfg: &Config, backend: &dyn Backend, templates: &Templates) -> Result<RunOutput, RunError> {
    run_bug_with(bug, cfg, backend, templates, Executor::new(cfg.parallelism), None)
}

/// Full three-phase run. `validator` defaults to sandbox validation of `bug`.
pub fn run_bug_with(
    bug: &BugInstance,
    cfg: &Config,
    backend: &dyn Backend,
    templates: &Templates,
    exec: Executor,
    validator: Option<&dyn Validator>,
) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let started = Instant::now();
    let baseline = sandbox::run_baseline(bug, cfg)?;
    let failing = match baseline.failing {
        Some(rec) => rec,
        None => return Err(RunError::BaselineCompile(bug.id.clone())),
    };
    if failing.succeeded() {
        return Err(RunError::NotFailing(bug.id.clone()));
    }
    let source = std::fs::read_to_string(bug.source_path())
        .map_err(|source| RunError::Io { path: bug.source_path(), source })?;
    let scope_text = sandbox::scope_text(&source, bug).unwrap_or_default();

    let session = Session::with_executor(cfg, templates, backend, exec);
    let (trace, probe_status) = run_phase1(bug, &failing, &session);

    let sandbox_validator = SandboxValidator { bug, cfg };
    let ctx = RepairContext {
        bug,
        source,
        scope_text,
        failing_output: failing.excerpt(4000),
        trace: trace.clone(),
        session: &session,
        validator: validator.unwrap_or(&sandbox_validator),
    };
    let debate = run_debate(&ctx)?;
    let arbitration = arbitrate(&ctx, &debate)?;

    let usage = session.ledger.snapshot();
    let final_hypothesis = arbitration.final_hypothesis;
    let report = RepairReport {
        bug_id: bug.id.clone(),
        status: arbitration.status,
        final_outcome: final_hypothesis.as_ref().and_then(|h| h.outcome_kind()),
        final_patch: final_hypothesis.map(|h| h.patch),
        rounds_used: debate.rounds_used,
        invocations: usage.invocations,
        prompt_tokens: usage.prompt_tokens,
        completion_tokens: usage.completion_tokens,
        cost_estimate: usage.cost_estimate,
        wall_secs: started.elapsed().as_secs_f64(),
        probe_status,
    };
    Ok(RunOutput { report, events: session.events(), transcript: session.transcript(), trace, debate: Some(debate) })
}

/// Report with wall time zeroed, for byte-level comparison of runs.
pub fn normalized(report: &RepairReport) -> RepairReport {
    RepairReport { wall_secs: 0.0, ..report.clone() }
}

pub fn report_json(report: &RepairReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

/// Writes the report to `out` and the transcript and event log next to it.
pub fn write_outputs(out: &Path, run: &RunOutput) -> Result<(), RunError> {
    let write = |path: PathBuf, text: String| std::fs::write(&path, text).map_err(|source| RunError::Io { path, source });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| RunError::Io { path: parent.to_path_buf(), source })?;
    }
    write(out.to_path_buf(), report_json(&run.report) + "\n")?;
    write(sibling(out, "transcript.jsonl"), jsonl(&run.transcript))?;
    write(sibling(out, "events.jsonl"), jsonl(&run.events))?;
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitTotals {
    pub count: usize,
    pub mean_tokens: f64,
    pub mean_cost: f64,
    pub mean_wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusTotals {
    pub bugs: usize,
    pub plausible: usize,
    pub mean_tokens: f64,
    pub mean_cost: f64,
    pub mean_wall_secs: f64,
    pub resolved: SplitTotals,
    pub unresolved: SplitTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugFailure {
    pub manifest: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub per_bug: Vec<RepairReport>,
    pub failures: Vec<BugFailure>,
    pub totals: CorpusTotals,
}

fn split(reports: &[&RepairReport]) -> SplitTotals {
    let n = reports.len();
    if n == 0 {
        return SplitTotals::default();
    }
    let mean = |f: &dyn Fn(&RepairReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n as f64;
    SplitTotals {
        count: n,
        mean_tokens: mean(&|r| r.total_tokens() as f64),
        mean_cost: mean(&|r| r.cost_estimate),
        mean_wall_secs: mean(&|r| r.wall_secs),
    }
}

/// Aggregates are a pure function of the per-bug reports.
pub fn compute_totals(per_bug: &[RepairReport]) -> CorpusTotals {
    let all: Vec<&RepairReport> = per_bug.iter().collect();
    let (resolved, unresolved): (Vec<&RepairReport>, Vec<&RepairReport>) =
        per_bug.iter().partition(|r| r.status == RepairStatus::Plausible);
    let overall = split(&all);
    CorpusTotals {
        bugs: per_bug.len(),
        plausible: resolved.len(),
        mean_tokens: overall.mean_tokens,
        mean_cost: overall.mean_cost,
        mean_wall_secs: overall.mean_wall_secs,
        resolved: split(&resolved),
        unresolved: split(&unresolved),
    }
}

/// Sub-directories of `dir` that hold a manifest, sorted by path.
pub fn discover_manifests(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let entries = std::fs::read_dir(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path().join(MANIFEST_FILE))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(RunError::Corpus(format!("no `{MANIFEST_FILE}` found under {}", dir.display())));
    }
    Ok(found)
}

pub type BackendFactory<'f> = dyn Fn(&Path, &BugInstance) -> Result<Box<dyn Backend>, String> + Sync + 'f;

pub struct CorpusRun {
    pub report: CorpusReport,
    pub outputs: Vec<(PathBuf, RunOutput)>,
}

/// Runs every bug independently with its own ledger. With `parallelism > 1`
/// bugs run concurrently and each bug runs serially inside.
pub fn run_corpus(dir: &Path, cfg: &Config, make_backend: &BackendFactory<'_>, templates: &Templates) -> Result<CorpusRun, RunError> {
    cfg.validate()?;
    let manifests = discover_manifests(dir)?;
    let outer = Executor::new(cfg.parallelism);
    let results = outer.map(&manifests, |path| -> Result<RunOutput, RunError> {
        let bug = load_manifest(path)?;
        let backend = make_backend(path, &bug).map_err(RunError::Backend)?;
        run_bug_with(&bug, cfg, backend.as_ref(), templates, Executor::serial(), None)
    });
    let mut per_bug = Vec::new();
    let mut failures = Vec::new();
    let mut outputs = Vec::new();
    for (path, result) in manifests.into_iter().zip(results) {
        match result {
            Ok(out) => {
                per_bug.push(out.report.clone());
                outputs.push((path, out));
            }
            Err(e) => {
                tracing::warn!(manifest = %path.display(), "bug failed: {e}");
                failures.push(BugFailure { manifest: path, error: e.to_string() });
            }
        }
    }
    let totals = compute_totals(&per_bug);
    Ok(CorpusRun { report: CorpusReport { per_bug, failures, totals }, outputs })
}

/// Writes the corpus report to `out` and every bug's outputs under
/// `<out stem>.bugs/`.
pub fn write_corpus(out: &Path, run: &CorpusRun) -> Result<(), RunError> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| RunError::Io { path: parent.to_path_buf(), source })?;
    }
    let text = serde_json::to_string_pretty(&run.report).expect("corpus report serializes") + "\n";
    std::fs::write(out, text).map_err(|source| RunError::Io { path: out.to_path_buf(), source })?;
    let bugs_dir = sibling(out, "bugs");
    std::fs::create_dir_all(&bugs_dir).map_err(|source| RunError::Io { path: bugs_dir.clone(), source })?;
    for (_, output) in &run.outputs {
        write_outputs(&bugs_dir.join(format!("{}.json", output.report.bug_id)), output)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProbeStatus;

    fn report(status: RepairStatus, tokens: u64, cost: f64, wall: f64) -> RepairReport {
        RepairReport {
            bug_id: "b".into(),
            status,
            final_patch: None,
            final_outcome: None,
            rounds_used: 0,
            invocations: 1,
            prompt_tokens: tokens,
            completion_tokens: 0,
            cost_estimate: cost,
            wall_secs: wall,
            probe_status: ProbeStatus::Success,
        }
    }

    #[test]
    fn totals_are_means() {
        let rs = vec![
            report(RepairStatus::Plausible, 100, 1.0, 2.0),
            report(RepairStatus::FallbackReturned, 300, 3.0, 4.0),
            report(RepairStatus::Plausible, 200, 2.0, 6.0),
        ];
        let t = compute_totals(&rs);
        assert_eq!(t.bugs, 3);
        assert_eq!(t.plausible, 2);
        assert_eq!(t.mean_tokens, 200.0);
        assert_eq!(t.mean_cost, 2.0);
        assert_eq!(t.mean_wall_secs, 4.0);
        assert_eq!(t.resolved.count, 2);
        assert_eq!(t.resolved.mean_tokens, 150.0);
        assert_eq!(t.unresolved.mean_tokens, 300.0);
        assert_eq!(compute_totals(&[]), CorpusTotals::default());
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        std::fs::write(dir.join("prog.py"), "a = 1\nb = 2\nc = 3\nd = 4\n").unwrap();
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            "id = \"m\"\nsource_file = \"prog.py\"\nscope = \"2-3\"\ncompile_cmd = \"true\"\nfailing_test_cmd = \"false\"\n",
        );
        let bug = load_manifest(&p).unwrap();
        assert_eq!(bug.root, dir.path());
        assert_eq!(bug.scope, Scope::Lines { start: 2, end: 3 });
        assert!(bug.regression_test_cmd.is_none());
    }

    #[test]
    fn manifest_rejections_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            "id = \"m\"\nsource_file = \"prog.py\"\nscope = \"5-7\"\ncompile_cmd = \"true\"\nfailing_test_cmd = \"false\"\n",
        );
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("scope"), "{err}");
        let p = write_manifest(dir.path(), "id = \"m\"\nsource_file = \"prog.py\"\nscope = \"1\"\nfailing_test_cmd = \"false\"\n");
        assert!(matches!(load_manifest(&p), Err(ManifestError::MissingField("compile_cmd"))));
        let p = write_manifest(
            dir.path(),
            "id = \"m\"\nsource_file = \"prog.py\"\nscope = 3\ncompile_cmd = \"true\"\nfailing_test_cmd = \"false\"\n",
        );
        assert!(matches!(load_manifest(&p), Err(ManifestError::InvalidField { field: "scope", .. })));
        let p = write_manifest(
            dir.path(),
            "id = \"m\"\nsource_file = \"nope.py\"\nscope = \"1\"\ncompile_cmd = \"true\"\nfailing_test_cmd = \"false\"\n",
        );
        assert!(load_manifest(&p).unwrap_err().to_string().contains("source_file"));
    }

    #[test]
    fn empty_corpus_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(discover_manifests(dir.path()), Err(RunError::Corpus(_))));
    }

    #[test]
    fn config_file_partial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "max_rounds = 2\ninput_cost_per_mtok = 0.28\n").unwrap();
        let c = load_config(&p).unwrap();
        assert_eq!(c.max_rounds, 2);
        assert_eq!(c.max_invocations, 40);
        std::fs::write(&p, "max_roundz = 2\n").unwrap();
        assert!(load_config(&p).is_err());
        std::fs::write(&p, "max_rounds = 0\n").unwrap();
        assert!(load_config(&p).is_err());
    }
}
