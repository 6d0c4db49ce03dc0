#![allow(dead_code)]

pub mod reference;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};
use tracerepair::harness::load_manifest;
use tracerepair::llm::{load_script, Backend, BackendError, CompletionResponse, PromptRequest, ScriptedBackend};
use tracerepair::model::{BugInstance, Config, OutcomeKind, ValidationOutcome};
use tracerepair::sandbox::{SandboxError, Validator};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn corpus_dir() -> PathBuf {
    fixtures().join("corpus")
}

pub fn bug(name: &str) -> BugInstance {
    load_manifest(&corpus_dir().join(name).join("manifest.toml")).expect("fixture manifest loads")
}

pub fn special_bug(name: &str) -> BugInstance {
    load_manifest(&fixtures().join("special").join(name).join("manifest.toml")).expect("fixture manifest loads")
}

pub fn scenario(name: &str) -> ScriptedBackend {
    load_script(&fixtures().join("scenarios").join(format!("{name}.jsonl"))).expect("scenario script loads")
}

/// Named scenario scripts and the corpus bug each one drives.
pub const SCENARIOS: [(&str, &str); 5] = [
    ("pass-at-init", "off-by-one-01"),
    ("pass-at-round-2", "null-guard"),
    ("exhausted-then-judge-pass", "wrong-operator"),
    ("exhausted-then-fallback", "wrong-operator"),
    ("probe-failure-static", "regression-conflict"),
];

pub fn config() -> Config {
    Config { test_timeout_secs: 30, ..Config::default() }
}

/// Validator answering from a fixed function of the patch text.
pub struct FnValidator<F>(pub F);

impl<F: Fn(&str) -> OutcomeKind + Sync> Validator for FnValidator<F> {
    fn validate(&self, patch: &str) -> Result<ValidationOutcome, SandboxError> {
        Ok(ValidationOutcome::new((self.0)(patch), "stub"))
    }
}

/// Counts the requests that actually reach the wrapped backend.
pub struct Counting<B> {
    pub inner: B,
    pub calls: AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn complete(&self, req: &PromptRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }

    fn name(&self) -> &str {
        "counting"
    }
}

/// SHA-256 over every regular file under `root`, keyed by relative path.
pub fn tree_hash(root: &Path) -> Vec<u8> {
    let mut files = BTreeMap::new();
    for entry in walk(root) {
        let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        files.insert(rel, std::fs::read(&entry).unwrap());
    }
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.finalize().to_vec()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
