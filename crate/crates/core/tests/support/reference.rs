//! Straight-line reading of the repair loop, used as an oracle for the event
//! log. It keeps its own budget counter and call ordinals and talks to the
//! script directly; only the reply parsers and the sandbox are shared.

use std::collections::HashMap;

use tracerepair::llm::{RoleTag, ScriptedBackend};
use tracerepair::model::{BugInstance, Config, OutcomeKind, RepairStatus, RuntimeTrace, Strategy, Verdict};
use tracerepair::probe::{parse_plan, parse_trace, truncate_trace};
use tracerepair::prompt::{extract_fenced, parse_verdict};
use tracerepair::sandbox;
use tracerepair::session::Event;

#[derive(Clone, Debug)]
struct H {
    id: String,
    strategy: Strategy,
    patch: String,
    outcome: OutcomeKind,
}

pub struct RefRun {
    pub events: Vec<Event>,
    pub status: RepairStatus,
    pub final_patch: Option<String>,
    pub rounds_used: u32,
    pub invocations: u32,
    pub trace: RuntimeTrace,
}

struct Interp<'a> {
    bug: &'a BugInstance,
    cfg: &'a Config,
    script: &'a ScriptedBackend,
    used: u32,
    ordinals: HashMap<(RoleTag, u32), u32>,
    events: Vec<Event>,
}

fn rank(k: OutcomeKind) -> u8 {
    match k {
        OutcomeKind::CompileError => 0,
        OutcomeKind::Timeout => 1,
        OutcomeKind::TestFail => 2,
        OutcomeKind::Pass => 3,
    }
}

impl Interp<'_> {
    /// `None` when refused; `Some(None)` when the script has no answer.
    fn call(&mut self, role: RoleTag, round: u32) -> Option<Option<String>> {
        if self.used >= self.cfg.max_invocations {
            self.events.push(Event::Refused { role, round });
            return None;
        }
        self.used += 1;
        let ord = self.ordinals.entry((role, round)).or_insert(0);
        let ordinal = *ord;
        *ord += 1;
        self.events.push(Event::Call { seq: self.used, role, round, ordinal });
        Some(self.script.lookup(role, round, ordinal).map(|r| r.content.clone()))
    }

    fn validate(&mut self, id: &str, patch: &str) -> OutcomeKind {
        let k = sandbox::validate(self.bug, patch, self.cfg).expect("sandbox").kind;
        self.events.push(Event::Validate { hypothesis: id.to_string(), outcome: k });
        k
    }

    fn phase1(&mut self) -> RuntimeTrace {
        if !self.cfg.probe_enabled {
            return RuntimeTrace::empty();
        }
        let Some(Some(reply)) = self.call(RoleTag::Probe, 0) else { return RuntimeTrace::empty() };
        if parse_plan(&reply).is_empty() {
            return RuntimeTrace::empty();
        }
        let original = std::fs::read_to_string(self.bug.source_path()).unwrap();
        let mut ws = sandbox::create_workspace(self.bug).unwrap();
        let mut instrumented = None;
        for attempt in 1..=self.cfg.max_instrument_attempts {
            let Some(Some(reply)) = self.call(RoleTag::Probe, 0) else { break };
            let Some(mut text) = extract_fenced(&reply) else {
                self.events.push(Event::ProbeCompile { attempt, ok: false });
                continue;
            };
            if original.ends_with('\n') && !text.ends_with('\n') {
                text.push('\n');
            }
            ws.write_source(self.bug, &text).unwrap();
            let ok = sandbox::run_in(&ws, &self.bug.compile_cmd, self.cfg).succeeded();
            self.events.push(Event::ProbeCompile { attempt, ok });
            if ok {
                instrumented = Some(text);
                break;
            }
            ws.write_source(self.bug, &original).unwrap();
        }
        let Some(text) = instrumented else { return RuntimeTrace::empty() };
        let mut run_ws = sandbox::create_workspace(self.bug).unwrap();
        run_ws.write_source(self.bug, &text).unwrap();
        let rec = sandbox::run_in(&run_ws, &self.bug.failing_test_cmd, self.cfg);
        let full = RuntimeTrace {
            entries: parse_trace(&rec.trace_raw),
            truncated: false,
            guard_triggered: rec.guard_triggered,
            raw_bytes: rec.trace_raw.len(),
        };
        truncate_trace(&full, self.cfg.trace_prompt_budget_bytes)
    }

    fn seed(&mut self) -> Vec<H> {
        let mut hs: Vec<H> = Vec::new();
        for s in [Strategy::Defensive, Strategy::Causal, Strategy::Semantic] {
            let mut cands = Vec::new();
            for i in 1..=self.cfg.candidates_per_strategy {
                match self.call(RoleTag::Generator(s), 0) {
                    None => break,
                    Some(reply) => {
                        if let Some(patch) = reply.as_deref().and_then(extract_fenced) {
                            cands.push((format!("{}-0.{i}", s.as_str()), patch));
                        }
                    }
                }
            }
            let mut best: Option<H> = None;
            for (id, patch) in cands {
                let outcome = self.validate(&id, &patch);
                if best.as_ref().is_none_or(|b| rank(outcome) > rank(b.outcome)) {
                    best = Some(H { id, strategy: s, patch, outcome });
                }
            }
            if let Some(b) = best {
                let pass = b.outcome == OutcomeKind::Pass;
                hs.push(b);
                if pass {
                    break;
                }
            }
        }
        hs
    }

    fn run(mut self) -> RefRun {
        let r_max = self.cfg.max_rounds;
        let trace = self.phase1();
        let mut hs = self.seed();
        let done = |me: &mut Self, h: &H, round: u32, rounds_used: u32, trace: RuntimeTrace| {
            me.events.push(Event::EarlyExit { round, hypothesis: h.id.clone() });
            RefRun {
                events: std::mem::take(&mut me.events),
                status: RepairStatus::Plausible,
                final_patch: Some(h.patch.clone()),
                rounds_used,
                invocations: me.used,
                trace,
            }
        };
        let mut rounds_used = r_max;
        if !hs.is_empty() && !self.cfg.debate_enabled {
            if let Some(h) = hs.iter().find(|h| h.outcome == OutcomeKind::Pass).cloned() {
                return done(&mut self, &h, 1, 0, trace);
            }
            rounds_used = 0;
        } else if !hs.is_empty() {
            for r in 1..=r_max {
                if let Some(h) = hs.iter().find(|h| h.outcome == OutcomeKind::Pass).cloned() {
                    return done(&mut self, &h, r, r - 1, trace);
                }
                let mut objections = vec![0usize; hs.len()];
                for (a, attacker) in hs.iter().enumerate() {
                    for (d, count) in objections.iter_mut().enumerate() {
                        if a == d {
                            continue;
                        }
                        let Some(Some(reply)) = self.call(RoleTag::Critic(attacker.strategy), r) else { continue };
                        if let Some(v) = parse_verdict(&reply) {
                            if v.verdict == Verdict::Contradiction && !v.text.trim().is_empty() {
                                *count += 1;
                            }
                        }
                    }
                }
                let mut next = hs.clone();
                for (i, h) in hs.iter().enumerate() {
                    if objections[i] == 0 {
                        continue;
                    }
                    if let Some(Some(reply)) = self.call(RoleTag::Generator(h.strategy), r) {
                        if let Some(patch) = extract_fenced(&reply) {
                            next[i] = H { id: format!("{}-{r}", h.strategy.as_str()), patch, ..h.clone() };
                        }
                    }
                }
                for i in 0..next.len() {
                    if next[i].id == hs[i].id {
                        continue;
                    }
                    if next[i].patch != hs[i].patch {
                        let (id, patch) = (next[i].id.clone(), next[i].patch.clone());
                        next[i].outcome = self.validate(&id, &patch);
                    }
                }
                hs = next;
            }
            if let Some(h) = hs.iter().find(|h| h.outcome == OutcomeKind::Pass).cloned() {
                return done(&mut self, &h, r_max + 1, r_max, trace);
            }
            if let Some(Some(reply)) = self.call(RoleTag::Judge, r_max) {
                if let Some(patch) = extract_fenced(&reply) {
                    if self.validate("judge", &patch) == OutcomeKind::Pass {
                        return RefRun {
                            events: self.events,
                            status: RepairStatus::Plausible,
                            final_patch: Some(patch),
                            rounds_used: r_max,
                            invocations: self.used,
                            trace,
                        };
                    }
                }
            }
        }
        // Fallback: best outcome, then earlier strategy, then earlier round.
        let order = |s: Strategy| [Strategy::Defensive, Strategy::Causal, Strategy::Semantic].iter().position(|x| *x == s);
        let mut best: Option<&H> = None;
        for h in &hs {
            let better = match best {
                None => true,
                Some(b) => rank(h.outcome) > rank(b.outcome) || (rank(h.outcome) == rank(b.outcome) && order(h.strategy) < order(b.strategy)),
            };
            if better {
                best = Some(h);
            }
        }
        RefRun {
            status: if best.is_some() { RepairStatus::FallbackReturned } else { RepairStatus::Unresolved },
            final_patch: best.map(|h| h.patch.clone()),
            events: self.events,
            rounds_used,
            invocations: self.used,
            trace,
        }
    }
}

pub fn run(bug: &BugInstance, cfg: &Config, script: &ScriptedBackend) -> RefRun {
    Interp { bug, cfg, script, used: 0, ordinals: HashMap::new(), events: Vec::new() }.run()
}
