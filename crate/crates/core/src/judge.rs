//! Arbitration: one-shot synthesis over the whole debate, with a ranked fallback.

use serde::{Deserialize, Serialize};

use crate::debate::{DebateOutcome, DebateResult};
use crate::llm::{Message, RoleTag};
use crate::model::{rank_outcome, DebateHistory, Hypothesis, RepairStatus, Strategy};
use crate::prompt::{extract_fenced, prose, render, render_trace};
use crate::sandbox::SandboxError;
use crate::session::{Event, RepairContext};

pub const JUDGE_ID: &str = "judge";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arbitration {
    pub status: RepairStatus,
    pub final_hypothesis: Option<Hypothesis>,
    pub judge_invoked: bool,
}

/// History in round order, each proposal followed by the critiques against it.
pub fn render_history(history: &DebateHistory) -> String {
    let mut s = String::new();
    for (k, round) in history.rounds.iter().enumerate() {
        s.push_str(&format!("### Round {k}\n"));
        for h in &round.proposals {
            let who = h.strategy.map_or("judge", Strategy::as_str);
            let outcome = h.outcome.as_ref().map_or("not validated".to_string(), |o| format!("{:?}", o.kind));
            s.push_str(&format!("Proposal {} ({who}, {outcome}):\n```\n{}\n```\n", h.id, h.patch.trim_end()));
            if !h.rationale.is_empty() {
                s.push_str(&format!("Rationale: {}\n", h.rationale));
            }
            for k in round.critiques.iter().filter(|k| k.defender_id == h.id) {
                let cited: Vec<String> = k.evidence.iter().map(|s| s.to_string()).collect();
                s.push_str(&format!("Objection from {} [steps {}]: {}\n", k.attacker, cited.join(", "), k.text));
            }
        }
        s.push('\n');
    }
    s
}

/// Exactly one backend call; `None` when the budget is gone or the reply has no code block.
pub fn synthesize(ctx: &RepairContext<'_, '_>, history: &DebateHistory, round: u32) -> Option<Hypothesis> {
    let ticket = ctx.session.reserve_logged(RoleTag::Judge, round)?;
    let t = ctx.session.templates;
    let user = render(
        &t.judge,
        &[
            ("description", &ctx.bug.description),
            ("scope", &ctx.bug.scope.to_string()),
            ("scope_text", &ctx.scope_text),
            ("trace", &render_trace(&ctx.trace)),
            ("history", &render_history(history)),
        ],
    );
    let resp = ctx.session.call(&ticket, vec![Message::system(t.judge_system.clone()), Message::user(user)])?;
    let patch = extract_fenced(&resp.content)?;
    let max_rounds = ctx.cfg().max_rounds;
    Hypothesis::new(JUDGE_ID, None, patch, prose(&resp.content), round.min(max_rounds), max_rounds).ok()
}

fn strategy_rank(h: &Hypothesis) -> usize {
    h.strategy.map_or(Strategy::ALL.len(), |s| Strategy::ALL.iter().position(|x| *x == s).unwrap_or(0))
}

/// Highest outcome wins; ties go to the earlier strategy, then the earlier round.
pub fn best_fallback(hypotheses: &[Hypothesis]) -> Option<Hypothesis> {
    let rank = |h: &Hypothesis| h.outcome.as_ref().map_or(-1, |o| rank_outcome(o) as i32);
    hypotheses
        .iter()
        .min_by(|a, b| {
            rank(b)
                .cmp(&rank(a))
                .then(strategy_rank(a).cmp(&strategy_rank(b)))
                .then(a.round.cmp(&b.round))
        })
        .cloned()
}

/// Phase 3. The judge runs only when the debate exhausted its rounds.
pub fn arbitrate(ctx: &RepairContext<'_, '_>, debate: &DebateResult) -> Result<Arbitration, SandboxError> {
    let hs = match &debate.outcome {
        DebateOutcome::PassFound(h) => {
            return Ok(Arbitration { status: RepairStatus::Plausible, final_hypothesis: Some(h.clone()), judge_invoked: false })
        }
        DebateOutcome::Exhausted(hs) => hs,
    };
    let mut judge_invoked = false;
    if ctx.cfg().debate_enabled && !hs.is_empty() {
        judge_invoked = true;
        if let Some(mut synthesized) = synthesize(ctx, &debate.history, debate.rounds_used) {
            let outcome = ctx.validator.validate(&synthesized.patch)?;
            ctx.session.log(Event::Validate { hypothesis: synthesized.id.clone(), outcome: outcome.kind });
            synthesized.outcome = Some(outcome);
            if synthesized.passed() {
                return Ok(Arbitration {
                    status: RepairStatus::Plausible,
                    final_hypothesis: Some(synthesized),
                    judge_invoked,
                });
            }
        }
    }
    Ok(match best_fallback(hs) {
        Some(h) => Arbitration { status: RepairStatus::FallbackReturned, final_hypothesis: Some(h), judge_invoked },
        None => Arbitration { status: RepairStatus::Unresolved, final_hypothesis: None, judge_invoked },
    })
}
