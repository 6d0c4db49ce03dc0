//! Multi-strategy debate: Best-of-N seeding followed by rounds of
//! trace-grounded critique and update.
//!
//! Budget reservations and the event log always follow the straight-line
//! order (strategy by strategy, pair by pair); only the backend calls and
//! sandbox validations in between are fanned out to the executor.

use serde::{Deserialize, Serialize};

use crate::llm::{Message, RoleTag, Ticket};
use crate::model::{rank_outcome, Critique, DebateHistory, DebateRound, Hypothesis, Strategy, Verdict};
use crate::prompt::{extract_fenced, parse_verdict, prose, render, render_trace};
use crate::sandbox::SandboxError;
use crate::session::{Event, RepairContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DebateOutcome {
    PassFound(Hypothesis),
    Exhausted(Vec<Hypothesis>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateResult {
    pub outcome: DebateOutcome,
    pub history: DebateHistory,
    pub rounds_used: u32,
}

impl DebateResult {
    /// Final hypothesis set (the passing one alone for `PassFound`).
    pub fn hypotheses(&self) -> Vec<Hypothesis> {
        match &self.outcome {
            DebateOutcome::PassFound(h) => vec![h.clone()],
            DebateOutcome::Exhausted(hs) => hs.clone(),
        }
    }
}

pub fn candidate_id(strategy: Strategy, index: u32) -> String {
    format!("{strategy}-0.{index}")
}

pub fn update_id(strategy: Strategy, round: u32) -> String {
    format!("{strategy}-{round}")
}

fn strategy_of(h: &Hypothesis) -> Strategy {
    h.strategy.expect("debate hypotheses carry a strategy")
}

/// Reserves up to `n` generation calls, stopping at the first refusal.
fn reserve_generation(ctx: &RepairContext<'_, '_>, strategy: Strategy, n: u32) -> (Vec<Ticket>, bool) {
    let mut tickets = Vec::new();
    for _ in 0..n {
        match ctx.session.reserve(RoleTag::Generator(strategy), 0) {
            Some(t) => tickets.push(t),
            None => return (tickets, true),
        }
    }
    (tickets, false)
}

fn log_generation(ctx: &RepairContext<'_, '_>, strategy: Strategy, tickets: &[Ticket], refused: bool) {
    for t in tickets {
        ctx.session.log_reservation(t.role, t.round, Some(t));
    }
    if refused {
        ctx.session.log_reservation(RoleTag::Generator(strategy), 0, None);
    }
}

fn generation_messages(ctx: &RepairContext<'_, '_>, strategy: Strategy) -> Vec<Message> {
    let t = ctx.session.templates;
    let user = render(
        &t.generate,
        &[
            ("description", &ctx.bug.description),
            ("source", &ctx.source),
            ("scope", &ctx.bug.scope.to_string()),
            ("scope_text", &ctx.scope_text),
            ("failing_test_output", &ctx.failing_output),
            ("trace", &render_trace(&ctx.trace)),
        ],
    );
    vec![Message::system(t.strategy(strategy).to_string()), Message::user(user)]
}

fn parse_patch(
    content: &str,
    id: String,
    strategy: Option<Strategy>,
    round: u32,
    max_rounds: u32,
) -> Option<Hypothesis> {
    let patch = extract_fenced(content)?;
    Hypothesis::new(id, strategy, patch, prose(content), round, max_rounds).ok()
}

fn dispatch_generation(ctx: &RepairContext<'_, '_>, strategy: Strategy, tickets: &[Ticket]) -> Vec<Hypothesis> {
    let messages = generation_messages(ctx, strategy);
    let max_rounds = ctx.cfg().max_rounds;
    let replies = ctx.session.exec.map(tickets, |t| ctx.session.call(t, messages.clone()));
    replies
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let id = candidate_id(strategy, i as u32 + 1);
            let h = parse_patch(&r?.content, id, Some(strategy), 0, max_rounds);
            if h.is_none() {
                tracing::warn!(%strategy, "dropping unparseable candidate {}", i + 1);
            }
            h
        })
        .collect()
}

/// Issues up to `n` generation calls for `strategy`; unparseable replies are
/// dropped but still charged.
pub fn generate_candidates(ctx: &RepairContext<'_, '_>, strategy: Strategy, n: u32) -> Vec<Hypothesis> {
    let (tickets, refused) = reserve_generation(ctx, strategy, n);
    log_generation(ctx, strategy, &tickets, refused);
    dispatch_generation(ctx, strategy, &tickets)
}

/// Index of the best outcome; the earliest wins ties. Unvalidated entries rank lowest.
pub fn best_index(candidates: &[Hypothesis]) -> Option<usize> {
    let rank = |h: &Hypothesis| h.outcome.as_ref().map_or(-1, |o| rank_outcome(o) as i32);
    let mut best: Option<usize> = None;
    for (i, h) in candidates.iter().enumerate() {
        if best.is_none_or(|b| rank(h) > rank(&candidates[b])) {
            best = Some(i);
        }
    }
    best
}

/// Validates every candidate (in parallel when the executor allows), stores
/// the outcomes and returns them in input order.
pub fn validate_all(ctx: &RepairContext<'_, '_>, candidates: &mut [Hypothesis]) -> Result<(), SandboxError> {
    let outcomes = ctx.session.exec.map(candidates, |h| ctx.validator.validate(&h.patch));
    for (h, o) in candidates.iter_mut().zip(outcomes) {
        h.outcome = Some(o?);
    }
    Ok(())
}

fn log_validations<'h>(ctx: &RepairContext<'_, '_>, hs: impl IntoIterator<Item = &'h Hypothesis>) {
    for h in hs {
        if let Some(o) = &h.outcome {
            ctx.session.log(Event::Validate { hypothesis: h.id.clone(), outcome: o.kind });
        }
    }
}

/// Pre-evaluates the candidates and returns the highest ranked one.
pub fn select_best(ctx: &RepairContext<'_, '_>, mut candidates: Vec<Hypothesis>) -> Result<Option<Hypothesis>, SandboxError> {
    validate_all(ctx, &mut candidates)?;
    log_validations(ctx, &candidates);
    Ok(best_index(&candidates).map(|i| candidates.swap_remove(i)))
}

fn critique_messages(ctx: &RepairContext<'_, '_>, attacker: &Hypothesis, defender: &Hypothesis) -> Vec<Message> {
    let t = ctx.session.templates;
    let user = render(
        &t.critique,
        &[
            ("attacker_patch", &attacker.patch),
            ("defender_patch", &defender.patch),
            ("trace", &render_trace(&ctx.trace)),
            ("scope", &ctx.bug.scope.to_string()),
        ],
    );
    vec![Message::system(t.strategy(strategy_of(attacker)).to_string()), Message::user(user)]
}

fn critique_with(
    ctx: &RepairContext<'_, '_>,
    ticket: &Ticket,
    attacker: &Hypothesis,
    defender: &Hypothesis,
) -> Option<Critique> {
    let resp = ctx.session.call(ticket, critique_messages(ctx, attacker, defender))?;
    let Some(reply) = parse_verdict(&resp.content) else {
        tracing::warn!(attacker = %attacker.id, defender = %defender.id, "critic reply has no verdict line");
        return None;
    };
    if reply.verdict != Verdict::Contradiction {
        return None;
    }
    let evidence = reply.evidence.into_iter().filter(|s| ctx.trace.entry(*s).is_some()).collect();
    match Critique::new(strategy_of(attacker), defender, reply.verdict, evidence, reply.text) {
        Ok(k) => Some(k),
        Err(e) => {
            tracing::warn!("discarding critique: {e}");
            None
        }
    }
}

/// One attacker/defender exchange. Only a CONTRADICTION verdict yields a critique.
pub fn critique(ctx: &RepairContext<'_, '_>, attacker: &Hypothesis, defender: &Hypothesis, round: u32) -> Option<Critique> {
    if attacker.id == defender.id {
        return None;
    }
    let ticket = ctx.session.reserve_logged(RoleTag::Critic(strategy_of(attacker)), round)?;
    critique_with(ctx, &ticket, attacker, defender)
}

fn update_messages(ctx: &RepairContext<'_, '_>, defender: &Hypothesis, critiques: &[Critique]) -> Vec<Message> {
    let t = ctx.session.templates;
    let objections: String = critiques
        .iter()
        .map(|k| {
            let cited: Vec<String> = k.evidence.iter().map(|s| s.to_string()).collect();
            if cited.is_empty() {
                format!("- from {}: {}\n", k.attacker, k.text)
            } else {
                format!("- from {} (trace steps {}): {}\n", k.attacker, cited.join(", "), k.text)
            }
        })
        .collect();
    let user = render(
        &t.update,
        &[
            ("scope", &ctx.bug.scope.to_string()),
            ("patch", &defender.patch),
            ("critiques", &objections),
            ("trace", &render_trace(&ctx.trace)),
        ],
    );
    vec![Message::system(t.strategy(strategy_of(defender)).to_string()), Message::user(user)]
}

fn update_with(
    ctx: &RepairContext<'_, '_>,
    ticket: Option<&Ticket>,
    defender: &Hypothesis,
    critiques: &[Critique],
    round: u32,
) -> Hypothesis {
    let Some(ticket) = ticket else { return defender.clone() };
    let strategy = strategy_of(defender);
    let Some(resp) = ctx.session.call(ticket, update_messages(ctx, defender, critiques)) else {
        return defender.clone();
    };
    parse_patch(&resp.content, update_id(strategy, round), Some(strategy), round, ctx.cfg().max_rounds)
        .unwrap_or_else(|| defender.clone())
}

/// Refines `defender` against its critiques. With no critiques the defender
/// is returned as is and nothing is charged.
pub fn update(ctx: &RepairContext<'_, '_>, defender: &Hypothesis, critiques: &[Critique], round: u32) -> Hypothesis {
    if critiques.is_empty() {
        return defender.clone();
    }
    let ticket = ctx.session.reserve_logged(RoleTag::Generator(strategy_of(defender)), round);
    update_with(ctx, ticket.as_ref(), defender, critiques, round)
}

/// Seeds one hypothesis per strategy, in strategy order. Seeding stops as
/// soon as a strategy's best candidate passes, so no generation happens after
/// a plausible patch is known. Candidates of one strategy are generated and
/// validated concurrently.
fn initialize(ctx: &RepairContext<'_, '_>) -> Result<Vec<Hypothesis>, SandboxError> {
    let n = ctx.cfg().candidates_per_strategy;
    let mut hs = Vec::new();
    for &s in Strategy::ALL.iter() {
        let candidates = generate_candidates(ctx, s, n);
        match select_best(ctx, candidates)? {
            Some(h) => {
                let passed = h.passed();
                hs.push(h);
                if passed {
                    break;
                }
            }
            None => tracing::warn!(strategy = %s, "no usable candidates"),
        }
    }
    Ok(hs)
}

fn early_exit(ctx: &RepairContext<'_, '_>, hs: &[Hypothesis], round: u32) -> Option<Hypothesis> {
    let h = hs.iter().find(|h| h.passed())?;
    ctx.session.log(Event::EarlyExit { round, hypothesis: h.id.clone() });
    Some(h.clone())
}

/// One critique/update round against a snapshot of `hs`. Returns the new set
/// and the critiques raised.
fn debate_round(
    ctx: &RepairContext<'_, '_>,
    hs: &[Hypothesis],
    round: u32,
) -> Result<(Vec<Hypothesis>, Vec<Critique>), SandboxError> {
    let session = ctx.session;
    let mut pairs = Vec::new();
    for (a, atk) in hs.iter().enumerate() {
        for (d, _) in hs.iter().enumerate() {
            if a != d {
                let role = RoleTag::Critic(strategy_of(atk));
                let ticket = session.reserve_logged(role, round);
                pairs.push((a, d, ticket));
            }
        }
    }
    let verdicts = session.exec.map(&pairs, |(a, d, ticket)| {
        ticket.as_ref().and_then(|t| critique_with(ctx, t, &hs[*a], &hs[*d]))
    });
    let critiques: Vec<Critique> = verdicts.into_iter().flatten().collect();

    let mut jobs = Vec::new();
    for h in hs {
        let mine: Vec<Critique> = critiques.iter().filter(|k| k.defender_id == h.id).cloned().collect();
        let ticket = if mine.is_empty() {
            None
        } else {
            session.reserve_logged(RoleTag::Generator(strategy_of(h)), round)
        };
        jobs.push((h, mine, ticket));
    }
    let mut updated = session.exec.map(&jobs, |(h, mine, ticket)| {
        if mine.is_empty() {
            (*h).clone()
        } else {
            update_with(ctx, ticket.as_ref(), h, mine, round)
        }
    });

    // Only replacements whose patch changed are re-validated.
    let changed: Vec<usize> = updated
        .iter()
        .zip(hs)
        .enumerate()
        .filter(|(_, (new, old))| new.id != old.id)
        .map(|(i, _)| i)
        .collect();
    for &i in &changed {
        if updated[i].patch == hs[i].patch {
            updated[i].outcome = hs[i].outcome.clone();
        }
    }
    let to_validate: Vec<usize> = changed.into_iter().filter(|&i| updated[i].outcome.is_none()).collect();
    let outcomes = session.exec.map(&to_validate, |&i| ctx.validator.validate(&updated[i].patch));
    for (&i, o) in to_validate.iter().zip(outcomes) {
        updated[i].outcome = Some(o?);
    }
    log_validations(ctx, to_validate.iter().map(|&i| &updated[i]));
    Ok((updated, critiques))
}

/// Phase 2.
pub fn run_debate(ctx: &RepairContext<'_, '_>) -> Result<DebateResult, SandboxError> {
    let max_rounds = ctx.cfg().max_rounds;
    let mut hs = initialize(ctx)?;
    let mut history =
        DebateHistory { rounds: vec![DebateRound { proposals: hs.clone(), critiques: vec![] }], trace: ctx.trace.clone() };
    if hs.is_empty() {
        return Ok(DebateResult { outcome: DebateOutcome::Exhausted(hs), history, rounds_used: max_rounds });
    }
    if !ctx.cfg().debate_enabled {
        let outcome = match early_exit(ctx, &hs, 1) {
            Some(h) => DebateOutcome::PassFound(h),
            None => DebateOutcome::Exhausted(hs),
        };
        return Ok(DebateResult { outcome, history, rounds_used: 0 });
    }
    for round in 1..=max_rounds {
        if let Some(h) = early_exit(ctx, &hs, round) {
            return Ok(DebateResult { outcome: DebateOutcome::PassFound(h), history, rounds_used: round - 1 });
        }
        let (next, critiques) = debate_round(ctx, &hs, round)?;
        if let Some(last) = history.rounds.last_mut() {
            last.critiques = critiques;
        }
        hs = next;
        history.rounds.push(DebateRound { proposals: hs.clone(), critiques: vec![] });
    }
    if let Some(h) = early_exit(ctx, &hs, max_rounds + 1) {
        return Ok(DebateResult { outcome: DebateOutcome::PassFound(h), history, rounds_used: max_rounds });
    }
    Ok(DebateResult { outcome: DebateOutcome::Exhausted(hs), history, rounds_used: max_rounds })
}
