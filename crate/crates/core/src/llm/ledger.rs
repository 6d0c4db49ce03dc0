use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CompletionResponse, RoleTag};

/// A reserved invocation slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    /// 1-based position among all reservations of the run.
    pub seq: u32,
    pub role: RoleTag,
    pub round: u32,
    /// 0-based position among reservations with the same `(role, round)`.
    pub ordinal: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub invocations: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_estimate: f64,
}

#[derive(Debug, Default)]
struct State {
    invocations: u32,
    prompt_tokens: u64,
    completion_tokens: u64,
    ordinals: HashMap<(RoleTag, u32), u32>,
}

/// Per-bug invocation budget and token totals. All counters only grow.
#[derive(Debug)]
pub struct UsageLedger {
    max_invocations: u32,
    input_cost_per_mtok: f64,
    output_cost_per_mtok: f64,
    state: Mutex<State>,
}

impl UsageLedger {
    pub fn new(max_invocations: u32, input_cost_per_mtok: f64, output_cost_per_mtok: f64) -> Self {
        Self { max_invocations, input_cost_per_mtok, output_cost_per_mtok, state: Mutex::new(State::default()) }
    }

    pub fn with_budget(max_invocations: u32) -> Self {
        Self::new(max_invocations, 0.0, 0.0)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Atomically claims one invocation, or returns `None` once the budget is spent.
    pub fn reserve(&self, role: RoleTag, round: u32) -> Option<Ticket> {
        let mut st = self.lock();
        if st.invocations >= self.max_invocations {
            return None;
        }
        st.invocations += 1;
        let seq = st.invocations;
        let slot = st.ordinals.entry((role, round)).or_insert(0);
        let ordinal = *slot;
        *slot += 1;
        Some(Ticket { seq, role, round, ordinal })
    }

    pub fn record(&self, resp: &CompletionResponse) {
        let mut st = self.lock();
        st.prompt_tokens += resp.prompt_tokens;
        st.completion_tokens += resp.completion_tokens;
    }

    pub fn remaining(&self) -> u32 {
        self.max_invocations - self.lock().invocations
    }

    pub fn max_invocations(&self) -> u32 {
        self.max_invocations
    }

    pub fn snapshot(&self) -> Usage {
        let st = self.lock();
        let cost = st.prompt_tokens as f64 * self.input_cost_per_mtok / 1e6
            + st.completion_tokens as f64 * self.output_cost_per_mtok / 1e6;
        Usage {
            invocations: st.invocations,
            prompt_tokens: st.prompt_tokens,
            completion_tokens: st.completion_tokens,
            cost_estimate: cost,
        }
    }
}
