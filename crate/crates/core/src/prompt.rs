//! Prompt templates and response parsing.
//!
//! Templates are plain text with `{name}` placeholders. The bundled set is
//! compiled in; a directory with files of the same names overrides any of them.

use std::collections::HashMap;
use std::path::Path;

use crate::model::{RuntimeTrace, Strategy, Verdict};

macro_rules! bundled {
    ($($field:ident => $file:literal),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct Templates {
            $(pub $field: String,)*
        }

        impl Templates {
            pub fn bundled() -> Self {
                Self { $($field: include_str!(concat!("../templates/", $file)).to_string(),)* }
            }

            /// Bundled templates with any same-named files in `dir` substituted.
            pub fn load(dir: &Path) -> std::io::Result<Self> {
                let mut t = Self::bundled();
                $(
                    let path = dir.join($file);
                    if path.exists() {
                        t.$field = std::fs::read_to_string(&path)?;
                    }
                )*
                Ok(t)
            }
        }
    };
}

bundled! {
    probe_system => "probe_system.txt",
    probe_identify => "probe_identify.txt",
    probe_instrument => "probe_instrument.txt",
    probe_retry => "probe_retry.txt",
    strategy_defensive => "strategy_defensive.txt",
    strategy_causal => "strategy_causal.txt",
    strategy_semantic => "strategy_semantic.txt",
    generate => "generate.txt",
    critique => "critique.txt",
    update => "update.txt",
    judge_system => "judge_system.txt",
    judge => "judge.txt",
}

impl Templates {
    pub fn strategy(&self, s: Strategy) -> &str {
        match s {
            Strategy::Defensive => &self.strategy_defensive,
            Strategy::Causal => &self.strategy_causal,
            Strategy::Semantic => &self.strategy_semantic,
        }
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Substitutes `{name}` placeholders in one pass; substituted text is never rescanned.
/// Unknown placeholders and other braces are left as they are.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let map: HashMap<&str, &str> = vars.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if map.contains_key(&after[..close]) => {
                out.push_str(map[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders a trace for a prompt, with one-line markers for truncation and the capture guard.
pub fn render_trace(trace: &RuntimeTrace) -> String {
    if trace.is_empty() {
        return "(no runtime trace available; reason from the code and test output)".into();
    }
    let mut s = String::new();
    if trace.truncated {
        s.push_str("... earlier entries omitted; showing the final part of the execution\n");
    }
    s.push_str(&trace.serialize());
    if trace.guard_triggered {
        s.push_str("... capture limit reached; the program logged more than was recorded\n");
    }
    s
}

/// Body of the first fenced code block, if any.
pub fn extract_fenced(text: &str) -> Option<String> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim_start().starts_with("```"))?;
    let mut body = Vec::new();
    for line in lines {
        if line.trim_start().starts_with("```") {
            let joined = body.join("\n");
            return (!joined.trim().is_empty()).then_some(joined);
        }
        body.push(line);
    }
    None
}

/// Text outside fenced blocks, trimmed.
pub fn prose(text: &str) -> String {
    let mut out = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            continue;
        }
        if !inside {
            out.push(line);
        }
    }
    out.join("\n").trim().to_string()
}

/// Parsed critic reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictReply {
    pub verdict: Verdict,
    pub evidence: Vec<u64>,
    pub text: String,
}

/// The first line must read `VERDICT: CONTRADICTION` or `VERDICT: CONSISTENT`.
pub fn parse_verdict(text: &str) -> Option<VerdictReply> {
    let mut lines = text.lines();
    let first = lines.next()?.trim();
    let verdict = match first {
        "VERDICT: CONTRADICTION" => Verdict::Contradiction,
        "VERDICT: CONSISTENT" => Verdict::Consistent,
        _ => return None,
    };
    let mut evidence = Vec::new();
    let mut body = Vec::new();
    for line in lines {
        match line.trim().strip_prefix("EVIDENCE:") {
            Some(list) => evidence.extend(list.split(',').filter_map(|s| s.trim().parse::<u64>().ok())),
            None => body.push(line),
        }
    }
    Some(VerdictReply { verdict, evidence, text: body.join("\n").trim().to_string() })
}
