//! Execution traces: structured events, run results, the essential-trace
//! projection, and equivalence comparison between two runs.
//!
//! Traces serialize as one JSON object per line with a fixed key order, so a
//! fixed seed reproduces a byte-identical trace file.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::value::TokenValue;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TraceEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: TraceKind,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "kind")]
pub enum TraceKind {
    ActivityActivated {
        instance: u64,
        activity: String,
    },
    ActivityInvoked {
        instance: u64,
        args: Vec<TokenValue>,
    },
    TokenCreated {
        instance: u64,
        token: u64,
        queue: String,
        value: TokenValue,
        origin: TokenOrigin,
    },
    TokenMoved {
        instance: u64,
        token: u64,
        from: String,
        to: String,
    },
    GroupFormed {
        instance: u64,
        group: u64,
        members: Vec<u64>,
    },
    ActionStarted {
        instance: u64,
        action: String,
        firing: u64,
        consumed: Vec<TokenRef>,
    },
    ActionCompleted {
        instance: u64,
        action: String,
        firing: u64,
        produced: Vec<TokenRef>,
        detached: bool,
        post_termination: bool,
    },
    SubActivityInvoked {
        instance: u64,
        action: String,
        firing: u64,
        sub_instance: u64,
    },
    TokenDeleted {
        instance: u64,
        token: u64,
        queue: String,
        reason: String,
    },
    ActivityCompleted {
        instance: u64,
    },
    ActivityTerminated {
        instance: u64,
    },
    ExecutionError {
        instance: Option<u64>,
        message: String,
    },
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TokenRef {
    pub token: u64,
    pub value: TokenValue,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "origin")]
pub enum TokenOrigin {
    /// Seeded by an invocation (parameter values or initial-node control tokens).
    Invoke,
    /// Copied from another token by a push engine.
    PushCopy { parent: u64 },
    /// Collapsed from an all-control join selection.
    PullControl { parents: Vec<u64> },
    /// Produced by an action firing.
    ActionOutput { firing: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RunStatus {
    Completed,
    QuiescentStuck,
    Error,
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Completed => 0,
            RunStatus::QuiescentStuck => 3,
            RunStatus::Error => 4,
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => write!(f, "completed"),
            RunStatus::QuiescentStuck => write!(f, "quiescent-stuck"),
            RunStatus::Error => write!(f, "error"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub status: RunStatus,
    /// Output parameter values, positional; `None` when a queue stayed empty.
    pub outputs: Vec<Option<TokenValue>>,
    pub trace: Vec<TraceEvent>,
    /// First execution error, when `status == Error`.
    pub error: Option<String>,
}

/// Write a trace as JSON lines with stable key order.
pub fn write_trace<W: Write>(mut w: W, trace: &[TraceEvent]) -> std::io::Result<()> {
    for event in trace {
        let line = serde_json::to_string(event).expect("trace events serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Essential projection and comparison
// ---------------------------------------------------------------------------

/// One action firing with its consumed and produced token value sets and its
/// causal ancestors (firings whose outputs this firing consumed).
#[derive(Clone, Debug)]
pub struct Firing {
    pub activity: String,
    pub action: String,
    pub seq: u64,
    pub consumed: Vec<TokenValue>,
    pub produced: Vec<TokenValue>,
    pub deps: Vec<usize>,
}

/// Project a full trace onto its essential events: action starts with the
/// token sets they consumed and produced, ordered causally through token
/// lineage rather than by step index.
pub fn essential_projection(trace: &[TraceEvent]) -> Vec<Firing> {
    // provenance of a token: the set of projection indices that produced it
    let mut provenance: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    // firing id (machine-level) -> projection index
    let mut firing_index: BTreeMap<u64, usize> = BTreeMap::new();
    // instance -> provenance of its seeded tokens (the invoking firing)
    let mut instance_seed: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut instance_activity: BTreeMap<u64, String> = BTreeMap::new();
    let mut firings: Vec<Firing> = Vec::new();

    for event in trace {
        match &event.kind {
            TraceKind::ActivityActivated { instance, activity } => {
                instance_activity.insert(*instance, activity.clone());
            }
            TraceKind::SubActivityInvoked { firing, sub_instance, .. } => {
                if let Some(&idx) = firing_index.get(firing) {
                    instance_seed.insert(*sub_instance, vec![idx]);
                }
            }
            TraceKind::TokenCreated { instance, token, origin, .. } => {
                let prov = match origin {
                    TokenOrigin::Invoke => {
                        instance_seed.get(instance).cloned().unwrap_or_default()
                    }
                    TokenOrigin::PushCopy { parent } => {
                        provenance.get(parent).cloned().unwrap_or_default()
                    }
                    TokenOrigin::PullControl { parents } => {
                        let mut p = Vec::new();
                        for parent in parents {
                            p.extend(provenance.get(parent).cloned().unwrap_or_default());
                        }
                        p.sort_unstable();
                        p.dedup();
                        p
                    }
                    TokenOrigin::ActionOutput { firing } => {
                        firing_index.get(firing).map(|&i| vec![i]).unwrap_or_default()
                    }
                };
                provenance.insert(*token, prov);
            }
            TraceKind::ActionStarted { instance, action, firing, consumed } => {
                let mut deps = Vec::new();
                for c in consumed {
                    deps.extend(provenance.get(&c.token).cloned().unwrap_or_default());
                }
                deps.sort_unstable();
                deps.dedup();
                let idx = firings.len();
                firing_index.insert(*firing, idx);
                firings.push(Firing {
                    activity: instance_activity
                        .get(instance)
                        .cloned()
                        .unwrap_or_default(),
                    action: action.clone(),
                    seq: event.seq,
                    consumed: consumed.iter().map(|c| c.value.clone()).collect(),
                    produced: Vec::new(),
                    deps,
                });
            }
            TraceKind::ActionCompleted { firing, produced, detached, .. } => {
                if *detached {
                    continue;
                }
                if let Some(&idx) = firing_index.get(firing) {
                    if firings[idx].produced.is_empty() {
                        firings[idx].produced =
                            produced.iter().map(|p| p.value.clone()).collect();
                    }
                }
            }
            _ => {}
        }
    }
    firings
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Equivalent,
    Divergent,
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceComparison {
    pub verdict: Verdict,
    /// Sequence numbers of the first unmatched firing on each side (when
    /// present on that side) and a human-readable explanation.
    pub first_divergence: Option<Divergence>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Divergence {
    pub left_seq: Option<u64>,
    pub right_seq: Option<u64>,
    pub explanation: String,
}

impl TraceComparison {
    pub fn is_equivalent(&self) -> bool {
        self.verdict == Verdict::Equivalent
    }
}

/// 128-bit FNV-1a, enough to make hash collisions irrelevant at test scale.
fn fnv128(bytes: &[u8]) -> u128 {
    const OFFSET: u128 = 0x6c62272e07bb014262b821756295c58d;
    const PRIME: u128 = 0x0000000001000000000000000000013b;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u128;
        h = h.wrapping_mul(PRIME);
    }
    h
}

fn value_key(v: &TokenValue) -> String {
    serde_json::to_string(v).expect("token values serialize")
}

/// Canonical hash of a firing including its whole causal ancestry.
fn firing_hashes(firings: &[Firing]) -> Vec<u128> {
    let mut hashes: Vec<u128> = Vec::with_capacity(firings.len());
    for f in firings {
        let mut consumed: Vec<String> = f.consumed.iter().map(value_key).collect();
        consumed.sort();
        let mut produced: Vec<String> = f.produced.iter().map(value_key).collect();
        produced.sort();
        // deps strictly precede this firing in the projection, so their
        // hashes are already computed
        let mut dep_hashes: Vec<u128> = f.deps.iter().map(|&d| hashes[d]).collect();
        dep_hashes.sort_unstable();
        let mut key = format!(
            "{}/{}|c:{}|p:{}|d:",
            f.activity,
            f.action,
            consumed.join(","),
            produced.join(",")
        );
        for d in dep_hashes {
            key.push_str(&format!("{d:032x},"));
        }
        hashes.push(fnv128(key.as_bytes()));
    }
    hashes
}

fn describe(f: &Firing) -> String {
    let consumed: Vec<String> = f.consumed.iter().map(|v| v.to_string()).collect();
    let produced: Vec<String> = f.produced.iter().map(|v| v.to_string()).collect();
    format!(
        "{}::{} consumed [{}] produced [{}]",
        f.activity,
        f.action,
        consumed.join(", "),
        produced.join(", ")
    )
}

/// Compare the essential event traces of two runs of the same diagram.
///
/// Equivalent means: the multisets of action firings agree, where each firing
/// is identified by its action, consumed and produced token value sets, and
/// the identities of its causal ancestors. Causally independent firings may
/// permute freely; non-essential token-movement timing is ignored entirely.
pub fn compare_essential_traces(a: &[TraceEvent], b: &[TraceEvent]) -> TraceComparison {
    let fa = essential_projection(a);
    let fb = essential_projection(b);
    let ha = firing_hashes(&fa);
    let hb = firing_hashes(&fb);

    let mut count_a: BTreeMap<u128, Vec<usize>> = BTreeMap::new();
    for (i, h) in ha.iter().enumerate() {
        count_a.entry(*h).or_default().push(i);
    }
    let mut count_b: BTreeMap<u128, Vec<usize>> = BTreeMap::new();
    for (i, h) in hb.iter().enumerate() {
        count_b.entry(*h).or_default().push(i);
    }

    let mut left_only: Option<&Firing> = None;
    for (h, idxs) in &count_a {
        let matched = count_b.get(h).map(|v| v.len()).unwrap_or(0);
        if idxs.len() > matched {
            let f = &fa[idxs[matched.min(idxs.len() - 1)]];
            if left_only.map(|p| p.seq > f.seq).unwrap_or(true) {
                left_only = Some(f);
            }
        }
    }
    let mut right_only: Option<&Firing> = None;
    for (h, idxs) in &count_b {
        let matched = count_a.get(h).map(|v| v.len()).unwrap_or(0);
        if idxs.len() > matched {
            let f = &fb[idxs[matched.min(idxs.len() - 1)]];
            if right_only.map(|p| p.seq > f.seq).unwrap_or(true) {
                right_only = Some(f);
            }
        }
    }

    if left_only.is_none() && right_only.is_none() {
        return TraceComparison { verdict: Verdict::Equivalent, first_divergence: None };
    }
    let explanation = match (&left_only, &right_only) {
        (Some(l), Some(r)) => format!(
            "left has {} where right has {}",
            describe(l),
            describe(r)
        ),
        (Some(l), None) => format!("only left has {}", describe(l)),
        (None, Some(r)) => format!("only right has {}", describe(r)),
        (None, None) => unreachable!(),
    };
    TraceComparison {
        verdict: Verdict::Divergent,
        first_divergence: Some(Divergence {
            left_seq: left_only.map(|f| f.seq),
            right_seq: right_only.map(|f| f.seq),
            explanation,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{Record, Value};

    fn data(ty: &str, field: &str, v: i64) -> TokenValue {
        let mut r = Record::new();
        r.set(field, Value::Int(v));
        TokenValue::data(ty, r)
    }

    fn started(seq: u64, action: &str, firing: u64, consumed: Vec<(u64, TokenValue)>) -> TraceEvent {
        TraceEvent {
            seq,
            kind: TraceKind::ActionStarted {
                instance: 0,
                action: action.into(),
                firing,
                consumed: consumed
                    .into_iter()
                    .map(|(token, value)| TokenRef { token, value })
                    .collect(),
            },
        }
    }

    fn created(seq: u64, token: u64, origin: TokenOrigin, value: TokenValue) -> TraceEvent {
        TraceEvent {
            seq,
            kind: TraceKind::TokenCreated {
                instance: 0,
                token,
                queue: "q".into(),
                value,
                origin,
            },
        }
    }

    #[test]
    fn identical_traces_are_equivalent() {
        let t = vec![
            created(0, 1, TokenOrigin::Invoke, data("T", "x", 1)),
            started(1, "a", 0, vec![(1, data("T", "x", 1))]),
        ];
        assert!(compare_essential_traces(&t, &t).is_equivalent());
    }

    #[test]
    fn reordered_independent_firings_are_equivalent() {
        let a = vec![
            created(0, 1, TokenOrigin::Invoke, data("T", "x", 1)),
            created(1, 2, TokenOrigin::Invoke, data("T", "x", 2)),
            started(2, "a", 0, vec![(1, data("T", "x", 1))]),
            started(3, "b", 1, vec![(2, data("T", "x", 2))]),
        ];
        let b = vec![
            created(0, 1, TokenOrigin::Invoke, data("T", "x", 1)),
            created(1, 2, TokenOrigin::Invoke, data("T", "x", 2)),
            started(2, "b", 5, vec![(2, data("T", "x", 2))]),
            started(3, "a", 6, vec![(1, data("T", "x", 1))]),
        ];
        assert!(compare_essential_traces(&a, &b).is_equivalent());
    }

    #[test]
    fn differing_consumed_values_diverge() {
        let a = vec![
            created(0, 1, TokenOrigin::Invoke, data("T", "x", 1)),
            started(1, "a", 0, vec![(1, data("T", "x", 1))]),
        ];
        let b = vec![
            created(0, 1, TokenOrigin::Invoke, data("T", "x", 2)),
            started(1, "a", 0, vec![(1, data("T", "x", 2))]),
        ];
        let cmp = compare_essential_traces(&a, &b);
        assert_eq!(cmp.verdict, Verdict::Divergent);
        assert!(cmp.first_divergence.is_some());
    }

    #[test]
    fn causal_order_matters_even_with_equal_multisets() {
        // same two firings, but on the right `b` consumed a token produced
        // by `a` instead of an independent seed token
        let v = data("T", "x", 1);
        let a = vec![
            created(0, 1, TokenOrigin::Invoke, v.clone()),
            created(1, 2, TokenOrigin::Invoke, v.clone()),
            started(2, "a", 0, vec![(1, v.clone())]),
            started(3, "b", 1, vec![(2, v.clone())]),
        ];
        let b = vec![
            created(0, 1, TokenOrigin::Invoke, v.clone()),
            started(1, "a", 0, vec![(1, v.clone())]),
            created(2, 2, TokenOrigin::ActionOutput { firing: 0 }, v.clone()),
            started(3, "b", 1, vec![(2, v.clone())]),
        ];
        let cmp = compare_essential_traces(&a, &b);
        assert_eq!(cmp.verdict, Verdict::Divergent);
    }

    #[test]
    fn trace_lines_are_stable() {
        let t = vec![created(0, 1, TokenOrigin::Invoke, data("T", "x", 1))];
        let mut buf = Vec::new();
        write_trace(&mut buf, &t).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("{\"seq\":0,\"kind\":\"TokenCreated\""), "{s}");
    }
}
