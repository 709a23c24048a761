//! Structural validation of parsed activities.
//!
//! Error codes:
//! - E1: a control node's outgoing edge loops back to the same node through
//!   control nodes only (would deadlock waiting on its own output)
//! - E2: a stable-to-stable path contains both a fork and a join
//! - E3: an edge touches a stable node directly instead of through a pin
//! - E4: pin edge-cardinality violated (output pins: exactly one outgoing;
//!   input pins: exactly one incoming)
//! - E5: decision with fewer than two outgoing edges, an unguarded decision
//!   edge, or more than one `otherwise` guard
//! - E6: action behavior resolves to neither an activity nor a declared
//!   opaque behavior
//! - E7: control-node arity (fork/decision: one incoming; join/merge: one
//!   outgoing, at least one incoming)
//! - E8: `otherwise` outside a decision edge guard
//! - E9: parameter and pin structure (parameter without node, node without
//!   pin, typed initial pin, pin type disagreeing with the parameter type)
//!
//! Warnings:
//! - W1: decision guards not provably mutually exclusive by the static
//!   checker; exclusivity is then enforced at run time.

use std::collections::BTreeMap;
use std::fmt;

use crate::expr::{CmpOp, Expr, IdentPath, Operand};
use crate::model::{ActivityModel, Direction, NodeKind, Program};
use crate::value::{Dec, Value};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diag {
    pub code: &'static str,
    pub nodes: Vec<String>,
    pub edges: Vec<String>,
    pub message: String,
}

impl fmt::Display for Diag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// Result of validating one activity. Empty `errors` means the diagram is
/// accepted for compilation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<Diag>,
    pub warnings: Vec<Diag>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.errors.iter().chain(&self.warnings).any(|d| d.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.errors {
            writeln!(f, "error {d}")?;
        }
        for d in &self.warnings {
            writeln!(f, "warning {d}")?;
        }
        Ok(())
    }
}

/// Validate one activity against the whole parsed program (sub-activity and
/// opaque references resolve against `registry`). Pure: same model, same
/// report.
pub fn validate(model: &ActivityModel, registry: &Program) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_control_cycles(model, &mut report);
    check_fork_join_paths(model, &mut report);
    check_pin_discipline(model, &mut report);
    check_decisions(model, &mut report);
    check_behaviors(model, registry, &mut report);
    check_control_arity(model, &mut report);
    check_otherwise_placement(model, &mut report);
    check_parameters(model, &mut report);
    report
}

/// Validate every activity in a program; returns (activity name, report)
/// pairs in declaration order.
pub fn validate_program(program: &Program) -> Vec<(String, ValidationReport)> {
    program
        .activities
        .iter()
        .map(|a| (a.name.clone(), validate(a, program)))
        .collect()
}

// --- E1 -------------------------------------------------------------------

fn check_control_cycles(model: &ActivityModel, report: &mut ValidationReport) {
    let n = model.nodes.len();
    let control: Vec<bool> = model.nodes.iter().map(|nd| nd.kind.is_control()).collect();
    // adjacency restricted to control-to-control edges
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &model.edges {
        let (Some(s), Some(t)) = (model.node_idx(&e.source), model.node_idx(&e.target)) else {
            continue;
        };
        if control[s] && control[t] {
            adj[s].push(t);
        }
    }
    // Kahn's algorithm: nodes left over after peeling are on cycles
    let mut indeg = vec![0usize; n];
    for (s, outs) in adj.iter().enumerate() {
        if !control[s] {
            continue;
        }
        for &t in outs {
            indeg[t] += 1;
        }
    }
    let mut queue: Vec<usize> =
        (0..n).filter(|&i| control[i] && indeg[i] == 0).collect();
    let mut removed = vec![false; n];
    while let Some(i) = queue.pop() {
        removed[i] = true;
        for &t in &adj[i] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                queue.push(t);
            }
        }
    }
    let mut reported = vec![false; n];
    for i in 0..n {
        if !control[i] || removed[i] || reported[i] {
            continue;
        }
        // collect the cyclic component reachable from i within the leftover set
        let mut component = vec![i];
        let mut stack = vec![i];
        reported[i] = true;
        while let Some(v) = stack.pop() {
            for &t in &adj[v] {
                if !removed[t] && !reported[t] {
                    reported[t] = true;
                    component.push(t);
                    stack.push(t);
                }
            }
        }
        let names: Vec<String> =
            component.iter().map(|&i| model.nodes[i].name.clone()).collect();
        report.errors.push(Diag {
            code: "E1",
            message: format!(
                "control nodes feed their own input through control nodes only: {}",
                names.join(", ")
            ),
            nodes: names,
            edges: vec![],
        });
    }
}

// --- E2 -------------------------------------------------------------------

fn check_fork_join_paths(model: &ActivityModel, report: &mut ValidationReport) {
    // walk from every edge that leaves a stable boundary (pin or stable node)
    // through control nodes; record (fork, join) pairs seen on one route
    let mut offending: Vec<(String, String, String, String)> = Vec::new();
    for (i, node) in model.nodes.iter().enumerate() {
        if node.kind.is_control() {
            continue;
        }
        let start = &model.nodes[i].name;
        for (_, edge) in model.edges_out_of(start) {
            let mut visited = vec![false; model.nodes.len()];
            walk_e2(
                model,
                &edge.target,
                start,
                &mut Vec::new(),
                &mut Vec::new(),
                &mut visited,
                &mut offending,
            );
        }
    }
    offending.sort();
    offending.dedup();
    let mut seen_pairs: Vec<(String, String)> = Vec::new();
    for (fork, join, start, end) in offending {
        if seen_pairs.iter().any(|(f, j)| *f == fork && *j == join) {
            continue;
        }
        seen_pairs.push((fork.clone(), join.clone()));
        report.errors.push(Diag {
            code: "E2",
            message: format!(
                "path from {start} to {end} contains both fork {fork} and join {join}"
            ),
            nodes: vec![fork, join],
            edges: vec![],
        });
    }
}

fn walk_e2(
    model: &ActivityModel,
    at: &str,
    start: &str,
    forks: &mut Vec<String>,
    joins: &mut Vec<String>,
    visited: &mut Vec<bool>,
    offending: &mut Vec<(String, String, String, String)>,
) {
    let Some(idx) = model.node_idx(at) else { return };
    let node = &model.nodes[idx];
    if !node.kind.is_control() {
        for f in forks.iter() {
            for j in joins.iter() {
                offending.push((f.clone(), j.clone(), start.to_string(), at.to_string()));
            }
        }
        return;
    }
    if visited[idx] {
        return; // control cycle; E1 reports it
    }
    visited[idx] = true;
    let pushed_fork = node.kind == NodeKind::Fork;
    let pushed_join = node.kind == NodeKind::Join;
    if pushed_fork {
        forks.push(node.name.clone());
    }
    if pushed_join {
        joins.push(node.name.clone());
    }
    for (_, edge) in model.edges_out_of(at) {
        walk_e2(model, &edge.target, start, forks, joins, visited, offending);
    }
    if pushed_fork {
        forks.pop();
    }
    if pushed_join {
        joins.pop();
    }
    visited[idx] = false;
}

// --- E3 / E4 ----------------------------------------------------------------

fn check_pin_discipline(model: &ActivityModel, report: &mut ValidationReport) {
    for edge in &model.edges {
        for (end, role) in [(&edge.source, "source"), (&edge.target, "target")] {
            if let Some(node) = model.node(end) {
                if node.kind.is_stable() {
                    report.errors.push(Diag {
                        code: "E3",
                        message: format!(
                            "edge {} {role} touches {} `{}` directly; flows attach to stable nodes through pins",
                            edge.name,
                            node.kind.label(),
                            node.name
                        ),
                        nodes: vec![node.name.clone()],
                        edges: vec![edge.name.clone()],
                    });
                }
            }
        }
    }
    for node in &model.nodes {
        if !node.kind.is_pin() {
            continue;
        }
        let outgoing = model.edges_out_of(&node.name).count();
        let incoming = model.edges_into(&node.name).count();
        let ok = match node.kind {
            NodeKind::OutputPin => outgoing == 1 && incoming == 0,
            NodeKind::InputPin => incoming == 1 && outgoing == 0,
            _ => true,
        };
        if !ok {
            report.errors.push(Diag {
                code: "E4",
                message: format!(
                    "{} `{}` has {outgoing} outgoing and {incoming} incoming edges; an output pin needs exactly one outgoing edge and an input pin exactly one incoming",
                    node.kind.label(),
                    node.name
                ),
                nodes: vec![node.name.clone()],
                edges: vec![],
            });
        }
    }
}

// --- E5 / W1 ----------------------------------------------------------------

fn check_decisions(model: &ActivityModel, report: &mut ValidationReport) {
    for node in &model.nodes {
        if node.kind != NodeKind::Decision {
            continue;
        }
        let outgoing: Vec<_> = model.edges_out_of(&node.name).collect();
        if outgoing.len() < 2 {
            report.errors.push(Diag {
                code: "E5",
                message: format!(
                    "decision `{}` has {} outgoing edges, needs at least 2",
                    node.name,
                    outgoing.len()
                ),
                nodes: vec![node.name.clone()],
                edges: vec![],
            });
        }
        let mut otherwise_count = 0;
        for (_, edge) in &outgoing {
            match &edge.guard {
                None => report.errors.push(Diag {
                    code: "E5",
                    message: format!(
                        "decision `{}` edge {} has no guard",
                        node.name, edge.name
                    ),
                    nodes: vec![node.name.clone()],
                    edges: vec![edge.name.clone()],
                }),
                Some(Expr::Otherwise) => otherwise_count += 1,
                Some(_) => {}
            }
        }
        if otherwise_count > 1 {
            report.errors.push(Diag {
                code: "E5",
                message: format!(
                    "decision `{}` has {otherwise_count} `otherwise` guards, at most one is allowed",
                    node.name
                ),
                nodes: vec![node.name.clone()],
                edges: vec![],
            });
        }
        // W1: pairwise static exclusivity
        for i in 0..outgoing.len() {
            for j in i + 1..outgoing.len() {
                let (ga, gb) = (&outgoing[i].1.guard, &outgoing[j].1.guard);
                let (Some(ga), Some(gb)) = (ga, gb) else { continue };
                if !provably_disjoint(ga, gb) {
                    report.warnings.push(Diag {
                        code: "W1",
                        message: format!(
                            "decision `{}` guards `{ga}` and `{gb}` are not provably mutually exclusive; overlap becomes a run-time error",
                            node.name
                        ),
                        nodes: vec![node.name.clone()],
                        edges: vec![
                            outgoing[i].1.name.clone(),
                            outgoing[j].1.name.clone(),
                        ],
                    });
                }
            }
        }
    }
}

// --- E6 -------------------------------------------------------------------

fn check_behaviors(model: &ActivityModel, registry: &Program, report: &mut ValidationReport) {
    for node in &model.nodes {
        if node.kind != NodeKind::Action {
            continue;
        }
        let Some(behavior) = &node.behavior else { continue };
        if registry.activity(behavior).is_none() && registry.opaque(behavior).is_none() {
            report.errors.push(Diag {
                code: "E6",
                message: format!(
                    "action `{}` calls `{behavior}`, which is neither an activity in this file nor a declared opaque behavior",
                    node.name
                ),
                nodes: vec![node.name.clone()],
                edges: vec![],
            });
        }
    }
}

// --- E7 -------------------------------------------------------------------

fn check_control_arity(model: &ActivityModel, report: &mut ValidationReport) {
    for node in &model.nodes {
        if !node.kind.is_control() {
            continue;
        }
        let incoming = model.edges_into(&node.name).count();
        let outgoing = model.edges_out_of(&node.name).count();
        let problem = match node.kind {
            NodeKind::Fork if incoming != 1 => {
                Some(format!("fork `{}` needs exactly one incoming edge, has {incoming}", node.name))
            }
            NodeKind::Fork if outgoing == 0 => {
                Some(format!("fork `{}` has no outgoing edges", node.name))
            }
            NodeKind::Decision if incoming != 1 => {
                Some(format!("decision `{}` needs exactly one incoming edge, has {incoming}", node.name))
            }
            NodeKind::Join if outgoing != 1 => {
                Some(format!("join `{}` needs exactly one outgoing edge, has {outgoing}", node.name))
            }
            NodeKind::Join if incoming == 0 => {
                Some(format!("join `{}` has no incoming edges", node.name))
            }
            NodeKind::Merge if outgoing != 1 => {
                Some(format!("merge `{}` needs exactly one outgoing edge, has {outgoing}", node.name))
            }
            NodeKind::Merge if incoming == 0 => {
                Some(format!("merge `{}` has no incoming edges", node.name))
            }
            _ => None,
        };
        if let Some(message) = problem {
            report.errors.push(Diag {
                code: "E7",
                message,
                nodes: vec![node.name.clone()],
                edges: vec![],
            });
        }
    }
}

// --- E8 -------------------------------------------------------------------

fn check_otherwise_placement(model: &ActivityModel, report: &mut ValidationReport) {
    for edge in &model.edges {
        let Some(guard) = &edge.guard else { continue };
        if !guard.contains_otherwise() {
            continue;
        }
        let source_is_decision = model
            .node(&edge.source)
            .map(|n| n.kind == NodeKind::Decision)
            .unwrap_or(false);
        let whole_guard = matches!(guard, Expr::Otherwise);
        if !(source_is_decision && whole_guard) {
            report.errors.push(Diag {
                code: "E8",
                message: format!(
                    "edge {}: `otherwise` is only legal as the entire guard of a decision edge",
                    edge.name
                ),
                nodes: vec![],
                edges: vec![edge.name.clone()],
            });
        }
    }
    for node in &model.nodes {
        if let Some(spec) = &node.join_spec {
            if spec.contains_otherwise() {
                report.errors.push(Diag {
                    code: "E8",
                    message: format!(
                        "join `{}`: `otherwise` cannot appear in a join specification",
                        node.name
                    ),
                    nodes: vec![node.name.clone()],
                    edges: vec![],
                });
            }
        }
    }
}

// --- E9 -------------------------------------------------------------------

fn check_parameters(model: &ActivityModel, report: &mut ValidationReport) {
    let mut e9 = |message: String, nodes: Vec<String>| {
        report.errors.push(Diag { code: "E9", message, nodes, edges: vec![] });
    };
    for param in &model.parameters {
        match model.node(&param.name) {
            Some(n) if n.kind == NodeKind::Parameter => {}
            _ => e9(
                format!("parameter `{}` has no parameter node in the diagram", param.name),
                vec![param.name.clone()],
            ),
        }
    }
    for node in &model.nodes {
        match node.kind {
            NodeKind::Parameter => {
                if model.parameter_of_node(&node.name).is_none() {
                    e9(
                        format!(
                            "parameter node `{}` has no matching parameter in the activity header",
                            node.name
                        ),
                        vec![node.name.clone()],
                    );
                    continue;
                }
                let param = model.parameter_of_node(&node.name).unwrap();
                let pins: Vec<_> = model.pins_of(&node.name).collect();
                if pins.len() != 1 {
                    e9(
                        format!(
                            "parameter node `{}` needs exactly one pin, has {}",
                            node.name,
                            pins.len()
                        ),
                        vec![node.name.clone()],
                    );
                } else if let Some(ty) = &pins[0].1.pin_type {
                    if *ty != param.ty {
                        e9(
                            format!(
                                "pin `{}` type `{ty}` disagrees with parameter type `{}`",
                                pins[0].1.name, param.ty
                            ),
                            vec![pins[0].1.name.clone()],
                        );
                    }
                }
                let expected = match param.direction {
                    Direction::In => NodeKind::OutputPin,
                    Direction::Out => NodeKind::InputPin,
                };
                if pins.len() == 1 && pins[0].1.kind != expected {
                    e9(
                        format!(
                            "parameter node `{}` pin has the wrong direction for an `{}` parameter",
                            node.name,
                            if param.direction == Direction::In { "in" } else { "out" }
                        ),
                        vec![node.name.clone()],
                    );
                }
            }
            NodeKind::Initial => {
                let pins: Vec<_> = model.pins_of(&node.name).collect();
                if pins.len() != 1 {
                    e9(
                        format!(
                            "initial node `{}` needs exactly one output pin, has {}",
                            node.name,
                            pins.len()
                        ),
                        vec![node.name.clone()],
                    );
                } else if pins[0].1.pin_type.is_some() {
                    e9(
                        format!(
                            "initial node pin `{}` must be untyped (control tokens have the NULL type)",
                            pins[0].1.name
                        ),
                        vec![pins[0].1.name.clone()],
                    );
                }
            }
            NodeKind::ActivityFinal | NodeKind::FlowFinal => {
                let pins: Vec<_> = model.pins_of(&node.name).collect();
                if pins.len() != 1 {
                    e9(
                        format!(
                            "final node `{}` needs exactly one input pin, has {}",
                            node.name,
                            pins.len()
                        ),
                        vec![node.name.clone()],
                    );
                }
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Static guard exclusivity
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
struct FieldCons {
    eq: Option<Value>,
    nes: Vec<Value>,
    lower: Option<(Dec, bool)>, // (bound, strict)
    upper: Option<(Dec, bool)>,
}

/// Conservative disjointness proof for a pair of decision guards. `true`
/// means the guards can never both hold on one token; `false` means we could
/// not prove it (W1), not that they overlap.
pub fn provably_disjoint(a: &Expr, b: &Expr) -> bool {
    if matches!(a, Expr::Otherwise) || matches!(b, Expr::Otherwise) {
        return true;
    }
    let (Some(ca), Some(cb)) = (field_constraints(a), field_constraints(b)) else {
        return false;
    };
    // a guard with internally contradictory constraints can never be true
    for cons in ca.values().chain(cb.values()) {
        if let (Some((lo, ls)), Some((hi, hs))) = (&cons.lower, &cons.upper) {
            if lo > hi || (lo == hi && (*ls || *hs)) {
                return true;
            }
        }
        if let Some(eq) = &cons.eq {
            if !within(eq, &cons.lower, &cons.upper)
                || cons.nes.iter().any(|ne| values_equal(eq, ne))
            {
                return true;
            }
        }
    }
    for (field, fa) in &ca {
        let Some(fb) = cb.get(field) else { continue };
        if disjoint_on_field(fa, fb) {
            return true;
        }
    }
    false
}

fn values_equal(a: &Value, b: &Value) -> bool {
    a.compare(b) == Some(std::cmp::Ordering::Equal)
}

fn within(v: &Value, lower: &Option<(Dec, bool)>, upper: &Option<(Dec, bool)>) -> bool {
    let Some(d) = v.as_dec() else { return true };
    if let Some((lo, strict)) = lower {
        if d < *lo || (d == *lo && *strict) {
            return false;
        }
    }
    if let Some((hi, strict)) = upper {
        if d > *hi || (d == *hi && *strict) {
            return false;
        }
    }
    true
}

fn disjoint_on_field(a: &FieldCons, b: &FieldCons) -> bool {
    if let (Some(x), Some(y)) = (&a.eq, &b.eq) {
        if let Some(ord) = x.compare(y) {
            if !ord.is_eq() {
                return true;
            }
        }
    }
    if let Some(x) = &a.eq {
        if b.nes.iter().any(|ne| values_equal(x, ne)) || !within(x, &b.lower, &b.upper) {
            return true;
        }
    }
    if let Some(y) = &b.eq {
        if a.nes.iter().any(|ne| values_equal(y, ne)) || !within(y, &a.lower, &a.upper) {
            return true;
        }
    }
    // interval vs interval
    let pairs = [(&a.upper, &b.lower), (&b.upper, &a.lower)];
    for (upper, lower) in pairs {
        if let (Some((hi, hs)), Some((lo, ls))) = (upper, lower) {
            if hi < lo || (hi == lo && (*hs || *ls)) {
                return true;
            }
        }
    }
    false
}

/// Field constraints of a conjunction of atomic comparisons; `None` when the
/// guard shape is too rich for the static checker.
fn field_constraints(guard: &Expr) -> Option<BTreeMap<String, FieldCons>> {
    let mut map: BTreeMap<String, FieldCons> = BTreeMap::new();
    for conjunct in guard.conjuncts() {
        let (field, op, value) = atomic(conjunct)?;
        let cons = map.entry(field).or_default();
        match op {
            CmpOp::Eq => {
                if let Some(prev) = &cons.eq {
                    if !values_equal(prev, &value) {
                        // f = x AND f = y, x != y: never true, disjoint with all
                        cons.nes.push(prev.clone());
                    }
                }
                cons.eq = Some(value);
            }
            CmpOp::Ne => cons.nes.push(value),
            CmpOp::Lt | CmpOp::Le => {
                let d = value.as_dec()?;
                let strict = op == CmpOp::Lt;
                cons.upper = Some(match cons.upper {
                    Some((hi, hs)) if hi < d || (hi == d && hs) => (hi, hs),
                    _ => (d, strict),
                });
            }
            CmpOp::Gt | CmpOp::Ge => {
                let d = value.as_dec()?;
                let strict = op == CmpOp::Gt;
                cons.lower = Some(match cons.lower {
                    Some((lo, ls)) if lo > d || (lo == d && ls) => (lo, ls),
                    _ => (d, strict),
                });
            }
        }
    }
    Some(map)
}

/// Normalize one conjunct into (field, op, literal). Bool atoms become
/// equality with a bool literal; flipped comparisons are mirrored.
fn atomic(e: &Expr) -> Option<(String, CmpOp, Value)> {
    fn bare(p: &IdentPath) -> Option<String> {
        if p.0.len() == 1 {
            Some(p.0[0].clone())
        } else {
            None
        }
    }
    match e {
        Expr::Atom(p) => Some((bare(p)?, CmpOp::Eq, Value::Bool(true))),
        Expr::Not(inner) => match inner.as_ref() {
            Expr::Atom(p) => Some((bare(p)?, CmpOp::Eq, Value::Bool(false))),
            _ => None,
        },
        Expr::Cmp { op, lhs, rhs } => {
            let flip = |op: CmpOp| match op {
                CmpOp::Lt => CmpOp::Gt,
                CmpOp::Le => CmpOp::Ge,
                CmpOp::Gt => CmpOp::Lt,
                CmpOp::Ge => CmpOp::Le,
                other => other,
            };
            match (lhs, rhs) {
                (Operand::Path(p), Operand::Lit(v)) => Some((bare(p)?, *op, v.clone())),
                (Operand::Lit(v), Operand::Path(p)) => Some((bare(p)?, flip(*op), v.clone())),
                // `order = approved` parses with an identifier on the right;
                // treat the right identifier as a string literal
                (Operand::Path(p), Operand::Path(q)) => {
                    Some((bare(p)?, *op, Value::Str(bare(q)?)))
                }
                _ => None,
            }
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_program;

    fn check(src: &str) -> ValidationReport {
        let program = parse_program(src).unwrap();
        validate(&program.activities[0], &program)
    }

    fn codes(report: &ValidationReport) -> Vec<&'static str> {
        report.errors.iter().map(|d| d.code).collect()
    }

    #[test]
    fn minimal_diagram_is_clean() {
        let r = check(crate::parse::tests::MINIMAL);
        assert!(r.is_clean(), "{r}");
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn merge_self_loop_is_e1() {
        // merge whose outgoing edge loops back as its own incoming edge
        let r = check("activity A { merge m; edge m -> m; }");
        assert_eq!(codes(&r), vec!["E1"]);
    }

    #[test]
    fn longer_control_cycle_is_e1() {
        let r = check(
            "activity A { merge m; decision d; edge m -> d; edge d -> m guard true; edge d -> m guard otherwise; }",
        );
        assert!(codes(&r).contains(&"E1"), "{r}");
    }

    #[test]
    fn fork_join_on_one_path_is_e2() {
        let r = check(
            "opaque b; activity A { \
               action a calls b; pin a.o; \
               action c calls b; pin c.i; \
               fork f; join j; \
               edge a.o -> f; edge f -> j; edge f -> j; edge j -> c.i; }",
        );
        assert!(codes(&r).contains(&"E2"), "{r}");
        assert!(!codes(&r).contains(&"E1"));
    }

    #[test]
    fn action_body_edge_is_e3() {
        let r = check(
            "opaque b; activity A { \
               action a calls b; \
               action c calls b; pin c.i; \
               edge a -> c.i; }",
        );
        assert!(codes(&r).contains(&"E3"), "{r}");
    }

    #[test]
    fn pin_cardinality_is_e4() {
        // output pin with two outgoing edges
        let r = check(
            "opaque b; activity A { \
               action a calls b; pin a.o; \
               action c calls b; pin c.i; pin c.j; \
               edge a.o -> c.i; edge a.o -> c.j; }",
        );
        assert!(codes(&r).contains(&"E4"), "{r}");
    }

    #[test]
    fn decision_shape_errors_are_e5() {
        let r = check(
            "opaque b; activity A { \
               action a calls b; pin a.o; \
               action c calls b; pin c.i; \
               decision d; \
               edge a.o -> d; edge d -> c.i; }",
        );
        assert!(codes(&r).contains(&"E5"), "{r}"); // <2 outgoing and unguarded
    }

    #[test]
    fn unresolved_behavior_is_e6() {
        let r = check("activity A { action a calls ghost; }");
        assert!(codes(&r).contains(&"E6"), "{r}");
    }

    #[test]
    fn declared_opaque_or_subactivity_resolves() {
        let src = "opaque real; activity A { action a calls real; action s calls B; } \
                   activity B { initial i; finalActivity f; pin i.out; pin f.in; edge i.out -> f.in; }";
        let program = parse_program(src).unwrap();
        let r = validate(&program.activities[0], &program);
        assert!(!r.errors.iter().any(|d| d.code == "E6"), "{r}");
    }

    #[test]
    fn overlapping_numeric_guards_warn_w1() {
        let r = check(
            "opaque b; activity A { \
               action a calls b; pin a.o : T; \
               action c calls b; pin c.i : T; \
               action e calls b; pin e.i : T; \
               decision d; \
               edge a.o -> d; \
               edge d -> c.i guard x > 0; \
               edge d -> e.i guard x >= 0; }",
        );
        assert!(r.is_clean(), "{r}");
        assert!(r.has_code("W1"), "{r}");
    }

    #[test]
    fn disjoint_guards_do_not_warn() {
        for (g1, g2) in [
            ("order = accepted", "order = rejected"),
            ("sum > 100", "sum <= 100"),
            ("order = accepted", "otherwise"),
            ("flag", "NOT flag"),
            ("order = accepted", "order <> accepted"),
            ("sum > 100 AND order = a", "sum < 50"),
        ] {
            let src = format!(
                "opaque b; activity A {{ \
                   action a calls b; pin a.o : T; \
                   action c calls b; pin c.i : T; \
                   action e calls b; pin e.i : T; \
                   decision d; \
                   edge a.o -> d; \
                   edge d -> c.i guard {g1}; \
                   edge d -> e.i guard {g2}; }}"
            );
            let r = check(&src);
            assert!(
                !r.has_code("W1"),
                "guards `{g1}` / `{g2}` should be provably disjoint: {r}"
            );
        }
    }

    #[test]
    fn validation_is_pure() {
        let program = parse_program(crate::parse::tests::MINIMAL).unwrap();
        let a = validate(&program.activities[0], &program);
        let b = validate(&program.activities[0], &program);
        assert_eq!(a, b);
    }
}
