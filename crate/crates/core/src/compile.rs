//! Lowering a validated activity model into its runtime: queues for every
//! pin, runtime edges rewired onto queues and intermediate nodes, paths (the
//! transitive closure of edges through control nodes), push/pull token
//! engines, and join criteria for pull engines.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::expr::{Expr, IdentPath};
use crate::model::{ActivityModel, Direction, NodeKind, Program};
use crate::value::TokenValue;

pub type StableId = usize;
pub type QueueId = usize;
pub type PathId = usize;
pub type REdgeId = usize;
pub type InterId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueKind {
    Input,
    Output,
}

/// Runtime counterpart of a pin: the place where tokens live.
#[derive(Clone, Debug)]
pub struct Queue {
    pub kind: QueueKind,
    pub owner: StableId,
    /// Qualified pin name, e.g. `FillOrder.order`.
    pub name: String,
    /// Join-criteria variable: the bare pin name when unique among output
    /// queues, the qualified name otherwise.
    pub var_name: String,
    pub ty: Option<String>,
    pub def_idx: usize,
    // execution state
    pub tokens: VecDeque<u64>,
    pub arrivals: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StableKind {
    Action,
    Initial,
    ActivityFinal,
    FlowFinal,
    Parameter,
}

/// What a synchronous action is doing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionState {
    Idle,
    /// Fired and waiting for a synchronous sub-activity to finish.
    AwaitingSub { sub: usize, firing: u64 },
}

#[derive(Clone, Debug)]
pub struct StableNode {
    pub def_idx: usize,
    pub name: String,
    pub kind: StableKind,
    pub input_queues: Vec<QueueId>,
    pub output_queues: Vec<QueueId>,
    pub behavior: Option<String>,
    pub is_synchronous: bool,
    pub action_state: ActionState,
}

#[derive(Clone, Debug)]
pub struct InterNode {
    pub def_idx: usize,
    pub name: String,
    pub kind: NodeKind,
    pub join_spec: Option<Expr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum REnd {
    Queue(QueueId),
    Inter(InterId),
}

/// Runtime edge with endpoints rewired to queues or intermediate nodes and
/// `otherwise` guards expanded into negated sibling conjunctions.
#[derive(Clone, Debug)]
pub struct RuntimeEdge {
    pub def_idx: usize,
    pub source: REnd,
    pub target: REnd,
    pub guard: Expr,
}

/// Compiled output-queue to input-queue connection.
#[derive(Clone, Debug)]
pub struct PathR {
    pub start: QueueId,
    pub end: QueueId,
    /// Conjunction of the guards along the route, in traversal order.
    pub pass_rule: Expr,
    pub has_join: bool,
    pub route: Vec<REdgeId>,
}

#[derive(Clone, Debug)]
pub struct PushEngine {
    pub queue: QueueId,
    pub paths: Vec<PathId>,
}

/// Join criteria tree. The shape mirrors the fan of incoming pull paths:
/// every leaf corresponds to exactly one pull path.
#[derive(Clone, Debug, PartialEq)]
pub enum Criteria {
    And(Vec<Criteria>),
    Or(Vec<Criteria>),
    /// Data predicate (a join specification), quoted in the prefix rendering.
    Pred(Expr),
    /// Presence of a token from `queue` admitted along `path`.
    Leaf { queue: QueueId, path: PathId },
    /// A join input no token can ever reach.
    Never,
}

#[derive(Clone, Debug)]
pub struct PullEngine {
    pub queue: QueueId,
    pub paths: Vec<PathId>,
    pub criteria: Criteria,
    /// The criteria as a plain expression over queue variables.
    pub criteria_expr: Expr,
    /// Distinct source queues, in path order.
    pub source_queues: Vec<QueueId>,
}

#[derive(Clone, Debug)]
pub struct ParamR {
    pub name: String,
    pub direction: Direction,
    pub ty: String,
    pub queue: QueueId,
}

/// Which runtime element a definition node maps to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuntimeRef {
    Stable(StableId),
    Inter(InterId),
    Queue(QueueId),
}

/// Live counterpart of one activity definition.
#[derive(Clone, Debug)]
pub struct ActivityRuntime {
    pub def_idx: usize,
    pub name: String,
    pub is_active: bool,
    pub has_activity_final: bool,
    pub stable_nodes: Vec<StableNode>,
    pub inter_nodes: Vec<InterNode>,
    pub queues: Vec<Queue>,
    pub redges: Vec<RuntimeEdge>,
    pub paths: Vec<PathR>,
    pub push_engines: Vec<PushEngine>,
    pub pull_engines: Vec<PullEngine>,
    pub parameters: Vec<ParamR>,
    /// Mapping association: definition node index to runtime element.
    pub node_map: Vec<Option<RuntimeRef>>,
}

impl ActivityRuntime {
    pub fn queue_by_name(&self, name: &str) -> Option<QueueId> {
        self.queues.iter().position(|q| q.name == name)
    }

    pub fn stable_by_name(&self, name: &str) -> Option<StableId> {
        self.stable_nodes.iter().position(|s| s.name == name)
    }

    pub fn in_parameters(&self) -> impl Iterator<Item = &ParamR> {
        self.parameters.iter().filter(|p| p.direction == Direction::In)
    }

    pub fn out_parameters(&self) -> impl Iterator<Item = &ParamR> {
        self.parameters.iter().filter(|p| p.direction == Direction::Out)
    }

    /// Paths out of a queue, in path order.
    pub fn paths_from(&self, queue: QueueId) -> impl Iterator<Item = (PathId, &PathR)> {
        self.paths
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.start == queue)
    }
}

#[derive(Clone, Debug, Error)]
pub enum CompileError {
    #[error("activity `{0}` not found")]
    UnknownActivity(String),
    #[error("internal: {0}")]
    Internal(String),
}

/// Build the runtime for one activity of the program. The definition must
/// already have passed validation; structural surprises surface as
/// `CompileError::Internal`.
pub fn compile_activity(
    program: &Program,
    def_idx: usize,
) -> Result<ActivityRuntime, CompileError> {
    let model = program
        .activities
        .get(def_idx)
        .ok_or_else(|| CompileError::UnknownActivity(format!("#{def_idx}")))?;

    let mut rt = ActivityRuntime {
        def_idx,
        name: model.name.clone(),
        is_active: false,
        has_activity_final: model.has_activity_final(),
        stable_nodes: Vec::new(),
        inter_nodes: Vec::new(),
        queues: Vec::new(),
        redges: Vec::new(),
        paths: Vec::new(),
        push_engines: Vec::new(),
        pull_engines: Vec::new(),
        parameters: Vec::new(),
        node_map: vec![None; model.nodes.len()],
    };

    create_nodes_and_queues(model, &mut rt)?;
    create_parameters(model, &mut rt)?;
    create_edges(model, &mut rt)?;
    create_paths(&mut rt)?;
    create_token_engines(&mut rt)?;
    Ok(rt)
}

fn create_nodes_and_queues(
    model: &ActivityModel,
    rt: &mut ActivityRuntime,
) -> Result<(), CompileError> {
    for (idx, node) in model.nodes.iter().enumerate() {
        match node.kind {
            NodeKind::Action
            | NodeKind::Initial
            | NodeKind::ActivityFinal
            | NodeKind::FlowFinal
            | NodeKind::Parameter => {
                let kind = match node.kind {
                    NodeKind::Action => StableKind::Action,
                    NodeKind::Initial => StableKind::Initial,
                    NodeKind::ActivityFinal => StableKind::ActivityFinal,
                    NodeKind::FlowFinal => StableKind::FlowFinal,
                    _ => StableKind::Parameter,
                };
                rt.node_map[idx] = Some(RuntimeRef::Stable(rt.stable_nodes.len()));
                rt.stable_nodes.push(StableNode {
                    def_idx: idx,
                    name: node.name.clone(),
                    kind,
                    input_queues: Vec::new(),
                    output_queues: Vec::new(),
                    behavior: node.behavior.clone(),
                    is_synchronous: node.is_synchronous,
                    action_state: ActionState::Idle,
                });
            }
            NodeKind::Fork | NodeKind::Join | NodeKind::Decision | NodeKind::Merge => {
                rt.node_map[idx] = Some(RuntimeRef::Inter(rt.inter_nodes.len()));
                rt.inter_nodes.push(InterNode {
                    def_idx: idx,
                    name: node.name.clone(),
                    kind: node.kind,
                    join_spec: node.join_spec.clone(),
                });
            }
            NodeKind::InputPin | NodeKind::OutputPin => {
                let owner_name = node.owner.as_deref().ok_or_else(|| {
                    CompileError::Internal(format!("pin `{}` has no owner", node.name))
                })?;
                let owner_idx = model.node_idx(owner_name).ok_or_else(|| {
                    CompileError::Internal(format!("pin owner `{owner_name}` missing"))
                })?;
                let Some(RuntimeRef::Stable(owner)) = rt.node_map[owner_idx] else {
                    return Err(CompileError::Internal(format!(
                        "pin `{}` owner is not a stable node",
                        node.name
                    )));
                };
                let kind = if node.kind == NodeKind::InputPin {
                    QueueKind::Input
                } else {
                    QueueKind::Output
                };
                // parameter-node pins inherit the parameter type when untyped
                let ty = node.pin_type.clone().or_else(|| {
                    model.parameter_of_node(owner_name).map(|p| p.ty.clone())
                });
                let qid = rt.queues.len();
                rt.node_map[idx] = Some(RuntimeRef::Queue(qid));
                rt.queues.push(Queue {
                    kind,
                    owner,
                    name: node.name.clone(),
                    var_name: String::new(),
                    ty,
                    def_idx: idx,
                    tokens: VecDeque::new(),
                    arrivals: 0,
                });
                match kind {
                    QueueKind::Input => rt.stable_nodes[owner].input_queues.push(qid),
                    QueueKind::Output => rt.stable_nodes[owner].output_queues.push(qid),
                }
            }
        }
    }
    // criteria variable names: bare pin name when unique among output queues
    let mut short_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, node) in model.nodes.iter().enumerate() {
        if let Some(RuntimeRef::Queue(q)) = rt.node_map[idx] {
            if rt.queues[q].kind == QueueKind::Output {
                *short_counts.entry(node.short_name().to_string()).or_default() += 1;
            }
        }
    }
    for (idx, node) in model.nodes.iter().enumerate() {
        if let Some(RuntimeRef::Queue(q)) = rt.node_map[idx] {
            let short = node.short_name().to_string();
            rt.queues[q].var_name =
                if rt.queues[q].kind == QueueKind::Output && short_counts[&short] == 1 {
                    short
                } else {
                    node.name.clone()
                };
        }
    }
    Ok(())
}

fn create_parameters(model: &ActivityModel, rt: &mut ActivityRuntime) -> Result<(), CompileError> {
    for param in &model.parameters {
        let node_idx = model.node_idx(&param.name).ok_or_else(|| {
            CompileError::Internal(format!("parameter `{}` has no node", param.name))
        })?;
        let Some(RuntimeRef::Stable(sid)) = rt.node_map[node_idx] else {
            return Err(CompileError::Internal(format!(
                "parameter node `{}` not stable",
                param.name
            )));
        };
        let stable = &rt.stable_nodes[sid];
        let queue = match param.direction {
            Direction::In => stable.output_queues.first(),
            Direction::Out => stable.input_queues.first(),
        }
        .copied()
        .ok_or_else(|| {
            CompileError::Internal(format!("parameter node `{}` has no pin", param.name))
        })?;
        rt.parameters.push(ParamR {
            name: param.name.clone(),
            direction: param.direction,
            ty: param.ty.clone(),
            queue,
        });
    }
    Ok(())
}

fn create_edges(model: &ActivityModel, rt: &mut ActivityRuntime) -> Result<(), CompileError> {
    for (idx, edge) in model.edges.iter().enumerate() {
        let resolve = |name: &str| -> Result<REnd, CompileError> {
            let node_idx = model
                .node_idx(name)
                .ok_or_else(|| CompileError::Internal(format!("unknown node `{name}`")))?;
            match rt.node_map[node_idx] {
                Some(RuntimeRef::Queue(q)) => Ok(REnd::Queue(q)),
                Some(RuntimeRef::Inter(i)) => Ok(REnd::Inter(i)),
                _ => Err(CompileError::Internal(format!(
                    "edge endpoint `{name}` is a stable node; validation should have rejected this"
                ))),
            }
        };
        let source = resolve(&edge.source)?;
        let target = resolve(&edge.target)?;
        let guard = expand_guard(model, idx)?;
        rt.redges.push(RuntimeEdge { def_idx: idx, source, target, guard });
    }
    Ok(())
}

/// Expand `otherwise` into the conjunction of negated sibling guards, so
/// that passRules never contain it.
fn expand_guard(model: &ActivityModel, edge_idx: usize) -> Result<Expr, CompileError> {
    let edge = &model.edges[edge_idx];
    let Some(guard) = &edge.guard else {
        return Ok(Expr::Bool(true));
    };
    if !matches!(guard, Expr::Otherwise) {
        return Ok(guard.clone());
    }
    let mut negations = Vec::new();
    for (i, sibling) in model.edges_out_of(&edge.source) {
        if i == edge_idx {
            continue;
        }
        let g = sibling.guard.clone().unwrap_or(Expr::Bool(true));
        negations.push(Expr::Not(Box::new(g)));
    }
    if negations.is_empty() {
        return Err(CompileError::Internal(format!(
            "`otherwise` guard on edge {} without sibling guards",
            edge.name
        )));
    }
    Ok(Expr::and_all(negations))
}

/// Wave-front path construction: from every output queue, walk edges through
/// intermediate nodes, conjoining guards, until input queues are reached.
/// Every distinct route yields its own path.
fn create_paths(rt: &mut ActivityRuntime) -> Result<(), CompileError> {
    let mut paths = Vec::new();
    for start in 0..rt.queues.len() {
        if rt.queues[start].kind != QueueKind::Output {
            continue;
        }
        // (edge to traverse, condition so far, join seen, route so far)
        let mut frontier: VecDeque<(REdgeId, Expr, bool, Vec<REdgeId>)> = VecDeque::new();
        for (eid, edge) in rt.redges.iter().enumerate() {
            if edge.source == REnd::Queue(start) {
                frontier.push_back((eid, Expr::Bool(true), false, Vec::new()));
            }
        }
        while let Some((eid, cond, has_join, route)) = frontier.pop_front() {
            let edge = &rt.redges[eid];
            let cond = Expr::and_all(vec![cond, edge.guard.clone()]);
            let mut route = route;
            route.push(eid);
            if route.len() > rt.redges.len() {
                return Err(CompileError::Internal(
                    "path construction did not terminate; control cycle slipped past validation"
                        .into(),
                ));
            }
            match edge.target {
                REnd::Queue(end) => {
                    paths.push(PathR { start, end, pass_rule: cond, has_join, route });
                }
                REnd::Inter(i) => {
                    let inode = &rt.inter_nodes[i];
                    let has_join = has_join || inode.kind == NodeKind::Join;
                    for (next, edge) in rt.redges.iter().enumerate() {
                        if edge.source == REnd::Inter(i) {
                            frontier.push_back((next, cond.clone(), has_join, route.clone()));
                        }
                    }
                }
            }
        }
    }
    // a pull path must not contain a fork (validation rule E2)
    for path in &paths {
        if path.has_join {
            for &eid in &path.route {
                if let REnd::Inter(i) = rt.redges[eid].target {
                    if rt.inter_nodes[i].kind == NodeKind::Fork {
                        return Err(CompileError::Internal(format!(
                            "pull path from `{}` crosses fork `{}`",
                            rt.queues[path.start].name, rt.inter_nodes[i].name
                        )));
                    }
                }
            }
        }
    }
    rt.paths = paths;
    Ok(())
}

/// Engine assignment: a push engine per output queue with at least one
/// join-free outgoing path (owning exactly those), a pull engine per input
/// queue with at least one join-bearing incoming path (owning exactly those).
fn create_token_engines(rt: &mut ActivityRuntime) -> Result<(), CompileError> {
    for q in 0..rt.queues.len() {
        match rt.queues[q].kind {
            QueueKind::Output => {
                let owned: Vec<PathId> = rt
                    .paths
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.start == q && !p.has_join)
                    .map(|(i, _)| i)
                    .collect();
                if !owned.is_empty() {
                    rt.push_engines.push(PushEngine { queue: q, paths: owned });
                }
            }
            QueueKind::Input => {
                let owned: Vec<PathId> = rt
                    .paths
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.end == q && p.has_join)
                    .map(|(i, _)| i)
                    .collect();
                if !owned.is_empty() {
                    let criteria = create_join_criteria(rt, q, &owned)?;
                    let criteria_expr = criteria_to_expr(rt, &criteria);
                    let mut source_queues = Vec::new();
                    for &p in &owned {
                        let s = rt.paths[p].start;
                        if !source_queues.contains(&s) {
                            source_queues.push(s);
                        }
                    }
                    rt.pull_engines.push(PullEngine {
                        queue: q,
                        paths: owned,
                        criteria,
                        criteria_expr,
                        source_queues,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Build the join criteria by walking upstream from the serviced input queue
/// over pull-path edges only: joins contribute AND (with their join
/// specification as a data predicate), merges contribute OR, decisions are
/// transparent. Leaves are the output queues, each tied to its pull path.
fn create_join_criteria(
    rt: &ActivityRuntime,
    ique: QueueId,
    owned: &[PathId],
) -> Result<Criteria, CompileError> {
    let mut of_interest = vec![false; rt.redges.len()];
    for &p in owned {
        for &e in &rt.paths[p].route {
            of_interest[e] = true;
        }
    }
    let final_edges: Vec<REdgeId> = (0..rt.redges.len())
        .filter(|&e| of_interest[e] && rt.redges[e].target == REnd::Queue(ique))
        .collect();
    let mut branches = Vec::new();
    for e in final_edges {
        branches.push(branch(rt, owned, &of_interest, e, &[])?);
    }
    Ok(collapse(match branches.len() {
        0 => Criteria::Never,
        1 => branches.pop().unwrap(),
        // several independent incoming edges: any one of them suffices
        _ => Criteria::Or(branches),
    }))
}

fn branch(
    rt: &ActivityRuntime,
    owned: &[PathId],
    of_interest: &[bool],
    edge: REdgeId,
    downstream: &[REdgeId],
) -> Result<Criteria, CompileError> {
    let mut suffix = Vec::with_capacity(downstream.len() + 1);
    suffix.push(edge);
    suffix.extend_from_slice(downstream);
    match rt.redges[edge].source {
        REnd::Queue(q) => {
            let path = owned
                .iter()
                .copied()
                .find(|&p| rt.paths[p].start == q && rt.paths[p].route == suffix)
                .ok_or_else(|| {
                    CompileError::Internal(format!(
                        "no pull path matches route from `{}`",
                        rt.queues[q].name
                    ))
                })?;
            Ok(Criteria::Leaf { queue: q, path })
        }
        REnd::Inter(i) => {
            let node = &rt.inter_nodes[i];
            let incoming: Vec<REdgeId> = (0..rt.redges.len())
                .filter(|&e| rt.redges[e].target == REnd::Inter(i))
                .collect();
            match node.kind {
                NodeKind::Join => {
                    let mut args = Vec::new();
                    if let Some(spec) = &node.join_spec {
                        args.push(Criteria::Pred(spec.clone()));
                    }
                    for e in incoming {
                        if of_interest[e] {
                            args.push(branch(rt, owned, of_interest, e, &suffix)?);
                        } else {
                            // a join input no token can reach: never satisfied
                            args.push(Criteria::Never);
                        }
                    }
                    Ok(Criteria::And(args))
                }
                NodeKind::Merge => {
                    let mut args = Vec::new();
                    for e in incoming {
                        // push-route alternatives are not part of the pull fan
                        if of_interest[e] {
                            args.push(branch(rt, owned, of_interest, e, &suffix)?);
                        }
                    }
                    Ok(match args.len() {
                        0 => Criteria::Never,
                        1 => args.pop().unwrap(),
                        _ => Criteria::Or(args),
                    })
                }
                NodeKind::Decision => {
                    let covered: Vec<REdgeId> = incoming
                        .into_iter()
                        .filter(|&e| of_interest[e])
                        .collect();
                    match covered.as_slice() {
                        [e] => branch(rt, owned, of_interest, *e, &suffix),
                        [] => Ok(Criteria::Never),
                        _ => Err(CompileError::Internal(format!(
                            "decision `{}` has several incoming pull edges",
                            node.name
                        ))),
                    }
                }
                other => Err(CompileError::Internal(format!(
                    "{} `{}` on a pull route",
                    other.label(),
                    node.name
                ))),
            }
        }
    }
}

/// Drop degenerate single-child connectives (a join with one incoming edge
/// and no specification, a merge with one covered alternative).
fn collapse(c: Criteria) -> Criteria {
    match c {
        Criteria::And(args) => {
            let mut args: Vec<Criteria> = args.into_iter().map(collapse).collect();
            if args.len() == 1 && !matches!(args[0], Criteria::Pred(_)) {
                args.pop().unwrap()
            } else {
                Criteria::And(args)
            }
        }
        Criteria::Or(args) => {
            let mut args: Vec<Criteria> = args.into_iter().map(collapse).collect();
            if args.len() == 1 {
                args.pop().unwrap()
            } else {
                Criteria::Or(args)
            }
        }
        other => other,
    }
}

fn criteria_to_expr(rt: &ActivityRuntime, c: &Criteria) -> Expr {
    match c {
        Criteria::And(args) => Expr::And(args.iter().map(|a| criteria_to_expr(rt, a)).collect()),
        Criteria::Or(args) => Expr::Or(args.iter().map(|a| criteria_to_expr(rt, a)).collect()),
        Criteria::Pred(e) => e.clone(),
        Criteria::Leaf { queue, .. } => {
            Expr::Atom(IdentPath::single(rt.queues[*queue].var_name.clone()))
        }
        Criteria::Never => Expr::Bool(false),
    }
}

/// Prefix rendering of join criteria: `OR(AND("p1.att2 = p2.att2", p1, p2),
/// AND(p2, p3))`. Data predicates are quoted, queue variables are bare.
pub fn render_criteria(rt: &ActivityRuntime, c: &Criteria) -> String {
    match c {
        Criteria::And(args) => {
            let inner: Vec<String> = args.iter().map(|a| render_criteria(rt, a)).collect();
            format!("AND({})", inner.join(", "))
        }
        Criteria::Or(args) => {
            let inner: Vec<String> = args.iter().map(|a| render_criteria(rt, a)).collect();
            format!("OR({})", inner.join(", "))
        }
        Criteria::Pred(e) => format!("\"{e}\""),
        Criteria::Leaf { queue, .. } => rt.queues[*queue].var_name.clone(),
        Criteria::Never => "false".to_string(),
    }
}

/// Deterministic textual listing of a compiled runtime: queues, paths, and
/// engines with their join criteria. The golden-file surface for compiler
/// tests; identical input text produces byte-identical output.
pub fn dump_runtime(rt: &ActivityRuntime) -> String {
    let mut out = format!("activity {}\n", rt.name);
    out.push_str("queues:\n");
    for q in &rt.queues {
        let kind = match q.kind {
            QueueKind::Input => "input",
            QueueKind::Output => "output",
        };
        match &q.ty {
            Some(t) => out.push_str(&format!("  {} : {kind} : {t}\n", q.name)),
            None => out.push_str(&format!("  {} : {kind}\n", q.name)),
        }
    }
    out.push_str("paths:\n");
    for p in &rt.paths {
        out.push_str(&format!(
            "  {} -> {} : {} : {}\n",
            rt.queues[p.start].name,
            rt.queues[p.end].name,
            p.pass_rule,
            if p.has_join { "pull" } else { "push" }
        ));
    }
    out.push_str("engines:\n");
    for e in &rt.push_engines {
        let ids: Vec<String> = e.paths.iter().map(|p| p.to_string()).collect();
        out.push_str(&format!(
            "  push {} : paths {}\n",
            rt.queues[e.queue].name,
            ids.join(",")
        ));
    }
    for e in &rt.pull_engines {
        let ids: Vec<String> = e.paths.iter().map(|p| p.to_string()).collect();
        out.push_str(&format!(
            "  pull {} : paths {} : criteria {}\n",
            rt.queues[e.queue].name,
            ids.join(","),
            render_criteria(rt, &e.criteria)
        ));
    }
    out
}

/// Evaluate the route-aware criteria over a concrete candidate binding:
/// a leaf is satisfied when the queue's chosen token was admitted along that
/// leaf's path; data predicates read the bound tokens' fields.
pub fn eval_criteria(
    rt: &ActivityRuntime,
    criteria: &Criteria,
    chosen: &BTreeMap<QueueId, (u64, TokenValue, Vec<PathId>)>,
) -> Result<bool, crate::expr::EvalError> {
    match criteria {
        Criteria::And(args) => {
            for a in args {
                if !eval_criteria(rt, a, chosen)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Criteria::Or(args) => {
            for a in args {
                if eval_criteria(rt, a, chosen)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        Criteria::Pred(e) => {
            let mut binding = crate::expr::Binding::new();
            for (q, (_, value, _)) in chosen {
                binding.bind(rt.queues[*q].var_name.clone(), value.clone());
                binding.bind(rt.queues[*q].name.clone(), value.clone());
            }
            crate::expr::eval_join_criteria(e, &binding)
        }
        Criteria::Leaf { queue, path } => Ok(chosen
            .get(queue)
            .map(|(_, _, passed)| passed.contains(path))
            .unwrap_or(false)),
        Criteria::Never => Ok(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_program;

    fn compile(src: &str, name: &str) -> ActivityRuntime {
        let program = parse_program(src).unwrap();
        let reports = crate::validate::validate_program(&program);
        for (aname, report) in &reports {
            assert!(report.is_clean(), "{aname}: {report}");
        }
        let idx = program.activity_idx(name).unwrap();
        compile_activity(&program, idx).unwrap()
    }

    #[test]
    fn minimal_diagram_compiles_to_one_push_path() {
        let rt = compile(crate::parse::tests::MINIMAL, "A");
        assert_eq!(rt.stable_nodes.len(), 2);
        assert_eq!(rt.queues.len(), 2);
        assert_eq!(rt.paths.len(), 1);
        assert_eq!(rt.push_engines.len(), 1);
        assert_eq!(rt.pull_engines.len(), 0);
        let dump = dump_runtime(&rt);
        assert!(dump.contains("  i.out -> f.in : true : push\n"), "{dump}");
    }

    #[test]
    fn decision_produces_one_path_per_branch() {
        let src = "opaque b; activity A { \
            action a calls b; pin a.o : T; \
            action c calls b; pin c.i : T; \
            action e calls b; pin e.i : T; \
            decision d; \
            edge a.o -> d; \
            edge d -> c.i guard x = 1; \
            edge d -> e.i guard otherwise; }";
        let rt = compile(src, "A");
        assert_eq!(rt.paths.len(), 2);
        assert_eq!(rt.paths[0].pass_rule.to_string(), "x = 1");
        assert_eq!(rt.paths[1].pass_rule.to_string(), "NOT x = 1");
        assert_eq!(rt.push_engines.len(), 1);
        assert_eq!(rt.push_engines[0].paths, vec![0, 1]);
    }

    #[test]
    fn join_produces_pull_path_and_engine() {
        let src = "opaque b; activity A { \
            action a calls b; pin a.p : T; \
            action c calls b; pin c.q : T; \
            action e calls b; pin e.i; \
            join j; \
            edge a.p -> j; edge c.q -> j; edge j -> e.i; }";
        let rt = compile(src, "A");
        assert_eq!(rt.paths.len(), 2);
        assert!(rt.paths.iter().all(|p| p.has_join));
        assert!(rt.push_engines.is_empty());
        assert_eq!(rt.pull_engines.len(), 1);
        let e = &rt.pull_engines[0];
        assert_eq!(e.paths.len(), 2);
        assert_eq!(render_criteria(&rt, &e.criteria), "AND(p, q)");
    }

    #[test]
    fn join_spec_becomes_quoted_data_predicate() {
        let src = "opaque b; activity A { \
            action x calls b; pin x.a : T; \
            action y calls b; pin y.b : T; \
            action e calls b; pin e.i; \
            join j when a.k > b.k; \
            edge x.a -> j; edge y.b -> j; edge j -> e.i; }";
        let rt = compile(src, "A");
        let e = &rt.pull_engines[0];
        assert_eq!(render_criteria(&rt, &e.criteria), "AND(\"a.k > b.k\", a, b)");
    }

    #[test]
    fn compilation_is_deterministic() {
        let src = "opaque b; activity A { \
            action a calls b; pin a.o : T; \
            action c calls b; pin c.o : T; \
            action e calls b; pin e.i; \
            join j; \
            edge a.o -> j; edge c.o -> j; edge j -> e.i; }";
        let d1 = dump_runtime(&compile(src, "A"));
        let d2 = dump_runtime(&compile(src, "A"));
        assert_eq!(d1, d2);
    }
}
