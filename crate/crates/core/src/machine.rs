//! The executing virtual machine: a deterministic reaction scheduler driving
//! push/pull token engines, action firings, final nodes, and activity
//! lifecycle over one or more activity instances (sub-activities run
//! interleaved under the same scheduler).
//!
//! All nondeterminism is concentrated in one place: when several reactions
//! are enabled, the seeded RNG picks which fires next. A fixed seed replays
//! the exact run; different seeds may only reorder causally independent
//! steps.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::behavior::{BehaviorError, BehaviorRegistry};
use crate::compile::{
    compile_activity, eval_criteria, ActionState, ActivityRuntime, PathId, QueueId, QueueKind,
    REnd, StableId, StableKind,
};
use crate::expr::eval_guard;
use crate::model::{ExecutionMode, NodeKind, Program};
use crate::rng::SimRng;
use crate::trace::{
    RunResult, RunStatus, TokenOrigin, TokenRef, TraceEvent, TraceKind,
};
use crate::validate::validate;
use crate::value::TokenValue;

pub type InstanceId = usize;
pub type TokenId = u64;

const MAX_INVOCATION_DEPTH: usize = 64;

#[derive(Clone, Debug)]
pub struct Token {
    pub id: TokenId,
    pub value: TokenValue,
    pub instance: InstanceId,
    pub queue: QueueId,
    pub group: Option<u64>,
    /// Paths out of the current output queue whose passRule this token
    /// satisfies; evaluated once on arrival. Empty means the token sticks.
    pub pass: Vec<PathId>,
}

#[derive(Clone, Debug)]
struct Instance {
    runtime: ActivityRuntime,
    parent: Option<InstanceId>,
    children: Vec<InstanceId>,
    depth: usize,
}

#[derive(Clone, Debug)]
struct DetachedBody {
    instance: InstanceId,
    action: StableId,
    firing: u64,
    behavior: String,
    args: Vec<TokenValue>,
    done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reaction {
    Push(InstanceId, usize),
    Pull(InstanceId, usize),
    Action(InstanceId, StableId),
    SyncReturn(InstanceId, StableId),
    FlowFinal(InstanceId, StableId),
    ActivityFinal(InstanceId, StableId),
    ActivityProcess(InstanceId),
    Detached(usize),
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum MachineError {
    #[error("activity `{0}` not found in the program")]
    UnknownActivity(String),
    #[error("activity `{name}` fails validation:\n{report}")]
    Invalid { name: String, report: String },
    #[error("activity instance is not active")]
    NotActive,
    #[error("activity instance is already active")]
    AlreadyActive,
    #[error("expected {expected} arguments, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("argument {index} has type `{got}`, parameter `{param}` needs `{expected}`")]
    TypeMismatch {
        index: usize,
        param: String,
        expected: String,
        got: String,
    },
}

/// The virtual machine: activity factory, instance arena, token store, and
/// the reaction scheduler.
pub struct Machine {
    program: Arc<Program>,
    behaviors: BehaviorRegistry,
    instances: Vec<Instance>,
    tokens: BTreeMap<TokenId, Token>,
    groups: BTreeMap<u64, Vec<TokenId>>,
    /// Shared instances of single-execution-mode activities, per definition.
    single_pool: BTreeMap<String, InstanceId>,
    detached: Vec<DetachedBody>,
    rng: SimRng,
    trace: Vec<TraceEvent>,
    next_token: u64,
    next_group: u64,
    next_firing: u64,
    seq: u64,
    error: Option<String>,
    /// Number of scheduler steps where a token sat in two engines' candidate
    /// sets; stays zero on diagrams with exclusive guards.
    pub race_violations: u64,
    pub check_races: bool,
}

impl Machine {
    pub fn new(program: Arc<Program>, behaviors: BehaviorRegistry, seed: u64) -> Self {
        Machine {
            program,
            behaviors,
            instances: Vec::new(),
            tokens: BTreeMap::new(),
            groups: BTreeMap::new(),
            single_pool: BTreeMap::new(),
            detached: Vec::new(),
            rng: SimRng::new(seed),
            trace: Vec::new(),
            next_token: 0,
            next_group: 0,
            next_firing: 0,
            seq: 0,
            error: None,
            race_violations: 0,
            check_races: true,
        }
    }

    /// Registry with all stubs declared in the program's `opaque` statements.
    pub fn registry_from_program(program: &Program) -> BehaviorRegistry {
        let mut reg = BehaviorRegistry::new();
        for decl in &program.opaques {
            if let Some(stub) = &decl.stub {
                reg.bind_stub(decl.name.clone(), stub.clone());
            }
        }
        reg
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn error(&self) -> Option<&str> {
        self.error.as_deref()
    }

    pub fn runtime(&self, id: InstanceId) -> &ActivityRuntime {
        &self.instances[id].runtime
    }

    pub fn is_active(&self, id: InstanceId) -> bool {
        self.instances[id].runtime.is_active
    }

    /// Token count currently resting in a queue, addressed by pin name.
    pub fn tokens_in(&self, id: InstanceId, queue_name: &str) -> usize {
        let rt = &self.instances[id].runtime;
        rt.queue_by_name(queue_name)
            .map(|q| rt.queues[q].tokens.len())
            .unwrap_or(0)
    }

    pub fn total_tokens(&self, id: InstanceId) -> usize {
        self.instances[id]
            .runtime
            .queues
            .iter()
            .map(|q| q.tokens.len())
            .sum()
    }

    /// Live queue contents for trace-replay audits: (queue name, token ids)
    /// per instance.
    pub fn queue_snapshot(&self) -> BTreeMap<(u64, String), Vec<TokenId>> {
        let mut snap = BTreeMap::new();
        for (iid, inst) in self.instances.iter().enumerate() {
            for q in &inst.runtime.queues {
                snap.insert(
                    (iid as u64, q.name.clone()),
                    q.tokens.iter().copied().collect(),
                );
            }
        }
        snap
    }

    fn emit(&mut self, kind: TraceKind) {
        let seq = self.seq;
        self.seq += 1;
        self.trace.push(TraceEvent { seq, kind });
    }

    fn fail(&mut self, instance: Option<InstanceId>, message: String) {
        self.emit(TraceKind::ExecutionError {
            instance: instance.map(|i| i as u64),
            message: message.clone(),
        });
        if self.error.is_none() {
            self.error = Some(message);
        }
    }

    // -----------------------------------------------------------------------
    // Factory
    // -----------------------------------------------------------------------

    /// Create (or, for single-mode definitions, reuse) a runtime instance and
    /// activate it. No tokens are created here.
    pub fn create_activity(&mut self, name: &str) -> Result<InstanceId, MachineError> {
        self.create_activity_at_depth(name, 0)
    }

    fn create_activity_at_depth(
        &mut self,
        name: &str,
        depth: usize,
    ) -> Result<InstanceId, MachineError> {
        let def_idx = self
            .program
            .activity_idx(name)
            .ok_or_else(|| MachineError::UnknownActivity(name.to_string()))?;
        let model = &self.program.activities[def_idx];
        if model.execution_mode == ExecutionMode::Single {
            if let Some(&existing) = self.single_pool.get(name) {
                if !self.instances[existing].runtime.is_active {
                    // fresh invocation on the shared instance: clear leftovers
                    self.clear_tokens(existing, None);
                    self.instances[existing].runtime.is_active = true;
                    self.emit(TraceKind::ActivityActivated {
                        instance: existing as u64,
                        activity: name.to_string(),
                    });
                }
                return Ok(existing);
            }
        }
        let report = validate(model, &self.program);
        if !report.is_clean() {
            return Err(MachineError::Invalid {
                name: name.to_string(),
                report: report.to_string(),
            });
        }
        let runtime = compile_activity(&self.program, def_idx)
            .map_err(|e| MachineError::Invalid { name: name.to_string(), report: e.to_string() })?;
        let id = self.instances.len();
        self.instances.push(Instance { runtime, parent: None, children: Vec::new(), depth });
        if model.execution_mode == ExecutionMode::Single {
            self.single_pool.insert(name.to_string(), id);
        }
        self.activate(id).expect("fresh instance activates");
        Ok(id)
    }

    /// Flip the instance active; all reactions become eligible. Creates no
    /// tokens.
    pub fn activate(&mut self, id: InstanceId) -> Result<(), MachineError> {
        if self.instances[id].runtime.is_active {
            return Err(MachineError::AlreadyActive);
        }
        self.instances[id].runtime.is_active = true;
        let activity = self.instances[id].runtime.name.clone();
        self.emit(TraceKind::ActivityActivated { instance: id as u64, activity });
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Invocation
    // -----------------------------------------------------------------------

    /// Place the invocation tokens: one data token per input parameter
    /// (positionally) when the activity has input parameters, otherwise one
    /// control token per initial node.
    pub fn seed_invocation(
        &mut self,
        id: InstanceId,
        args: Vec<TokenValue>,
    ) -> Result<(), MachineError> {
        if !self.instances[id].runtime.is_active {
            return Err(MachineError::NotActive);
        }
        let in_params: Vec<_> = self.instances[id]
            .runtime
            .in_parameters()
            .map(|p| (p.name.clone(), p.ty.clone(), p.queue))
            .collect();
        if in_params.is_empty() {
            if !args.is_empty() {
                return Err(MachineError::ArityMismatch { expected: 0, got: args.len() });
            }
            self.emit(TraceKind::ActivityInvoked { instance: id as u64, args: vec![] });
            let initials: Vec<QueueId> = self.instances[id]
                .runtime
                .stable_nodes
                .iter()
                .filter(|s| s.kind == StableKind::Initial)
                .flat_map(|s| s.output_queues.iter().copied())
                .collect();
            for q in initials {
                self.create_token(id, q, TokenValue::control(), TokenOrigin::Invoke);
            }
            return Ok(());
        }
        if args.len() != in_params.len() {
            return Err(MachineError::ArityMismatch {
                expected: in_params.len(),
                got: args.len(),
            });
        }
        let mut seeded = Vec::new();
        for (index, (arg, (pname, pty, queue))) in
            args.iter().zip(in_params.iter()).enumerate()
        {
            let value = match &arg.ty {
                None => TokenValue::data(pty.clone(), arg.fields.clone()),
                Some(t) if t.is_empty() => TokenValue::data(pty.clone(), arg.fields.clone()),
                Some(t) if t == pty => arg.clone(),
                Some(t) => {
                    return Err(MachineError::TypeMismatch {
                        index,
                        param: pname.clone(),
                        expected: pty.clone(),
                        got: t.clone(),
                    })
                }
            };
            seeded.push((*queue, value));
        }
        self.emit(TraceKind::ActivityInvoked {
            instance: id as u64,
            args: seeded.iter().map(|(_, v)| v.clone()).collect(),
        });
        for (queue, value) in seeded {
            self.create_token(id, queue, value, TokenOrigin::Invoke);
        }
        Ok(())
    }

    /// Seed a token directly into a named queue: a hook for white-box tests
    /// and embeddings that drive engines manually.
    pub fn place_token(
        &mut self,
        id: InstanceId,
        queue_name: &str,
        value: TokenValue,
    ) -> Result<TokenId, String> {
        let q = self.instances[id]
            .runtime
            .queue_by_name(queue_name)
            .ok_or_else(|| format!("no queue named `{queue_name}`"))?;
        Ok(self.create_token(id, q, value, TokenOrigin::Invoke))
    }

    /// Output parameter values, positionally; `None` for queues left empty.
    pub fn collect_outputs(&self, id: InstanceId) -> Vec<Option<TokenValue>> {
        let rt = &self.instances[id].runtime;
        rt.out_parameters()
            .map(|p| {
                rt.queues[p.queue]
                    .tokens
                    .front()
                    .and_then(|t| self.tokens.get(t))
                    .map(|t| t.value.clone())
            })
            .collect()
    }

    /// Invoke an activity: seed tokens, run the scheduler to completion of
    /// this invocation, and gather output parameter values.
    pub fn invoke(
        &mut self,
        id: InstanceId,
        args: Vec<TokenValue>,
    ) -> Result<RunResult, MachineError> {
        self.seed_invocation(id, args)?;
        let status = self.run_to_quiescence(id);
        Ok(RunResult {
            status,
            outputs: self.collect_outputs(id),
            trace: self.trace.clone(),
            error: self.error.clone(),
        })
    }

    /// Terminate one instance unconditionally: deactivate and delete every
    /// token in its queues (including output parameters). Idempotent.
    pub fn terminate(&mut self, id: InstanceId) {
        self.instances[id].runtime.is_active = false;
        self.clear_tokens(id, None);
        // pending detached bodies cannot be retracted; they finish later,
        // flagged as post-termination
        self.emit(TraceKind::ActivityTerminated { instance: id as u64 });
    }

    // -----------------------------------------------------------------------
    // Scheduler
    // -----------------------------------------------------------------------

    /// Run until the root instance deactivates (completed), no reaction is
    /// enabled (quiescent-stuck), or an execution error occurred. Detached
    /// asynchronous bodies left pending at completion run afterwards, flagged
    /// as post-termination.
    pub fn run_to_quiescence(&mut self, root: InstanceId) -> RunStatus {
        loop {
            if self.error.is_some() {
                return RunStatus::Error;
            }
            if !self.instances[root].runtime.is_active {
                self.drain_detached(true);
                if self.error.is_some() {
                    return RunStatus::Error;
                }
                return RunStatus::Completed;
            }
            match self.step_once() {
                Some(_) => {}
                None => {
                    return RunStatus::QuiescentStuck;
                }
            }
        }
    }

    /// Execute one enabled reaction; `None` when nothing is enabled.
    pub fn step_once(&mut self) -> Option<Reaction> {
        if self.check_races {
            self.assert_race_freedom();
        }
        let enabled = self.enabled_reactions();
        if enabled.is_empty() {
            return None;
        }
        let pick = enabled[self.rng.below(enabled.len())];
        self.execute(pick);
        Some(pick)
    }

    pub fn enabled_reactions(&mut self) -> Vec<Reaction> {
        let mut out = Vec::new();
        for iid in 0..self.instances.len() {
            if !self.instances[iid].runtime.is_active {
                continue;
            }
            let rt = &self.instances[iid].runtime;
            for (e, engine) in rt.push_engines.iter().enumerate() {
                let queue = &rt.queues[engine.queue];
                let enabled = queue.tokens.iter().any(|t| {
                    self.tokens
                        .get(t)
                        .map(|tok| tok.pass.iter().any(|p| engine.paths.contains(p)))
                        .unwrap_or(false)
                });
                if enabled {
                    out.push(Reaction::Push(iid, e));
                }
            }
            let n_pull = rt.pull_engines.len();
            for e in 0..n_pull {
                if self.pull_candidate_binding(iid, e).is_some() {
                    out.push(Reaction::Pull(iid, e));
                }
            }
            let rt = &self.instances[iid].runtime;
            for (s, node) in rt.stable_nodes.iter().enumerate() {
                match node.kind {
                    StableKind::Action => match &node.action_state {
                        ActionState::Idle => {
                            if !node.input_queues.is_empty()
                                && node
                                    .input_queues
                                    .iter()
                                    .all(|&q| !rt.queues[q].tokens.is_empty())
                            {
                                out.push(Reaction::Action(iid, s));
                            }
                        }
                        ActionState::AwaitingSub { sub, .. } => {
                            if !self.instances[*sub].runtime.is_active {
                                out.push(Reaction::SyncReturn(iid, s));
                            }
                        }
                    },
                    StableKind::FlowFinal => {
                        if node
                            .input_queues
                            .iter()
                            .any(|&q| !rt.queues[q].tokens.is_empty())
                        {
                            out.push(Reaction::FlowFinal(iid, s));
                        }
                    }
                    StableKind::ActivityFinal => {
                        if node
                            .input_queues
                            .iter()
                            .any(|&q| !rt.queues[q].tokens.is_empty())
                        {
                            out.push(Reaction::ActivityFinal(iid, s));
                        }
                    }
                    _ => {}
                }
            }
            let rt = &self.instances[iid].runtime;
            // the alternative completion runs only for final-less activities
            // with at least one output parameter; an empty parameter list
            // must not complete the activity vacuously
            if !rt.has_activity_final {
                let outs: Vec<QueueId> = rt.out_parameters().map(|p| p.queue).collect();
                if !outs.is_empty() && outs.iter().all(|&q| !rt.queues[q].tokens.is_empty()) {
                    out.push(Reaction::ActivityProcess(iid));
                }
            }
        }
        for (d, body) in self.detached.iter().enumerate() {
            if !body.done {
                out.push(Reaction::Detached(d));
            }
        }
        out
    }

    fn execute(&mut self, reaction: Reaction) {
        match reaction {
            Reaction::Push(i, e) => {
                self.push_engine_step(i, e);
            }
            Reaction::Pull(i, e) => {
                self.pull_engine_step(i, e);
            }
            Reaction::Action(i, s) => {
                self.action_step(i, s);
            }
            Reaction::SyncReturn(i, s) => self.sync_return_step(i, s),
            Reaction::FlowFinal(i, s) => {
                self.flow_final_step(i, s);
            }
            Reaction::ActivityFinal(i, s) => {
                self.activity_final_step(i, s);
            }
            Reaction::ActivityProcess(i) => {
                self.activity_process_step(i);
            }
            Reaction::Detached(d) => self.run_detached(d, false),
        }
    }

    // -----------------------------------------------------------------------
    // Token plumbing
    // -----------------------------------------------------------------------

    fn create_token(
        &mut self,
        instance: InstanceId,
        queue: QueueId,
        value: TokenValue,
        origin: TokenOrigin,
    ) -> TokenId {
        let id = self.next_token;
        self.next_token += 1;
        let queue_name = self.instances[instance].runtime.queues[queue].name.clone();
        self.emit(TraceKind::TokenCreated {
            instance: instance as u64,
            token: id,
            queue: queue_name,
            value: value.clone(),
            origin,
        });
        self.tokens.insert(
            id,
            Token { id, value, instance, queue, group: None, pass: Vec::new() },
        );
        self.land_token(instance, queue, id);
        id
    }

    /// Put an existing token into a queue and, for output queues, evaluate
    /// every outgoing path's passRule once.
    fn land_token(&mut self, instance: InstanceId, queue: QueueId, token: TokenId) {
        {
            let q = &mut self.instances[instance].runtime.queues[queue];
            q.tokens.push_back(token);
            q.arrivals += 1;
            let tok = self.tokens.get_mut(&token).expect("token exists");
            tok.instance = instance;
            tok.queue = queue;
            tok.pass.clear();
        }
        let rt = &self.instances[instance].runtime;
        let q = &rt.queues[queue];
        // type discipline: typed pins accept matching data tokens only;
        // untyped pins accept anything
        let value = &self.tokens[&token].value;
        if let Some(expected) = &q.ty {
            let ok = value.ty.as_deref() == Some(expected.as_str());
            if !ok {
                let msg = format!(
                    "queue `{}` expects type `{expected}`, token has `{}`",
                    q.name,
                    value.ty.as_deref().unwrap_or("NULL")
                );
                self.fail(Some(instance), msg);
                return;
            }
        }
        if q.kind != QueueKind::Output {
            return;
        }
        let paths: Vec<(PathId, crate::expr::Expr)> = rt
            .paths_from(queue)
            .map(|(pid, p)| (pid, p.pass_rule.clone()))
            .collect();
        let value = self.tokens[&token].value.clone();
        let mut satisfied = Vec::new();
        for (pid, rule) in paths {
            match eval_guard(&rule, &value) {
                Ok(true) => satisfied.push(pid),
                Ok(false) => {}
                Err(e) => {
                    self.fail(Some(instance), format!("passRule evaluation failed: {e}"));
                    return;
                }
            }
        }
        // mutual exclusivity: two satisfied paths must not diverge at a
        // decision (forks legitimately duplicate)
        let mut violation: Option<String> = None;
        {
            let rt = &self.instances[instance].runtime;
            'pairs: for a in 0..satisfied.len() {
                for b in a + 1..satisfied.len() {
                    if let Some(node) =
                        self.divergence_node(instance, satisfied[a], satisfied[b])
                    {
                        if rt.inter_nodes[node].kind == NodeKind::Decision {
                            violation = Some(format!(
                                "token in `{}` satisfies two paths diverging at decision `{}`",
                                rt.queues[queue].name, rt.inter_nodes[node].name
                            ));
                            break 'pairs;
                        }
                    }
                }
            }
        }
        if let Some(msg) = violation {
            self.fail(Some(instance), msg);
            return;
        }
        self.tokens.get_mut(&token).unwrap().pass = satisfied;
    }

    /// First intermediate node where two paths from one queue take different
    /// edges.
    fn divergence_node(
        &self,
        instance: InstanceId,
        a: PathId,
        b: PathId,
    ) -> Option<usize> {
        let rt = &self.instances[instance].runtime;
        let (ra, rb) = (&rt.paths[a].route, &rt.paths[b].route);
        for i in 0..ra.len().min(rb.len()) {
            if ra[i] != rb[i] {
                if i == 0 {
                    return None;
                }
                return match rt.redges[ra[i - 1]].target {
                    REnd::Inter(n) => Some(n),
                    REnd::Queue(_) => None,
                };
            }
        }
        None
    }

    fn delete_token(&mut self, token: TokenId, reason: &str) {
        let Some(tok) = self.tokens.remove(&token) else { return };
        let rt = &mut self.instances[tok.instance].runtime;
        rt.queues[tok.queue].tokens.retain(|&t| t != token);
        if let Some(g) = tok.group {
            if let Some(members) = self.groups.get_mut(&g) {
                members.retain(|&t| t != token);
                if members.is_empty() {
                    self.groups.remove(&g);
                }
            }
        }
        let queue_name = self.instances[tok.instance].runtime.queues[tok.queue].name.clone();
        self.emit(TraceKind::TokenDeleted {
            instance: tok.instance as u64,
            token,
            queue: queue_name,
            reason: reason.to_string(),
        });
    }

    /// Delete every token of an instance; `spare` lists queues to leave
    /// untouched.
    fn clear_tokens(&mut self, id: InstanceId, spare: Option<&[QueueId]>) {
        let queues: Vec<QueueId> = (0..self.instances[id].runtime.queues.len()).collect();
        for q in queues {
            if spare.map(|s| s.contains(&q)).unwrap_or(false) {
                continue;
            }
            loop {
                let next = self.instances[id].runtime.queues[q].tokens.front().copied();
                match next {
                    Some(t) => self.delete_token(t, "cleanup"),
                    None => break,
                }
            }
        }
    }

    // -----------------------------------------------------------------------
    // Engine steps
    // -----------------------------------------------------------------------

    /// One push-engine reaction: take the oldest token that can pass at least
    /// one owned path, remove it, and append a copy to every input queue
    /// whose path it satisfies.
    pub fn push_engine_step(&mut self, instance: InstanceId, engine_idx: usize) -> bool {
        let rt = &self.instances[instance].runtime;
        let engine = &rt.push_engines[engine_idx];
        let queue = engine.queue;
        let owned = engine.paths.clone();
        let token = rt.queues[queue]
            .tokens
            .iter()
            .copied()
            .find(|t| {
                self.tokens
                    .get(t)
                    .map(|tok| tok.pass.iter().any(|p| owned.contains(p)))
                    .unwrap_or(false)
            });
        let Some(token) = token else { return false };
        let satisfied: Vec<PathId> = self.tokens[&token]
            .pass
            .iter()
            .copied()
            .filter(|p| owned.contains(p))
            .collect();
        let value = self.tokens[&token].value.clone();
        let targets: Vec<QueueId> = satisfied
            .iter()
            .map(|&p| self.instances[instance].runtime.paths[p].end)
            .collect();
        for end in targets {
            self.create_token(
                instance,
                end,
                value.clone(),
                TokenOrigin::PushCopy { parent: token },
            );
            if self.error.is_some() {
                return true;
            }
        }
        self.delete_token(token, "pushed");
        true
    }

    /// Candidate tokens of a pull engine: for each source queue in engine
    /// order, the tokens (oldest first) that passed at least one of the
    /// engine's paths from that queue.
    fn pull_candidates(
        &self,
        instance: InstanceId,
        engine_idx: usize,
    ) -> Vec<(QueueId, Vec<TokenId>)> {
        let rt = &self.instances[instance].runtime;
        let engine = &rt.pull_engines[engine_idx];
        engine
            .source_queues
            .iter()
            .map(|&sq| {
                let toks = rt.queues[sq]
                    .tokens
                    .iter()
                    .copied()
                    .filter(|t| {
                        self.tokens
                            .get(t)
                            .map(|tok| tok.pass.iter().any(|p| engine.paths.contains(p)))
                            .unwrap_or(false)
                    })
                    .collect();
                (sq, toks)
            })
            .collect()
    }

    /// Scan candidate subsets (one token per source queue at most, by
    /// increasing token count, oldest tokens first) and return the first
    /// selection satisfying the join criteria.
    fn pull_candidate_binding(
        &mut self,
        instance: InstanceId,
        engine_idx: usize,
    ) -> Option<Vec<TokenId>> {
        let candidates = self.pull_candidates(instance, engine_idx);
        let per_queue: Vec<(QueueId, Vec<TokenId>)> = candidates
            .into_iter()
            .filter(|(_, toks)| !toks.is_empty())
            .collect();
        if per_queue.is_empty() {
            return None;
        }
        let criteria = self.instances[instance].runtime.pull_engines[engine_idx]
            .criteria
            .clone();
        let nqueues = per_queue.len();
        for size in 1..=nqueues {
            for combo in k_subsets(nqueues, size) {
                let mut choice = vec![0usize; size];
                loop {
                    let mut chosen = BTreeMap::new();
                    for (slot, &qi) in combo.iter().enumerate() {
                        let (queue, toks) = &per_queue[qi];
                        let t = toks[choice[slot]];
                        let tok = &self.tokens[&t];
                        chosen.insert(*queue, (t, tok.value.clone(), tok.pass.clone()));
                    }
                    let verdict = {
                        let rt = &self.instances[instance].runtime;
                        eval_criteria(rt, &criteria, &chosen)
                    };
                    match verdict {
                        Ok(true) => {
                            return Some(chosen.values().map(|(t, _, _)| *t).collect())
                        }
                        Ok(false) => {}
                        Err(e) => {
                            self.fail(
                                Some(instance),
                                format!("join criteria evaluation failed: {e}"),
                            );
                            return None;
                        }
                    }
                    if !advance_odometer(&mut choice, |slot| per_queue[combo[slot]].1.len()) {
                        break;
                    }
                }
            }
        }
        None
    }

    /// One pull-engine reaction: find the first admissible token selection;
    /// if all selected tokens are control tokens, collapse them into one new
    /// control token in the serviced queue, otherwise move the data tokens
    /// in and bind them into a fresh group (control tokens in the selection
    /// are deleted).
    pub fn pull_engine_step(&mut self, instance: InstanceId, engine_idx: usize) -> bool {
        let Some(selection) = self.pull_candidate_binding(instance, engine_idx) else {
            return false;
        };
        let ique = self.instances[instance].runtime.pull_engines[engine_idx].queue;
        let all_control = selection
            .iter()
            .all(|t| self.tokens[t].value.is_control());
        if all_control {
            for &t in &selection {
                self.delete_token(t, "joined");
            }
            self.create_token(
                instance,
                ique,
                TokenValue::control(),
                TokenOrigin::PullControl { parents: selection },
            );
            return true;
        }
        let group = self.next_group;
        self.next_group += 1;
        let mut members = Vec::new();
        for &t in &selection {
            if self.tokens[&t].value.is_control() {
                self.delete_token(t, "joined");
                continue;
            }
            // move: remove from the source queue, land in the input queue
            let from = {
                let tok = self.tokens.get_mut(&t).unwrap();
                let from = tok.queue;
                tok.group = Some(group);
                from
            };
            let rt = &mut self.instances[instance].runtime;
            rt.queues[from].tokens.retain(|&x| x != t);
            let from_name = rt.queues[from].name.clone();
            let to_name = rt.queues[ique].name.clone();
            self.land_token(instance, ique, t);
            self.emit(TraceKind::TokenMoved {
                instance: instance as u64,
                token: t,
                from: from_name,
                to: to_name,
            });
            members.push(t);
        }
        self.groups.insert(group, members.clone());
        self.emit(TraceKind::GroupFormed {
            instance: instance as u64,
            group,
            members,
        });
        true
    }

    // -----------------------------------------------------------------------
    // Actions
    // -----------------------------------------------------------------------

    /// One action firing: the implicit join over its input queues. Consumes
    /// the oldest token (or its whole group) from every input queue, then
    /// executes the behavior or invokes the sub-activity.
    pub fn action_step(&mut self, instance: InstanceId, stable: StableId) -> bool {
        let rt = &self.instances[instance].runtime;
        let node = &rt.stable_nodes[stable];
        if node.action_state != ActionState::Idle || node.input_queues.is_empty() {
            return false;
        }
        if node
            .input_queues
            .iter()
            .any(|&q| rt.queues[q].tokens.is_empty())
        {
            return false;
        }
        let action_name = node.name.clone();
        let input_queues = node.input_queues.clone();
        let behavior = node.behavior.clone().unwrap_or_default();
        let is_sync = node.is_synchronous;

        // consumption: oldest token per queue; a grouped token brings its
        // entire group along
        let mut consumed: Vec<TokenId> = Vec::new();
        for &q in &input_queues {
            let front = *self.instances[instance].runtime.queues[q]
                .tokens
                .front()
                .expect("checked nonempty");
            match self.tokens[&front].group {
                Some(g) => {
                    let members = self.groups.get(&g).cloned().unwrap_or_default();
                    consumed.extend(members);
                }
                None => consumed.push(front),
            }
        }
        let firing = self.next_firing;
        self.next_firing += 1;
        let consumed_refs: Vec<TokenRef> = consumed
            .iter()
            .map(|t| TokenRef { token: *t, value: self.tokens[t].value.clone() })
            .collect();
        self.emit(TraceKind::ActionStarted {
            instance: instance as u64,
            action: action_name.clone(),
            firing,
            consumed: consumed_refs,
        });
        let in_args: Vec<TokenValue> = consumed
            .iter()
            .map(|t| self.tokens[t].value.clone())
            .filter(|v| !v.is_control())
            .collect();
        for &t in &consumed {
            self.delete_token(t, "consumed");
        }

        // sub-activity or opaque behavior
        if self.program.activity(&behavior).is_some() {
            if self.instances[instance].depth + 1 > MAX_INVOCATION_DEPTH {
                self.fail(
                    Some(instance),
                    format!("invocation depth limit exceeded at action `{action_name}`"),
                );
                return true;
            }
            let depth = self.instances[instance].depth + 1;
            let sub = match self.create_activity_at_depth(&behavior, depth) {
                Ok(sub) => sub,
                Err(e) => {
                    self.fail(Some(instance), format!("sub-activity creation failed: {e}"));
                    return true;
                }
            };
            self.instances[sub].parent = Some(instance);
            self.instances[instance].children.push(sub);
            self.emit(TraceKind::SubActivityInvoked {
                instance: instance as u64,
                action: action_name.clone(),
                firing,
                sub_instance: sub as u64,
            });
            if let Err(e) = self.seed_invocation(sub, in_args) {
                self.fail(Some(instance), format!("sub-activity invocation failed: {e}"));
                return true;
            }
            if is_sync {
                self.instances[instance].runtime.stable_nodes[stable].action_state =
                    ActionState::AwaitingSub { sub, firing };
            } else {
                self.emit_control_outputs(instance, stable, firing, &action_name);
            }
            return true;
        }

        if is_sync {
            let outputs = match self.behaviors.execute(&behavior, &in_args) {
                Ok(outputs) => outputs,
                Err(e) => {
                    self.fail(Some(instance), behavior_error_message(&action_name, e));
                    return true;
                }
            };
            self.place_outputs(instance, stable, firing, &action_name, outputs, false);
        } else {
            self.detached.push(DetachedBody {
                instance,
                action: stable,
                firing,
                behavior,
                args: in_args,
                done: false,
            });
            self.emit_control_outputs(instance, stable, firing, &action_name);
        }
        true
    }

    /// Asynchronous firings put control tokens on all output queues
    /// immediately.
    fn emit_control_outputs(
        &mut self,
        instance: InstanceId,
        stable: StableId,
        firing: u64,
        action_name: &str,
    ) {
        let outputs = self.instances[instance].runtime.stable_nodes[stable]
            .output_queues
            .clone();
        let mut produced = Vec::new();
        for q in outputs {
            let t = self.create_token(
                instance,
                q,
                TokenValue::control(),
                TokenOrigin::ActionOutput { firing },
            );
            produced.push(TokenRef { token: t, value: TokenValue::control() });
            if self.error.is_some() {
                return;
            }
        }
        self.emit(TraceKind::ActionCompleted {
            instance: instance as u64,
            action: action_name.to_string(),
            firing,
            produced,
            detached: false,
            post_termination: false,
        });
    }

    /// Place synchronous results as data tokens on the output queues,
    /// positionally, typed by the pin (untyped pins adopt the value's type).
    fn place_outputs(
        &mut self,
        instance: InstanceId,
        stable: StableId,
        firing: u64,
        action_name: &str,
        outputs: Vec<TokenValue>,
        from_sub: bool,
    ) {
        let output_queues = self.instances[instance].runtime.stable_nodes[stable]
            .output_queues
            .clone();
        if outputs.len() != output_queues.len() {
            let what = if from_sub { "sub-activity" } else { "behavior" };
            self.fail(
                Some(instance),
                format!(
                    "action `{action_name}`: {what} returned {} values for {} output pins",
                    outputs.len(),
                    output_queues.len()
                ),
            );
            return;
        }
        let mut produced = Vec::new();
        for (value, &q) in outputs.into_iter().zip(output_queues.iter()) {
            let pin_ty = self.instances[instance].runtime.queues[q].ty.clone();
            let value = match pin_ty {
                Some(t) => TokenValue::data(t, value.fields),
                None => value,
            };
            let t = self.create_token(
                instance,
                q,
                value.clone(),
                TokenOrigin::ActionOutput { firing },
            );
            produced.push(TokenRef { token: t, value });
            if self.error.is_some() {
                return;
            }
        }
        self.emit(TraceKind::ActionCompleted {
            instance: instance as u64,
            action: action_name.to_string(),
            firing,
            produced,
            detached: false,
            post_termination: false,
        });
    }

    /// A waiting synchronous action collects the completed sub-activity's
    /// output parameter values.
    fn sync_return_step(&mut self, instance: InstanceId, stable: StableId) {
        let ActionState::AwaitingSub { sub, firing } =
            self.instances[instance].runtime.stable_nodes[stable].action_state.clone()
        else {
            return;
        };
        if self.instances[sub].runtime.is_active {
            return;
        }
        self.instances[instance].runtime.stable_nodes[stable].action_state =
            ActionState::Idle;
        let action_name = self.instances[instance].runtime.stable_nodes[stable]
            .name
            .clone();
        let outputs = self.collect_outputs(sub);
        let missing = outputs.iter().any(|o| o.is_none());
        if missing {
            self.fail(
                Some(instance),
                format!(
                    "action `{action_name}`: sub-activity finished without filling all output parameters"
                ),
            );
            return;
        }
        let outputs: Vec<TokenValue> = outputs.into_iter().flatten().collect();
        self.place_outputs(instance, stable, firing, &action_name, outputs, true);
    }

    fn run_detached(&mut self, idx: usize, post_termination: bool) {
        let body = self.detached[idx].clone();
        if body.done {
            return;
        }
        self.detached[idx].done = true;
        let result = self.behaviors.execute(&body.behavior, &body.args);
        let action_name = self.instances[body.instance].runtime.stable_nodes[body.action]
            .name
            .clone();
        match result {
            // detached results are discarded: control tokens already went out
            Ok(_) => self.emit(TraceKind::ActionCompleted {
                instance: body.instance as u64,
                action: action_name,
                firing: body.firing,
                produced: vec![],
                detached: true,
                post_termination,
            }),
            Err(e) => {
                let msg = behavior_error_message(&action_name, e);
                self.fail(Some(body.instance), msg);
            }
        }
    }

    fn drain_detached(&mut self, post_termination: bool) {
        for idx in 0..self.detached.len() {
            if !self.detached[idx].done {
                self.run_detached(idx, post_termination);
            }
        }
    }

    // -----------------------------------------------------------------------
    // Final nodes and completion
    // -----------------------------------------------------------------------

    /// Flow final: delete the oldest token in the input queue (with its whole
    /// group, groups are never split). Nothing else changes.
    pub fn flow_final_step(&mut self, instance: InstanceId, stable: StableId) -> bool {
        let rt = &self.instances[instance].runtime;
        let Some(&q) = rt.stable_nodes[stable].input_queues.first() else {
            return false;
        };
        let Some(&front) = rt.queues[q].tokens.front() else { return false };
        match self.tokens[&front].group {
            Some(g) => {
                for t in self.groups.get(&g).cloned().unwrap_or_default() {
                    self.delete_token(t, "flow-final");
                }
            }
            None => self.delete_token(front, "flow-final"),
        }
        true
    }

    /// Activity final: deactivate the activity, delete every token except
    /// those resting in output parameter queues, and terminate every
    /// transitively invoked sub-activity.
    pub fn activity_final_step(&mut self, instance: InstanceId, stable: StableId) -> bool {
        let rt = &self.instances[instance].runtime;
        let Some(&q) = rt.stable_nodes[stable].input_queues.first() else {
            return false;
        };
        if rt.queues[q].tokens.is_empty() {
            return false;
        }
        self.instances[instance].runtime.is_active = false;
        let spare: Vec<QueueId> = self.instances[instance]
            .runtime
            .out_parameters()
            .map(|p| p.queue)
            .collect();
        self.clear_tokens(instance, Some(&spare));
        self.emit(TraceKind::ActivityCompleted { instance: instance as u64 });
        // cascade: terminate invoked activities, breadth-first
        let mut frontier = self.instances[instance].children.clone();
        let mut order = Vec::new();
        while let Some(child) = frontier.pop() {
            order.push(child);
            frontier.extend(self.instances[child].children.clone());
        }
        order.sort_unstable();
        for child in order {
            self.terminate(child);
        }
        true
    }

    /// Alternative completion for final-less activities: deactivate once all
    /// output parameter queues hold a token.
    pub fn activity_process_step(&mut self, instance: InstanceId) -> bool {
        let rt = &self.instances[instance].runtime;
        if rt.has_activity_final || !rt.is_active {
            return false;
        }
        let outs: Vec<QueueId> = rt.out_parameters().map(|p| p.queue).collect();
        if outs.is_empty() || outs.iter().any(|&q| rt.queues[q].tokens.is_empty()) {
            return false;
        }
        self.instances[instance].runtime.is_active = false;
        self.emit(TraceKind::ActivityCompleted { instance: instance as u64 });
        true
    }

    // -----------------------------------------------------------------------
    // Race-freedom audit
    // -----------------------------------------------------------------------

    /// No token may sit in two engines' candidate sets at once. Counted per
    /// scheduler step; a violation is also an execution error.
    fn assert_race_freedom(&mut self) {
        let mut claimed: BTreeMap<TokenId, usize> = BTreeMap::new();
        let mut violated = false;
        for inst in 0..self.instances.len() {
            let rt = &self.instances[inst].runtime;
            if !rt.is_active {
                continue;
            }
            for engine in &rt.push_engines {
                for &t in &rt.queues[engine.queue].tokens {
                    let Some(tok) = self.tokens.get(&t) else { continue };
                    if tok.pass.iter().any(|p| engine.paths.contains(p)) {
                        *claimed.entry(t).or_default() += 1;
                    }
                }
            }
            for engine in &rt.pull_engines {
                for &sq in &engine.source_queues {
                    for &t in &rt.queues[sq].tokens {
                        let Some(tok) = self.tokens.get(&t) else { continue };
                        if tok.pass.iter().any(|p| engine.paths.contains(p)) {
                            *claimed.entry(t).or_default() += 1;
                        }
                    }
                }
            }
        }
        for (t, count) in claimed {
            if count > 1 {
                violated = true;
                self.fail(
                    None,
                    format!("race: token {t} is a candidate of {count} engines"),
                );
            }
        }
        if violated {
            self.race_violations += 1;
        }
    }
}

fn behavior_error_message(action: &str, e: BehaviorError) -> String {
    format!("action `{action}`: {e}")
}

/// Lexicographic k-subsets of `0..n`.
fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n || k == 0 {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let mut i = k;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if c[i] != i + n - k {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            return out;
        }
    }
}

/// Advance a mixed-radix counter; the last slot cycles fastest. Returns
/// false once all combinations are exhausted.
fn advance_odometer(choice: &mut [usize], radix: impl Fn(usize) -> usize) -> bool {
    let mut slot = choice.len();
    while slot > 0 {
        slot -= 1;
        choice[slot] += 1;
        if choice[slot] < radix(slot) {
            return true;
        }
        choice[slot] = 0;
    }
    false
}

/// Parse, validate, compile, and run one activity of a source text:
/// convenience entry point used by the CLI and tests.
pub fn run_source(
    source: &str,
    activity: &str,
    args: Vec<TokenValue>,
    seed: u64,
) -> Result<RunResult, String> {
    let program = crate::parse::parse_program(source).map_err(|e| e.to_string())?;
    let registry = Machine::registry_from_program(&program);
    let program = Arc::new(program);
    let model = program
        .activity(activity)
        .ok_or_else(|| format!("activity `{activity}` not found"))?;
    let report = validate(model, &program);
    if !report.is_clean() {
        return Err(format!("validation failed:\n{report}"));
    }
    let mut machine = Machine::new(program, registry, seed);
    let id = machine
        .create_activity(activity)
        .map_err(|e| e.to_string())?;
    machine.invoke(id, args).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceKind;
    use crate::value::Record;

    pub(crate) const PROCESS_ORDER: &str =
        include_str!("../../../diagrams/process_order.ad");
    pub(crate) const FIG6: &str = include_str!("../../../diagrams/fig6.ad");
    const MINIMAL: &str = include_str!("../../../diagrams/minimal.ad");

    pub(crate) fn machine_for(src: &str, seed: u64) -> Machine {
        let program = crate::parse::parse_program(src).unwrap();
        let registry = Machine::registry_from_program(&program);
        Machine::new(Arc::new(program), registry, seed)
    }

    fn record(fields: &[(&str, crate::value::Value)]) -> Record {
        let mut r = Record::new();
        for (k, v) in fields {
            r.set(*k, v.clone());
        }
        r
    }

    #[test]
    fn minimal_run_completes() {
        let mut m = machine_for(MINIMAL, 1);
        let id = m.create_activity("A").unwrap();
        assert!(m.is_active(id));
        assert_eq!(m.total_tokens(id), 0);
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Completed);
        assert!(result.outputs.is_empty());
        // one control token created, later deleted by the final node
        let created = result
            .trace
            .iter()
            .filter(|e| matches!(e.kind, TraceKind::TokenCreated { .. }))
            .count();
        let deleted = result
            .trace
            .iter()
            .filter(|e| matches!(e.kind, TraceKind::TokenDeleted { .. }))
            .count();
        // the seed token plus the push copy that reaches the final node
        assert_eq!(created, 2);
        assert_eq!(deleted, 2);
        assert_eq!(m.total_tokens(id), 0);
    }

    #[test]
    fn activate_twice_is_an_error() {
        let mut m = machine_for(MINIMAL, 1);
        let id = m.create_activity("A").unwrap();
        assert_eq!(m.activate(id), Err(MachineError::AlreadyActive));
    }

    #[test]
    fn invoke_with_wrong_arity_fails() {
        let mut m = machine_for(MINIMAL, 1);
        let id = m.create_activity("A").unwrap();
        let arg = TokenValue::data("Order", Record::new());
        assert_eq!(
            m.seed_invocation(id, vec![arg]),
            Err(MachineError::ArityMismatch { expected: 0, got: 1 })
        );
    }

    #[test]
    fn accepted_order_runs_to_completion() {
        let mut m = machine_for(PROCESS_ORDER, 7);
        let id = m.create_activity("ProcessOrder").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Completed, "{:?}", result.error);
        let actions: Vec<&str> = result
            .trace
            .iter()
            .filter_map(|e| match &e.kind {
                TraceKind::ActionStarted { action, .. } => Some(action.as_str()),
                _ => None,
            })
            .collect();
        assert!(actions.contains(&"ReceiveOrder"));
        assert!(actions.contains(&"FillOrder"));
        assert!(actions.contains(&"ShipOrder"));
        assert!(actions.contains(&"SendInvoice"));
        assert!(actions.contains(&"MakePayment"));
        assert!(actions.contains(&"Pay"));
        assert_eq!(actions.last(), Some(&"CloseOrder"));
        assert_eq!(m.race_violations, 0);
    }

    #[test]
    fn rejected_order_takes_the_otherwise_branch() {
        let src = PROCESS_ORDER.replace("order:accepted", "order:rejected");
        let mut m = machine_for(&src, 7);
        let id = m.create_activity("ProcessOrder").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Completed, "{:?}", result.error);
        let actions: Vec<&str> = result
            .trace
            .iter()
            .filter_map(|e| match &e.kind {
                TraceKind::ActionStarted { action, .. } => Some(action.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(actions, vec!["ReceiveOrder", "CloseOrder"]);
    }

    #[test]
    fn fixed_seed_reproduces_the_exact_trace() {
        let run = |seed| {
            let mut m = machine_for(PROCESS_ORDER, seed);
            let id = m.create_activity("ProcessOrder").unwrap();
            m.invoke(id, vec![]).unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.trace, b.trace);
        let c = run(43);
        assert!(crate::trace::compare_essential_traces(&a.trace, &c.trace).is_equivalent());
    }

    #[test]
    fn sticking_token_leaves_the_run_quiescent() {
        // the produced token fails both decision guards: no reaction can fire
        let src = "opaque mk stub const T{x:5};\n\
                   opaque b stub identity;\n\
                   activity A {\n\
                     initial i; pin i.out;\n\
                     action Mk calls mk; pin Mk.cin; pin Mk.o : T;\n\
                     decision d;\n\
                     action L calls b; pin L.i : T; pin L.o2 : T;\n\
                     finalActivity f; pin f.in;\n\
                     finalFlow g; pin g.in;\n\
                     edge i.out -> Mk.cin;\n\
                     edge Mk.o -> d;\n\
                     edge d -> L.i guard x > 10;\n\
                     edge d -> g.in guard x < 0;\n\
                     edge L.o2 -> f.in;\n\
                   }";
        let mut m = machine_for(src, 3);
        let id = m.create_activity("A").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::QuiescentStuck);
        assert_eq!(m.tokens_in(id, "Mk.o"), 1, "token sticks in its queue");
    }

    #[test]
    fn overlapping_guards_are_a_runtime_error() {
        let src = "opaque mk stub const T{x:5};\n\
                   opaque b stub identity;\n\
                   activity A {\n\
                     initial i; pin i.out;\n\
                     action Mk calls mk; pin Mk.cin; pin Mk.o : T;\n\
                     decision d;\n\
                     action L calls b; pin L.i : T; pin L.o2 : T;\n\
                     action R calls b; pin R.i : T; pin R.o2 : T;\n\
                     finalActivity f; pin f.in;\n\
                     finalFlow g; pin g.in;\n\
                     edge i.out -> Mk.cin;\n\
                     edge Mk.o -> d;\n\
                     edge d -> L.i guard x > 0;\n\
                     edge d -> R.i guard x >= 0;\n\
                     edge L.o2 -> f.in;\n\
                     edge R.o2 -> g.in;\n\
                   }";
        let mut m = machine_for(src, 3);
        let id = m.create_activity("A").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Error);
        assert!(result.error.unwrap().contains("diverging at decision"));
    }

    #[test]
    fn fork_duplicates_to_every_branch() {
        let src = "opaque mk stub const T{x:1};\n\
                   opaque b stub identity;\n\
                   activity A {\n\
                     initial i; pin i.out;\n\
                     action Mk calls mk; pin Mk.cin; pin Mk.o : T;\n\
                     fork f;\n\
                     action L calls b; pin L.i : T; pin L.o2 : T;\n\
                     action R calls b; pin R.i : T; pin R.o2 : T;\n\
                     finalFlow gl; pin gl.in;\n\
                     finalActivity fin; pin fin.in;\n\
                     edge i.out -> Mk.cin;\n\
                     edge Mk.o -> f;\n\
                     edge f -> L.i;\n\
                     edge f -> R.i;\n\
                     edge L.o2 -> gl.in;\n\
                     edge R.o2 -> fin.in;\n\
                   }";
        let mut m = machine_for(src, 9);
        let id = m.create_activity("A").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Completed, "{:?}", result.error);
        let actions: Vec<&str> = result
            .trace
            .iter()
            .filter_map(|e| match &e.kind {
                TraceKind::ActionStarted { action, .. } => Some(action.as_str()),
                _ => None,
            })
            .collect();
        assert!(actions.contains(&"L") || actions.contains(&"R"));
    }

    #[test]
    fn control_join_collapses_to_one_token() {
        let src = "opaque b stub const T{x:1};\n\
                   activity A {\n\
                     initial i1; pin i1.out;\n\
                     initial i2; pin i2.out;\n\
                     join j;\n\
                     action C calls b; pin C.i;\n\
                     finalActivity f; pin f.in;\n\
                     edge i1.out -> j;\n\
                     edge i2.out -> j;\n\
                     edge j -> C.i;\n\
                     edge C.i -> f.in;\n\
                   }";
        // C has an input pin only; give it an output pin to reach the final
        let src = src.replace("pin C.i;", "pin C.i; pin C.o;");
        let src = src.replace("edge C.i -> f.in;", "edge C.o -> f.in;");
        let mut m = machine_for(&src, 5);
        let id = m.create_activity("A").unwrap();
        m.seed_invocation(id, vec![]).unwrap();
        // both control tokens sit at initial pins; run the pull engine once
        assert_eq!(m.tokens_in(id, "i1.out"), 1);
        assert_eq!(m.tokens_in(id, "i2.out"), 1);
        assert!(m.pull_engine_step(id, 0));
        assert_eq!(m.tokens_in(id, "C.i"), 1, "exactly one collapsed token");
        assert_eq!(m.tokens_in(id, "i1.out"), 0);
        assert_eq!(m.tokens_in(id, "i2.out"), 0);
        let status = m.run_to_quiescence(id);
        assert_eq!(status, RunStatus::Completed);
    }

    #[test]
    fn data_join_forms_a_group() {
        let mut m = machine_for(FIG6, 11);
        let id = m.create_activity("Fig6").unwrap();
        // tokens at p2 (routed to the plain join) and p3 only
        m.place_token(
            id,
            "a2.p2",
            TokenValue::data("T2", record(&[("att1", crate::value::Value::Int(0)), ("att2", crate::value::Value::Int(7))])),
        )
        .unwrap();
        m.place_token(
            id,
            "a3.p3",
            TokenValue::data("T3", record(&[("att2", crate::value::Value::Int(9))])),
        )
        .unwrap();
        assert!(m.pull_engine_step(id, 0));
        assert_eq!(m.tokens_in(id, "d.din"), 2, "both data tokens grouped");
        let grouped = m
            .trace()
            .iter()
            .any(|e| matches!(&e.kind, TraceKind::GroupFormed { members, .. } if members.len() == 2));
        assert!(grouped);
    }

    #[test]
    fn data_join_respects_the_data_predicate() {
        let mut m = machine_for(FIG6, 11);
        let id = m.create_activity("Fig6").unwrap();
        // p1 and p2 present but att2 differs: Eq. (2) evaluates false
        m.place_token(
            id,
            "a1.p1",
            TokenValue::data("T1", record(&[("att2", crate::value::Value::Int(5))])),
        )
        .unwrap();
        m.place_token(
            id,
            "a2.p2",
            TokenValue::data("T2", record(&[("att1", crate::value::Value::Int(1)), ("att2", crate::value::Value::Int(7))])),
        )
        .unwrap();
        assert!(!m.pull_engine_step(id, 0), "predicate must block the join");
        assert_eq!(m.tokens_in(id, "d.din"), 0);
        // matching att2 joins
        let mut m = machine_for(FIG6, 11);
        let id = m.create_activity("Fig6").unwrap();
        m.place_token(
            id,
            "a1.p1",
            TokenValue::data("T1", record(&[("att2", crate::value::Value::Int(5))])),
        )
        .unwrap();
        m.place_token(
            id,
            "a2.p2",
            TokenValue::data("T2", record(&[("att1", crate::value::Value::Int(1)), ("att2", crate::value::Value::Int(5))])),
        )
        .unwrap();
        assert!(m.pull_engine_step(id, 0));
        assert_eq!(m.tokens_in(id, "d.din"), 2);
    }

    #[test]
    fn route_divergent_tokens_do_not_mix_joins() {
        // p2 routed to j2 (att1 <= 0) must not satisfy the j1 term even
        // though p1 is present with matching data
        let mut m = machine_for(FIG6, 11);
        let id = m.create_activity("Fig6").unwrap();
        m.place_token(
            id,
            "a1.p1",
            TokenValue::data("T1", record(&[("att2", crate::value::Value::Int(5))])),
        )
        .unwrap();
        m.place_token(
            id,
            "a2.p2",
            TokenValue::data("T2", record(&[("att1", crate::value::Value::Int(0)), ("att2", crate::value::Value::Int(5))])),
        )
        .unwrap();
        assert!(!m.pull_engine_step(id, 0), "p2 went to j2; j1 must not fire");
    }

    #[test]
    fn action_waits_for_all_input_queues() {
        let src = "opaque two stub const T{x:1};\n\
                   activity A {\n\
                     initial i1; pin i1.out;\n\
                     initial i2; pin i2.out;\n\
                     action C calls two; pin C.a; pin C.b2; pin C.o : T;\n\
                     finalActivity f; pin f.in;\n\
                     edge i1.out -> C.a;\n\
                     edge i2.out -> C.b2;\n\
                     edge C.o -> f.in;\n\
                   }";
        let mut m = machine_for(src, 1);
        let id = m.create_activity("A").unwrap();
        m.place_token(id, "C.a", TokenValue::control()).unwrap();
        let stable = m.runtime(id).stable_by_name("C").unwrap();
        assert!(!m.action_step(id, stable), "one input queue is still empty");
        assert_eq!(m.tokens_in(id, "C.a"), 1, "no partial consumption");
        m.place_token(id, "C.b2", TokenValue::control()).unwrap();
        assert!(m.action_step(id, stable));
        assert_eq!(m.tokens_in(id, "C.a"), 0);
        assert_eq!(m.tokens_in(id, "C.b2"), 0);
        assert_eq!(m.tokens_in(id, "C.o"), 1);
    }

    #[test]
    fn flow_final_deletes_only_its_token() {
        let src = "opaque mk stub const T{x:1};\n\
                   activity A {\n\
                     initial i; pin i.out;\n\
                     action Mk calls mk; pin Mk.cin; pin Mk.o : T;\n\
                     fork f;\n\
                     finalFlow g; pin g.in;\n\
                     finalActivity fin; pin fin.in;\n\
                     edge i.out -> Mk.cin;\n\
                     edge Mk.o -> f;\n\
                     edge f -> g.in;\n\
                     edge f -> fin.in;\n\
                   }";
        let mut m = machine_for(src, 2);
        let id = m.create_activity("A").unwrap();
        m.seed_invocation(id, vec![]).unwrap();
        // run until the fork delivered both copies
        while m.tokens_in(id, "g.in") == 0 || m.tokens_in(id, "fin.in") == 0 {
            assert!(m.step_once().is_some());
        }
        let stable = m.runtime(id).stable_by_name("g").unwrap();
        assert!(m.flow_final_step(id, stable));
        assert_eq!(m.tokens_in(id, "g.in"), 0);
        assert_eq!(m.tokens_in(id, "fin.in"), 1, "the sibling flow continues");
        assert!(m.is_active(id));
    }

    #[test]
    fn activity_final_spares_output_parameters_and_terminates_subs() {
        let mut m = machine_for(PROCESS_ORDER, 13);
        let id = m.create_activity("ProcessOrder").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Completed);
        assert_eq!(m.total_tokens(id), 0, "main activity fully cleaned");
        // the payment sub-activity instance was terminated by the cascade
        let terminated = result
            .trace
            .iter()
            .any(|e| matches!(e.kind, TraceKind::ActivityTerminated { instance } if instance != id as u64));
        assert!(terminated);
    }

    #[test]
    fn terminate_is_unconditional_and_idempotent() {
        let mut m = machine_for(PROCESS_ORDER, 1);
        let id = m.create_activity("ProcessOrder").unwrap();
        m.seed_invocation(id, vec![]).unwrap();
        m.step_once();
        m.terminate(id);
        assert!(!m.is_active(id));
        assert_eq!(m.total_tokens(id), 0);
        m.terminate(id);
        assert!(!m.is_active(id));
        assert_eq!(m.total_tokens(id), 0);
    }

    #[test]
    fn final_less_activity_completes_when_outputs_fill() {
        let mut m = machine_for(PROCESS_ORDER, 1);
        let id = m.create_activity("MakePayment").unwrap();
        let invoice = TokenValue::data(
            "Invoice",
            record(&[("order_id", crate::value::Value::Int(1))]),
        );
        let result = m.invoke(id, vec![invoice]).unwrap();
        assert_eq!(result.status, RunStatus::Completed);
        assert_eq!(result.outputs.len(), 1);
        let payment = result.outputs[0].as_ref().unwrap();
        assert_eq!(payment.ty.as_deref(), Some("Payment"));
    }

    #[test]
    fn single_mode_reuses_the_instance() {
        let src = "activity S single { initial i; finalActivity f; pin i.out; pin f.in; edge i.out -> f.in; }\n\
                   activity T { initial i; finalActivity f; pin i.out; pin f.in; edge i.out -> f.in; }";
        let mut m = machine_for(src, 1);
        let s1 = m.create_activity("S").unwrap();
        let s2 = m.create_activity("S").unwrap();
        assert_eq!(s1, s2, "single mode returns the pooled instance");
        let t1 = m.create_activity("T").unwrap();
        let t2 = m.create_activity("T").unwrap();
        assert_ne!(t1, t2, "separate mode always builds a fresh instance");
    }

    #[test]
    fn async_action_emits_control_tokens_immediately() {
        let src = "opaque slow stub const T{x:1};\n\
                   activity A {\n\
                     initial i; pin i.out;\n\
                     action Bg calls slow async; pin Bg.cin; pin Bg.o;\n\
                     finalActivity f; pin f.in;\n\
                     edge i.out -> Bg.cin;\n\
                     edge Bg.o -> f.in;\n\
                   }";
        let mut m = machine_for(src, 1);
        let id = m.create_activity("A").unwrap();
        let result = m.invoke(id, vec![]).unwrap();
        assert_eq!(result.status, RunStatus::Completed, "{:?}", result.error);
        // the detached body completion shows up exactly once
        let detached: Vec<bool> = result
            .trace
            .iter()
            .filter_map(|e| match &e.kind {
                TraceKind::ActionCompleted { detached: true, post_termination, .. } => {
                    Some(*post_termination)
                }
                _ => None,
            })
            .collect();
        assert_eq!(detached.len(), 1);
    }

    #[test]
    fn trace_replay_matches_live_queue_state() {
        use std::collections::BTreeMap;
        let mut m = machine_for(PROCESS_ORDER, 21);
        let id = m.create_activity("ProcessOrder").unwrap();
        m.seed_invocation(id, vec![]).unwrap();
        let mut replay: BTreeMap<(u64, String), Vec<TokenId>> = BTreeMap::new();
        let apply = |replay: &mut BTreeMap<(u64, String), Vec<TokenId>>,
                         e: &TraceEvent| {
            match &e.kind {
                TraceKind::TokenCreated { instance, token, queue, .. } => {
                    replay.entry((*instance, queue.clone())).or_default().push(*token);
                }
                TraceKind::TokenMoved { instance, token, from, to } => {
                    let src = replay.entry((*instance, from.clone())).or_default();
                    src.retain(|t| t != token);
                    replay.entry((*instance, to.clone())).or_default().push(*token);
                }
                TraceKind::TokenDeleted { instance, token, queue, .. } => {
                    let q = replay.entry((*instance, queue.clone())).or_default();
                    q.retain(|t| t != token);
                }
                _ => {}
            }
        };
        let mut cursor = 0;
        loop {
            for e in &m.trace()[cursor..] {
                apply(&mut replay, e);
            }
            cursor = m.trace().len();
            let mut live = m.queue_snapshot();
            live.retain(|_, v| !v.is_empty());
            let mut mirrored = replay.clone();
            mirrored.retain(|_, v| !v.is_empty());
            assert_eq!(live, mirrored, "live queues diverge from trace replay");
            if m.step_once().is_none() || !m.is_active(id) {
                for e in &m.trace()[cursor..] {
                    apply(&mut replay, e);
                }
                break;
            }
        }
    }
}
