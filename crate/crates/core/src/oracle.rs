//! Reference interpreter implementing the token-offer semantics: tokens stay
//! at output pins and only become *visible* through edges and control nodes;
//! a consumer fires when every input pin is offered a token and accepts them
//! all at once.
//!
//! Movement logic here is deliberately independent of the compiled VM: it
//! works directly on the model graph and recomputes visibility from scratch
//! at every step (correctness over speed). Only expression evaluation and
//! behavior stubs are shared, since those semantics are not under test.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::behavior::BehaviorRegistry;
use crate::expr::{eval_guard, eval_join_criteria, Binding, Expr};
use crate::model::{ActivityModel, Direction, ExecutionMode, NodeKind, Program};
use crate::rng::SimRng;
use crate::trace::{RunResult, RunStatus, TokenOrigin, TokenRef, TraceEvent, TraceKind};
use crate::validate::validate;
use crate::value::TokenValue;

const MAX_INVOCATION_DEPTH: usize = 64;

type RouteKey = Vec<usize>;

#[derive(Clone, Debug)]
struct OToken {
    value: TokenValue,
    /// Route keys already accepted by some consumer. A token is offered on a
    /// route only while that route is unclaimed; forks hand independent
    /// routes to independent consumers.
    claims: Vec<RouteKey>,
}

/// A visible way of delivering tokens to one input pin: the source tokens it
/// would consume (with their routes) and the values that arrive, each with
/// the source tokens it descends from.
#[derive(Clone, Debug)]
struct Bundle {
    consumed: Vec<(String, u64, RouteKey)>,
    delivered: Vec<(TokenValue, Vec<u64>)>,
}

#[derive(Clone, Debug)]
struct OInstance {
    def_idx: usize,
    active: bool,
    has_final: bool,
    /// Tokens resting at pins (output pins and settled out-parameter pins).
    pins: BTreeMap<String, VecDeque<u64>>,
    /// Synchronous actions waiting for a sub-activity, by action name.
    waiting: BTreeMap<String, (usize, u64)>,
    children: Vec<usize>,
    depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OReaction {
    Fire(usize, usize),
    SyncReturn(usize, usize),
    OutParam(usize, usize),
    FlowFinal(usize, usize),
    ActivityFinal(usize, usize),
    Process(usize),
    Detached(usize),
}

#[derive(Clone, Debug)]
struct ODetached {
    instance: usize,
    action: String,
    firing: u64,
    behavior: String,
    args: Vec<TokenValue>,
    done: bool,
}

pub struct Oracle {
    program: Arc<Program>,
    behaviors: BehaviorRegistry,
    instances: Vec<OInstance>,
    tokens: BTreeMap<u64, OToken>,
    single_pool: BTreeMap<String, usize>,
    detached: Vec<ODetached>,
    rng: SimRng,
    trace: Vec<TraceEvent>,
    next_token: u64,
    next_firing: u64,
    seq: u64,
    error: Option<String>,
    /// Count of token-routes accepted twice; must stay zero.
    pub race_violations: u64,
}

impl Oracle {
    pub fn new(program: Arc<Program>, behaviors: BehaviorRegistry, seed: u64) -> Self {
        Oracle {
            program,
            behaviors,
            instances: Vec::new(),
            tokens: BTreeMap::new(),
            single_pool: BTreeMap::new(),
            detached: Vec::new(),
            rng: SimRng::new(seed),
            trace: Vec::new(),
            next_token: 0,
            next_firing: 0,
            seq: 0,
            error: None,
            race_violations: 0,
        }
    }

    fn emit(&mut self, kind: TraceKind) {
        let seq = self.seq;
        self.seq += 1;
        self.trace.push(TraceEvent { seq, kind });
    }

    fn fail(&mut self, instance: Option<usize>, message: String) {
        self.emit(TraceKind::ExecutionError {
            instance: instance.map(|i| i as u64),
            message: message.clone(),
        });
        if self.error.is_none() {
            self.error = Some(message);
        }
    }

    fn model(&self, instance: usize) -> &ActivityModel {
        &self.program.activities[self.instances[instance].def_idx]
    }

    pub fn create_activity(&mut self, name: &str) -> Result<usize, String> {
        self.create_at_depth(name, 0)
    }

    fn create_at_depth(&mut self, name: &str, depth: usize) -> Result<usize, String> {
        let def_idx = self
            .program
            .activity_idx(name)
            .ok_or_else(|| format!("activity `{name}` not found"))?;
        let model = &self.program.activities[def_idx];
        if model.execution_mode == ExecutionMode::Single {
            if let Some(&existing) = self.single_pool.get(name) {
                if !self.instances[existing].active {
                    self.clear_instance_tokens(existing, false);
                    self.instances[existing].active = true;
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
            return Err(format!("activity `{name}` fails validation:\n{report}"));
        }
        let mut pins = BTreeMap::new();
        for node in &model.nodes {
            if node.kind.is_pin() {
                pins.insert(node.name.clone(), VecDeque::new());
            }
        }
        let id = self.instances.len();
        self.instances.push(OInstance {
            def_idx,
            active: true,
            has_final: model.has_activity_final(),
            pins,
            waiting: BTreeMap::new(),
            children: Vec::new(),
            depth,
        });
        if model.execution_mode == ExecutionMode::Single {
            self.single_pool.insert(name.to_string(), id);
        }
        self.emit(TraceKind::ActivityActivated {
            instance: id as u64,
            activity: name.to_string(),
        });
        Ok(id)
    }

    fn new_token(
        &mut self,
        instance: usize,
        pin: &str,
        value: TokenValue,
        origin: TokenOrigin,
    ) -> u64 {
        let id = self.next_token;
        self.next_token += 1;
        self.emit(TraceKind::TokenCreated {
            instance: instance as u64,
            token: id,
            queue: pin.to_string(),
            value: value.clone(),
            origin,
        });
        self.tokens.insert(id, OToken { value, claims: Vec::new() });
        self.instances[instance]
            .pins
            .get_mut(pin)
            .expect("pin exists")
            .push_back(id);
        id
    }

    fn delete_token(&mut self, instance: usize, pin: &str, token: u64, reason: &str) {
        self.tokens.remove(&token);
        if let Some(q) = self.instances[instance].pins.get_mut(pin) {
            q.retain(|&t| t != token);
        }
        self.emit(TraceKind::TokenDeleted {
            instance: instance as u64,
            token,
            queue: pin.to_string(),
            reason: reason.to_string(),
        });
    }

    fn clear_instance_tokens(&mut self, instance: usize, spare_out_params: bool) {
        let model = self.model(instance);
        let out_param_pins: Vec<String> = model
            .parameters
            .iter()
            .filter(|p| p.direction == Direction::Out)
            .filter_map(|p| model.pins_of(&p.name).next().map(|(_, n)| n.name.clone()))
            .collect();
        let pins: Vec<String> = self.instances[instance].pins.keys().cloned().collect();
        for pin in pins {
            if spare_out_params && out_param_pins.contains(&pin) {
                continue;
            }
            while let Some(&t) = self.instances[instance].pins[&pin].front() {
                self.delete_token(instance, &pin, t, "cleanup");
            }
        }
    }

    pub fn seed_invocation(
        &mut self,
        instance: usize,
        args: Vec<TokenValue>,
    ) -> Result<(), String> {
        if !self.instances[instance].active {
            return Err("activity instance is not active".into());
        }
        let model = self.model(instance);
        let in_params: Vec<(String, String)> = model
            .in_parameters()
            .map(|p| (p.name.clone(), p.ty.clone()))
            .collect();
        if in_params.is_empty() {
            if !args.is_empty() {
                return Err(format!("expected 0 arguments, got {}", args.len()));
            }
            let initial_pins: Vec<String> = model
                .nodes
                .iter()
                .filter(|n| n.kind == NodeKind::Initial)
                .filter_map(|n| model.pins_of(&n.name).next().map(|(_, p)| p.name.clone()))
                .collect();
            self.emit(TraceKind::ActivityInvoked { instance: instance as u64, args: vec![] });
            for pin in initial_pins {
                self.new_token(instance, &pin, TokenValue::control(), TokenOrigin::Invoke);
            }
            return Ok(());
        }
        if args.len() != in_params.len() {
            return Err(format!(
                "expected {} arguments, got {}",
                in_params.len(),
                args.len()
            ));
        }
        let mut seeded = Vec::new();
        for (arg, (pname, pty)) in args.iter().zip(in_params.iter()) {
            let value = match &arg.ty {
                None => TokenValue::data(pty.clone(), arg.fields.clone()),
                Some(t) if t.is_empty() => TokenValue::data(pty.clone(), arg.fields.clone()),
                Some(t) if t == pty => arg.clone(),
                Some(t) => {
                    return Err(format!(
                        "argument for `{pname}` has type `{t}`, expected `{pty}`"
                    ))
                }
            };
            let pin = self
                .model(instance)
                .pins_of(pname)
                .next()
                .map(|(_, p)| p.name.clone())
                .ok_or_else(|| format!("parameter `{pname}` has no pin"))?;
            seeded.push((pin, value));
        }
        self.emit(TraceKind::ActivityInvoked {
            instance: instance as u64,
            args: seeded.iter().map(|(_, v)| v.clone()).collect(),
        });
        for (pin, value) in seeded {
            self.new_token(instance, &pin, value, TokenOrigin::Invoke);
        }
        Ok(())
    }

    pub fn collect_outputs(&self, instance: usize) -> Vec<Option<TokenValue>> {
        let model = self.model(instance);
        model
            .out_parameters()
            .map(|p| {
                model
                    .pins_of(&p.name)
                    .next()
                    .and_then(|(_, pin)| self.instances[instance].pins.get(&pin.name))
                    .and_then(|q| q.front())
                    .and_then(|t| self.tokens.get(t))
                    .map(|t| t.value.clone())
            })
            .collect()
    }

    pub fn invoke(&mut self, instance: usize, args: Vec<TokenValue>) -> Result<RunResult, String> {
        self.seed_invocation(instance, args)?;
        let status = self.run_to_quiescence(instance);
        Ok(RunResult {
            status,
            outputs: self.collect_outputs(instance),
            trace: self.trace.clone(),
            error: self.error.clone(),
        })
    }

    pub fn run_to_quiescence(&mut self, root: usize) -> RunStatus {
        loop {
            if self.error.is_some() {
                return RunStatus::Error;
            }
            if !self.instances[root].active {
                for i in 0..self.detached.len() {
                    if !self.detached[i].done {
                        self.run_detached(i, true);
                    }
                }
                if self.error.is_some() {
                    return RunStatus::Error;
                }
                return RunStatus::Completed;
            }
            let enabled = self.enabled_reactions();
            if self.error.is_some() {
                return RunStatus::Error;
            }
            if enabled.is_empty() {
                return RunStatus::QuiescentStuck;
            }
            let pick = enabled[self.rng.below(enabled.len())];
            self.execute(pick);
        }
    }

    // -----------------------------------------------------------------------
    // Visibility
    // -----------------------------------------------------------------------

    /// `otherwise` is true iff every sibling guard of the same decision is
    /// false for this token.
    fn eval_edge_guard(
        &self,
        model: &ActivityModel,
        edge_idx: usize,
        value: &TokenValue,
    ) -> Result<bool, String> {
        let edge = &model.edges[edge_idx];
        match &edge.guard {
            None => Ok(true),
            Some(Expr::Otherwise) => {
                for (i, sibling) in model.edges_out_of(&edge.source) {
                    if i == edge_idx {
                        continue;
                    }
                    let g = sibling.guard.clone().unwrap_or(Expr::Bool(true));
                    if eval_guard(&g, value).map_err(|e| e.to_string())? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Some(g) => eval_guard(g, value).map_err(|e| e.to_string()),
        }
    }

    /// Criteria variable of an output pin: the bare pin name when unique
    /// among the activity's output pins, the qualified name otherwise.
    fn queue_var(model: &ActivityModel, pin: &str) -> String {
        let node = model.node(pin).expect("pin exists");
        let short = node.short_name();
        let count = model
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::OutputPin && n.short_name() == short)
            .count();
        if count == 1 {
            short.to_string()
        } else {
            pin.to_string()
        }
    }

    /// All bundles visible through `edge_idx`, oldest tokens first. Claimed
    /// routes are filtered out; a failed guard silently hides the offer.
    fn offers(&self, instance: usize, edge_idx: usize) -> Result<Vec<Bundle>, String> {
        let model = self.model(instance);
        let edge = &model.edges[edge_idx];
        let source = model
            .node(&edge.source)
            .ok_or_else(|| format!("unknown node `{}`", edge.source))?;
        let mut out = Vec::new();
        match source.kind {
            NodeKind::OutputPin => {
                let tokens: Vec<u64> = self.instances[instance]
                    .pins
                    .get(&source.name)
                    .map(|q| q.iter().copied().collect())
                    .unwrap_or_default();
                for t in tokens {
                    let tok = &self.tokens[&t];
                    let route = vec![edge_idx];
                    if tok.claims.contains(&route) {
                        continue;
                    }
                    if !self.eval_edge_guard(model, edge_idx, &tok.value)? {
                        continue;
                    }
                    out.push(Bundle {
                        consumed: vec![(source.name.clone(), t, route)],
                        delivered: vec![(tok.value.clone(), vec![t])],
                    });
                }
            }
            NodeKind::Fork | NodeKind::Merge | NodeKind::Decision | NodeKind::Join => {
                let incoming: Vec<usize> =
                    model.edges_into(&source.name).map(|(i, _)| i).collect();
                let inner: Vec<Vec<Bundle>> = incoming
                    .iter()
                    .map(|&e| self.offers(instance, e))
                    .collect::<Result<_, _>>()?;
                match source.kind {
                    NodeKind::Fork | NodeKind::Merge => {
                        // fork: the incoming offer is visible through every
                        // outgoing edge; merge: any incoming offer passes
                        for bundles in inner {
                            for b in bundles {
                                out.push(extend_route(b, edge_idx));
                            }
                        }
                    }
                    NodeKind::Decision => {
                        for bundles in inner {
                            'bundle: for b in bundles {
                                for (value, _) in &b.delivered {
                                    match self.eval_edge_guard(model, edge_idx, value) {
                                        Ok(true) => {}
                                        Ok(false) => continue 'bundle,
                                        Err(e) => return Err(e),
                                    }
                                }
                                out.push(extend_route(b, edge_idx));
                            }
                        }
                    }
                    NodeKind::Join => {
                        if inner.iter().any(|b| b.is_empty()) {
                            return Ok(out);
                        }
                        let spec = source.join_spec.clone();
                        let mut choice = vec![0usize; inner.len()];
                        loop {
                            let picked: Vec<&Bundle> = choice
                                .iter()
                                .enumerate()
                                .map(|(i, &c)| &inner[i][c])
                                .collect();
                            if let Some(combined) =
                                self.combine_join(model, &picked, &spec, edge_idx)?
                            {
                                out.push(combined);
                            }
                            if !advance(&mut choice, |i| inner[i].len()) {
                                break;
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            other => {
                return Err(format!(
                    "edge {} leaves a {}; validation should have rejected this",
                    edge.name,
                    other.label()
                ))
            }
        }
        Ok(out)
    }

    /// Combine one bundle per join input: no token-route may be claimed
    /// twice and the join specification must hold over the source tokens.
    /// All-control selections collapse into a single control token.
    fn combine_join(
        &self,
        model: &ActivityModel,
        picked: &[&Bundle],
        spec: &Option<Expr>,
        edge_idx: usize,
    ) -> Result<Option<Bundle>, String> {
        let mut consumed: Vec<(String, u64, RouteKey)> = Vec::new();
        for b in picked {
            for c in &b.consumed {
                if consumed.iter().any(|(_, t, r)| *t == c.1 && *r == c.2) {
                    return Ok(None);
                }
                consumed.push(c.clone());
            }
        }
        if let Some(spec) = spec {
            let mut binding = Binding::new();
            for (pin, token, _) in &consumed {
                let var = Self::queue_var(model, pin);
                binding.bind(var, self.tokens[token].value.clone());
                binding.bind(pin.clone(), self.tokens[token].value.clone());
            }
            match eval_join_criteria(spec, &binding) {
                Ok(true) => {}
                Ok(false) => return Ok(None),
                Err(e) => return Err(e.to_string()),
            }
        }
        let mut delivered: Vec<(TokenValue, Vec<u64>)> = Vec::new();
        let mut all_control = true;
        for b in picked {
            for (value, parents) in &b.delivered {
                if value.is_control() {
                    continue;
                }
                all_control = false;
                delivered.push((value.clone(), parents.clone()));
            }
        }
        if all_control {
            let parents: Vec<u64> = consumed.iter().map(|(_, t, _)| *t).collect();
            delivered = vec![(TokenValue::control(), parents)];
        }
        Ok(Some(extend_route(Bundle { consumed, delivered }, edge_idx)))
    }

    /// Offers arriving at an input pin (through its single incoming edge).
    /// Bundles touching an already-claimed token route are filtered out here,
    /// where the full routes are known.
    fn offers_at_pin(&self, instance: usize, pin: &str) -> Result<Vec<Bundle>, String> {
        let model = self.model(instance);
        let incoming: Vec<usize> = model.edges_into(pin).map(|(i, _)| i).collect();
        let mut out = Vec::new();
        for e in incoming {
            out.extend(self.offers(instance, e)?);
        }
        out.retain(|b| {
            b.consumed.iter().all(|(_, t, r)| {
                self.tokens
                    .get(t)
                    .map(|tok| !tok.claims.contains(r))
                    .unwrap_or(false)
            })
        });
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Reactions
    // -----------------------------------------------------------------------

    fn enabled_reactions(&mut self) -> Vec<OReaction> {
        let mut out = Vec::new();
        for iid in 0..self.instances.len() {
            if !self.instances[iid].active {
                continue;
            }
            let node_count = self.model(iid).nodes.len();
            for nidx in 0..node_count {
                let kind = self.model(iid).nodes[nidx].kind;
                let name = self.model(iid).nodes[nidx].name.clone();
                match kind {
                    NodeKind::Action => {
                        if let Some(&(sub, _)) = self.instances[iid].waiting.get(&name) {
                            if !self.instances[sub].active {
                                out.push(OReaction::SyncReturn(iid, nidx));
                            }
                            continue;
                        }
                        match self.action_choice(iid, nidx) {
                            Ok(Some(_)) => out.push(OReaction::Fire(iid, nidx)),
                            Ok(None) => {}
                            Err(e) => {
                                self.fail(Some(iid), e);
                                return Vec::new();
                            }
                        }
                    }
                    NodeKind::FlowFinal => {
                        if self.final_offer(iid, nidx) {
                            out.push(OReaction::FlowFinal(iid, nidx));
                        }
                    }
                    NodeKind::ActivityFinal => {
                        if self.final_offer(iid, nidx) {
                            out.push(OReaction::ActivityFinal(iid, nidx));
                        }
                    }
                    NodeKind::Parameter => {
                        let model = self.model(iid);
                        let is_out = model
                            .parameter_of_node(&name)
                            .map(|p| p.direction == Direction::Out)
                            .unwrap_or(false);
                        if !is_out {
                            continue;
                        }
                        let Some(pin) =
                            model.pins_of(&name).next().map(|(_, p)| p.name.clone())
                        else {
                            continue;
                        };
                        match self.offers_at_pin(iid, &pin) {
                            Ok(offers) if !offers.is_empty() => {
                                out.push(OReaction::OutParam(iid, nidx))
                            }
                            Ok(_) => {}
                            Err(e) => {
                                self.fail(Some(iid), e);
                                return Vec::new();
                            }
                        }
                    }
                    _ => {}
                }
            }
            // alternative completion for final-less activities with outputs
            let inst = &self.instances[iid];
            if !inst.has_final {
                let model = &self.program.activities[inst.def_idx];
                let outs: Vec<String> = model
                    .out_parameters()
                    .filter_map(|p| model.pins_of(&p.name).next().map(|(_, n)| n.name.clone()))
                    .collect();
                if !outs.is_empty()
                    && outs
                        .iter()
                        .all(|pin| inst.pins.get(pin).map(|q| !q.is_empty()).unwrap_or(false))
                {
                    out.push(OReaction::Process(iid));
                }
            }
        }
        for (d, body) in self.detached.iter().enumerate() {
            if !body.done {
                out.push(OReaction::Detached(d));
            }
        }
        out
    }

    fn final_offer(&mut self, instance: usize, node_idx: usize) -> bool {
        let model = self.model(instance);
        let name = model.nodes[node_idx].name.clone();
        let Some(pin) = model.pins_of(&name).next().map(|(_, p)| p.name.clone()) else {
            return false;
        };
        match self.offers_at_pin(instance, &pin) {
            Ok(offers) => !offers.is_empty(),
            Err(e) => {
                self.fail(Some(instance), e);
                false
            }
        }
    }

    /// Choose one bundle per input pin with globally disjoint consumed
    /// token-routes; `None` when the action cannot fire.
    fn action_choice(
        &self,
        instance: usize,
        node_idx: usize,
    ) -> Result<Option<Vec<(String, Bundle)>>, String> {
        let model = self.model(instance);
        let name = &model.nodes[node_idx].name;
        let pins: Vec<String> = model
            .pins_of(name)
            .filter(|(_, p)| p.kind == NodeKind::InputPin)
            .map(|(_, p)| p.name.clone())
            .collect();
        if pins.is_empty() {
            return Ok(None);
        }
        let mut per_pin = Vec::new();
        for pin in &pins {
            let offers = self.offers_at_pin(instance, pin)?;
            if offers.is_empty() {
                return Ok(None);
            }
            per_pin.push(offers);
        }
        let mut choice = vec![0usize; per_pin.len()];
        loop {
            let picked: Vec<&Bundle> = choice
                .iter()
                .enumerate()
                .map(|(i, &c)| &per_pin[i][c])
                .collect();
            let mut seen: Vec<(u64, &RouteKey)> = Vec::new();
            let mut conflict = false;
            'check: for b in &picked {
                for (_, t, r) in &b.consumed {
                    if seen.iter().any(|(st, sr)| *st == *t && *sr == r) {
                        conflict = true;
                        break 'check;
                    }
                    seen.push((*t, r));
                }
            }
            if !conflict {
                let chosen = pins
                    .iter()
                    .cloned()
                    .zip(picked.into_iter().cloned())
                    .collect();
                return Ok(Some(chosen));
            }
            if !advance(&mut choice, |i| per_pin[i].len()) {
                return Ok(None);
            }
        }
    }

    fn execute(&mut self, reaction: OReaction) {
        match reaction {
            OReaction::Fire(i, n) => self.fire_action(i, n),
            OReaction::SyncReturn(i, n) => self.sync_return(i, n),
            OReaction::OutParam(i, n) => self.accept_out_param(i, n),
            OReaction::FlowFinal(i, n) => self.accept_final(i, n, false),
            OReaction::ActivityFinal(i, n) => self.accept_final(i, n, true),
            OReaction::Process(i) => {
                self.instances[i].active = false;
                self.emit(TraceKind::ActivityCompleted { instance: i as u64 });
            }
            OReaction::Detached(d) => self.run_detached(d, false),
        }
    }

    /// Accept a bundle: claim the consumed routes on the source tokens and
    /// materialize the delivered tokens at `pin`.
    fn accept_bundle(&mut self, instance: usize, pin: &str, bundle: &Bundle) -> Vec<u64> {
        for (_, token, route) in &bundle.consumed {
            let already = self
                .tokens
                .get(token)
                .map(|t| t.claims.contains(route))
                .unwrap_or(true);
            if already {
                self.race_violations += 1;
                let msg = format!("race: token {token} accepted twice on one route");
                self.fail(Some(instance), msg);
                return Vec::new();
            }
            self.tokens.get_mut(token).unwrap().claims.push(route.clone());
        }
        let mut delivered_ids = Vec::new();
        for (value, parents) in &bundle.delivered {
            let origin = match parents.as_slice() {
                [single] => TokenOrigin::PushCopy { parent: *single },
                many => TokenOrigin::PullControl { parents: many.to_vec() },
            };
            delivered_ids.push(self.new_token(instance, pin, value.clone(), origin));
        }
        delivered_ids
    }

    fn fire_action(&mut self, instance: usize, node_idx: usize) {
        let choice = match self.action_choice(instance, node_idx) {
            Ok(Some(c)) => c,
            Ok(None) => return,
            Err(e) => {
                self.fail(Some(instance), e);
                return;
            }
        };
        let model = self.model(instance);
        let node = &model.nodes[node_idx];
        let action_name = node.name.clone();
        let behavior = node.behavior.clone().unwrap_or_default();
        let is_sync = node.is_synchronous;
        let output_pins: Vec<(String, Option<String>)> = model
            .pins_of(&action_name)
            .filter(|(_, p)| p.kind == NodeKind::OutputPin)
            .map(|(_, p)| (p.name.clone(), p.pin_type.clone()))
            .collect();

        let firing = self.next_firing;
        self.next_firing += 1;
        let mut consumed_refs: Vec<(String, TokenRef)> = Vec::new();
        let mut in_args = Vec::new();
        for (pin, bundle) in &choice {
            let ids = self.accept_bundle(instance, pin, bundle);
            if self.error.is_some() {
                return;
            }
            for (id, (value, _)) in ids.iter().zip(bundle.delivered.iter()) {
                consumed_refs.push((pin.clone(), TokenRef { token: *id, value: value.clone() }));
                if !value.is_control() {
                    in_args.push(value.clone());
                }
            }
        }
        self.emit(TraceKind::ActionStarted {
            instance: instance as u64,
            action: action_name.clone(),
            firing,
            consumed: consumed_refs.iter().map(|(_, r)| r.clone()).collect(),
        });
        // the delivered tokens are consumed within the same firing
        for (pin, r) in &consumed_refs {
            self.delete_token(instance, pin, r.token, "consumed");
        }

        if self.program.activity(&behavior).is_some() {
            if self.instances[instance].depth + 1 > MAX_INVOCATION_DEPTH {
                self.fail(
                    Some(instance),
                    format!("invocation depth limit exceeded at action `{action_name}`"),
                );
                return;
            }
            let depth = self.instances[instance].depth + 1;
            let sub = match self.create_at_depth(&behavior, depth) {
                Ok(sub) => sub,
                Err(e) => {
                    self.fail(Some(instance), e);
                    return;
                }
            };
            self.instances[instance].children.push(sub);
            self.emit(TraceKind::SubActivityInvoked {
                instance: instance as u64,
                action: action_name.clone(),
                firing,
                sub_instance: sub as u64,
            });
            if let Err(e) = self.seed_invocation(sub, in_args) {
                self.fail(Some(instance), e);
                return;
            }
            if is_sync {
                self.instances[instance]
                    .waiting
                    .insert(action_name, (sub, firing));
            } else {
                self.emit_controls(instance, firing, &action_name, &output_pins);
            }
            return;
        }

        if is_sync {
            let outputs = match self.behaviors.execute(&behavior, &in_args) {
                Ok(o) => o,
                Err(e) => {
                    self.fail(Some(instance), format!("action `{action_name}`: {e}"));
                    return;
                }
            };
            self.place_outputs(instance, firing, &action_name, &output_pins, outputs);
        } else {
            self.detached.push(ODetached {
                instance,
                action: action_name.clone(),
                firing,
                behavior,
                args: in_args,
                done: false,
            });
            self.emit_controls(instance, firing, &action_name, &output_pins);
        }
    }

    fn emit_controls(
        &mut self,
        instance: usize,
        firing: u64,
        action: &str,
        output_pins: &[(String, Option<String>)],
    ) {
        let mut produced = Vec::new();
        for (pin, _) in output_pins {
            let t = self.new_token(
                instance,
                pin,
                TokenValue::control(),
                TokenOrigin::ActionOutput { firing },
            );
            produced.push(TokenRef { token: t, value: TokenValue::control() });
        }
        self.emit(TraceKind::ActionCompleted {
            instance: instance as u64,
            action: action.to_string(),
            firing,
            produced,
            detached: false,
            post_termination: false,
        });
    }

    fn place_outputs(
        &mut self,
        instance: usize,
        firing: u64,
        action: &str,
        output_pins: &[(String, Option<String>)],
        outputs: Vec<TokenValue>,
    ) {
        if outputs.len() != output_pins.len() {
            self.fail(
                Some(instance),
                format!(
                    "action `{action}`: behavior returned {} values for {} output pins",
                    outputs.len(),
                    output_pins.len()
                ),
            );
            return;
        }
        let mut produced = Vec::new();
        for (value, (pin, pin_ty)) in outputs.into_iter().zip(output_pins.iter()) {
            let value = match pin_ty {
                Some(t) => TokenValue::data(t.clone(), value.fields),
                None => value,
            };
            let t = self.new_token(
                instance,
                pin,
                value.clone(),
                TokenOrigin::ActionOutput { firing },
            );
            produced.push(TokenRef { token: t, value });
        }
        self.emit(TraceKind::ActionCompleted {
            instance: instance as u64,
            action: action.to_string(),
            firing,
            produced,
            detached: false,
            post_termination: false,
        });
    }

    fn sync_return(&mut self, instance: usize, node_idx: usize) {
        let model = self.model(instance);
        let action_name = model.nodes[node_idx].name.clone();
        let output_pins: Vec<(String, Option<String>)> = model
            .pins_of(&action_name)
            .filter(|(_, p)| p.kind == NodeKind::OutputPin)
            .map(|(_, p)| (p.name.clone(), p.pin_type.clone()))
            .collect();
        let Some((sub, firing)) = self.instances[instance].waiting.remove(&action_name)
        else {
            return;
        };
        let outputs = self.collect_outputs(sub);
        if outputs.iter().any(|o| o.is_none()) {
            self.fail(
                Some(instance),
                format!(
                    "action `{action_name}`: sub-activity finished without filling all output parameters"
                ),
            );
            return;
        }
        let outputs: Vec<TokenValue> = outputs.into_iter().flatten().collect();
        self.place_outputs(instance, firing, &action_name, &output_pins, outputs);
    }

    fn accept_out_param(&mut self, instance: usize, node_idx: usize) {
        let model = self.model(instance);
        let name = model.nodes[node_idx].name.clone();
        let Some(pin) = model.pins_of(&name).next().map(|(_, p)| p.name.clone()) else {
            return;
        };
        let offers = match self.offers_at_pin(instance, &pin) {
            Ok(o) => o,
            Err(e) => {
                self.fail(Some(instance), e);
                return;
            }
        };
        let Some(bundle) = offers.first().cloned() else { return };
        self.accept_bundle(instance, &pin, &bundle);
    }

    fn accept_final(&mut self, instance: usize, node_idx: usize, is_activity_final: bool) {
        let model = self.model(instance);
        let name = model.nodes[node_idx].name.clone();
        let Some(pin) = model.pins_of(&name).next().map(|(_, p)| p.name.clone()) else {
            return;
        };
        let offers = match self.offers_at_pin(instance, &pin) {
            Ok(o) => o,
            Err(e) => {
                self.fail(Some(instance), e);
                return;
            }
        };
        let Some(bundle) = offers.first().cloned() else { return };
        let delivered = self.accept_bundle(instance, &pin, &bundle);
        if self.error.is_some() {
            return;
        }
        for t in delivered {
            self.delete_token(instance, &pin, t, "final");
        }
        if is_activity_final {
            self.instances[instance].active = false;
            self.clear_instance_tokens(instance, true);
            self.emit(TraceKind::ActivityCompleted { instance: instance as u64 });
            let mut order = Vec::new();
            let mut frontier = self.instances[instance].children.clone();
            while let Some(child) = frontier.pop() {
                order.push(child);
                frontier.extend(self.instances[child].children.clone());
            }
            order.sort_unstable();
            for child in order {
                self.instances[child].active = false;
                self.clear_instance_tokens(child, false);
                self.emit(TraceKind::ActivityTerminated { instance: child as u64 });
            }
        }
    }

    fn run_detached(&mut self, idx: usize, post_termination: bool) {
        let body = self.detached[idx].clone();
        if body.done {
            return;
        }
        self.detached[idx].done = true;
        match self.behaviors.execute(&body.behavior, &body.args) {
            Ok(_) => self.emit(TraceKind::ActionCompleted {
                instance: body.instance as u64,
                action: body.action,
                firing: body.firing,
                produced: vec![],
                detached: true,
                post_termination,
            }),
            Err(e) => {
                let msg = format!("action `{}`: {e}", body.action);
                self.fail(Some(body.instance), msg);
            }
        }
    }
}

fn extend_route(mut b: Bundle, edge_idx: usize) -> Bundle {
    for (_, _, route) in &mut b.consumed {
        route.push(edge_idx);
    }
    b
}

fn advance(choice: &mut [usize], radix: impl Fn(usize) -> usize) -> bool {
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

/// Run one activity of a validated program under the reference interpreter.
pub fn oracle_run(
    program: &Arc<Program>,
    behaviors: &BehaviorRegistry,
    activity: &str,
    args: Vec<TokenValue>,
    seed: u64,
) -> Result<RunResult, String> {
    let mut oracle = Oracle::new(Arc::clone(program), behaviors.clone(), seed);
    let id = oracle.create_activity(activity)?;
    oracle.invoke(id, args)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::Machine;
    use crate::trace::compare_essential_traces;

    fn run_both(src: &str, activity: &str, seed: u64) -> (RunResult, RunResult) {
        let program = Arc::new(crate::parse::parse_program(src).unwrap());
        let behaviors = Machine::registry_from_program(&program);
        let mut vm = Machine::new(Arc::clone(&program), behaviors.clone(), seed);
        let id = vm.create_activity(activity).unwrap();
        let vm_result = vm.invoke(id, vec![]).unwrap();
        let oracle_result = oracle_run(&program, &behaviors, activity, vec![], seed).unwrap();
        (vm_result, oracle_result)
    }

    const MINIMAL: &str = include_str!("../../../diagrams/minimal.ad");
    const PROCESS_ORDER: &str = include_str!("../../../diagrams/process_order.ad");
    const FIG6: &str = include_str!("../../../diagrams/fig6.ad");

    #[test]
    fn minimal_diagram_has_an_empty_essential_trace() {
        let (vm, oracle) = run_both(MINIMAL, "A", 1);
        assert_eq!(oracle.status, RunStatus::Completed, "{:?}", oracle.error);
        assert_eq!(vm.status, RunStatus::Completed);
        let cmp = compare_essential_traces(&vm.trace, &oracle.trace);
        assert!(cmp.is_equivalent(), "{:?}", cmp.first_divergence);
        assert!(crate::trace::essential_projection(&oracle.trace).is_empty());
    }

    #[test]
    fn process_order_traces_are_equivalent() {
        for seed in [1, 7, 99] {
            let (vm, oracle) = run_both(PROCESS_ORDER, "ProcessOrder", seed);
            assert_eq!(vm.status, RunStatus::Completed, "vm: {:?}", vm.error);
            assert_eq!(oracle.status, RunStatus::Completed, "oracle: {:?}", oracle.error);
            let cmp = compare_essential_traces(&vm.trace, &oracle.trace);
            assert!(cmp.is_equivalent(), "seed {seed}: {:?}", cmp.first_divergence);
        }
    }

    #[test]
    fn fig6_join_groups_match() {
        let (vm, oracle) = run_both(FIG6, "Fig6", 5);
        assert_eq!(vm.status, RunStatus::Completed, "vm: {:?}", vm.error);
        assert_eq!(oracle.status, RunStatus::Completed, "oracle: {:?}", oracle.error);
        let cmp = compare_essential_traces(&vm.trace, &oracle.trace);
        assert!(cmp.is_equivalent(), "{:?}", cmp.first_divergence);
    }

    #[test]
    fn rejected_order_is_equivalent_too() {
        let src = PROCESS_ORDER.replace("order:accepted", "order:rejected");
        let (vm, oracle) = run_both(&src, "ProcessOrder", 3);
        assert_eq!(vm.status, RunStatus::Completed);
        assert_eq!(oracle.status, RunStatus::Completed, "{:?}", oracle.error);
        let cmp = compare_essential_traces(&vm.trace, &oracle.trace);
        assert!(cmp.is_equivalent(), "{:?}", cmp.first_divergence);
    }

    #[test]
    fn stuck_diagrams_stick_in_both_machines() {
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
        let (vm, oracle) = run_both(src, "A", 2);
        assert_eq!(vm.status, RunStatus::QuiescentStuck);
        assert_eq!(oracle.status, RunStatus::QuiescentStuck, "{:?}", oracle.error);
        let cmp = compare_essential_traces(&vm.trace, &oracle.trace);
        assert!(cmp.is_equivalent(), "{:?}", cmp.first_divergence);
    }

    #[test]
    fn oracle_tokens_arrive_no_earlier_than_vm_tokens() {
        // the VM moves tokens eagerly: for every matched firing, the number
        // of essential events strictly before its inputs became available is
        // never larger in the VM than in the oracle
        let (vm, oracle) = run_both(PROCESS_ORDER, "ProcessOrder", 7);
        let essentials = |trace: &[TraceEvent]| -> Vec<(String, u64)> {
            trace
                .iter()
                .filter_map(|e| match &e.kind {
                    TraceKind::ActionStarted { action, .. } => {
                        Some((action.clone(), e.seq))
                    }
                    _ => None,
                })
                .collect()
        };
        let arrival = |trace: &[TraceEvent], action: &str| -> usize {
            // essential events that precede the firing of `action`
            let seq = trace
                .iter()
                .find_map(|e| match &e.kind {
                    TraceKind::ActionStarted { action: a, .. } if a == action => {
                        Some(e.seq)
                    }
                    _ => None,
                })
                .unwrap();
            essentials(trace).iter().filter(|(_, s)| *s < seq).count()
        };
        for action in ["FillOrder", "ShipOrder", "CloseOrder"] {
            assert!(
                arrival(&vm.trace, action) <= arrival(&oracle.trace, action),
                "{action} fired later in the VM than in the oracle"
            );
        }
    }
}
