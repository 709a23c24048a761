//! Static activity-diagram model: nodes, edges, parameters, and the
//! program-level registry of activities and opaque behavior declarations.

use std::collections::HashMap;

use crate::behavior::StubSpec;
use crate::expr::Expr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Initial,
    ActivityFinal,
    FlowFinal,
    Fork,
    Join,
    Decision,
    Merge,
    /// CallBehaviorAction: invokes an opaque behavior or a sub-activity.
    Action,
    /// Activity parameter node; direction comes from the matching parameter.
    Parameter,
    InputPin,
    OutputPin,
}

impl NodeKind {
    pub fn is_control(&self) -> bool {
        matches!(
            self,
            NodeKind::Fork | NodeKind::Join | NodeKind::Decision | NodeKind::Merge
        )
    }

    /// Stable nodes are the places where tokens rest between engine moves.
    pub fn is_stable(&self) -> bool {
        matches!(
            self,
            NodeKind::Initial
                | NodeKind::ActivityFinal
                | NodeKind::FlowFinal
                | NodeKind::Action
                | NodeKind::Parameter
        )
    }

    pub fn is_pin(&self) -> bool {
        matches!(self, NodeKind::InputPin | NodeKind::OutputPin)
    }

    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Initial => "initial node",
            NodeKind::ActivityFinal => "activity final",
            NodeKind::FlowFinal => "flow final",
            NodeKind::Fork => "fork",
            NodeKind::Join => "join",
            NodeKind::Decision => "decision",
            NodeKind::Merge => "merge",
            NodeKind::Action => "action",
            NodeKind::Parameter => "parameter node",
            NodeKind::InputPin => "input pin",
            NodeKind::OutputPin => "output pin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Every invocation gets a fresh runtime instance.
    Separate,
    /// One shared runtime instance per definition.
    Single,
}

#[derive(Clone, Debug)]
pub struct NodeDef {
    /// Qualified for pins (`owner.pin`), bare otherwise. Unique per activity.
    pub name: String,
    pub kind: NodeKind,
    /// Join nodes only.
    pub join_spec: Option<Expr>,
    /// Actions only: name of an opaque behavior or another activity.
    pub behavior: Option<String>,
    /// Actions only.
    pub is_synchronous: bool,
    /// Pins and parameter-node pins; `None` means control pin / untyped.
    pub pin_type: Option<String>,
    /// Pins only: name of the owning stable node.
    pub owner: Option<String>,
    pub line: u32,
}

impl NodeDef {
    pub fn plain(name: impl Into<String>, kind: NodeKind, line: u32) -> Self {
        NodeDef {
            name: name.into(),
            kind,
            join_spec: None,
            behavior: None,
            is_synchronous: true,
            pin_type: None,
            owner: None,
            line,
        }
    }

    /// Short pin name without the owner qualifier.
    pub fn short_name(&self) -> &str {
        match self.name.rsplit_once('.') {
            Some((_, short)) => short,
            None => &self.name,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EdgeDef {
    pub name: String,
    pub source: String,
    pub target: String,
    pub guard: Option<Expr>,
    pub line: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterDef {
    pub name: String,
    pub direction: Direction,
    pub ty: String,
}

#[derive(Clone, Debug)]
pub struct ActivityModel {
    pub name: String,
    pub nodes: Vec<NodeDef>,
    pub edges: Vec<EdgeDef>,
    /// Order is significant: arguments and parameter nodes match positionally.
    pub parameters: Vec<ParameterDef>,
    pub execution_mode: ExecutionMode,
    pub line: u32,
    index: HashMap<String, usize>,
}

impl ActivityModel {
    pub fn new(name: impl Into<String>, line: u32) -> Self {
        ActivityModel {
            name: name.into(),
            nodes: Vec::new(),
            edges: Vec::new(),
            parameters: Vec::new(),
            execution_mode: ExecutionMode::Separate,
            line,
            index: HashMap::new(),
        }
    }

    /// Returns false when the name is already taken.
    pub fn add_node(&mut self, node: NodeDef) -> bool {
        if self.index.contains_key(&node.name) {
            return false;
        }
        self.index.insert(node.name.clone(), self.nodes.len());
        self.nodes.push(node);
        true
    }

    pub fn node_idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&NodeDef> {
        self.node_idx(name).map(|i| &self.nodes[i])
    }

    pub fn has_activity_final(&self) -> bool {
        self.nodes.iter().any(|n| n.kind == NodeKind::ActivityFinal)
    }

    /// Pins of a stable node, in declaration order.
    pub fn pins_of<'a>(&'a self, owner: &'a str) -> impl Iterator<Item = (usize, &'a NodeDef)> + 'a {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.kind.is_pin() && n.owner.as_deref() == Some(owner))
    }

    pub fn edges_out_of<'a>(&'a self, node: &'a str) -> impl Iterator<Item = (usize, &'a EdgeDef)> + 'a {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.source == node)
    }

    pub fn edges_into<'a>(&'a self, node: &'a str) -> impl Iterator<Item = (usize, &'a EdgeDef)> + 'a {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.target == node)
    }

    pub fn in_parameters(&self) -> impl Iterator<Item = &ParameterDef> {
        self.parameters.iter().filter(|p| p.direction == Direction::In)
    }

    pub fn out_parameters(&self) -> impl Iterator<Item = &ParameterDef> {
        self.parameters.iter().filter(|p| p.direction == Direction::Out)
    }

    /// The parameter matching a parameter node, by name.
    pub fn parameter_of_node(&self, node_name: &str) -> Option<&ParameterDef> {
        self.parameters.iter().find(|p| p.name == node_name)
    }
}

/// Top-level opaque behavior declaration, optionally bound to a built-in stub.
#[derive(Clone, Debug)]
pub struct OpaqueDecl {
    pub name: String,
    pub stub: Option<StubSpec>,
    pub line: u32,
}

/// One parsed diagram file: activities plus opaque behavior declarations.
#[derive(Clone, Debug, Default)]
pub struct Program {
    pub activities: Vec<ActivityModel>,
    pub opaques: Vec<OpaqueDecl>,
}

impl Program {
    pub fn activity(&self, name: &str) -> Option<&ActivityModel> {
        self.activities.iter().find(|a| a.name == name)
    }

    pub fn activity_idx(&self, name: &str) -> Option<usize> {
        self.activities.iter().position(|a| a.name == name)
    }

    pub fn opaque(&self, name: &str) -> Option<&OpaqueDecl> {
        self.opaques.iter().find(|o| o.name == name)
    }
}
