//! Textual diagram format: parser and renderer.
//!
//! One file holds opaque behavior declarations and any number of activities:
//!
//! ```text
//! opaque fill stub identity;
//!
//! activity ProcessOrder {
//!     initial start;  pin start.out;
//!     action Fill calls fill;  pin Fill.cin;  pin Fill.order : Order;
//!     finalActivity done;  pin done.in;
//!     edge start.out -> Fill.cin;
//!     edge Fill.order -> done.in;
//! }
//! ```
//!
//! Statements: `initial`, `finalActivity`, `finalFlow`, `fork`,
//! `join <n> [when <expr>]`, `decision`, `merge`,
//! `action <n> calls <behavior> [async]`, `param <n> : in|out`,
//! `pin <owner>.<n> [: <type>]`, `edge <src> -> <dst> [guard <expr>]`.
//! Comments run from `//` to end of line. An activity header may declare
//! parameters `(in x : T, out y : U)` and the execution mode keyword
//! `single` (default `separate`).

use thiserror::Error;

use crate::behavior::StubSpec;
use crate::expr::{parse_expr, Expr};
use crate::model::{
    ActivityModel, Direction, EdgeDef, ExecutionMode, NodeDef, NodeKind, OpaqueDecl,
    ParameterDef, Program,
};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Str(String),
    Sym(&'static str),
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: u32,
    col: u32,
    offset: usize,
    end: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut line = 1u32;
    let mut col = 1u32;
    macro_rules! advance {
        ($n:expr) => {{
            for _ in 0..$n {
                if bytes[i] == b'\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
                i += 1;
            }
        }};
    }
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            advance!(1);
            continue;
        }
        if c == '/' && i + 1 < bytes.len() && bytes[i + 1] == b'/' {
            while i < bytes.len() && bytes[i] != b'\n' {
                advance!(1);
            }
            continue;
        }
        let (tline, tcol, start) = (line, col, i);
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                advance!(1);
            }
            toks.push(Spanned {
                tok: Tok::Ident(src[start..i].to_string()),
                line: tline,
                col: tcol,
                offset: start,
                end: i,
            });
            continue;
        }
        if c.is_ascii_digit() {
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.')
            {
                advance!(1);
            }
            toks.push(Spanned {
                tok: Tok::Num(src[start..i].to_string()),
                line: tline,
                col: tcol,
                offset: start,
                end: i,
            });
            continue;
        }
        if c == '"' {
            advance!(1);
            while i < bytes.len() && bytes[i] != b'"' {
                if bytes[i] == b'\\' && i + 1 < bytes.len() {
                    advance!(1);
                }
                advance!(1);
            }
            if i >= bytes.len() {
                return Err(ParseError {
                    line: tline,
                    col: tcol,
                    message: "unterminated string literal".into(),
                });
            }
            advance!(1);
            toks.push(Spanned {
                tok: Tok::Str(src[start + 1..i - 1].to_string()),
                line: tline,
                col: tcol,
                offset: start,
                end: i,
            });
            continue;
        }
        let two = if i + 1 < bytes.len() { &src[i..i + 2] } else { "" };
        let sym2: Option<&'static str> = match two {
            "->" => Some("->"),
            "<>" => Some("<>"),
            "<=" => Some("<="),
            ">=" => Some(">="),
            _ => None,
        };
        if let Some(s) = sym2 {
            advance!(2);
            toks.push(Spanned { tok: Tok::Sym(s), line: tline, col: tcol, offset: start, end: i });
            continue;
        }
        let sym1: Option<&'static str> = match c {
            '{' => Some("{"),
            '}' => Some("}"),
            '(' => Some("("),
            ')' => Some(")"),
            ';' => Some(";"),
            ':' => Some(":"),
            ',' => Some(","),
            '.' => Some("."),
            '=' => Some("="),
            '<' => Some("<"),
            '>' => Some(">"),
            _ => None,
        };
        match sym1 {
            Some(s) => {
                advance!(1);
                toks.push(Spanned { tok: Tok::Sym(s), line: tline, col: tcol, offset: start, end: i });
            }
            None => {
                return Err(ParseError {
                    line: tline,
                    col: tcol,
                    message: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(toks)
}

struct P<'a> {
    src: &'a str,
    toks: Vec<Spanned>,
    pos: usize,
}

impl<'a> P<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn here(&self) -> (u32, u32) {
        match self.toks.get(self.pos) {
            Some(s) => (s.line, s.col),
            None => {
                let line = self.src.lines().count().max(1) as u32;
                (line, 1)
            }
        }
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError { line, col, message: message.into() }
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|s| s.tok.clone());
        self.pos += 1;
        t
    }

    fn eat_sym(&mut self, s: &'static str) -> bool {
        if self.peek() == Some(&Tok::Sym(s)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &'static str) -> Result<(), ParseError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{s}`")))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(_)) => match self.bump() {
                Some(Tok::Ident(s)) => Ok(s),
                _ => unreachable!(),
            },
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// Node reference: `name` or `owner.pin`, returned as the qualified name.
    fn node_ref(&mut self) -> Result<String, ParseError> {
        let mut name = self.expect_ident("a node name")?;
        while self.eat_sym(".") {
            let part = self.expect_ident("a pin name after `.`")?;
            name.push('.');
            name.push_str(&part);
        }
        Ok(name)
    }

    /// Capture raw source text up to (not including) the next `;` and parse
    /// it as a guard expression.
    fn raw_expr_until_semi(&mut self) -> Result<Expr, ParseError> {
        let start = match self.toks.get(self.pos) {
            Some(s) => s,
            None => return Err(self.err("expected an expression")),
        };
        let (eline, ecol, estart) = (start.line, start.col, start.offset);
        let mut end = estart;
        while let Some(s) = self.toks.get(self.pos) {
            if s.tok == Tok::Sym(";") {
                break;
            }
            end = s.end;
            self.pos += 1;
        }
        let text = &self.src[estart..end];
        parse_expr(text).map_err(|e| ParseError {
            line: eline,
            col: ecol + e.offset as u32,
            message: e.message,
        })
    }

    /// Capture raw source text up to the next `;` without parsing.
    fn raw_until_semi(&mut self) -> String {
        let start = self.toks.get(self.pos).map(|s| s.offset).unwrap_or(self.src.len());
        let mut end = start;
        while let Some(s) = self.toks.get(self.pos) {
            if s.tok == Tok::Sym(";") {
                break;
            }
            end = s.end;
            self.pos += 1;
        }
        self.src[start..end].to_string()
    }
}

/// Parse a diagram file into its activities and opaque declarations.
///
/// Cross-references inside the file are resolved here: duplicate node names,
/// unknown edge endpoints, and unknown pin owners are parse errors.
/// Behavior references stay symbolic and are bound at run time.
pub fn parse_program(src: &str) -> Result<Program, ParseError> {
    let toks = lex(src)?;
    let mut p = P { src, toks, pos: 0 };
    let mut program = Program::default();
    loop {
        match p.peek() {
            None => break,
            Some(Tok::Ident(kw)) if kw == "activity" => {
                let activity = parse_activity(&mut p)?;
                if program.activity(&activity.name).is_some() {
                    return Err(ParseError {
                        line: activity.line,
                        col: 1,
                        message: format!("duplicate activity name `{}`", activity.name),
                    });
                }
                program.activities.push(activity);
            }
            Some(Tok::Ident(kw)) if kw == "opaque" => {
                let (line, _) = p.here();
                p.bump();
                let name = p.expect_ident("an opaque behavior name")?;
                let stub = if p.eat_keyword("stub") {
                    let raw = p.raw_until_semi();
                    let spec = StubSpec::parse(&raw)
                        .map_err(|m| ParseError { line, col: 1, message: m })?;
                    Some(spec)
                } else {
                    None
                };
                p.expect_sym(";")?;
                if program.opaque(&name).is_some() {
                    return Err(ParseError {
                        line,
                        col: 1,
                        message: format!("duplicate opaque declaration `{name}`"),
                    });
                }
                program.opaques.push(OpaqueDecl { name, stub, line });
            }
            _ => return Err(p.err("expected `activity` or `opaque`")),
        }
    }
    Ok(program)
}

fn parse_activity(p: &mut P) -> Result<ActivityModel, ParseError> {
    let (aline, _) = p.here();
    p.bump(); // `activity`
    let name = p.expect_ident("an activity name")?;
    let mut activity = ActivityModel::new(name, aline);

    if p.eat_sym("(") {
        if !p.eat_sym(")") {
            loop {
                let direction = if p.eat_keyword("in") {
                    Direction::In
                } else if p.eat_keyword("out") {
                    Direction::Out
                } else {
                    return Err(p.err("expected `in` or `out` parameter direction"));
                };
                let pname = p.expect_ident("a parameter name")?;
                p.expect_sym(":")?;
                let ty = p.expect_ident("a parameter type")?;
                activity.parameters.push(ParameterDef { name: pname, direction, ty });
                if p.eat_sym(")") {
                    break;
                }
                p.expect_sym(",")?;
            }
        }
    }
    if p.eat_keyword("single") {
        activity.execution_mode = ExecutionMode::Single;
    } else if p.eat_keyword("separate") {
        activity.execution_mode = ExecutionMode::Separate;
    }
    p.expect_sym("{")?;

    // direction annotations of `param` statements, checked later against the
    // declared parameter list
    let mut param_dirs: Vec<(String, Direction, u32)> = Vec::new();

    while !p.eat_sym("}") {
        let (line, _) = p.here();
        let kw = p.expect_ident("a statement keyword")?;
        let add = |activity: &mut ActivityModel, node: NodeDef| -> Result<(), ParseError> {
            let name = node.name.clone();
            if !activity.add_node(node) {
                return Err(ParseError {
                    line,
                    col: 1,
                    message: format!("duplicate node name `{name}`"),
                });
            }
            Ok(())
        };
        match kw.as_str() {
            "initial" => {
                let n = p.expect_ident("a node name")?;
                p.expect_sym(";")?;
                add(&mut activity, NodeDef::plain(n, NodeKind::Initial, line))?;
            }
            "finalActivity" => {
                let n = p.expect_ident("a node name")?;
                p.expect_sym(";")?;
                add(&mut activity, NodeDef::plain(n, NodeKind::ActivityFinal, line))?;
            }
            "finalFlow" => {
                let n = p.expect_ident("a node name")?;
                p.expect_sym(";")?;
                add(&mut activity, NodeDef::plain(n, NodeKind::FlowFinal, line))?;
            }
            "fork" => {
                let n = p.expect_ident("a node name")?;
                p.expect_sym(";")?;
                add(&mut activity, NodeDef::plain(n, NodeKind::Fork, line))?;
            }
            "decision" => {
                let n = p.expect_ident("a node name")?;
                p.expect_sym(";")?;
                add(&mut activity, NodeDef::plain(n, NodeKind::Decision, line))?;
            }
            "merge" => {
                let n = p.expect_ident("a node name")?;
                p.expect_sym(";")?;
                add(&mut activity, NodeDef::plain(n, NodeKind::Merge, line))?;
            }
            "join" => {
                let n = p.expect_ident("a node name")?;
                let mut node = NodeDef::plain(n, NodeKind::Join, line);
                if p.eat_keyword("when") {
                    node.join_spec = Some(p.raw_expr_until_semi()?);
                }
                p.expect_sym(";")?;
                add(&mut activity, node)?;
            }
            "action" => {
                let n = p.expect_ident("a node name")?;
                if !p.eat_keyword("calls") {
                    return Err(p.err("expected `calls <behavior>`"));
                }
                let behavior = p.expect_ident("a behavior name")?;
                let is_synchronous = !p.eat_keyword("async");
                p.expect_sym(";")?;
                let mut node = NodeDef::plain(n, NodeKind::Action, line);
                node.behavior = Some(behavior);
                node.is_synchronous = is_synchronous;
                add(&mut activity, node)?;
            }
            "param" => {
                let n = p.expect_ident("a parameter node name")?;
                p.expect_sym(":")?;
                let direction = if p.eat_keyword("in") {
                    Direction::In
                } else if p.eat_keyword("out") {
                    Direction::Out
                } else {
                    return Err(p.err("expected `in` or `out`"));
                };
                p.expect_sym(";")?;
                param_dirs.push((n.clone(), direction, line));
                add(&mut activity, NodeDef::plain(n, NodeKind::Parameter, line))?;
            }
            "pin" => {
                let owner = p.expect_ident("a pin owner")?;
                p.expect_sym(".")?;
                let short = p.expect_ident("a pin name")?;
                let pin_type = if p.eat_sym(":") {
                    Some(p.expect_ident("a type name")?)
                } else {
                    None
                };
                p.expect_sym(";")?;
                match activity.node(&owner) {
                    Some(n) if n.kind.is_stable() => {}
                    Some(n) => {
                        return Err(ParseError {
                            line,
                            col: 1,
                            message: format!(
                                "pin owner `{owner}` is a {}, pins belong to stable nodes",
                                n.kind.label()
                            ),
                        })
                    }
                    None => {
                        return Err(ParseError {
                            line,
                            col: 1,
                            message: format!("pin owner `{owner}` is not declared (declare the owner first)"),
                        })
                    }
                }
                // direction is resolved below once the edges are known
                let mut node =
                    NodeDef::plain(format!("{owner}.{short}"), NodeKind::OutputPin, line);
                node.owner = Some(owner);
                node.pin_type = pin_type;
                add(&mut activity, node)?;
            }
            "edge" => {
                let source = p.node_ref()?;
                p.expect_sym("->")?;
                let target = p.node_ref()?;
                let guard = if p.eat_keyword("guard") {
                    Some(p.raw_expr_until_semi()?)
                } else {
                    None
                };
                p.expect_sym(";")?;
                let name = format!("e{}", activity.edges.len() + 1);
                activity.edges.push(EdgeDef { name, source, target, guard, line });
            }
            other => {
                return Err(ParseError {
                    line,
                    col: 1,
                    message: format!("unknown statement keyword `{other}`"),
                })
            }
        }
    }

    // every edge endpoint must name a declared node
    for edge in &activity.edges {
        for end in [&edge.source, &edge.target] {
            if activity.node(end).is_none() {
                return Err(ParseError {
                    line: edge.line,
                    col: 1,
                    message: format!("edge references unknown node `{end}`"),
                });
            }
        }
    }

    // `param n : dir` must agree with the declared parameter of the same name
    for (pname, dir, line) in &param_dirs {
        match activity.parameter_of_node(pname) {
            Some(param) if param.direction == *dir => {}
            Some(_) => {
                return Err(ParseError {
                    line: *line,
                    col: 1,
                    message: format!(
                        "parameter node `{pname}` direction disagrees with the activity header"
                    ),
                })
            }
            None => {
                return Err(ParseError {
                    line: *line,
                    col: 1,
                    message: format!(
                        "parameter node `{pname}` has no matching parameter in the activity header"
                    ),
                })
            }
        }
    }

    resolve_pin_directions(&mut activity);
    Ok(activity)
}

/// Classify each pin as input or output: by owner kind where the owner fixes
/// the direction, otherwise by how edges use the pin. Ambiguous or unused
/// pins default to output pins and are rejected by validation (E4).
fn resolve_pin_directions(activity: &mut ActivityModel) {
    let mut kinds = vec![None::<NodeKind>; activity.nodes.len()];
    for (i, node) in activity.nodes.iter().enumerate() {
        if !node.kind.is_pin() {
            continue;
        }
        let owner_kind = node
            .owner
            .as_deref()
            .and_then(|o| activity.node(o))
            .map(|n| n.kind);
        kinds[i] = match owner_kind {
            Some(NodeKind::Initial) => Some(NodeKind::OutputPin),
            Some(NodeKind::ActivityFinal) | Some(NodeKind::FlowFinal) => {
                Some(NodeKind::InputPin)
            }
            Some(NodeKind::Parameter) => {
                let owner = node.owner.as_deref().unwrap();
                activity.parameter_of_node(owner).map(|p| match p.direction {
                    // tokens flow out of input parameters into the diagram
                    Direction::In => NodeKind::OutputPin,
                    Direction::Out => NodeKind::InputPin,
                })
            }
            _ => None,
        };
        if kinds[i].is_none() {
            let used_as_source =
                activity.edges.iter().any(|e| e.source == node.name);
            let used_as_target =
                activity.edges.iter().any(|e| e.target == node.name);
            kinds[i] = Some(match (used_as_source, used_as_target) {
                (true, false) => NodeKind::OutputPin,
                (false, true) => NodeKind::InputPin,
                _ => NodeKind::OutputPin,
            });
        }
    }
    for (i, kind) in kinds.into_iter().enumerate() {
        if let Some(k) = kind {
            activity.nodes[i].kind = k;
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering (model back to text, used by the diagram generator)
// ---------------------------------------------------------------------------

pub fn render_program(program: &Program) -> String {
    let mut out = String::new();
    for opaque in &program.opaques {
        out.push_str(&render_opaque(opaque));
        out.push('\n');
    }
    if !program.opaques.is_empty() {
        out.push('\n');
    }
    for activity in &program.activities {
        out.push_str(&render_activity(activity));
        out.push('\n');
    }
    out
}

fn render_opaque(o: &OpaqueDecl) -> String {
    match &o.stub {
        None => format!("opaque {};", o.name),
        Some(spec) => format!("opaque {} stub {};", o.name, render_stub(spec)),
    }
}

pub fn render_stub(spec: &StubSpec) -> String {
    match spec {
        StubSpec::Identity => "identity".to_string(),
        StubSpec::Const(records) => {
            let mut s = "const".to_string();
            for (ty, fields) in records {
                s.push(' ');
                s.push_str(ty);
                s.push_str(&fields.to_string());
            }
            s
        }
        StubSpec::SetField { field, value } => format!("set {field} = {value}"),
        StubSpec::AddField { field, delta } => format!("add {field} {delta}"),
    }
}

fn render_activity(a: &ActivityModel) -> String {
    let mut out = format!("activity {}", a.name);
    if !a.parameters.is_empty() {
        out.push_str(" (");
        for (i, p) in a.parameters.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let dir = match p.direction {
                Direction::In => "in",
                Direction::Out => "out",
            };
            out.push_str(&format!("{dir} {} : {}", p.name, p.ty));
        }
        out.push(')');
    }
    if a.execution_mode == ExecutionMode::Single {
        out.push_str(" single");
    }
    out.push_str(" {\n");
    for node in &a.nodes {
        let stmt = match node.kind {
            NodeKind::Initial => format!("initial {};", node.name),
            NodeKind::ActivityFinal => format!("finalActivity {};", node.name),
            NodeKind::FlowFinal => format!("finalFlow {};", node.name),
            NodeKind::Fork => format!("fork {};", node.name),
            NodeKind::Decision => format!("decision {};", node.name),
            NodeKind::Merge => format!("merge {};", node.name),
            NodeKind::Join => match &node.join_spec {
                Some(spec) => format!("join {} when {};", node.name, spec),
                None => format!("join {};", node.name),
            },
            NodeKind::Action => format!(
                "action {} calls {}{};",
                node.name,
                node.behavior.as_deref().unwrap_or("?"),
                if node.is_synchronous { "" } else { " async" }
            ),
            NodeKind::Parameter => {
                let dir = match a.parameter_of_node(&node.name).map(|p| p.direction) {
                    Some(Direction::Out) => "out",
                    _ => "in",
                };
                format!("param {} : {dir};", node.name)
            }
            NodeKind::InputPin | NodeKind::OutputPin => match &node.pin_type {
                Some(t) => format!("pin {} : {t};", node.name),
                None => format!("pin {};", node.name),
            },
        };
        out.push_str("    ");
        out.push_str(&stmt);
        out.push('\n');
    }
    for edge in &a.edges {
        let stmt = match &edge.guard {
            Some(g) => format!("edge {} -> {} guard {};", edge.source, edge.target, g),
            None => format!("edge {} -> {};", edge.source, edge.target),
        };
        out.push_str("    ");
        out.push_str(&stmt);
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str =
        "activity A { initial i; finalActivity f; pin i.out; pin f.in; edge i.out -> f.in; }";

    #[test]
    fn parses_the_smallest_legal_diagram() {
        let program = parse_program(MINIMAL).unwrap();
        assert_eq!(program.activities.len(), 1);
        let a = &program.activities[0];
        assert_eq!(a.nodes.len(), 4); // 2 nodes + 2 pins
        assert_eq!(a.edges.len(), 1);
        assert_eq!(a.node("i.out").unwrap().kind, NodeKind::OutputPin);
        assert_eq!(a.node("f.in").unwrap().kind, NodeKind::InputPin);
        assert!(a.has_activity_final());
    }

    #[test]
    fn parses_parameters_and_modes() {
        let src = r#"
            activity MakePayment (in invoice : Invoice, out payment : Payment) {
                param invoice : in;  pin invoice.out : Invoice;
                param payment : out; pin payment.in : Payment;
                action Pay calls pay; pin Pay.in : Invoice; pin Pay.out : Payment;
                edge invoice.out -> Pay.in;
                edge Pay.out -> payment.in;
            }
            activity Shared single { initial i; finalActivity f; pin i.out; pin f.in; edge i.out -> f.in; }
        "#;
        let program = parse_program(src).unwrap();
        let mp = program.activity("MakePayment").unwrap();
        assert_eq!(mp.parameters.len(), 2);
        assert_eq!(mp.node("invoice.out").unwrap().kind, NodeKind::OutputPin);
        assert_eq!(mp.node("payment.in").unwrap().kind, NodeKind::InputPin);
        assert_eq!(
            program.activity("Shared").unwrap().execution_mode,
            ExecutionMode::Single
        );
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_program("activity A { initial }").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.col > 1);
    }

    #[test]
    fn duplicate_node_name_is_rejected() {
        let err =
            parse_program("activity A { initial i; fork i; }").unwrap_err();
        assert!(err.message.contains("duplicate node name"));
    }

    #[test]
    fn unknown_edge_endpoint_is_rejected() {
        let err = parse_program(
            "activity A { initial i; pin i.out; edge i.out -> nowhere; }",
        )
        .unwrap_err();
        assert!(err.message.contains("unknown node"));
    }

    #[test]
    fn guards_join_specs_and_opaques_parse() {
        let src = r#"
            opaque fill stub identity;
            opaque recv stub const Order{order:accepted, sum:150};
            activity A {
                initial i; pin i.out;
                action R calls recv; pin R.cin; pin R.out : Order;
                decision d;
                action F calls fill; pin F.in : Order; pin F.out : Order;
                finalActivity f; pin f.in;
                join j when p1.att2 = p2.att2;
                edge i.out -> R.cin;
                edge R.out -> d;
                edge d -> F.in guard order = accepted;
                edge d -> f.in guard otherwise;
                edge F.out -> f.in;
            }
        "#;
        let program = parse_program(src).unwrap();
        assert_eq!(program.opaques.len(), 2);
        let a = program.activity("A").unwrap();
        let j = a.node("j").unwrap();
        assert_eq!(j.join_spec.as_ref().unwrap().to_string(), "p1.att2 = p2.att2");
        assert_eq!(
            a.edges[2].guard.as_ref().unwrap().to_string(),
            "order = accepted"
        );
        assert_eq!(a.edges[3].guard.as_ref().unwrap().to_string(), "otherwise");
    }

    #[test]
    fn render_parse_roundtrip_preserves_structure() {
        let src = r#"
            opaque pay stub const Payment{amount:150};
            activity MakePayment (in invoice : Invoice, out payment : Payment) {
                param invoice : in;  pin invoice.out : Invoice;
                param payment : out; pin payment.in : Payment;
                action Pay calls pay; pin Pay.in : Invoice; pin Pay.out : Payment;
                edge invoice.out -> Pay.in;
                edge Pay.out -> payment.in;
            }
        "#;
        let program = parse_program(src).unwrap();
        let rendered = render_program(&program);
        let back = parse_program(&rendered).unwrap();
        assert_eq!(back.activities.len(), program.activities.len());
        let (a, b) = (&program.activities[0], &back.activities[0]);
        assert_eq!(a.parameters, b.parameters);
        assert_eq!(a.nodes.len(), b.nodes.len());
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.pin_type, y.pin_type);
        }
        assert_eq!(a.edges.len(), b.edges.len());
    }
}
