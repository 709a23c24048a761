//! Guard expression language: boolean connectives over comparisons of token
//! fields and literals, plus presence atoms for join criteria.
//!
//! Two evaluation contexts share one AST. A *guard* is evaluated against a
//! single token and may reference only that token's fields. A *join
//! criterion* is evaluated against a binding of queue variables to candidate
//! tokens: bare identifiers test presence of a token from that queue, and
//! dotted accesses like `p1.att2` read fields of the bound tokens.

use std::fmt;

use thiserror::Error;

use crate::value::{Dec, Record, TokenValue, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// Dotted identifier path. One segment is a bare field (guards) or a queue
/// variable (criteria); the last segment of a longer path is a field of the
/// variable named by the prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentPath(pub Vec<String>);

impl IdentPath {
    pub fn single(name: impl Into<String>) -> Self {
        IdentPath(vec![name.into()])
    }

    pub fn joined(&self) -> String {
        self.0.join(".")
    }

    /// Split into (variable, field) for a dotted access.
    pub fn var_field(&self) -> Option<(String, &str)> {
        if self.0.len() < 2 {
            return None;
        }
        let field = self.0.last().unwrap().as_str();
        Some((self.0[..self.0.len() - 1].join("."), field))
    }
}

impl fmt::Display for IdentPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.joined())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Lit(Value),
    Path(IdentPath),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Lit(v) => write!(f, "{v}"),
            Operand::Path(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Bool(bool),
    /// Reserved guard literal: true iff all sibling guards of the same
    /// decision are false. Expanded by the compiler before path construction.
    Otherwise,
    /// Bare identifier: queue presence in criteria, boolean field in guards.
    Atom(IdentPath),
    Cmp {
        op: CmpOp,
        lhs: Operand,
        rhs: Operand,
    },
    Not(Box<Expr>),
    And(Vec<Expr>),
    Or(Vec<Expr>),
}

impl Expr {
    /// True when evaluation cannot touch token data.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Bool(_) | Expr::Otherwise => true,
            Expr::Atom(_) => false,
            Expr::Cmp { lhs, rhs, .. } => {
                matches!(lhs, Operand::Lit(_)) && matches!(rhs, Operand::Lit(_))
            }
            Expr::Not(e) => e.is_constant(),
            Expr::And(es) | Expr::Or(es) => es.iter().all(|e| e.is_constant()),
        }
    }

    pub fn contains_otherwise(&self) -> bool {
        match self {
            Expr::Otherwise => true,
            Expr::Bool(_) | Expr::Atom(_) | Expr::Cmp { .. } => false,
            Expr::Not(e) => e.contains_otherwise(),
            Expr::And(es) | Expr::Or(es) => es.iter().any(|e| e.contains_otherwise()),
        }
    }

    /// Top-level AND conjuncts (the expression itself when it is not an AND).
    pub fn conjuncts(&self) -> Vec<&Expr> {
        match self {
            Expr::And(es) => es.iter().flat_map(|e| e.conjuncts()).collect(),
            other => vec![other],
        }
    }

    /// AND of `parts` with `true` conjuncts dropped and nested ANDs flattened.
    pub fn and_all(parts: Vec<Expr>) -> Expr {
        let mut out = Vec::new();
        for p in parts {
            match p {
                Expr::Bool(true) => {}
                Expr::And(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        match out.len() {
            0 => Expr::Bool(true),
            1 => out.into_iter().next().unwrap(),
            _ => Expr::And(out),
        }
    }

    fn level(&self) -> u8 {
        match self {
            Expr::Or(_) => 1,
            Expr::And(_) => 2,
            Expr::Not(_) => 3,
            _ => 4,
        }
    }
}

/// Canonical infix rendering: single spaces around operators, uppercase
/// connectives, minimal parentheses.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, min_level: u8) -> fmt::Result {
            if e.level() < min_level {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Otherwise => write!(f, "otherwise"),
            Expr::Atom(p) => write!(f, "{p}"),
            Expr::Cmp { op, lhs, rhs } => write!(f, "{lhs} {} {rhs}", op.symbol()),
            Expr::Not(e) => {
                write!(f, "NOT ")?;
                child(f, e, 3)
            }
            Expr::And(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        write!(f, " AND ")?;
                    }
                    child(f, e, 2)?;
                }
                Ok(())
            }
            Expr::Or(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        write!(f, " OR ")?;
                    }
                    child(f, e, 1)?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("expression syntax error at offset {offset}: {message}")]
pub struct ExprError {
    pub offset: usize,
    pub message: String,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("non-constant guard evaluated against a control (NULL-typed) token")]
    GuardOnControlToken,
    #[error("field `{field}` missing from token value")]
    FieldMissing { field: String },
    #[error("cannot compare {left} {op} {right}")]
    TypeMismatch {
        left: &'static str,
        op: &'static str,
        right: &'static str,
    },
    #[error("unknown variable `{name}` in this context")]
    UnknownVariable { name: String },
    #[error("`otherwise` is only meaningful as a decision edge guard")]
    MisplacedOtherwise,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Str(String),
    Sym(&'static str),
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(usize, Tok)>,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            toks.push((start, Tok::Ident(src[start..i].to_string())));
        } else if c.is_ascii_digit() || (c == '-' && i + 1 < bytes.len() && (bytes[i + 1] as char).is_ascii_digit()) {
            i += 1;
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.')
            {
                i += 1;
            }
            toks.push((start, Tok::Num(src[start..i].to_string())));
        } else if c == '"' {
            i += 1;
            let mut s = String::new();
            loop {
                if i >= bytes.len() {
                    return Err(ExprError {
                        offset: start,
                        message: "unterminated string literal".into(),
                    });
                }
                match bytes[i] {
                    b'"' => {
                        i += 1;
                        break;
                    }
                    b'\\' if i + 1 < bytes.len() => {
                        s.push(bytes[i + 1] as char);
                        i += 2;
                    }
                    b => {
                        s.push(b as char);
                        i += 1;
                    }
                }
            }
            toks.push((start, Tok::Str(s)));
        } else {
            let two = if i + 1 < bytes.len() { &src[i..i + 2] } else { "" };
            let sym = match two {
                "<>" | "<=" | ">=" | "==" => Some(match two {
                    "<>" => "<>",
                    "<=" => "<=",
                    ">=" => ">=",
                    _ => "=",
                }),
                _ => None,
            };
            if let Some(s) = sym {
                toks.push((start, Tok::Sym(s)));
                i += 2;
            } else {
                let s = match c {
                    '=' => "=",
                    '<' => "<",
                    '>' => ">",
                    '(' => "(",
                    ')' => ")",
                    '.' => ".",
                    _ => {
                        return Err(ExprError {
                            offset: i,
                            message: format!("unexpected character `{c}`"),
                        })
                    }
                };
                toks.push((start, Tok::Sym(s)));
                i += 1;
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    lx: Lexer<'a>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.lx.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.lx
            .toks
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or(self.lx.src.len())
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.lx.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn err(&self, message: impl Into<String>) -> ExprError {
        ExprError { offset: self.offset(), message: message.into() }
    }

    fn keyword(&self) -> Option<&'static str> {
        match self.peek() {
            Some(Tok::Ident(s)) => match s.to_ascii_lowercase().as_str() {
                "and" => Some("and"),
                "or" => Some("or"),
                "not" => Some("not"),
                "true" => Some("true"),
                "false" => Some("false"),
                "otherwise" => Some("otherwise"),
                _ => None,
            },
            _ => None,
        }
    }

    fn parse_or(&mut self) -> Result<Expr, ExprError> {
        let mut parts = vec![self.parse_and()?];
        while self.keyword() == Some("or") {
            self.bump();
            parts.push(self.parse_and()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Expr::Or(parts) })
    }

    fn parse_and(&mut self) -> Result<Expr, ExprError> {
        let mut parts = vec![self.parse_unary()?];
        while self.keyword() == Some("and") {
            self.bump();
            parts.push(self.parse_unary()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Expr::And(parts) })
    }

    fn parse_unary(&mut self) -> Result<Expr, ExprError> {
        if self.keyword() == Some("not") {
            self.bump();
            return Ok(Expr::Not(Box::new(self.parse_unary()?)));
        }
        self.parse_rel()
    }

    fn parse_rel(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(&Tok::Sym("(")) {
            // lookahead: parenthesized boolean group
            self.bump();
            let inner = self.parse_or()?;
            if self.bump() != Some(Tok::Sym(")")) {
                return Err(self.err("expected `)`"));
            }
            return Ok(inner);
        }
        match self.keyword() {
            Some("true") => {
                self.bump();
                return Ok(Expr::Bool(true));
            }
            Some("false") => {
                self.bump();
                return Ok(Expr::Bool(false));
            }
            Some("otherwise") => {
                self.bump();
                return Ok(Expr::Otherwise);
            }
            _ => {}
        }
        let lhs = self.parse_operand()?;
        let op = match self.peek() {
            Some(Tok::Sym("=")) => Some(CmpOp::Eq),
            Some(Tok::Sym("<>")) => Some(CmpOp::Ne),
            Some(Tok::Sym("<")) => Some(CmpOp::Lt),
            Some(Tok::Sym("<=")) => Some(CmpOp::Le),
            Some(Tok::Sym(">")) => Some(CmpOp::Gt),
            Some(Tok::Sym(">=")) => Some(CmpOp::Ge),
            _ => None,
        };
        match op {
            Some(op) => {
                self.bump();
                let rhs = self.parse_operand()?;
                Ok(Expr::Cmp { op, lhs, rhs })
            }
            None => match lhs {
                Operand::Path(p) => Ok(Expr::Atom(p)),
                Operand::Lit(_) => Err(self.err("literal is not a boolean expression")),
            },
        }
    }

    fn parse_operand(&mut self) -> Result<Operand, ExprError> {
        match self.bump() {
            Some(Tok::Num(n)) => {
                if n.contains('.') {
                    let d = Dec::parse(&n).ok_or_else(|| ExprError {
                        offset: self.offset(),
                        message: format!("malformed decimal literal `{n}`"),
                    })?;
                    Ok(Operand::Lit(Value::Dec(d)))
                } else {
                    let v: i64 = n.parse().map_err(|_| ExprError {
                        offset: self.offset(),
                        message: format!("malformed integer literal `{n}`"),
                    })?;
                    Ok(Operand::Lit(Value::Int(v)))
                }
            }
            Some(Tok::Str(s)) => Ok(Operand::Lit(Value::Str(s))),
            Some(Tok::Ident(first)) => {
                let mut segs = vec![first];
                while self.peek() == Some(&Tok::Sym(".")) {
                    self.bump();
                    match self.bump() {
                        Some(Tok::Ident(s)) => segs.push(s),
                        _ => return Err(self.err("expected identifier after `.`")),
                    }
                }
                Ok(Operand::Path(IdentPath(segs)))
            }
            _ => Err(self.err("expected operand")),
        }
    }
}

/// Parse an expression in the guard grammar. Precedence: NOT over
/// comparisons over AND over OR; parentheses group.
pub fn parse_expr(text: &str) -> Result<Expr, ExprError> {
    let toks = lex(text)?;
    let mut p = Parser { lx: Lexer { src: text, toks }, pos: 0 };
    let e = p.parse_or()?;
    if p.peek().is_some() {
        return Err(p.err("trailing input after expression"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn compare(op: CmpOp, a: &Value, b: &Value) -> Result<bool, EvalError> {
    let ord = a.compare(b).ok_or(EvalError::TypeMismatch {
        left: a.kind_name(),
        op: op.symbol(),
        right: b.kind_name(),
    })?;
    Ok(match op {
        CmpOp::Eq => ord.is_eq(),
        CmpOp::Ne => !ord.is_eq(),
        CmpOp::Lt => ord.is_lt(),
        CmpOp::Le => ord.is_le(),
        CmpOp::Gt => ord.is_gt(),
        CmpOp::Ge => ord.is_ge(),
    })
}

fn guard_field<'a>(fields: &'a Record, field: &str) -> Result<&'a Value, EvalError> {
    fields
        .get(field)
        .ok_or_else(|| EvalError::FieldMissing { field: field.to_string() })
}

/// Evaluate a guard or passRule against a single token.
///
/// Non-constant guards on control tokens are an execution error: a control
/// token has no data for the guard to read.
pub fn eval_guard(expr: &Expr, token: &TokenValue) -> Result<bool, EvalError> {
    if token.is_control() && !expr.is_constant() {
        return Err(EvalError::GuardOnControlToken);
    }
    eval_guard_inner(expr, token)
}

fn eval_guard_inner(expr: &Expr, token: &TokenValue) -> Result<bool, EvalError> {
    match expr {
        Expr::Bool(b) => Ok(*b),
        Expr::Otherwise => Err(EvalError::MisplacedOtherwise),
        Expr::Atom(p) => {
            if p.0.len() != 1 {
                return Err(EvalError::UnknownVariable { name: p.joined() });
            }
            match guard_field(&token.fields, &p.0[0])? {
                Value::Bool(b) => Ok(*b),
                v => Err(EvalError::TypeMismatch {
                    left: v.kind_name(),
                    op: "as",
                    right: "boolean",
                }),
            }
        }
        Expr::Cmp { op, lhs, rhs } => {
            let l = match lhs {
                Operand::Lit(v) => v.clone(),
                Operand::Path(p) => {
                    if p.0.len() != 1 {
                        return Err(EvalError::UnknownVariable { name: p.joined() });
                    }
                    guard_field(&token.fields, &p.0[0])?.clone()
                }
            };
            let r = match rhs {
                Operand::Lit(v) => v.clone(),
                Operand::Path(p) => {
                    if p.0.len() != 1 {
                        return Err(EvalError::UnknownVariable { name: p.joined() });
                    }
                    // unquoted identifiers fall back to string literals when
                    // the token has no field of that name
                    match token.fields.get(&p.0[0]) {
                        Some(v) => v.clone(),
                        None => Value::Str(p.0[0].clone()),
                    }
                }
            };
            compare(*op, &l, &r)
        }
        Expr::Not(e) => Ok(!eval_guard_inner(e, token)?),
        Expr::And(es) => {
            for e in es {
                if !eval_guard_inner(e, token)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Expr::Or(es) => {
            for e in es {
                if eval_guard_inner(e, token)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
    }
}

/// Queue-variable binding: at most one candidate token per output queue.
#[derive(Clone, Debug, Default)]
pub struct Binding(pub std::collections::BTreeMap<String, TokenValue>);

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    pub fn bind(&mut self, var: impl Into<String>, token: TokenValue) {
        self.0.insert(var.into(), token);
    }

    pub fn get(&self, var: &str) -> Option<&TokenValue> {
        self.0.get(var)
    }
}

/// Evaluate a join criterion over a binding.
///
/// Bare identifiers test presence of a token from that queue; `var.field`
/// accesses read data of the bound tokens. A data predicate over an unbound
/// variable is false rather than an error, so evaluation is total over
/// partial bindings.
pub fn eval_join_criteria(expr: &Expr, binding: &Binding) -> Result<bool, EvalError> {
    match expr {
        Expr::Bool(b) => Ok(*b),
        Expr::Otherwise => Err(EvalError::MisplacedOtherwise),
        Expr::Atom(p) => Ok(binding.get(&p.joined()).is_some()),
        Expr::Cmp { op, lhs, rhs } => {
            let l = match resolve_criteria_operand(lhs, binding, false)? {
                Some(v) => v,
                None => return Ok(false),
            };
            let r = match resolve_criteria_operand(rhs, binding, true)? {
                Some(v) => v,
                None => return Ok(false),
            };
            compare(*op, &l, &r)
        }
        Expr::Not(e) => Ok(!eval_join_criteria(e, binding)?),
        Expr::And(es) => {
            for e in es {
                if !eval_join_criteria(e, binding)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Expr::Or(es) => {
            for e in es {
                if eval_join_criteria(e, binding)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
    }
}

/// `Ok(None)` means "variable unbound": the enclosing predicate is false.
fn resolve_criteria_operand(
    operand: &Operand,
    binding: &Binding,
    allow_string_fallback: bool,
) -> Result<Option<Value>, EvalError> {
    match operand {
        Operand::Lit(v) => Ok(Some(v.clone())),
        Operand::Path(p) => match p.var_field() {
            Some((var, field)) => match binding.get(&var) {
                None => Ok(None),
                Some(tok) => Ok(Some(guard_field(&tok.fields, field)?.clone())),
            },
            None => {
                if allow_string_fallback {
                    Ok(Some(Value::Str(p.0[0].clone())))
                } else {
                    Err(EvalError::UnknownVariable { name: p.joined() })
                }
            }
        },
    }
}

pub fn str_value(s: &str) -> Value {
    Value::Str(s.to_string())
}

pub fn int_value(i: i64) -> Value {
    Value::Int(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Record;

    fn tok(fields: &[(&str, Value)]) -> TokenValue {
        let mut r = Record::new();
        for (k, v) in fields {
            r.set(*k, v.clone());
        }
        TokenValue::data("T", r)
    }

    #[test]
    fn parses_conjunction_of_comparisons() {
        let e = parse_expr("order=approved AND sum>100").unwrap();
        match &e {
            Expr::And(parts) => {
                assert_eq!(parts.len(), 2);
                assert!(matches!(
                    &parts[0],
                    Expr::Cmp { op: CmpOp::Eq, lhs: Operand::Path(p), rhs: Operand::Path(q) }
                        if p.joined() == "order" && q.joined() == "approved"
                ));
                assert!(matches!(
                    &parts[1],
                    Expr::Cmp { op: CmpOp::Gt, lhs: Operand::Path(p), rhs: Operand::Lit(Value::Int(100)) }
                        if p.joined() == "sum"
                ));
            }
            other => panic!("expected AND, got {other:?}"),
        }
    }

    #[test]
    fn parses_constants_and_dotted_accesses() {
        assert_eq!(parse_expr("true").unwrap(), Expr::Bool(true));
        let e = parse_expr("p1.att2 = p2.att2").unwrap();
        assert!(matches!(
            &e,
            Expr::Cmp { op: CmpOp::Eq, lhs: Operand::Path(l), rhs: Operand::Path(r) }
                if l.joined() == "p1.att2" && r.joined() == "p2.att2"
        ));
    }

    #[test]
    fn syntax_error_carries_offset() {
        let err = parse_expr("sum > ").unwrap_err();
        assert!(err.offset >= 5, "offset {}", err.offset);
        assert!(parse_expr("a ? b").is_err());
    }

    #[test]
    fn guard_evaluation_examples() {
        let g = parse_expr("sum>100").unwrap();
        assert!(eval_guard(&g, &tok(&[("sum", Value::Int(150))])).unwrap());
        assert!(!eval_guard(&g, &tok(&[("sum", Value::Int(50))])).unwrap());

        let g = parse_expr("order=approved").unwrap();
        assert!(!eval_guard(&g, &tok(&[("order", str_value("rejected"))])).unwrap());
        assert!(eval_guard(&g, &tok(&[("order", str_value("approved"))])).unwrap());
    }

    #[test]
    fn guard_on_control_token_is_an_error() {
        let g = parse_expr("sum>100").unwrap();
        assert_eq!(
            eval_guard(&g, &TokenValue::control()),
            Err(EvalError::GuardOnControlToken)
        );
        // constant guards stay legal on control tokens
        assert!(eval_guard(&parse_expr("true").unwrap(), &TokenValue::control()).unwrap());
    }

    #[test]
    fn guard_missing_field_and_type_mismatch() {
        let g = parse_expr("sum>100").unwrap();
        assert_eq!(
            eval_guard(&g, &tok(&[("other", Value::Int(1))])),
            Err(EvalError::FieldMissing { field: "sum".into() })
        );
        let g = parse_expr("order>100").unwrap();
        assert!(matches!(
            eval_guard(&g, &tok(&[("order", str_value("x"))])),
            Err(EvalError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn decimal_guard_comparison_is_exact() {
        let g = parse_expr("sum > 0.3").unwrap();
        let t = tok(&[("sum", Value::Dec(Dec::parse("0.30").unwrap()))]);
        assert!(!eval_guard(&g, &t).unwrap());
        let g = parse_expr("sum >= 0.3").unwrap();
        assert!(eval_guard(&g, &t).unwrap());
    }

    fn eq1() -> Expr {
        // OR(AND("p1.att2 = p2.att2", p1, p2), AND(p2, p3)) in infix form
        parse_expr("(p1.att2 = p2.att2 AND p1 AND p2) OR (p2 AND p3)").unwrap()
    }

    #[test]
    fn join_criteria_examples() {
        let e = eq1();

        let mut b = Binding::new();
        b.bind("p2", tok(&[("att2", Value::Int(1))]));
        b.bind("p3", tok(&[("att2", Value::Int(9))]));
        assert!(eval_join_criteria(&e, &b).unwrap());

        let mut b = Binding::new();
        b.bind("p1", tok(&[("att2", Value::Int(5))]));
        b.bind("p2", tok(&[("att2", Value::Int(7))]));
        assert!(!eval_join_criteria(&e, &b).unwrap());

        let mut b = Binding::new();
        b.bind("p1", tok(&[("att2", Value::Int(5))]));
        b.bind("p2", tok(&[("att2", Value::Int(5))]));
        assert!(eval_join_criteria(&e, &b).unwrap());
    }

    #[test]
    fn renders_canonically() {
        let e = parse_expr("order = approved and sum > 100").unwrap();
        assert_eq!(e.to_string(), "order = approved AND sum > 100");
        let e = parse_expr("(a or b) and not c").unwrap();
        assert_eq!(e.to_string(), "(a OR b) AND NOT c");
        let e = parse_expr("p1.att2 = p2.att2").unwrap();
        assert_eq!(e.to_string(), "p1.att2 = p2.att2");
    }

    #[test]
    fn render_parse_roundtrip() {
        for src in [
            "a = 1 AND b <> 2 OR NOT (c < 3.5)",
            "x >= 10 AND (y OR z) AND w = ok",
            "NOT NOT flag",
            "p1.k = p2.k AND p1 AND p2",
        ] {
            let e = parse_expr(src).unwrap();
            let e2 = parse_expr(&e.to_string()).unwrap();
            assert_eq!(e, e2, "roundtrip failed for `{src}`");
        }
    }

    #[test]
    fn and_all_normalizes() {
        let t = Expr::Bool(true);
        assert_eq!(Expr::and_all(vec![t.clone(), t.clone()]), Expr::Bool(true));
        let g = parse_expr("x > 1").unwrap();
        assert_eq!(Expr::and_all(vec![t, g.clone()]), g);
    }
}
