//! Opaque behavior bindings and the built-in stub library.
//!
//! Behaviors are never loaded as arbitrary code: a diagram (or the CLI)
//! selects named stubs from the library below, which keeps runs hermetic and
//! reproducible. Tests may additionally register native closures.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::value::{parse_record_prefix, Record, TokenValue, Value};

/// Built-in deterministic stub bodies.
#[derive(Clone, Debug, PartialEq)]
pub enum StubSpec {
    /// Pass all inputs through unchanged.
    Identity,
    /// Ignore inputs and return the given records.
    Const(Vec<(String, Record)>),
    /// Copy the single input and set one field.
    SetField { field: String, value: Value },
    /// Copy the single input and add a numeric delta to one field.
    AddField { field: String, delta: Value },
}

impl StubSpec {
    /// Parse a stub spec: `identity`, `const T{..} U{..}`, `set f = v`,
    /// `add f <number>`.
    pub fn parse(text: &str) -> Result<StubSpec, String> {
        let text = text.trim();
        if text == "identity" {
            return Ok(StubSpec::Identity);
        }
        if let Some(rest) = text.strip_prefix("const") {
            let mut rest = rest.trim_start();
            let mut records = Vec::new();
            while !rest.is_empty() {
                let (ty, fields, used) = parse_record_prefix(rest)?;
                let ty = ty.ok_or("const records need a type tag, e.g. `const Order{..}`")?;
                records.push((ty, fields));
                rest = rest[used..].trim_start();
            }
            if records.is_empty() {
                return Err("const needs at least one record".into());
            }
            return Ok(StubSpec::Const(records));
        }
        if let Some(rest) = text.strip_prefix("set") {
            let (field, value) = rest
                .split_once('=')
                .ok_or("set needs the form `set field = value`")?;
            let field = field.trim().to_string();
            if field.is_empty() {
                return Err("set needs a field name".into());
            }
            let value = parse_scalar_word(value.trim())?;
            return Ok(StubSpec::SetField { field, value });
        }
        if let Some(rest) = text.strip_prefix("add") {
            let mut parts = rest.split_whitespace();
            let field = parts.next().ok_or("add needs a field name")?.to_string();
            let delta = parts.next().ok_or("add needs a numeric delta")?;
            let delta = parse_scalar_word(delta)?;
            if !delta.is_numeric() {
                return Err("add delta must be numeric".into());
            }
            if parts.next().is_some() {
                return Err("trailing input after add spec".into());
            }
            return Ok(StubSpec::AddField { field, delta });
        }
        Err(format!("unknown stub spec `{text}`"))
    }

    fn apply(&self, inputs: &[TokenValue]) -> Result<Vec<TokenValue>, String> {
        match self {
            StubSpec::Identity => Ok(inputs.to_vec()),
            StubSpec::Const(records) => Ok(records
                .iter()
                .map(|(ty, fields)| TokenValue::data(ty.clone(), fields.clone()))
                .collect()),
            StubSpec::SetField { field, value } => {
                let mut out = single_input(inputs)?;
                out.fields.set(field.clone(), value.clone());
                Ok(vec![out])
            }
            StubSpec::AddField { field, delta } => {
                let mut out = single_input(inputs)?;
                let current = out
                    .fields
                    .get(field)
                    .ok_or_else(|| format!("field `{field}` missing"))?;
                let sum = match (current.as_dec(), delta.as_dec()) {
                    (Some(a), Some(b)) => {
                        a.checked_add(&b).ok_or("numeric overflow in add stub")?
                    }
                    _ => return Err(format!("field `{field}` is not numeric")),
                };
                let value = if sum.is_integral()
                    && matches!(current, Value::Int(_))
                    && matches!(delta, Value::Int(_))
                {
                    Value::Int(sum.to_string().parse().map_err(|_| "overflow")?)
                } else {
                    Value::Dec(sum)
                };
                out.fields.set(field.clone(), value);
                Ok(vec![out])
            }
        }
    }
}

fn single_input(inputs: &[TokenValue]) -> Result<TokenValue, String> {
    match inputs {
        [one] => Ok(one.clone()),
        _ => Err(format!("stub expects exactly one data input, got {}", inputs.len())),
    }
}

fn parse_scalar_word(text: &str) -> Result<Value, String> {
    // reuse the record parser on a synthetic one-field record
    let (_, fields) = crate::value::parse_record(&format!("{{v:{text}}}"))?;
    Ok(fields.get("v").cloned().unwrap())
}

pub type NativeBody = Arc<dyn Fn(&[TokenValue]) -> Result<Vec<TokenValue>, String> + Send + Sync>;

#[derive(Clone)]
enum Body {
    Stub(StubSpec),
    Native(NativeBody),
}

impl fmt::Debug for Body {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Body::Stub(s) => write!(f, "Stub({s:?})"),
            Body::Native(_) => write!(f, "Native(..)"),
        }
    }
}

/// A named opaque behavior with optional declared arities.
#[derive(Clone, Debug)]
pub struct OpaqueBehavior {
    pub name: String,
    pub in_arity: Option<usize>,
    pub out_arity: Option<usize>,
    body: Body,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum BehaviorError {
    #[error("behavior `{0}` is not bound to a stub or native body")]
    Unbound(String),
    #[error("behavior `{name}` expects {expected} {dir} values, got {got}")]
    ArityMismatch {
        name: String,
        dir: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("behavior `{name}` failed: {message}")]
    Apply { name: String, message: String },
}

/// Registry of bound behavior names, shared by the VM and the oracle.
#[derive(Clone, Debug, Default)]
pub struct BehaviorRegistry {
    map: BTreeMap<String, OpaqueBehavior>,
}

impl BehaviorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind_stub(&mut self, name: impl Into<String>, spec: StubSpec) {
        let name = name.into();
        let out_arity = match &spec {
            StubSpec::Const(records) => Some(records.len()),
            StubSpec::SetField { .. } | StubSpec::AddField { .. } => Some(1),
            StubSpec::Identity => None,
        };
        let in_arity = match &spec {
            StubSpec::SetField { .. } | StubSpec::AddField { .. } => Some(1),
            _ => None,
        };
        self.map.insert(
            name.clone(),
            OpaqueBehavior { name, in_arity, out_arity, body: Body::Stub(spec) },
        );
    }

    pub fn bind_native(
        &mut self,
        name: impl Into<String>,
        in_arity: Option<usize>,
        out_arity: Option<usize>,
        body: NativeBody,
    ) {
        let name = name.into();
        self.map.insert(
            name.clone(),
            OpaqueBehavior { name, in_arity, out_arity, body: Body::Native(body) },
        );
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Execute a bound behavior on the given data inputs.
    pub fn execute(
        &self,
        name: &str,
        inputs: &[TokenValue],
    ) -> Result<Vec<TokenValue>, BehaviorError> {
        let entry = self
            .map
            .get(name)
            .ok_or_else(|| BehaviorError::Unbound(name.to_string()))?;
        if let Some(expected) = entry.in_arity {
            if inputs.len() != expected {
                return Err(BehaviorError::ArityMismatch {
                    name: name.to_string(),
                    dir: "input",
                    expected,
                    got: inputs.len(),
                });
            }
        }
        let result = match &entry.body {
            Body::Stub(spec) => spec.apply(inputs),
            Body::Native(f) => f(inputs),
        };
        result.map_err(|message| BehaviorError::Apply { name: name.to_string(), message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_stub_specs() {
        assert_eq!(StubSpec::parse("identity").unwrap(), StubSpec::Identity);
        let c = StubSpec::parse("const Order{order:accepted, sum:150}").unwrap();
        match c {
            StubSpec::Const(recs) => {
                assert_eq!(recs.len(), 1);
                assert_eq!(recs[0].0, "Order");
                assert_eq!(recs[0].1.get("sum"), Some(&Value::Int(150)));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            StubSpec::parse("set shipped = true").unwrap(),
            StubSpec::SetField { .. }
        ));
        assert!(matches!(
            StubSpec::parse("add sum 25").unwrap(),
            StubSpec::AddField { .. }
        ));
        assert!(StubSpec::parse("const {a:1}").is_err());
        assert!(StubSpec::parse("frobnicate").is_err());
    }

    #[test]
    fn stub_bodies_are_deterministic() {
        let mut reg = BehaviorRegistry::new();
        reg.bind_stub("id", StubSpec::Identity);
        reg.bind_stub("bump", StubSpec::parse("add sum 25").unwrap());

        let mut r = Record::new();
        r.set("sum", Value::Int(100));
        let t = TokenValue::data("Order", r);

        let out = reg.execute("id", &[t.clone()]).unwrap();
        assert_eq!(out, vec![t.clone()]);

        let out = reg.execute("bump", &[t.clone()]).unwrap();
        assert_eq!(out[0].fields.get("sum"), Some(&Value::Int(125)));

        assert_eq!(
            reg.execute("missing", &[]),
            Err(BehaviorError::Unbound("missing".into()))
        );
        assert!(matches!(
            reg.execute("bump", &[t.clone(), t]),
            Err(BehaviorError::ArityMismatch { .. })
        ));
    }
}
