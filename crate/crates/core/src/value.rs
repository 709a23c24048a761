//! Scalar values, exact decimals, and the flat records carried by data tokens.
//!
//! Guard outcomes must be reproducible bit-exactly, so decimal literals use
//! exact fixed-point arithmetic instead of binary floating point.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

/// Exact decimal: `mant * 10^-scale`, normalized (no trailing zeros).
///
/// Scale and magnitude are capped at parse time so that comparisons can
/// align scales in i128 without overflow.
#[derive(Clone, Copy, Debug)]
pub struct Dec {
    mant: i128,
    scale: u32,
}

pub const MAX_DEC_SCALE: u32 = 9;
pub const MAX_DEC_DIGITS: usize = 27;

impl Dec {
    pub fn new(mant: i128, scale: u32) -> Self {
        let mut d = Dec { mant, scale };
        d.normalize();
        d
    }

    fn normalize(&mut self) {
        if self.mant == 0 {
            self.scale = 0;
            return;
        }
        while self.scale > 0 && self.mant % 10 == 0 {
            self.mant /= 10;
            self.scale -= 1;
        }
    }

    pub fn from_int(v: i64) -> Self {
        Dec { mant: v as i128, scale: 0 }
    }

    /// Parse `[-]digits[.digits]`. Returns `None` when malformed or out of range.
    pub fn parse(text: &str) -> Option<Self> {
        let (neg, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        if body.is_empty() {
            return None;
        }
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return None;
        }
        if frac_part.len() as u32 > MAX_DEC_SCALE
            || int_part.len() + frac_part.len() > MAX_DEC_DIGITS
        {
            return None;
        }
        let mut mant: i128 = 0;
        for c in int_part.chars().chain(frac_part.chars()) {
            mant = mant * 10 + (c as u8 - b'0') as i128;
        }
        if neg {
            mant = -mant;
        }
        Some(Dec::new(mant, frac_part.len() as u32))
    }

    pub fn is_integral(&self) -> bool {
        self.scale == 0
    }

    /// Aligned mantissas for cross-scale comparison. Caps guarantee no overflow.
    fn aligned(&self, other: &Dec) -> (i128, i128) {
        let s = self.scale.max(other.scale);
        let a = self.mant * 10i128.pow(s - self.scale);
        let b = other.mant * 10i128.pow(s - other.scale);
        (a, b)
    }

    pub fn checked_add(&self, other: &Dec) -> Option<Dec> {
        let (a, b) = self.aligned(other);
        let mant = a.checked_add(b)?;
        if mant.unsigned_abs() >= 10u128.pow(MAX_DEC_DIGITS as u32 + 1) {
            return None;
        }
        Some(Dec::new(mant, self.scale.max(other.scale)))
    }
}

impl PartialEq for Dec {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = self.aligned(other);
        a == b
    }
}
impl Eq for Dec {}

impl PartialOrd for Dec {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Dec {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = self.aligned(other);
        a.cmp(&b)
    }
}

impl fmt::Display for Dec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.mant);
        }
        let neg = self.mant < 0;
        let digits = self.mant.unsigned_abs().to_string();
        let scale = self.scale as usize;
        let (int_part, frac_part) = if digits.len() > scale {
            let split = digits.len() - scale;
            (digits[..split].to_string(), digits[split..].to_string())
        } else {
            ("0".to_string(), format!("{:0>width$}", digits, width = scale))
        };
        write!(f, "{}{}.{}", if neg { "-" } else { "" }, int_part, frac_part)
    }
}

/// Scalar value held by a token field or written as a literal in a guard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Value {
    Str(String),
    Int(i64),
    Dec(Dec),
    Bool(bool),
}

impl Value {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Int(_) => "integer",
            Value::Dec(_) => "decimal",
            Value::Bool(_) => "boolean",
        }
    }

    pub fn as_dec(&self) -> Option<Dec> {
        match self {
            Value::Int(i) => Some(Dec::from_int(*i)),
            Value::Dec(d) => Some(*d),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Value::Int(_) | Value::Dec(_))
    }

    /// Numeric-aware comparison. `None` when the kinds are incomparable.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            _ => {
                let (a, b) = (self.as_dec()?, other.as_dec()?);
                Some(a.cmp(&b))
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => {
                if is_identifier(s) {
                    write!(f, "{s}")
                } else {
                    write!(f, "{s:?}")
                }
            }
            Value::Int(i) => write!(f, "{i}"),
            Value::Dec(d) => write!(f, "{d}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Str(v) => s.serialize_str(v),
            Value::Int(v) => s.serialize_i64(*v),
            // serialized as a string to keep the trace exact and byte-stable
            Value::Dec(v) => s.serialize_str(&v.to_string()),
            Value::Bool(v) => s.serialize_bool(*v),
        }
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Flat record of named scalar fields; the payload of a data token.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Record(pub BTreeMap<String, Value>);

impl Record {
    pub fn new() -> Self {
        Record(BTreeMap::new())
    }

    pub fn get(&self, field: &str) -> Option<&Value> {
        self.0.get(field)
    }

    pub fn set(&mut self, field: impl Into<String>, value: Value) {
        self.0.insert(field.into(), value);
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{k}: {v}")?;
        }
        write!(f, "}}")
    }
}

impl Serialize for Record {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Typed token payload: `ty = None` marks a control (NULL-typed) token,
/// which carries no data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TokenValue {
    pub ty: Option<String>,
    pub fields: Record,
}

impl TokenValue {
    pub fn control() -> Self {
        TokenValue { ty: None, fields: Record::new() }
    }

    pub fn data(ty: impl Into<String>, fields: Record) -> Self {
        TokenValue { ty: Some(ty.into()), fields }
    }

    pub fn is_control(&self) -> bool {
        self.ty.is_none()
    }
}

impl fmt::Display for TokenValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.ty {
            None => write!(f, "NULL"),
            Some(t) => write!(f, "{t}{}", self.fields),
        }
    }
}

// ---------------------------------------------------------------------------
// Record literals: `[Type]{field:value, ...}` as written in stub specs and
// CLI arguments.
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len()
            && self.src.as_bytes()[self.pos].is_ascii_whitespace()
        {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let end = rest
            .char_indices()
            .take_while(|(i, c)| {
                if *i == 0 {
                    c.is_ascii_alphabetic() || *c == '_'
                } else {
                    c.is_ascii_alphanumeric() || *c == '_'
                }
            })
            .count();
        if end == 0 {
            return None;
        }
        let s = rest[..end].to_string();
        self.pos += end;
        Some(s)
    }

    fn scalar(&mut self) -> Result<Value, String> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let first = rest.chars().next().ok_or("expected a value")?;
        if first == '"' {
            let mut out = String::new();
            let mut chars = rest.char_indices().skip(1);
            loop {
                let (i, c) = chars.next().ok_or("unterminated string")?;
                match c {
                    '"' => {
                        self.pos += i + 1;
                        return Ok(Value::Str(out));
                    }
                    '\\' => {
                        let (_, esc) = chars.next().ok_or("unterminated escape")?;
                        out.push(esc);
                    }
                    c => out.push(c),
                }
            }
        }
        if first.is_ascii_digit() || first == '-' {
            let end = rest
                .char_indices()
                .take_while(|(i, c)| c.is_ascii_digit() || *c == '.' || (*i == 0 && *c == '-'))
                .count();
            let text = &rest[..end];
            self.pos += end;
            return if text.contains('.') {
                Dec::parse(text)
                    .map(Value::Dec)
                    .ok_or_else(|| format!("malformed decimal `{text}`"))
            } else {
                text.parse::<i64>()
                    .map(Value::Int)
                    .map_err(|_| format!("malformed integer `{text}`"))
            };
        }
        match self.ident().as_deref() {
            Some("true") => Ok(Value::Bool(true)),
            Some("false") => Ok(Value::Bool(false)),
            Some(word) => Ok(Value::Str(word.to_string())),
            None => Err(format!("unexpected character `{first}` in value")),
        }
    }
}

/// Parse a record literal prefix: `[Type]{f:1, g:accepted}`. Returns the
/// optional type tag, the fields, and the bytes consumed. A missing tag is
/// filled in later from context (pin or parameter type).
pub fn parse_record_prefix(text: &str) -> Result<(Option<String>, Record, usize), String> {
    let mut cur = Cursor { src: text, pos: 0 };
    let ty = cur.ident();
    if !cur.eat('{') {
        return Err("expected `{` to open a record literal".into());
    }
    let mut fields = Record::new();
    if !cur.eat('}') {
        loop {
            let name = cur.ident().ok_or("expected field name")?;
            if !cur.eat(':') {
                return Err(format!("expected `:` after field `{name}`"));
            }
            let value = cur.scalar()?;
            fields.set(name, value);
            if cur.eat('}') {
                break;
            }
            if !cur.eat(',') {
                return Err("expected `,` or `}` in record literal".into());
            }
        }
    }
    Ok((ty, fields, cur.pos))
}

/// Parse a complete record literal.
pub fn parse_record(text: &str) -> Result<(Option<String>, Record), String> {
    let (ty, fields, used) = parse_record_prefix(text)?;
    if !text[used..].trim().is_empty() {
        return Err(format!("trailing input after record literal: `{}`", &text[used..]));
    }
    Ok((ty, fields))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dec_parse_and_display() {
        let d = Dec::parse("12.50").unwrap();
        assert_eq!(d.to_string(), "12.5");
        assert_eq!(Dec::parse("0.05").unwrap().to_string(), "0.05");
        assert_eq!(Dec::parse("-3.14").unwrap().to_string(), "-3.14");
        assert_eq!(Dec::parse("100").unwrap().to_string(), "100");
        assert!(Dec::parse("1.2.3").is_none());
        assert!(Dec::parse("").is_none());
        assert!(Dec::parse("1e5").is_none());
    }

    #[test]
    fn dec_comparison_is_exact() {
        assert_eq!(Dec::parse("1.50").unwrap(), Dec::parse("1.5").unwrap());
        assert!(Dec::parse("0.1").unwrap() < Dec::parse("0.3").unwrap());
        // 0.1 + 0.2 == 0.3 exactly, unlike f64
        let sum = Dec::parse("0.1")
            .unwrap()
            .checked_add(&Dec::parse("0.2").unwrap())
            .unwrap();
        assert_eq!(sum, Dec::parse("0.3").unwrap());
    }

    #[test]
    fn value_cross_kind_compare() {
        let i = Value::Int(100);
        let d = Value::Dec(Dec::parse("100.0").unwrap());
        assert_eq!(i.compare(&d), Some(Ordering::Equal));
        assert_eq!(
            Value::Str("a".into()).compare(&Value::Int(1)),
            None
        );
    }
}
