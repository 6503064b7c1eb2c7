//! The candidate predicate grammar and its canonical text form.
//!
//! Predicates are compared, ordered and fingerprinted by their text, so the
//! text rendering must be canonical: constants use the shortest round-trip
//! float form, one-of sets are sorted, and every form parses back.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{parse_f64_lexeme, Value};

/// Comparison relation used by scalar-pair and elementwise predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rel {
    Lt,
    Le,
    Eq,
    Gt,
    Ge,
}

impl Rel {
    pub fn symbol(self) -> &'static str {
        match self {
            Rel::Lt => "<",
            Rel::Le => "<=",
            Rel::Eq => "==",
            Rel::Gt => ">",
            Rel::Ge => ">=",
        }
    }

    pub fn parse(s: &str) -> Option<Rel> {
        match s {
            "<" => Some(Rel::Lt),
            "<=" => Some(Rel::Le),
            "==" => Some(Rel::Eq),
            ">" => Some(Rel::Gt),
            ">=" => Some(Rel::Ge),
            _ => None,
        }
    }

    pub fn holds(self, ord: Ordering) -> bool {
        match self {
            Rel::Lt => ord == Ordering::Less,
            Rel::Le => ord != Ordering::Greater,
            Rel::Eq => ord == Ordering::Equal,
            Rel::Gt => ord == Ordering::Greater,
            Rel::Ge => ord != Ordering::Less,
        }
    }
}

/// Numeric comparison across value kinds; `None` when incomparable (NaN or
/// non-numeric mix).
pub fn num_cmp(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::I64(x), Value::I64(y)) => Some(x.cmp(y)),
        (Value::F64(x), Value::F64(y)) => x.partial_cmp(y),
        (Value::I64(x), Value::F64(y)) => (*x as f64).partial_cmp(y),
        (Value::F64(x), Value::I64(y)) => x.partial_cmp(&(*y as f64)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

pub fn num_eq(a: &Value, b: &Value) -> bool {
    num_cmp(a, b) == Some(Ordering::Equal)
}

/// A candidate/inferred predicate over the variables of one program point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    /// `x == c`
    EqConst { var: String, value: Value },
    /// `x >= c` (observed minimum)
    GeConst { var: String, value: Value },
    /// `x <= c` (observed maximum)
    LeConst { var: String, value: Value },
    /// `x != 0`
    NonZero { var: String },
    /// `x in {v1, v2[, v3]}`
    OneOf { var: String, values: Vec<Value> },
    /// `x <rel> y` over two scalars
    VarCmp { rel: Rel, left: String, right: String },
    /// `a[] == c`: every element of the array equals one constant
    AllEq { var: String, value: Value },
    /// `a[] init [c0,c1,...]`: per-index constants at function entry
    Init { var: String, values: Value },
    /// `a[] <rel> b[]` elementwise over same-length arrays
    ElemCmp { rel: Rel, left: String, right: String },
    /// `a[] sorted asc` / `a[] sorted desc`
    Sorted { var: String, ascending: bool },
    /// `x == orig(x) [+ c | - c]`: exit value vs nonce-paired entry value
    OrigOffset { var: String, offset: Value },
}

impl Predicate {
    /// Variables the predicate reads.
    pub fn vars(&self) -> Vec<&str> {
        match self {
            Predicate::EqConst { var, .. }
            | Predicate::GeConst { var, .. }
            | Predicate::LeConst { var, .. }
            | Predicate::NonZero { var }
            | Predicate::OneOf { var, .. }
            | Predicate::AllEq { var, .. }
            | Predicate::Init { var, .. }
            | Predicate::Sorted { var, .. }
            | Predicate::OrigOffset { var, .. } => vec![var],
            Predicate::VarCmp { left, right, .. } | Predicate::ElemCmp { left, right, .. } => {
                vec![left, right]
            }
        }
    }

    pub fn mentions_return(&self) -> bool {
        self.vars().iter().any(|v| *v == "return")
    }
}

fn offset_is_zero(v: &Value) -> bool {
    match v {
        Value::I64(0) => true,
        Value::F64(x) => *x == 0.0,
        _ => false,
    }
}

fn offset_is_negative(v: &Value) -> bool {
    match v {
        Value::I64(x) => *x < 0,
        Value::F64(x) => *x < 0.0,
        _ => false,
    }
}

fn negate_offset(v: &Value) -> Value {
    match v {
        Value::I64(x) => Value::I64(x.wrapping_neg()),
        Value::F64(x) => Value::F64(-x),
        other => other.clone(),
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::EqConst { var, value } => write!(f, "{} == {}", var, value),
            Predicate::GeConst { var, value } => write!(f, "{} >= {}", var, value),
            Predicate::LeConst { var, value } => write!(f, "{} <= {}", var, value),
            Predicate::NonZero { var } => write!(f, "{} != 0", var),
            Predicate::OneOf { var, values } => {
                write!(f, "{} in {{", var)?;
                for (i, v) in values.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}", v)?;
                }
                f.write_str("}")
            }
            Predicate::VarCmp { rel, left, right } => {
                write!(f, "{} {} {}", left, rel.symbol(), right)
            }
            Predicate::AllEq { var, value } => write!(f, "{}[] == {}", var, value),
            Predicate::Init { var, values } => write!(f, "{}[] init {}", var, values),
            Predicate::ElemCmp { rel, left, right } => {
                write!(f, "{}[] {} {}[]", left, rel.symbol(), right)
            }
            Predicate::Sorted { var, ascending } => {
                write!(f, "{}[] sorted {}", var, if *ascending { "asc" } else { "desc" })
            }
            Predicate::OrigOffset { var, offset } => {
                if offset_is_zero(offset) {
                    write!(f, "{} == orig({})", var, var)
                } else if offset_is_negative(offset) {
                    write!(f, "{} == orig({}) - {}", var, var, negate_offset(offset))
                } else {
                    write!(f, "{} == orig({}) + {}", var, var, offset)
                }
            }
        }
    }
}

fn parse_const(s: &str) -> Option<Value> {
    let s = s.trim();
    if s == "true" {
        return Some(Value::Bool(true));
    }
    if s == "false" {
        return Some(Value::Bool(false));
    }
    if let Ok(v) = s.parse::<i64>() {
        return Some(Value::I64(v));
    }
    parse_f64_lexeme(s).map(Value::F64)
}

fn parse_const_array(s: &str) -> Option<Value> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    if inner.trim().is_empty() {
        return Some(Value::I64Array(vec![]));
    }
    let parts: Vec<&str> = inner.split(',').collect();
    // integers when every element parses as one, floats otherwise
    if parts.iter().all(|p| p.trim().parse::<i64>().is_ok()) {
        Some(Value::I64Array(
            parts.iter().map(|p| p.trim().parse::<i64>().unwrap()).collect(),
        ))
    } else {
        let mut out = Vec::with_capacity(parts.len());
        for p in parts {
            out.push(parse_f64_lexeme(p.trim())?);
        }
        Some(Value::F64Array(out))
    }
}

/// Parse the canonical text form back into a predicate.
pub fn parse_predicate(text: &str) -> Option<Predicate> {
    let text = text.trim();

    if let Some((var, rest)) = text.split_once(" in {") {
        let inner = rest.strip_suffix('}')?;
        let mut values = Vec::new();
        for tok in inner.split(',') {
            values.push(parse_const(tok.trim())?);
        }
        return Some(Predicate::OneOf {
            var: var.trim().to_string(),
            values,
        });
    }

    if let Some((var, rest)) = text.split_once("[] sorted ") {
        return Some(Predicate::Sorted {
            var: var.trim().to_string(),
            ascending: match rest.trim() {
                "asc" => true,
                "desc" => false,
                _ => return None,
            },
        });
    }

    if let Some((var, rest)) = text.split_once("[] init ") {
        return Some(Predicate::Init {
            var: var.trim().to_string(),
            values: parse_const_array(rest)?,
        });
    }

    let toks: Vec<&str> = text.split(' ').collect();
    if toks.len() >= 3 {
        let (lhs, op, rhs) = (toks[0], toks[1], toks[2]);
        if let Some(rel) = Rel::parse(op) {
            // array forms carry a [] suffix
            if let Some(left) = lhs.strip_suffix("[]") {
                if let Some(right) = rhs.strip_suffix("[]") {
                    return Some(Predicate::ElemCmp {
                        rel,
                        left: left.to_string(),
                        right: right.to_string(),
                    });
                }
                if rel == Rel::Eq {
                    return Some(Predicate::AllEq {
                        var: left.to_string(),
                        value: parse_const(rhs)?,
                    });
                }
                return None;
            }
            // x == orig(x) [+ c | - c]
            if rel == Rel::Eq && rhs.starts_with("orig(") {
                let inner = rhs.strip_prefix("orig(")?.strip_suffix(')')?;
                if inner != lhs {
                    return None;
                }
                let offset = match (toks.get(3), toks.get(4)) {
                    (None, _) => Value::I64(0),
                    (Some(&"+"), Some(c)) => parse_const(c)?,
                    (Some(&"-"), Some(c)) => negate_offset(&parse_const(c)?),
                    _ => return None,
                };
                return Some(Predicate::OrigOffset {
                    var: lhs.to_string(),
                    offset,
                });
            }
            if op == "!=" {
                return None; // handled below
            }
            // constant on the right → unary, else variable pair
            if let Some(c) = parse_const(rhs) {
                return match rel {
                    Rel::Eq => Some(Predicate::EqConst {
                        var: lhs.to_string(),
                        value: c,
                    }),
                    Rel::Ge => Some(Predicate::GeConst {
                        var: lhs.to_string(),
                        value: c,
                    }),
                    Rel::Le => Some(Predicate::LeConst {
                        var: lhs.to_string(),
                        value: c,
                    }),
                    _ => None,
                };
            }
            return Some(Predicate::VarCmp {
                rel,
                left: lhs.to_string(),
                right: rhs.to_string(),
            });
        }
        if op == "!=" && rhs == "0" {
            return Some(Predicate::NonZero {
                var: lhs.to_string(),
            });
        }
    }
    None
}
