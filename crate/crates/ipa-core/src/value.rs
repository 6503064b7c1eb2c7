//! Scalar and array values as they appear in trace records.
//!
//! Equality is canonical: floats compare by bit pattern so that traces
//! containing NaN or infinities (possible after a fault) still round-trip
//! through the text codec and compare equal. NaNs are normalized to the
//! canonical quiet NaN on construction, which makes bit equality total.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Variable type tags used in trace declarations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarType {
    I64,
    F64,
    Bool,
    I64Array,
    F64Array,
}

impl VarType {
    pub fn as_str(self) -> &'static str {
        match self {
            VarType::I64 => "i64",
            VarType::F64 => "f64",
            VarType::Bool => "bool",
            VarType::I64Array => "i64[]",
            VarType::F64Array => "f64[]",
        }
    }

    pub fn parse(s: &str) -> Option<VarType> {
        match s {
            "i64" => Some(VarType::I64),
            "f64" => Some(VarType::F64),
            "bool" => Some(VarType::Bool),
            "i64[]" => Some(VarType::I64Array),
            "f64[]" => Some(VarType::F64Array),
            _ => None,
        }
    }

    pub fn is_array(self) -> bool {
        matches!(self, VarType::I64Array | VarType::F64Array)
    }
}

impl fmt::Display for VarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A traced value: 64-bit integer, IEEE-754 double, boolean, or an array
/// of either numeric kind. JSON form is untagged: `4`, `4.5`, `true`,
/// `[1,2]`, `[0.5]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    I64(i64),
    F64(f64),
    Bool(bool),
    I64Array(Vec<i64>),
    F64Array(Vec<f64>),
}

/// Normalize every NaN payload to the canonical quiet NaN so that text
/// round-trips are bit-exact.
pub fn canon_f64(x: f64) -> f64 {
    if x.is_nan() {
        f64::NAN
    } else {
        x
    }
}

impl Value {
    pub fn f64(x: f64) -> Value {
        Value::F64(canon_f64(x))
    }

    pub fn f64_array(xs: Vec<f64>) -> Value {
        Value::F64Array(xs.into_iter().map(canon_f64).collect())
    }

    pub fn var_type(&self) -> VarType {
        match self {
            Value::I64(_) => VarType::I64,
            Value::F64(_) => VarType::F64,
            Value::Bool(_) => VarType::Bool,
            Value::I64Array(_) => VarType::I64Array,
            Value::F64Array(_) => VarType::F64Array,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::I64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::F64(v) => Some(*v),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::I64(a), Value::I64(b)) => a == b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::F64(a), Value::F64(b)) => a.to_bits() == b.to_bits(),
            (Value::I64Array(a), Value::I64Array(b)) => a == b,
            (Value::F64Array(a), Value::F64Array(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for Value {}

fn write_f64(f: &mut fmt::Formatter<'_>, x: f64) -> fmt::Result {
    if x.is_nan() {
        f.write_str("NaN")
    } else if x == f64::INFINITY {
        f.write_str("inf")
    } else if x == f64::NEG_INFINITY {
        f.write_str("-inf")
    } else {
        // shortest round-trip decimal
        write!(f, "{}", x)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::I64(v) => write!(f, "{}", v),
            Value::F64(v) => write_f64(f, *v),
            Value::Bool(v) => write!(f, "{}", v),
            Value::I64Array(xs) => {
                f.write_str("[")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}", x)?;
                }
                f.write_str("]")
            }
            Value::F64Array(xs) => {
                f.write_str("[")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write_f64(f, *x)?;
                }
                f.write_str("]")
            }
        }
    }
}

/// Parse a scalar float lexeme as written by the codec.
pub fn parse_f64_lexeme(s: &str) -> Option<f64> {
    match s {
        "NaN" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse::<f64>().ok().map(canon_f64),
    }
}

/// Parse a value lexeme against its declared type.
pub fn parse_value(s: &str, ty: VarType) -> Option<Value> {
    let s = s.trim();
    match ty {
        VarType::I64 => s.parse::<i64>().ok().map(Value::I64),
        VarType::F64 => parse_f64_lexeme(s).map(Value::F64),
        VarType::Bool => match s {
            "true" => Some(Value::Bool(true)),
            "false" => Some(Value::Bool(false)),
            _ => None,
        },
        VarType::I64Array | VarType::F64Array => {
            let inner = s.strip_prefix('[')?.strip_suffix(']')?;
            let parts: Vec<&str> = if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner.split(',').collect()
            };
            if ty == VarType::I64Array {
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    out.push(p.trim().parse::<i64>().ok()?);
                }
                Some(Value::I64Array(out))
            } else {
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    out.push(parse_f64_lexeme(p.trim())?);
                }
                Some(Value::F64Array(out))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_display_round_trips() {
        for x in [0.0, -0.0, 4.0, 0.1, 1.0 / 3.0, f64::MAX, 5e-324] {
            let s = Value::f64(x).to_string();
            let back = parse_f64_lexeme(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "lexeme {}", s);
        }
    }

    #[test]
    fn nan_and_inf_round_trip() {
        let v = Value::f64(f64::from_bits(0x7ff4_0000_0000_1234)); // odd payload
        assert_eq!(v.to_string(), "NaN");
        assert_eq!(parse_value("NaN", VarType::F64).unwrap(), v);
        assert_eq!(
            parse_value("-inf", VarType::F64).unwrap(),
            Value::F64(f64::NEG_INFINITY)
        );
    }

    #[test]
    fn arrays_parse_back() {
        let v = Value::I64Array(vec![3, -1, 0]);
        assert_eq!(parse_value(&v.to_string(), VarType::I64Array).unwrap(), v);
        let w = Value::f64_array(vec![0.5, f64::NAN]);
        assert_eq!(parse_value(&w.to_string(), VarType::F64Array).unwrap(), w);
        assert_eq!(
            parse_value("[]", VarType::F64Array).unwrap(),
            Value::F64Array(vec![])
        );
    }
}
