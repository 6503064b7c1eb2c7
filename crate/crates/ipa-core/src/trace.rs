//! Trace records and the line-oriented trace file codec.
//!
//! The format is a declarations section followed by sample records:
//!
//! ```text
//! IPATRACE 1
//! DECL addChunk:::ENTER env:i64[] x:i64
//! DECL addChunk:::EXIT env:i64[] x:i64 return:i64
//! SAMPLES
//! S addChunk:::ENTER nonce=0 tid=1
//! env = [0,1]
//! x = 4
//! END
//! ```
//!
//! Serialization is canonical (fixed ordering, shortest round-trip floats),
//! so equal trace files serialize to identical bytes and every emitted file
//! parses back to an equal value.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{parse_value, Value, VarType};

pub const TRACE_HEADER: &str = "IPATRACE 1";

/// Program point kind: function boundary or basic-block entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PointKind {
    FunctionEntry,
    FunctionExit,
    BasicBlockEntry,
}

/// An instrumented program location: function entry, function exit, or the
/// entry of a named basic block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProgramPoint {
    pub function: String,
    pub kind: PointKind,
    /// Block label; present iff `kind == BasicBlockEntry`.
    pub block: Option<String>,
}

impl ProgramPoint {
    pub fn entry(function: impl Into<String>) -> ProgramPoint {
        ProgramPoint {
            function: function.into(),
            kind: PointKind::FunctionEntry,
            block: None,
        }
    }

    pub fn exit(function: impl Into<String>) -> ProgramPoint {
        ProgramPoint {
            function: function.into(),
            kind: PointKind::FunctionExit,
            block: None,
        }
    }

    pub fn block(function: impl Into<String>, label: impl Into<String>) -> ProgramPoint {
        ProgramPoint {
            function: function.into(),
            kind: PointKind::BasicBlockEntry,
            block: Some(label.into()),
        }
    }

    pub fn parse(s: &str) -> Option<ProgramPoint> {
        let (func, rest) = s.split_once(":::")?;
        if func.is_empty() {
            return None;
        }
        match rest {
            "ENTER" => Some(ProgramPoint::entry(func)),
            "EXIT" => Some(ProgramPoint::exit(func)),
            _ => {
                let label = rest.strip_prefix("BB:")?;
                if label.is_empty() {
                    return None;
                }
                Some(ProgramPoint::block(func, label))
            }
        }
    }
}

impl fmt::Display for ProgramPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PointKind::FunctionEntry => write!(f, "{}:::ENTER", self.function),
            PointKind::FunctionExit => write!(f, "{}:::EXIT", self.function),
            PointKind::BasicBlockEntry => write!(
                f,
                "{}:::BB:{}",
                self.function,
                self.block.as_deref().unwrap_or("")
            ),
        }
    }
}

/// One sampled record: variable bindings observed at a program point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSample {
    pub point: ProgramPoint,
    /// Per-thread invocation counter pairing ENTER with EXIT.
    pub nonce: u64,
    pub thread_id: u64,
    /// Ordered (name, value) pairs matching the point declaration.
    pub bindings: Vec<(String, Value)>,
    /// 0-based position of this sample in the file.
    pub seq: usize,
}

impl TraceSample {
    pub fn value_of(&self, name: &str) -> Option<&Value> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

/// Declared variable signature for one program point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declaration {
    pub point: ProgramPoint,
    pub vars: Vec<(String, VarType)>,
}

/// A full trace: declarations plus ordered samples.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceFile {
    pub declarations: Vec<Declaration>,
    pub samples: Vec<TraceSample>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: sample at undeclared point {point}")]
    UndeclaredPoint { line: usize, point: String },
    #[error("line {line}: binding signature mismatch at {point}: {msg}")]
    SignatureMismatch {
        line: usize,
        point: String,
        msg: String,
    },
    #[error("line {line}: duplicate nonce pairing for {point} nonce={nonce} tid={tid}")]
    DuplicateNonce {
        line: usize,
        point: String,
        nonce: u64,
        tid: u64,
    },
    #[error("line {line}: EXIT without matching ENTER for {point} nonce={nonce} tid={tid}")]
    OrphanExit {
        line: usize,
        point: String,
        nonce: u64,
        tid: u64,
    },
}

fn syntax(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Syntax {
        line,
        msg: msg.into(),
    }
}

impl TraceFile {
    pub fn declaration_for(&self, point: &ProgramPoint) -> Option<&Declaration> {
        self.declarations.iter().find(|d| &d.point == point)
    }
}

/// Serialize a trace file to its canonical byte form.
pub fn write_trace(t: &TraceFile) -> String {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for d in &t.declarations {
        out.push_str("DECL ");
        out.push_str(&d.point.to_string());
        for (name, ty) in &d.vars {
            out.push(' ');
            out.push_str(name);
            out.push(':');
            out.push_str(ty.as_str());
        }
        out.push('\n');
    }
    out.push_str("SAMPLES\n");
    for s in &t.samples {
        out.push_str("S ");
        out.push_str(&s.point.to_string());
        out.push_str(&format!(" nonce={} tid={}\n", s.nonce, s.thread_id));
        for (name, v) in &s.bindings {
            out.push_str(name);
            out.push_str(" = ");
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out.push_str("END\n");
    }
    out
}

/// Parse a trace file, validating declarations, signatures and nonce pairing.
pub fn parse_trace(text: &str) -> Result<TraceFile, TraceError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| syntax(1, "empty input"))?;
    if first != TRACE_HEADER {
        return Err(syntax(1, format!("expected `{}` header", TRACE_HEADER)));
    }

    let mut trace = TraceFile::default();
    let mut decl_index: HashMap<ProgramPoint, usize> = HashMap::new();

    // declarations until the SAMPLES separator
    let mut saw_samples = false;
    for (idx, line) in &mut lines {
        let lineno = idx + 1;
        if line == "SAMPLES" {
            saw_samples = true;
            break;
        }
        let rest = line
            .strip_prefix("DECL ")
            .ok_or_else(|| syntax(lineno, "expected DECL or SAMPLES"))?;
        let mut toks = rest.split(' ');
        let pp = toks
            .next()
            .and_then(ProgramPoint::parse)
            .ok_or_else(|| syntax(lineno, "bad program point name"))?;
        let mut vars = Vec::new();
        for tok in toks {
            let (name, ty) = tok
                .split_once(':')
                .ok_or_else(|| syntax(lineno, format!("bad var signature `{}`", tok)))?;
            let ty = VarType::parse(ty)
                .ok_or_else(|| syntax(lineno, format!("unknown type `{}`", ty)))?;
            if name.is_empty() || vars.iter().any(|(n, _): &(String, VarType)| n == name) {
                return Err(syntax(lineno, format!("bad or duplicate var `{}`", name)));
            }
            vars.push((name.to_string(), ty));
        }
        if vars.is_empty() {
            return Err(syntax(lineno, "declaration needs at least one variable"));
        }
        if decl_index.contains_key(&pp) {
            return Err(syntax(lineno, format!("duplicate declaration for {}", pp)));
        }
        decl_index.insert(pp.clone(), trace.declarations.len());
        trace.declarations.push(Declaration { point: pp, vars });
    }
    if !saw_samples {
        return Err(syntax(text.lines().count(), "missing SAMPLES section"));
    }

    // pairing state: (function, tid) -> nonce -> entered/exited
    let mut entered: HashMap<(String, u64, u64), bool> = HashMap::new();

    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue; // tolerate trailing blank line
        }
        let rest = line
            .strip_prefix("S ")
            .ok_or_else(|| syntax(lineno, "expected sample record"))?;
        let mut toks = rest.split(' ');
        let pp = toks
            .next()
            .and_then(ProgramPoint::parse)
            .ok_or_else(|| syntax(lineno, "bad program point name"))?;
        let nonce = toks
            .next()
            .and_then(|t| t.strip_prefix("nonce="))
            .and_then(|t| t.parse::<u64>().ok())
            .ok_or_else(|| syntax(lineno, "bad nonce field"))?;
        let tid = toks
            .next()
            .and_then(|t| t.strip_prefix("tid="))
            .and_then(|t| t.parse::<u64>().ok())
            .ok_or_else(|| syntax(lineno, "bad tid field"))?;
        if toks.next().is_some() {
            return Err(syntax(lineno, "trailing tokens on sample line"));
        }

        let decl_i = *decl_index.get(&pp).ok_or(TraceError::UndeclaredPoint {
            line: lineno,
            point: pp.to_string(),
        })?;

        let mut bindings = Vec::new();
        let mut closed = false;
        for (bidx, bline) in &mut lines {
            let blineno = bidx + 1;
            if bline == "END" {
                closed = true;
                break;
            }
            let (name, val) = bline
                .split_once(" = ")
                .ok_or_else(|| syntax(blineno, "expected `name = value` binding"))?;
            let slot = bindings.len();
            let decl = &trace.declarations[decl_i];
            let (dname, dty) = decl.vars.get(slot).ok_or_else(|| {
                TraceError::SignatureMismatch {
                    line: blineno,
                    point: pp.to_string(),
                    msg: format!("extra binding `{}`", name),
                }
            })?;
            if dname != name {
                return Err(TraceError::SignatureMismatch {
                    line: blineno,
                    point: pp.to_string(),
                    msg: format!("expected var `{}`, found `{}`", dname, name),
                });
            }
            let value =
                parse_value(val, *dty).ok_or_else(|| TraceError::SignatureMismatch {
                    line: blineno,
                    point: pp.to_string(),
                    msg: format!("value `{}` does not parse as {}", val, dty),
                })?;
            bindings.push((name.to_string(), value));
        }
        if !closed {
            return Err(syntax(lineno, "sample not terminated by END"));
        }
        let decl = &trace.declarations[decl_i];
        if bindings.len() != decl.vars.len() {
            return Err(TraceError::SignatureMismatch {
                line: lineno,
                point: pp.to_string(),
                msg: format!(
                    "expected {} bindings, found {}",
                    decl.vars.len(),
                    bindings.len()
                ),
            });
        }

        match pp.kind {
            PointKind::FunctionEntry => {
                let key = (pp.function.clone(), tid, nonce);
                if entered.contains_key(&key) {
                    return Err(TraceError::DuplicateNonce {
                        line: lineno,
                        point: pp.to_string(),
                        nonce,
                        tid,
                    });
                }
                entered.insert(key, false);
            }
            PointKind::FunctionExit => {
                // functions with no declared ENTER point (parameterless)
                // produce standalone EXIT samples; pairing does not apply
                let has_enter = decl_index.contains_key(&ProgramPoint::entry(&pp.function));
                let key = (pp.function.clone(), tid, nonce);
                match entered.get_mut(&key) {
                    None if !has_enter => {}
                    None => {
                        return Err(TraceError::OrphanExit {
                            line: lineno,
                            point: pp.to_string(),
                            nonce,
                            tid,
                        })
                    }
                    Some(exited) if *exited => {
                        return Err(TraceError::DuplicateNonce {
                            line: lineno,
                            point: pp.to_string(),
                            nonce,
                            tid,
                        })
                    }
                    Some(exited) => *exited = true,
                }
            }
            PointKind::BasicBlockEntry => {}
        }

        let seq = trace.samples.len();
        trace.samples.push(TraceSample {
            point: pp,
            nonce,
            thread_id: tid,
            bindings,
            seq,
        });
    }

    Ok(trace)
}

/// Group samples by program point, preserving file order within each group.
pub fn group_samples(t: &TraceFile) -> Vec<(ProgramPoint, Vec<&TraceSample>)> {
    let mut order: Vec<ProgramPoint> = Vec::new();
    let mut groups: HashMap<ProgramPoint, Vec<&TraceSample>> = HashMap::new();
    for s in &t.samples {
        if !groups.contains_key(&s.point) {
            order.push(s.point.clone());
        }
        groups.entry(s.point.clone()).or_default().push(s);
    }
    order
        .into_iter()
        .map(|p| {
            let g = groups.remove(&p).unwrap();
            (p, g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_round_trips() {
        let t = TraceFile::default();
        let text = write_trace(&t);
        assert_eq!(text, "IPATRACE 1\nSAMPLES\n");
        assert_eq!(parse_trace(&text).unwrap(), t);
    }

    #[test]
    fn worked_example_pair_parses() {
        let text = "IPATRACE 1\n\
                    DECL addChunk:::ENTER x:i64\n\
                    DECL addChunk:::EXIT x:i64 return:i64\n\
                    SAMPLES\n\
                    S addChunk:::ENTER nonce=0 tid=0\n\
                    x = 4\n\
                    END\n\
                    S addChunk:::EXIT nonce=0 tid=0\n\
                    x = 4\n\
                    return = 1\n\
                    END\n";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.samples.len(), 2);
        assert_eq!(t.samples[0].value_of("x"), Some(&Value::I64(4)));
        assert_eq!(t.samples[1].value_of("return"), Some(&Value::I64(1)));
        assert_eq!(write_trace(&t), text);
    }

    #[test]
    fn undeclared_point_rejected() {
        let text = "IPATRACE 1\nSAMPLES\nS f:::ENTER nonce=0 tid=0\nEND\n";
        assert!(matches!(
            parse_trace(text),
            Err(TraceError::UndeclaredPoint { .. })
        ));
    }

    #[test]
    fn orphan_exit_rejected_orphan_enter_allowed() {
        let decl = "IPATRACE 1\nDECL f:::ENTER x:i64\nDECL f:::EXIT x:i64\nSAMPLES\n";
        let orphan_enter = format!("{}S f:::ENTER nonce=0 tid=0\nx = 1\nEND\n", decl);
        assert!(parse_trace(&orphan_enter).is_ok());
        let orphan_exit = format!("{}S f:::EXIT nonce=0 tid=0\nx = 1\nEND\n", decl);
        assert!(matches!(
            parse_trace(&orphan_exit),
            Err(TraceError::OrphanExit { .. })
        ));
    }

    #[test]
    fn duplicate_nonce_rejected() {
        let text = "IPATRACE 1\nDECL f:::ENTER x:i64\nSAMPLES\n\
                    S f:::ENTER nonce=0 tid=0\nx = 1\nEND\n\
                    S f:::ENTER nonce=0 tid=0\nx = 2\nEND\n";
        assert!(matches!(
            parse_trace(text),
            Err(TraceError::DuplicateNonce { .. })
        ));
    }

    #[test]
    fn signature_mismatch_reported() {
        let text = "IPATRACE 1\nDECL f:::ENTER x:i64\nSAMPLES\n\
                    S f:::ENTER nonce=0 tid=0\ny = 1\nEND\n";
        assert!(matches!(
            parse_trace(text),
            Err(TraceError::SignatureMismatch { .. })
        ));
    }

    #[test]
    fn grouping_is_stable_and_complete() {
        let text = "IPATRACE 1\nDECL f:::ENTER x:i64\nDECL g:::ENTER x:i64\nSAMPLES\n\
                    S f:::ENTER nonce=0 tid=0\nx = 1\nEND\n\
                    S g:::ENTER nonce=0 tid=1\nx = 2\nEND\n\
                    S f:::ENTER nonce=1 tid=0\nx = 3\nEND\n\
                    S g:::ENTER nonce=1 tid=1\nx = 4\nEND\n";
        let t = parse_trace(text).unwrap();
        let groups = group_samples(&t);
        assert_eq!(groups.len(), 2);
        let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
        assert_eq!(total, t.samples.len());
        // stable order within groups
        let f = &groups[0];
        assert_eq!(f.0, ProgramPoint::entry("f"));
        assert!(f.1[0].seq < f.1[1].seq);
    }
}
