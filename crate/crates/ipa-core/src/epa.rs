//! The two analysis back-ends: classic golden-run trace diffing and
//! invariant-based fault detection.
//!
//! Diffing is strictly positional, which is exactly why it misfires on
//! multithreaded runs: equivalent interleavings shift sample positions.
//! Detection validates each faulty sample against the invariants of its
//! program point and never looks at execution order.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{check, CheckOutcome, InvariantSet};
use crate::trace::{PointKind, TraceFile, TraceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviationKind {
    DataViolation,
    ControlFlowViolation,
}

/// One positional difference between a golden and a faulty trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub kind: DeviationKind,
    pub golden_seq: Option<usize>,
    pub faulty_seq: Option<usize>,
    pub detail: String,
}

/// Line-by-line comparison of two traces from the same program. Samples at
/// the same position with different program points are control-flow
/// violations; same point with different values is a data violation.
/// Thread ids and nonces are scheduling metadata and are not compared.
pub fn diff_traces(golden: &TraceFile, faulty: &TraceFile) -> Vec<Deviation> {
    let mut out = Vec::new();
    let common = golden.samples.len().min(faulty.samples.len());
    for i in 0..common {
        let g = &golden.samples[i];
        let f = &faulty.samples[i];
        if g.point != f.point {
            out.push(Deviation {
                kind: DeviationKind::ControlFlowViolation,
                golden_seq: Some(i),
                faulty_seq: Some(i),
                detail: format!("point {} vs {}", g.point, f.point),
            });
        } else if g.bindings != f.bindings {
            let var = g
                .bindings
                .iter()
                .zip(&f.bindings)
                .find(|(a, b)| a != b)
                .map(|((name, gv), (_, fv))| format!("{}: {} vs {}", name, gv, fv))
                .unwrap_or_else(|| "binding arity differs".to_string());
            out.push(Deviation {
                kind: DeviationKind::DataViolation,
                golden_seq: Some(i),
                faulty_seq: Some(i),
                detail: format!("at {}: {}", g.point, var),
            });
        }
    }
    for i in common..golden.samples.len() {
        out.push(Deviation {
            kind: DeviationKind::ControlFlowViolation,
            golden_seq: Some(i),
            faulty_seq: None,
            detail: format!("missing sample {}", golden.samples[i].point),
        });
    }
    for i in common..faulty.samples.len() {
        out.push(Deviation {
            kind: DeviationKind::ControlFlowViolation,
            golden_seq: None,
            faulty_seq: Some(i),
            detail: format!("surplus sample {}", faulty.samples[i].point),
        });
    }
    out
}

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("variance denominator trace is empty")]
    EmptyReference,
}

/// Proportion of conflicting lines relative to the first trace's length,
/// capped at 1. Length differences count one conflict per surplus line.
pub fn variance(t1: &TraceFile, t2: &TraceFile) -> Result<f64, VarianceError> {
    if t1.samples.is_empty() {
        return Err(VarianceError::EmptyReference);
    }
    let common = t1.samples.len().min(t2.samples.len());
    let mut conflicts = 0usize;
    for i in 0..common {
        let a = &t1.samples[i];
        let b = &t2.samples[i];
        if a.point != b.point || a.bindings != b.bindings {
            conflicts += 1;
        }
    }
    conflicts += t1.samples.len().abs_diff(t2.samples.len());
    Ok((conflicts as f64 / t1.samples.len() as f64).min(1.0))
}

/// Mean pairwise variance over a set of traces, each pair measured against
/// the earlier trace.
pub fn mean_pairwise_variance(traces: &[TraceFile]) -> Result<f64, VarianceError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..traces.len() {
        for j in (i + 1)..traces.len() {
            total += variance(&traces[i], &traces[j])?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        Ok(0.0)
    } else {
        Ok(total / pairs as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Entry,
    Exit,
    Block,
}

impl Boundary {
    fn of(kind: PointKind) -> Boundary {
        match kind {
            PointKind::FunctionEntry => Boundary::Entry,
            PointKind::FunctionExit => Boundary::Exit,
            PointKind::BasicBlockEntry => Boundary::Block,
        }
    }
}

/// One invariant violated by one faulty sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Sample position in the faulty trace.
    pub faulty_seq: usize,
    pub function: String,
    pub boundary: Boundary,
    pub class: char,
    pub predicate: String,
    pub invariant_id: String,
    pub reason: String,
    /// For exit violations with a paired entry: true when that entry sample
    /// violated nothing, placing the propagation window inside the call.
    pub entry_clean: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub violations: Vec<Violation>,
    pub samples_scanned: usize,
    /// Samples whose program point carries no invariant (including points
    /// never seen in training).
    pub samples_without_invariants: usize,
    pub distinct_invariants_violated: usize,
}

/// Validate a faulty trace against an invariant set. Emits one violation per
/// (sample, invariant) failure; D-class invariants are evaluated at exit
/// samples against the nonce-paired entry and skipped for orphans.
pub fn detect(set: &InvariantSet, faulty: &TraceFile) -> DetectReport {
    let by_point = set.by_point();
    let mut enters: HashMap<(String, u64, u64), usize> = HashMap::new();
    let mut violated_enter_seqs: HashSet<usize> = HashSet::new();
    let mut exit_pairs: HashMap<usize, usize> = HashMap::new();
    let mut report = DetectReport {
        samples_scanned: faulty.samples.len(),
        ..Default::default()
    };

    for sample in &faulty.samples {
        if sample.point.kind == PointKind::FunctionEntry {
            enters.insert(
                (sample.point.function.clone(), sample.thread_id, sample.nonce),
                sample.seq,
            );
        }
        let enter: Option<&TraceSample> = if sample.point.kind == PointKind::FunctionExit {
            enters
                .get(&(sample.point.function.clone(), sample.thread_id, sample.nonce))
                .map(|&seq| &faulty.samples[seq])
        } else {
            None
        };
        if let Some(e) = enter {
            exit_pairs.insert(sample.seq, e.seq);
        }
        let Some(invs) = by_point.get(&sample.point) else {
            report.samples_without_invariants += 1;
            continue;
        };
        for inv in invs {
            match check(inv, sample, enter) {
                CheckOutcome::Pass | CheckOutcome::Skipped => {}
                CheckOutcome::Fail(reason) => {
                    if sample.point.kind == PointKind::FunctionEntry {
                        violated_enter_seqs.insert(sample.seq);
                    }
                    report.violations.push(Violation {
                        faulty_seq: sample.seq,
                        function: sample.point.function.clone(),
                        boundary: Boundary::of(sample.point.kind),
                        class: inv.class.letter(),
                        predicate: inv.predicate.to_string(),
                        invariant_id: inv.id(),
                        reason,
                        entry_clean: None,
                    });
                }
            }
        }
    }

    // localization: exit violations whose paired entry violated nothing
    for v in &mut report.violations {
        if v.boundary == Boundary::Exit {
            v.entry_clean = exit_pairs
                .get(&v.faulty_seq)
                .map(|e| !violated_enter_seqs.contains(e));
        }
    }

    let distinct: HashSet<&str> = report
        .violations
        .iter()
        .map(|v| v.invariant_id.as_str())
        .collect();
    report.distinct_invariants_violated = distinct.len();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;

    fn trace(samples: &[(&str, i64)]) -> TraceFile {
        let mut text =
            String::from("IPATRACE 1\nDECL f:::ENTER x:i64\nDECL g:::ENTER x:i64\nSAMPLES\n");
        for (i, (f, x)) in samples.iter().enumerate() {
            text.push_str(&format!("S {}:::ENTER nonce={} tid=0\nx = {}\nEND\n", f, i, x));
        }
        parse_trace(&text).unwrap()
    }

    #[test]
    fn identical_traces_have_no_deviations() {
        let t = trace(&[("f", 1), ("g", 2)]);
        assert!(diff_traces(&t, &t).is_empty());
        assert_eq!(variance(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn value_mismatch_is_data_violation() {
        let a = trace(&[("f", 1), ("g", 2)]);
        let b = trace(&[("f", 1), ("g", 3)]);
        let devs = diff_traces(&a, &b);
        assert_eq!(devs.len(), 1);
        assert_eq!(devs[0].kind, DeviationKind::DataViolation);
    }

    #[test]
    fn point_mismatch_is_control_flow_violation() {
        let a = trace(&[("f", 1), ("g", 2)]);
        let b = trace(&[("g", 2), ("f", 1)]);
        let devs = diff_traces(&a, &b);
        assert_eq!(devs.len(), 2);
        assert!(devs
            .iter()
            .all(|d| d.kind == DeviationKind::ControlFlowViolation));
    }

    #[test]
    fn disjoint_equal_length_traces_have_variance_one() {
        let a = trace(&[("f", 1), ("f", 2)]);
        let b = trace(&[("g", 9), ("g", 8)]);
        assert_eq!(variance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn surplus_lines_count_against_reference() {
        let a = trace(&[("f", 1), ("g", 2)]);
        let b = trace(&[("f", 1), ("g", 2), ("f", 3), ("f", 4)]);
        let v = variance(&a, &b).unwrap();
        assert_eq!(v, 1.0); // 2 surplus over reference length 2, capped
        let devs = diff_traces(&a, &b);
        assert_eq!(devs.len(), 2);
        assert!(variance(&TraceFile::default(), &a).is_err());
    }
}
