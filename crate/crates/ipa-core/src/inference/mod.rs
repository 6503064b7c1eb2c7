//! Likely-invariant inference over pooled trace samples.
//!
//! Every catalogue candidate is instantiated per program point from the
//! observed data (constants come from the pool, Daikon style), falsified
//! against all samples from all runs, scored, and emitted when its
//! confidence clears the threshold. Inference is a pure function of its
//! inputs and the resulting set is canonically ordered, so set equality is
//! textual equality.
//!
//! Confidence: comparison-shaped candidates score `1 - (1/2)^n`; forms that
//! commit to `k` concrete values (equality to a constant, one-of sets,
//! per-index initialization) score `1 - k·(1/2)^n`, clamped to `[0, 1]`. A
//! falsified candidate always scores 0.

mod predicate;

pub use predicate::{num_cmp, num_eq, parse_predicate, Predicate, Rel};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{Declaration, PointKind, ProgramPoint, TraceFile, TraceSample};
use crate::value::{Value, VarType};
use crate::vm::{Granularity, Program};

/// The eight structural invariant classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InvariantClass {
    /// Array equality: every element equals one constant.
    A,
    /// Elementwise initialization: per-index constants at entry.
    B,
    /// Elementwise: condition between elements of two arrays.
    C,
    /// Initialization: post-condition tied to pre-condition via orig().
    D,
    /// Multi-value: value drawn from a small set.
    E,
    /// Order: array sorted ascending or descending.
    F,
    /// Relational conditions between scalars or against constants.
    G,
    /// Anything involving the return value.
    H,
}

impl InvariantClass {
    pub const ALL: [InvariantClass; 8] = [
        InvariantClass::A,
        InvariantClass::B,
        InvariantClass::C,
        InvariantClass::D,
        InvariantClass::E,
        InvariantClass::F,
        InvariantClass::G,
        InvariantClass::H,
    ];

    pub fn letter(self) -> char {
        match self {
            InvariantClass::A => 'A',
            InvariantClass::B => 'B',
            InvariantClass::C => 'C',
            InvariantClass::D => 'D',
            InvariantClass::E => 'E',
            InvariantClass::F => 'F',
            InvariantClass::G => 'G',
            InvariantClass::H => 'H',
        }
    }

    pub fn from_letter(c: char) -> Option<InvariantClass> {
        Self::ALL.iter().copied().find(|k| k.letter() == c)
    }
}

impl fmt::Display for InvariantClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Exclusive classification. Precedence H > B > A > F > C > D > E > G; the
/// return value claims any form it appears in, the rest are structurally
/// disjoint.
pub fn classify(p: &Predicate) -> InvariantClass {
    if p.mentions_return() {
        return InvariantClass::H;
    }
    match p {
        Predicate::Init { .. } => InvariantClass::B,
        Predicate::AllEq { .. } => InvariantClass::A,
        Predicate::Sorted { .. } => InvariantClass::F,
        Predicate::ElemCmp { .. } => InvariantClass::C,
        Predicate::OrigOffset { .. } => InvariantClass::D,
        Predicate::OneOf { .. } => InvariantClass::E,
        _ => InvariantClass::G,
    }
}

/// Confidence shape of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfShape {
    /// `1 - (1/2)^n`
    Comparison,
    /// `1 - k·(1/2)^n`, clamped to `[0, 1]`
    Equality { k: u64 },
}

pub fn shape_of(p: &Predicate) -> ConfShape {
    match p {
        Predicate::EqConst { .. } | Predicate::AllEq { .. } => ConfShape::Equality { k: 1 },
        Predicate::OneOf { values, .. } => ConfShape::Equality {
            k: values.len() as u64,
        },
        Predicate::Init { values, .. } => {
            let k = match values {
                Value::I64Array(xs) => {
                    let mut d: Vec<i64> = xs.clone();
                    d.sort_unstable();
                    d.dedup();
                    d.len() as u64
                }
                Value::F64Array(xs) => {
                    let mut d: Vec<u64> = xs.iter().map(|x| x.to_bits()).collect();
                    d.sort_unstable();
                    d.dedup();
                    d.len() as u64
                }
                _ => 1,
            };
            ConfShape::Equality { k: k.max(1) }
        }
        _ => ConfShape::Comparison,
    }
}

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("confidence is undefined for zero samples")]
    ZeroSupport,
}

/// Confidence of a candidate with support `n`. Falsified candidates score 0.
pub fn confidence(falsified: bool, shape: ConfShape, n: u64) -> Result<f64, ConfidenceError> {
    if n == 0 {
        return Err(ConfidenceError::ZeroSupport);
    }
    if falsified {
        return Ok(0.0);
    }
    let half_n = 0.5f64.powi(n.min(4096) as i32);
    Ok(match shape {
        ConfShape::Comparison => 1.0 - half_n,
        ConfShape::Equality { k } => (1.0 - k as f64 * half_n).clamp(0.0, 1.0),
    })
}

/// One inferred invariant bound to a program point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub point: ProgramPoint,
    pub class: InvariantClass,
    pub predicate: Predicate,
    pub support: u64,
    pub confidence: f64,
}

impl Invariant {
    /// Stable identifier used in reports: point, class and predicate text.
    pub fn id(&self) -> String {
        format!("{}\t{}\t{}", self.point, self.class, self.predicate)
    }
}

/// A canonically ordered invariant set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSet {
    pub invariants: Vec<Invariant>,
    pub source_run_count: usize,
    pub threshold: f64,
    pub granularity: Granularity,
}

fn kind_rank(k: PointKind) -> u8 {
    match k {
        PointKind::FunctionEntry => 0,
        PointKind::FunctionExit => 1,
        PointKind::BasicBlockEntry => 2,
    }
}

impl InvariantSet {
    fn sort_canonical(&mut self) {
        self.invariants.sort_by_key(|inv| {
            (
                inv.point.function.clone(),
                kind_rank(inv.point.kind),
                inv.point.block.clone().unwrap_or_default(),
                inv.class.letter(),
                inv.predicate.to_string(),
            )
        });
    }

    /// Fingerprint over (point, class, predicate) triples only: supports and
    /// confidences grow with more runs without changing the set identity.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for inv in &self.invariants {
            h.update(inv.id().as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn len(&self) -> usize {
        self.invariants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.invariants.is_empty()
    }

    /// Invariants indexed by program point, preserving canonical order.
    pub fn by_point(&self) -> HashMap<&ProgramPoint, Vec<&Invariant>> {
        let mut map: HashMap<&ProgramPoint, Vec<&Invariant>> = HashMap::new();
        for inv in &self.invariants {
            map.entry(&inv.point).or_default().push(inv);
        }
        map
    }
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("inference needs at least one trace")]
    NoTraces,
    #[error("trace {index} declares different points than the first trace")]
    DeclarationMismatch { index: usize },
}

struct PointPool<'a> {
    decl: &'a Declaration,
    samples: Vec<&'a TraceSample>,
    /// For EXIT samples, the nonce-paired ENTER from the same trace.
    paired: Vec<Option<&'a TraceSample>>,
}

fn pool_points<'a>(traces: &'a [TraceFile]) -> Vec<PointPool<'a>> {
    let decls = &traces[0].declarations;
    let mut pools: Vec<PointPool<'a>> = decls
        .iter()
        .map(|d| PointPool {
            decl: d,
            samples: Vec::new(),
            paired: Vec::new(),
        })
        .collect();
    let index: HashMap<&ProgramPoint, usize> = decls
        .iter()
        .enumerate()
        .map(|(i, d)| (&d.point, i))
        .collect();
    for t in traces {
        let mut enters: HashMap<(&str, u64, u64), &TraceSample> = HashMap::new();
        for s in &t.samples {
            if s.point.kind == PointKind::FunctionEntry {
                enters.insert((s.point.function.as_str(), s.thread_id, s.nonce), s);
            }
        }
        for s in &t.samples {
            let Some(&pi) = index.get(&s.point) else {
                continue;
            };
            let paired = if s.point.kind == PointKind::FunctionExit {
                enters
                    .get(&(s.point.function.as_str(), s.thread_id, s.nonce))
                    .copied()
            } else {
                None
            };
            pools[pi].samples.push(s);
            pools[pi].paired.push(paired);
        }
    }
    pools
}

fn value_at<'a>(s: &'a TraceSample, idx: usize, name: &str) -> &'a Value {
    // bindings follow the declaration; fall back to lookup for safety
    match s.bindings.get(idx) {
        Some((n, v)) if n == name => v,
        _ => s.value_of(name).expect("validated sample binding"),
    }
}

fn sort_values(vals: &mut [Value]) {
    vals.sort_by(|a, b| num_cmp(a, b).unwrap_or(std::cmp::Ordering::Equal));
}

fn arr_elems(v: &Value) -> Option<Vec<Value>> {
    match v {
        Value::I64Array(xs) => Some(xs.iter().map(|x| Value::I64(*x)).collect()),
        Value::F64Array(xs) => Some(xs.iter().map(|x| Value::F64(*x)).collect()),
        _ => None,
    }
}

/// Candidate generation + falsification for one point pool. Constants are
/// data-driven, so only unfalsified candidates materialize.
fn survivors_for_point(pool: &PointPool) -> Vec<(Predicate, ConfShape, u64)> {
    let n = pool.samples.len() as u64;
    if n == 0 {
        return Vec::new();
    }
    let mut out: Vec<(Predicate, ConfShape, u64)> = Vec::new();
    let vars = &pool.decl.vars;
    let is_enter = pool.decl.point.kind == PointKind::FunctionEntry;
    let is_exit = pool.decl.point.kind == PointKind::FunctionExit;

    // per-variable suppression: equality/one-of for scalars, AllEq/Init for arrays
    let mut scalar_pinned = vec![false; vars.len()];
    let mut array_pinned = vec![false; vars.len()];
    let mut array_all_eq = vec![false; vars.len()];

    // unary scalar forms
    for (vi, (name, ty)) in vars.iter().enumerate() {
        if ty.is_array() {
            continue;
        }
        let vals: Vec<&Value> = pool
            .samples
            .iter()
            .map(|s| value_at(s, vi, name))
            .collect();
        let mut distinct: Vec<Value> = Vec::new();
        for v in &vals {
            if !distinct.iter().any(|d| d == *v) {
                distinct.push((*v).clone());
            }
        }
        match ty {
            VarType::Bool => {
                if distinct.len() == 1 {
                    out.push((
                        Predicate::EqConst {
                            var: name.clone(),
                            value: distinct[0].clone(),
                        },
                        ConfShape::Equality { k: 1 },
                        n,
                    ));
                    scalar_pinned[vi] = true;
                }
            }
            VarType::I64 | VarType::F64 => {
                if distinct.len() == 1 {
                    out.push((
                        Predicate::EqConst {
                            var: name.clone(),
                            value: distinct[0].clone(),
                        },
                        ConfShape::Equality { k: 1 },
                        n,
                    ));
                    scalar_pinned[vi] = true;
                } else if distinct.len() <= 3 {
                    sort_values(&mut distinct);
                    let k = distinct.len() as u64;
                    out.push((
                        Predicate::OneOf {
                            var: name.clone(),
                            values: distinct,
                        },
                        ConfShape::Equality { k },
                        n,
                    ));
                    scalar_pinned[vi] = true;
                } else {
                    let mut min = vals[0].clone();
                    let mut max = vals[0].clone();
                    let mut saw_zero = false;
                    let mut comparable = true;
                    for v in &vals {
                        match (num_cmp(v, &min), num_cmp(v, &max)) {
                            (Some(a), Some(b)) => {
                                if a == std::cmp::Ordering::Less {
                                    min = (*v).clone();
                                }
                                if b == std::cmp::Ordering::Greater {
                                    max = (*v).clone();
                                }
                            }
                            _ => comparable = false,
                        }
                        if num_eq(v, &Value::I64(0)) {
                            saw_zero = true;
                        }
                    }
                    if comparable {
                        out.push((
                            Predicate::GeConst {
                                var: name.clone(),
                                value: min.clone(),
                            },
                            ConfShape::Comparison,
                            n,
                        ));
                        out.push((
                            Predicate::LeConst {
                                var: name.clone(),
                                value: max.clone(),
                            },
                            ConfShape::Comparison,
                            n,
                        ));
                        let straddles = num_cmp(&min, &Value::I64(0))
                            == Some(std::cmp::Ordering::Less)
                            && num_cmp(&max, &Value::I64(0)) == Some(std::cmp::Ordering::Greater);
                        if !saw_zero && straddles {
                            out.push((
                                Predicate::NonZero { var: name.clone() },
                                ConfShape::Comparison,
                                n,
                            ));
                        }
                    }
                }
            }
            _ => {}
        }
    }

    // scalar pairs, same numeric type, declaration order
    for i in 0..vars.len() {
        for j in (i + 1)..vars.len() {
            let (ln, lt) = &vars[i];
            let (rn, rt) = &vars[j];
            if lt != rt || lt.is_array() || *lt == VarType::Bool {
                continue;
            }
            let mut all = [true; 5]; // eq, lt, le, gt, ge
            for s in &pool.samples {
                let a = value_at(s, i, ln);
                let b = value_at(s, j, rn);
                match num_cmp(a, b) {
                    Some(ord) => {
                        all[0] &= ord == std::cmp::Ordering::Equal;
                        all[1] &= ord == std::cmp::Ordering::Less;
                        all[2] &= ord != std::cmp::Ordering::Greater;
                        all[3] &= ord == std::cmp::Ordering::Greater;
                        all[4] &= ord != std::cmp::Ordering::Less;
                    }
                    None => {
                        all = [false; 5];
                        break;
                    }
                }
            }
            let rel = if all[0] {
                Some(Rel::Eq)
            } else if all[1] {
                Some(Rel::Lt)
            } else if all[3] {
                Some(Rel::Gt)
            } else if all[2] {
                Some(Rel::Le)
            } else if all[4] {
                Some(Rel::Ge)
            } else {
                None
            };
            if let Some(rel) = rel {
                out.push((
                    Predicate::VarCmp {
                        rel,
                        left: ln.clone(),
                        right: rn.clone(),
                    },
                    ConfShape::Comparison,
                    n,
                ));
            }
        }
    }

    // array forms
    for (vi, (name, ty)) in vars.iter().enumerate() {
        if !ty.is_array() {
            continue;
        }
        let arrays: Vec<Vec<Value>> = pool
            .samples
            .iter()
            .map(|s| arr_elems(value_at(s, vi, name)).unwrap_or_default())
            .collect();
        let any_elem = arrays.iter().any(|a| !a.is_empty());

        // A: one constant across every element of every sample
        if any_elem {
            let first = arrays.iter().flatten().next().unwrap().clone();
            if arrays.iter().flatten().all(|v| num_eq(v, &first)) {
                out.push((
                    Predicate::AllEq {
                        var: name.clone(),
                        value: first,
                    },
                    ConfShape::Equality { k: 1 },
                    n,
                ));
                array_pinned[vi] = true;
                array_all_eq[vi] = true;
            }
        }

        // B: per-index constants at entry
        if is_enter && !array_pinned[vi] && any_elem {
            let len0 = arrays[0].len();
            let consistent = len0 > 0
                && arrays.iter().all(|a| a.len() == len0)
                && (0..len0).all(|c| arrays.iter().all(|a| num_eq(&a[c], &arrays[0][c])));
            if consistent {
                let values = match ty {
                    VarType::I64Array => Value::I64Array(
                        arrays[0]
                            .iter()
                            .map(|v| v.as_i64().unwrap_or_default())
                            .collect(),
                    ),
                    _ => Value::f64_array(
                        arrays[0]
                            .iter()
                            .map(|v| v.as_f64().unwrap_or_default())
                            .collect(),
                    ),
                };
                let shape = shape_of(&Predicate::Init {
                    var: name.clone(),
                    values: values.clone(),
                });
                out.push((
                    Predicate::Init {
                        var: name.clone(),
                        values,
                    },
                    shape,
                    n,
                ));
                array_pinned[vi] = true;
            }
        }

        // F: sorted in one direction across all samples
        if !array_pinned[vi] && arrays.iter().any(|a| a.len() >= 2) {
            let dir_holds = |asc: bool| {
                arrays.iter().all(|a| {
                    a.windows(2).all(|w| match num_cmp(&w[0], &w[1]) {
                        Some(ord) => {
                            if asc {
                                ord != std::cmp::Ordering::Greater
                            } else {
                                ord != std::cmp::Ordering::Less
                            }
                        }
                        None => false,
                    })
                })
            };
            for asc in [true, false] {
                if dir_holds(asc) {
                    out.push((
                        Predicate::Sorted {
                            var: name.clone(),
                            ascending: asc,
                        },
                        ConfShape::Comparison,
                        n,
                    ));
                }
            }
        }
    }

    // C: elementwise relations between same-type array pairs
    for i in 0..vars.len() {
        for j in (i + 1)..vars.len() {
            let (ln, lt) = &vars[i];
            let (rn, rt) = &vars[j];
            if !lt.is_array() || lt != rt {
                continue;
            }
            // two all-constant arrays imply every elementwise relation
            if array_all_eq[i] && array_all_eq[j] {
                continue;
            }
            let mut all = [true; 5];
            let mut compared = 0usize;
            'outer: for s in &pool.samples {
                let a = arr_elems(value_at(s, i, ln)).unwrap_or_default();
                let b = arr_elems(value_at(s, j, rn)).unwrap_or_default();
                if a.len() != b.len() {
                    all = [false; 5];
                    break;
                }
                for (x, y) in a.iter().zip(&b) {
                    compared += 1;
                    match num_cmp(x, y) {
                        Some(ord) => {
                            all[0] &= ord == std::cmp::Ordering::Equal;
                            all[1] &= ord == std::cmp::Ordering::Less;
                            all[2] &= ord != std::cmp::Ordering::Greater;
                            all[3] &= ord == std::cmp::Ordering::Greater;
                            all[4] &= ord != std::cmp::Ordering::Less;
                        }
                        None => {
                            all = [false; 5];
                            break 'outer;
                        }
                    }
                }
            }
            if compared == 0 {
                continue;
            }
            let rel = if all[0] {
                Some(Rel::Eq)
            } else if all[1] {
                Some(Rel::Lt)
            } else if all[3] {
                Some(Rel::Gt)
            } else if all[2] {
                Some(Rel::Le)
            } else if all[4] {
                Some(Rel::Ge)
            } else {
                None
            };
            if let Some(rel) = rel {
                out.push((
                    Predicate::ElemCmp {
                        rel,
                        left: ln.clone(),
                        right: rn.clone(),
                    },
                    ConfShape::Comparison,
                    n,
                ));
            }
        }
    }

    // D: exit value as a fixed offset from the nonce-paired entry value
    if is_exit {
        for (vi, (name, ty)) in vars.iter().enumerate() {
            if name == "return" || ty.is_array() || *ty == VarType::Bool {
                continue;
            }
            let mut offset: Option<Value> = None;
            let mut paired_n = 0u64;
            let mut ok = true;
            for (s, enter) in pool.samples.iter().zip(&pool.paired) {
                let Some(enter) = enter else { continue };
                let Some(before) = enter.value_of(name) else {
                    ok = false;
                    break;
                };
                let after = value_at(s, vi, name);
                let diff = match (after, before) {
                    (Value::I64(a), Value::I64(b)) => Value::I64(a.wrapping_sub(*b)),
                    (Value::F64(a), Value::F64(b)) => Value::F64(a - b),
                    _ => {
                        ok = false;
                        break;
                    }
                };
                paired_n += 1;
                match &offset {
                    None => offset = Some(diff),
                    Some(o) => {
                        if *o != diff {
                            ok = false;
                            break;
                        }
                    }
                }
            }
            if ok && paired_n > 0 {
                out.push((
                    Predicate::OrigOffset {
                        var: name.clone(),
                        offset: offset.unwrap(),
                    },
                    ConfShape::Comparison,
                    paired_n,
                ));
            }
        }
    }

    out
}

/// Infer the invariant set from one or more golden traces. Samples from all
/// traces are pooled before falsification.
pub fn infer(
    traces: &[TraceFile],
    threshold: f64,
    granularity: Granularity,
) -> Result<InvariantSet, InferError> {
    if traces.is_empty() {
        return Err(InferError::NoTraces);
    }
    for (i, t) in traces.iter().enumerate().skip(1) {
        if t.declarations != traces[0].declarations {
            return Err(InferError::DeclarationMismatch { index: i });
        }
    }
    let pools = pool_points(traces);
    let mut set = InvariantSet {
        invariants: Vec::new(),
        source_run_count: traces.len(),
        threshold,
        granularity,
    };
    for pool in &pools {
        for (predicate, shape, support) in survivors_for_point(pool) {
            let conf = confidence(false, shape, support).expect("support > 0");
            if conf >= threshold {
                set.invariants.push(Invariant {
                    point: pool.decl.point.clone(),
                    class: classify(&predicate),
                    predicate,
                    support,
                    confidence: conf,
                });
            }
        }
    }
    set.sort_canonical();
    Ok(set)
}

/// Outcome of checking one invariant against one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome {
    Pass,
    Fail(String),
    /// D-class at an exit without a paired entry sample.
    Skipped,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, CheckOutcome::Pass)
    }
}

fn fail(reason: impl Into<String>) -> CheckOutcome {
    CheckOutcome::Fail(reason.into())
}

/// Evaluate an invariant on a sample. `enter` is the nonce-paired ENTER
/// sample, needed only by D-class predicates.
pub fn check(inv: &Invariant, sample: &TraceSample, enter: Option<&TraceSample>) -> CheckOutcome {
    let get = |name: &str| -> Result<&Value, CheckOutcome> {
        sample
            .value_of(name)
            .ok_or_else(|| fail(format!("missing variable `{}`", name)))
    };
    let rel_check = |rel: Rel, a: &Value, b: &Value| -> CheckOutcome {
        match num_cmp(a, b) {
            Some(ord) if rel.holds(ord) => CheckOutcome::Pass,
            Some(_) => fail(format!("{} {} {} does not hold", a, rel.symbol(), b)),
            None => fail("incomparable values"),
        }
    };
    match &inv.predicate {
        Predicate::EqConst { var, value } => match get(var) {
            Ok(v) => rel_check(Rel::Eq, v, value),
            Err(e) => e,
        },
        Predicate::GeConst { var, value } => match get(var) {
            Ok(v) => rel_check(Rel::Ge, v, value),
            Err(e) => e,
        },
        Predicate::LeConst { var, value } => match get(var) {
            Ok(v) => rel_check(Rel::Le, v, value),
            Err(e) => e,
        },
        Predicate::NonZero { var } => match get(var) {
            Ok(v) => {
                if num_eq(v, &Value::I64(0)) {
                    fail(format!("{} is zero", var))
                } else {
                    CheckOutcome::Pass
                }
            }
            Err(e) => e,
        },
        Predicate::OneOf { var, values } => match get(var) {
            Ok(v) => {
                if values.iter().any(|c| num_eq(v, c)) {
                    CheckOutcome::Pass
                } else {
                    fail(format!("{} = {} not in set", var, v))
                }
            }
            Err(e) => e,
        },
        Predicate::VarCmp { rel, left, right } => match (get(left), get(right)) {
            (Ok(a), Ok(b)) => rel_check(*rel, a, b),
            (Err(e), _) | (_, Err(e)) => e,
        },
        Predicate::AllEq { var, value } => match get(var) {
            Ok(v) => match arr_elems(v) {
                Some(elems) => {
                    if elems.iter().all(|e| num_eq(e, value)) {
                        CheckOutcome::Pass
                    } else {
                        fail(format!("some element of {} differs from {}", var, value))
                    }
                }
                None => fail(format!("{} is not an array", var)),
            },
            Err(e) => e,
        },
        Predicate::Init { var, values } => match get(var) {
            Ok(v) => match (arr_elems(v), arr_elems(values)) {
                (Some(actual), Some(expected)) => {
                    if actual.len() != expected.len() {
                        fail(format!("{} length changed", var))
                    } else if actual.iter().zip(&expected).all(|(a, b)| num_eq(a, b)) {
                        CheckOutcome::Pass
                    } else {
                        fail(format!("{} deviates from initialization", var))
                    }
                }
                _ => fail(format!("{} is not an array", var)),
            },
            Err(e) => e,
        },
        Predicate::ElemCmp { rel, left, right } => match (get(left), get(right)) {
            (Ok(a), Ok(b)) => match (arr_elems(a), arr_elems(b)) {
                (Some(xs), Some(ys)) => {
                    if xs.len() != ys.len() {
                        fail("array lengths differ")
                    } else if xs
                        .iter()
                        .zip(&ys)
                        .all(|(x, y)| matches!(num_cmp(x, y), Some(ord) if rel.holds(ord)))
                    {
                        CheckOutcome::Pass
                    } else {
                        fail(format!("{}[] {} {}[] does not hold", left, rel.symbol(), right))
                    }
                }
                _ => fail("not arrays"),
            },
            (Err(e), _) | (_, Err(e)) => e,
        },
        Predicate::Sorted { var, ascending } => match get(var) {
            Ok(v) => match arr_elems(v) {
                Some(xs) => {
                    let ok = xs.windows(2).all(|w| match num_cmp(&w[0], &w[1]) {
                        Some(ord) => {
                            if *ascending {
                                ord != std::cmp::Ordering::Greater
                            } else {
                                ord != std::cmp::Ordering::Less
                            }
                        }
                        None => false,
                    });
                    if ok {
                        CheckOutcome::Pass
                    } else {
                        fail(format!(
                            "{} is not sorted {}",
                            var,
                            if *ascending { "ascending" } else { "descending" }
                        ))
                    }
                }
                None => fail(format!("{} is not an array", var)),
            },
            Err(e) => e,
        },
        Predicate::OrigOffset { var, offset } => {
            let Some(enter) = enter else {
                return CheckOutcome::Skipped;
            };
            let after = match get(var) {
                Ok(v) => v,
                Err(e) => return e,
            };
            let Some(before) = enter.value_of(var) else {
                return fail(format!("missing variable `{}` at entry", var));
            };
            let diff = match (after, before) {
                (Value::I64(a), Value::I64(b)) => Value::I64(a.wrapping_sub(*b)),
                (Value::F64(a), Value::F64(b)) => Value::F64(a - b),
                _ => return fail("mismatched value kinds"),
            };
            if num_eq(&diff, offset) {
                CheckOutcome::Pass
            } else {
                fail(format!(
                    "{} deviates from orig({}) by {} (expected {})",
                    var, var, diff, offset
                ))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("program has zero lines of code")]
    ZeroLoc,
}

/// Invariants per line of code, in percent.
pub fn density(invariant_count: usize, lines_of_code: usize) -> Result<f64, DensityError> {
    if lines_of_code == 0 {
        return Err(DensityError::ZeroLoc);
    }
    Ok(100.0 * invariant_count as f64 / lines_of_code as f64)
}

pub fn invariant_density(set: &InvariantSet, program: &Program) -> Result<f64, DensityError> {
    density(set.len(), program.metadata.lines_of_code)
}

// ---------------------------------------------------------------------------
// invariant file codec

pub const INVARIANT_HEADER: &str = "IPAINV 1";

#[derive(Debug, Error)]
#[error("line {line}: {msg}")]
pub struct InvariantParseError {
    pub line: usize,
    pub msg: String,
}

/// Serialize an invariant set to its text file form: a header line followed
/// by one `pptname TAB class TAB predicate TAB n=. TAB conf=.` line per
/// invariant.
pub fn write_invariants(set: &InvariantSet) -> String {
    let mut out = format!(
        "{} runs={} threshold={} granularity={}\n",
        INVARIANT_HEADER,
        set.source_run_count,
        set.threshold,
        set.granularity.as_str()
    );
    for inv in &set.invariants {
        out.push_str(&format!(
            "{}\t{}\t{}\tn={}\tconf={}\n",
            inv.point, inv.class, inv.predicate, inv.support, inv.confidence
        ));
    }
    out
}

pub fn parse_invariants(text: &str) -> Result<InvariantSet, InvariantParseError> {
    let perr = |line: usize, msg: &str| InvariantParseError {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let rest = header
        .strip_prefix(INVARIANT_HEADER)
        .ok_or_else(|| perr(1, "bad header"))?;
    let mut runs = 0usize;
    let mut threshold = 0.0f64;
    let mut granularity = Granularity::Function;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("runs=") {
            runs = v.parse().map_err(|_| perr(1, "bad runs"))?;
        } else if let Some(v) = tok.strip_prefix("threshold=") {
            threshold = v.parse().map_err(|_| perr(1, "bad threshold"))?;
        } else if let Some(v) = tok.strip_prefix("granularity=") {
            granularity = Granularity::parse(v).ok_or_else(|| perr(1, "bad granularity"))?;
        }
    }
    let mut set = InvariantSet {
        invariants: Vec::new(),
        source_run_count: runs,
        threshold,
        granularity,
    };
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(perr(lineno, "expected 5 tab-separated columns"));
        }
        let point = ProgramPoint::parse(cols[0])
            .ok_or_else(|| perr(lineno, "bad program point"))?;
        let class = cols[1]
            .chars()
            .next()
            .and_then(InvariantClass::from_letter)
            .ok_or_else(|| perr(lineno, "bad class letter"))?;
        let predicate =
            parse_predicate(cols[2]).ok_or_else(|| perr(lineno, "bad predicate"))?;
        let support = cols[3]
            .strip_prefix("n=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(lineno, "bad support"))?;
        let conf = cols[4]
            .strip_prefix("conf=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(lineno, "bad confidence"))?;
        set.invariants.push(Invariant {
            point,
            class,
            predicate,
            support,
            confidence: conf,
        });
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// stability analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub n: usize,
    pub invariant_count: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    pub rows: Vec<StabilityRow>,
    /// `Some(true)` iff the sets for the last two sampled n values are
    /// identical; `None` with fewer than two n values.
    pub converged: Option<bool>,
}

#[derive(Debug, Error)]
pub enum StabilityError<E: std::error::Error + 'static> {
    #[error("stability needs at least one n value")]
    EmptyNs,
    #[error("trace generator failed: {0}")]
    Generator(#[source] E),
    #[error(transparent)]
    Infer(#[from] InferError),
}

/// Inference over growing prefixes of fresh golden runs. `run_generator(i)`
/// must yield the i-th fresh trace.
pub fn stability_curve<F, E>(
    mut run_generator: F,
    ns: &[usize],
    threshold: f64,
    granularity: Granularity,
) -> Result<StabilityCurve, StabilityError<E>>
where
    F: FnMut(usize) -> Result<TraceFile, E>,
    E: std::error::Error + 'static,
{
    let mut ns: Vec<usize> = ns.iter().copied().filter(|n| *n > 0).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.is_empty() {
        return Err(StabilityError::EmptyNs);
    }
    let max_n = *ns.last().unwrap();
    let mut traces = Vec::with_capacity(max_n);
    for i in 0..max_n {
        traces.push(run_generator(i).map_err(StabilityError::Generator)?);
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in &ns {
        let set = infer(&traces[..n], threshold, granularity)?;
        rows.push(StabilityRow {
            n,
            invariant_count: set.len(),
            fingerprint: set.fingerprint(),
        });
    }
    let converged = if rows.len() >= 2 {
        Some(rows[rows.len() - 1].fingerprint == rows[rows.len() - 2].fingerprint)
    } else {
        None
    };
    Ok(StabilityCurve { rows, converged })
}
