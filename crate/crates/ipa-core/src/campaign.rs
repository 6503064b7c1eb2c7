//! End-to-end injection campaigns: profiling, inference, N activated
//! injections per fault type, outcome classification and the derived
//! statistics.
//!
//! A campaign result is a pure function of its configuration. Runs execute
//! in index order (parallel or not), non-activated injections are discarded
//! and replaced by later seeds, and every aggregate merges in seed order, so
//! `--jobs 1` and `--jobs 8` produce identical results. Wall-clock timings
//! are reported separately and never enter the serialized result.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch;
use crate::epa::{detect, diff_traces};
use crate::inference::{
    infer, invariant_density, InferError, InvariantClass, InvariantSet,
};
use crate::injector::{enumerate_sites, make_plan, profile_sites, FaultPlan, FaultType};
use crate::rng::derive_seed;
use crate::stats::{wilson_interval, StatsError};
use crate::value::Value;
use crate::vm::{
    builtin, builtin_default_input, execute, execute_profiled, load_program, Granularity, Outcome,
    OutputPolicy, Program, RunResult, ScheduleSeed,
};

pub use crate::stats::{spearman, Spearman};

/// Where the campaign program comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramSource {
    Builtin(String),
    Source { name: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub program: ProgramSource,
    /// Program input, without the leading thread-count value.
    #[serde(default)]
    pub input: Option<Vec<Value>>,
    #[serde(default = "default_threads")]
    pub threads: i64,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_profiling_runs")]
    pub profiling_runs: usize,
    #[serde(default = "default_injections")]
    pub injections_per_type: usize,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget_multiplier")]
    pub step_budget_multiplier: u64,
    /// Fault types to inject; defaults to all six.
    #[serde(default)]
    pub fault_types: Option<Vec<FaultType>>,
}

fn default_threads() -> i64 {
    4
}
fn default_granularity() -> Granularity {
    Granularity::Function
}
fn default_profiling_runs() -> usize {
    5
}
fn default_injections() -> usize {
    200
}
fn default_threshold() -> f64 {
    0.99
}
fn default_budget_multiplier() -> u64 {
    10
}

impl CampaignConfig {
    pub fn for_builtin(name: &str) -> CampaignConfig {
        CampaignConfig {
            program: ProgramSource::Builtin(name.to_string()),
            input: None,
            threads: default_threads(),
            granularity: default_granularity(),
            profiling_runs: default_profiling_runs(),
            injections_per_type: default_injections(),
            confidence_threshold: default_threshold(),
            seed: 0,
            step_budget_multiplier: default_budget_multiplier(),
            fault_types: None,
        }
    }

    pub fn fault_types(&self) -> Vec<FaultType> {
        self.fault_types
            .clone()
            .unwrap_or_else(|| FaultType::ALL.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome3 {
    Benign,
    CrashHang,
    Sdc,
}

/// One activated injection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan: FaultPlan,
    pub schedule_seed: u64,
    pub activated: bool,
    pub outcome3: Outcome3,
    /// Ids of the invariants this run violated.
    pub violated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultTypeResult {
    pub fault_type: FaultType,
    pub attempts: usize,
    pub activated: usize,
    pub benign: usize,
    pub crash_hang: usize,
    pub sdc: usize,
    pub coverage: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Per-class coverage; `None` where the set has no invariant of the class.
    pub class_coverage: BTreeMap<char, Option<f64>>,
    /// Per (failure mode, class) coverage cells, denominated by the
    /// activated count, so the three rows sum to the per-class coverage.
    pub class_coverage_by_outcome: Vec<(Outcome3, BTreeMap<char, Option<f64>>)>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub program: String,
    pub config: CampaignConfig,
    pub invariant_count: usize,
    pub invariant_fingerprint: String,
    pub invariant_density: f64,
    pub golden_output: Vec<Value>,
    pub rows: Vec<FaultTypeResult>,
    pub skipped: Vec<(FaultType, String)>,
}

/// Wall-clock ledger in seconds. I1 profiling (all runs), I2 inference, I3
/// one detection, E1 one profiling run, E3 one trace diff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CampaignTimings {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub e1: f64,
    pub e3: f64,
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Builtin(#[from] crate::vm::BuiltinError),
    #[error("program load failed: {0}")]
    Load(#[from] crate::vm::AsmError),
    #[error(transparent)]
    Exec(#[from] crate::vm::ExecError),
    #[error(transparent)]
    Golden(#[from] crate::vm::GoldenError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("invariant set is not stable at {granularity} granularity: n={n1} and n={n2} sets differ")]
    Unstable {
        granularity: &'static str,
        n1: usize,
        n2: usize,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub fn resolve_program(source: &ProgramSource) -> Result<Program, CampaignError> {
    match source {
        ProgramSource::Builtin(name) => Ok(builtin(name)?),
        ProgramSource::Source { name, text } => Ok(load_program(name, text)?),
    }
}

pub fn resolve_input(cfg: &CampaignConfig) -> Result<Vec<Value>, CampaignError> {
    let base = match (&cfg.input, &cfg.program) {
        (Some(input), _) => input.clone(),
        (None, ProgramSource::Builtin(name)) => builtin_default_input(name)?,
        (None, ProgramSource::Source { .. }) => {
            return Err(CampaignError::BadConfig(
                "explicit input required for source programs".to_string(),
            ))
        }
    };
    let mut full = vec![Value::I64(cfg.threads)];
    full.extend(base);
    Ok(full)
}

/// Compare outputs under a program's functional specification.
pub fn outputs_equal(policy: OutputPolicy, a: &[Value], b: &[Value]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    match policy {
        OutputPolicy::Sequence => a == b,
        OutputPolicy::Multiset => a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Value::I64Array(xs), Value::I64Array(ys)) => {
                let mut xs = xs.clone();
                let mut ys = ys.clone();
                xs.sort_unstable();
                ys.sort_unstable();
                xs == ys
            }
            (Value::F64Array(xs), Value::F64Array(ys)) => {
                let mut xs: Vec<u64> = xs.iter().map(|v| v.to_bits()).collect();
                let mut ys: Vec<u64> = ys.iter().map(|v| v.to_bits()).collect();
                xs.sort_unstable();
                ys.sort_unstable();
                xs == ys
            }
            _ => x == y,
        }),
    }
}

/// Three-way outcome of an activated run against the golden output.
pub fn classify_outcome(
    result: &RunResult,
    golden_output: &[Value],
    policy: OutputPolicy,
) -> Outcome3 {
    match result.outcome {
        Outcome::Trap(_) | Outcome::Timeout => Outcome3::CrashHang,
        Outcome::Normal => {
            if outputs_equal(policy, &result.output, golden_output) {
                Outcome3::Benign
            } else {
                Outcome3::Sdc
            }
        }
    }
}

/// Fault coverage with its Wilson 95% interval: the share of activated runs
/// that violated at least one invariant.
pub fn fault_coverage(records: &[RunRecord]) -> Result<(f64, f64, f64), StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let hits = records.iter().filter(|r| !r.violated.is_empty()).count() as u64;
    wilson_interval(hits, records.len() as u64)
}

/// Share of runs violating at least one invariant of the class; `None` when
/// the class has no invariants in the set.
pub fn class_coverage(
    records: &[RunRecord],
    class_invariant_ids: &[String],
) -> Option<f64> {
    if class_invariant_ids.is_empty() || records.is_empty() {
        return None;
    }
    let hits = records
        .iter()
        .filter(|r| r.violated.iter().any(|v| class_invariant_ids.contains(v)))
        .count();
    Some(hits as f64 / records.len() as f64)
}

#[derive(Debug, Error)]
pub enum OverheadError {
    #[error("overhead timings must be positive")]
    NonPositive,
}

/// Setup and detection overhead ratios:
/// `S = E1 / (I1 + I2)` and `D = (E1 + E3) / (I1/5 + I3)`.
pub fn overhead_ratios(
    i1: f64,
    i2: f64,
    i3: f64,
    e1: f64,
    e3: f64,
) -> Result<(f64, f64), OverheadError> {
    if i1 <= 0.0 || i2 < 0.0 || i3 <= 0.0 || e1 <= 0.0 || e3 <= 0.0 {
        return Err(OverheadError::NonPositive);
    }
    let s = e1 / (i1 + i2);
    let d = (e1 + e3) / (i1 / 5.0 + i3);
    Ok((s, d))
}

/// Cap on replacement draws per fault type, as a multiple of N.
const ATTEMPT_CAP_FACTOR: usize = 20;

/// Run a full campaign. `jobs` controls run parallelism (0 = default pool,
/// 1 = sequential); it never changes the result.
pub fn run_campaign(
    cfg: &CampaignConfig,
    jobs: usize,
) -> Result<(CampaignResult, CampaignTimings), CampaignError> {
    if cfg.injections_per_type == 0 {
        return Err(CampaignError::BadConfig(
            "injections_per_type must be >= 1".to_string(),
        ));
    }
    if cfg.profiling_runs == 0 {
        return Err(CampaignError::BadConfig(
            "profiling_runs must be >= 1".to_string(),
        ));
    }
    let program = resolve_program(&cfg.program)?;
    let input = resolve_input(cfg)?;

    // seed-0 probe: step budget, golden output, dynamic site occurrences
    let (probe, site_counts) = execute_profiled(
        &program,
        &input,
        ScheduleSeed(derive_seed(cfg.seed, "golden", 0)),
        cfg.granularity,
        crate::vm::FALLBACK_STEP_BUDGET,
    )?;
    if probe.outcome != Outcome::Normal {
        return Err(CampaignError::Golden(crate::vm::GoldenError::NotNormal {
            seed: derive_seed(cfg.seed, "golden", 0),
            outcome: probe.outcome,
        }));
    }
    let budget = probe.steps.saturating_mul(cfg.step_budget_multiplier).max(1);
    let golden_output = probe.output.clone();

    // profiling runs plus two stability probes
    let p = cfg.profiling_runs;
    let golden_seeds: Vec<u64> = (0..p + 2)
        .map(|i| derive_seed(cfg.seed, "golden", i as u64))
        .collect();
    let t_profile = Instant::now();
    let one = Instant::now();
    let _ = execute(
        &program,
        &input,
        ScheduleSeed(golden_seeds[0]),
        cfg.granularity,
        None,
        budget,
    )?;
    let e1 = one.elapsed().as_secs_f64().max(1e-9);
    let traces = crate::vm::golden_runs(&program, &input, &golden_seeds, cfg.granularity, budget)?;
    let i1 = t_profile.elapsed().as_secs_f64().max(1e-9);

    let t_infer = Instant::now();
    let set = infer(&traces[..p], cfg.confidence_threshold, cfg.granularity)?;
    let i2 = t_infer.elapsed().as_secs_f64().max(1e-9);
    let probe_set = infer(&traces, cfg.confidence_threshold, cfg.granularity)?;
    if set.fingerprint() != probe_set.fingerprint() {
        return Err(CampaignError::Unstable {
            granularity: match cfg.granularity {
                Granularity::Function => "function",
                Granularity::BasicBlock => "basic-block",
            },
            n1: p,
            n2: p + 2,
        });
    }
    let rho = invariant_density(&set, &program).unwrap_or(0.0);

    // invariant ids per class, for class coverage
    let ids_by_class: BTreeMap<char, Vec<String>> = {
        let mut m: BTreeMap<char, Vec<String>> = BTreeMap::new();
        for c in InvariantClass::ALL {
            m.insert(c.letter(), Vec::new());
        }
        for inv in &set.invariants {
            m.get_mut(&inv.class.letter()).unwrap().push(inv.id());
        }
        m
    };

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut i3 = 0.0f64;
    let mut e3 = 0.0f64;

    for (ft_idx, ft) in cfg.fault_types().into_iter().enumerate() {
        let static_sites = enumerate_sites(&program, ft);
        if static_sites.is_empty() {
            skipped.push((ft, "no compatible instructions".to_string()));
            continue;
        }
        let pool: Vec<_> = profile_sites(&program, &static_sites, &site_counts)
            .into_iter()
            .filter(|s| s.occurrences > 0)
            .collect();
        if pool.is_empty() {
            skipped.push((ft, "no site reached by the profiling run".to_string()));
            continue;
        }

        let n = cfg.injections_per_type;
        let cap = n * ATTEMPT_CAP_FACTOR;
        let mut records: Vec<RunRecord> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while records.len() < n && attempts < cap {
            let wave = (n - records.len()).min(cap - attempts);
            let base = attempts;
            let wave_results = batch::map_indexed_jobs(wave, jobs, |k| {
                let a = (base + k) as u64;
                let label = format!("plan:{}", ft.name());
                let plan_seed = derive_seed(cfg.seed ^ (ft_idx as u64) << 32, &label, a);
                let plan = make_plan(ft, &pool, plan_seed).expect("non-empty pool");
                let sched = derive_seed(cfg.seed ^ (ft_idx as u64) << 32, "sched", a);
                let result = execute(
                    &program,
                    &input,
                    ScheduleSeed(sched),
                    cfg.granularity,
                    Some(&plan),
                    budget,
                )
                .expect("plan from enumerate_sites is valid");
                (plan, sched, result)
            });
            attempts += wave;
            for (plan, sched, result) in wave_results {
                if records.len() >= n {
                    break;
                }
                if !result.activated {
                    continue;
                }
                if i3 == 0.0 {
                    let t = Instant::now();
                    let _ = detect(&set, &result.trace);
                    i3 = t.elapsed().as_secs_f64().max(1e-9);
                    let t = Instant::now();
                    let _ = diff_traces(&traces[0], &result.trace);
                    e3 = t.elapsed().as_secs_f64().max(1e-9);
                }
                let report = detect(&set, &result.trace);
                let mut violated: Vec<String> = report
                    .violations
                    .iter()
                    .map(|v| v.invariant_id.clone())
                    .collect();
                violated.sort();
                violated.dedup();
                records.push(RunRecord {
                    plan,
                    schedule_seed: sched,
                    activated: true,
                    outcome3: classify_outcome(&result, &golden_output, program.output_policy),
                    violated,
                });
            }
        }

        if records.is_empty() {
            skipped.push((ft, "no activated run within the attempt budget".to_string()));
            continue;
        }
        let (coverage, ci_low, ci_high) = fault_coverage(&records)?;
        let class_cov: BTreeMap<char, Option<f64>> = ids_by_class
            .iter()
            .map(|(c, ids)| (*c, class_coverage(&records, ids)))
            .collect();
        let n_act = records.len() as f64;
        let class_by_outcome: Vec<(Outcome3, BTreeMap<char, Option<f64>>)> =
            [Outcome3::Benign, Outcome3::CrashHang, Outcome3::Sdc]
                .into_iter()
                .map(|oc| {
                    let cells: BTreeMap<char, Option<f64>> = ids_by_class
                        .iter()
                        .map(|(c, ids)| {
                            if ids.is_empty() {
                                return (*c, None);
                            }
                            let hits = records
                                .iter()
                                .filter(|r| r.outcome3 == oc)
                                .filter(|r| r.violated.iter().any(|v| ids.contains(v)))
                                .count();
                            (*c, Some(hits as f64 / n_act))
                        })
                        .collect();
                    (oc, cells)
                })
                .collect();
        let benign = records.iter().filter(|r| r.outcome3 == Outcome3::Benign).count();
        let crash_hang = records
            .iter()
            .filter(|r| r.outcome3 == Outcome3::CrashHang)
            .count();
        let sdc = records.iter().filter(|r| r.outcome3 == Outcome3::Sdc).count();
        rows.push(FaultTypeResult {
            fault_type: ft,
            attempts,
            activated: records.len(),
            benign,
            crash_hang,
            sdc,
            coverage,
            ci_low,
            ci_high,
            class_coverage: class_cov,
            class_coverage_by_outcome: class_by_outcome,
            records,
        });
    }

    let result = CampaignResult {
        program: program.name.clone(),
        config: cfg.clone(),
        invariant_count: set.len(),
        invariant_fingerprint: set.fingerprint(),
        invariant_density: rho,
        golden_output,
        rows,
        skipped,
    };
    let timings = CampaignTimings {
        i1,
        i2,
        i3: i3.max(1e-9),
        e1,
        e3: e3.max(1e-9),
    };
    Ok((result, timings))
}

/// The trained invariant set for a campaign configuration, with the same
/// stability gate `run_campaign` applies.
pub fn train_invariants(cfg: &CampaignConfig) -> Result<InvariantSet, CampaignError> {
    let program = resolve_program(&cfg.program)?;
    let input = resolve_input(cfg)?;
    let budget = crate::vm::default_step_budget(
        &program,
        &input,
        cfg.granularity,
        cfg.step_budget_multiplier,
    )?;
    let seeds: Vec<u64> = (0..cfg.profiling_runs)
        .map(|i| derive_seed(cfg.seed, "golden", i as u64))
        .collect();
    let traces = crate::vm::golden_runs(&program, &input, &seeds, cfg.granularity, budget)?;
    Ok(infer(&traces, cfg.confidence_threshold, cfg.granularity)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overhead_ratios_spec_identity() {
        // identical EPA and IPA profiling with no inference cost: S = 1
        let (s, _) = overhead_ratios(5.0, 1e-9, 1.0, 5.0, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(overhead_ratios(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn outputs_compare_per_policy() {
        let a = vec![Value::I64Array(vec![0, 1, 2, 3])];
        let b = vec![Value::I64Array(vec![3, 2, 1, 0])];
        assert!(outputs_equal(OutputPolicy::Multiset, &a, &b));
        assert!(!outputs_equal(OutputPolicy::Sequence, &a, &b));
        let c = vec![Value::I64Array(vec![0, 1, 2, 2])];
        assert!(!outputs_equal(OutputPolicy::Multiset, &a, &c));
    }

    #[test]
    fn class_coverage_union_arithmetic() {
        let rec = |violated: Vec<&str>| RunRecord {
            plan: FaultPlan {
                fault_type: FaultType::DataCorruption,
                site: crate::injector::Site {
                    function: "f".into(),
                    block: "b".into(),
                    insn_index: 0,
                    ordinal: 1,
                },
                rng_seed: 0,
                bit_index: Some(0),
                size_delta: None,
                arg_index: None,
            },
            schedule_seed: 0,
            activated: true,
            outcome3: Outcome3::Benign,
            violated: violated.into_iter().map(String::from).collect(),
        };
        // S1 = {r1, r2}, S2 = {r2, r3}, N = 4 -> 3/4
        let records = vec![
            rec(vec!["i1"]),
            rec(vec!["i1", "i2"]),
            rec(vec!["i2"]),
            rec(vec![]),
        ];
        let ids = vec!["i1".to_string(), "i2".to_string()];
        assert_eq!(class_coverage(&records, &ids), Some(0.75));
        assert_eq!(class_coverage(&records, &[]), None);
        // class coverage can never exceed overall coverage
        let (cov, lo, hi) = fault_coverage(&records).unwrap();
        assert_eq!(cov, 0.75);
        assert!(lo <= cov && cov <= hi);
    }
}
