//! Fault model: six runtime fault types, site enumeration and plan drawing.
//!
//! A plan perturbs exactly one dynamic point of one run (the run-wide fake
//! mutex being the exception). The interpreter applies the perturbation and
//! reports whether it actually fired, so campaigns can discard non-activated
//! runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::vm::{Insn, Program};

/// The six injected fault classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultType {
    DataCorruption,
    FileIoBufferOverflow,
    BufferOverflowMalloc,
    FunctionCallCorruption,
    InvalidPointer,
    RaceCondition,
}

impl FaultType {
    pub const ALL: [FaultType; 6] = [
        FaultType::DataCorruption,
        FaultType::FileIoBufferOverflow,
        FaultType::BufferOverflowMalloc,
        FaultType::FunctionCallCorruption,
        FaultType::InvalidPointer,
        FaultType::RaceCondition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultType::DataCorruption => "DataCorruption",
            FaultType::FileIoBufferOverflow => "FileIoBufferOverflow",
            FaultType::BufferOverflowMalloc => "BufferOverflowMalloc",
            FaultType::FunctionCallCorruption => "FunctionCallCorruption",
            FaultType::InvalidPointer => "InvalidPointer",
            FaultType::RaceCondition => "RaceCondition",
        }
    }
}

/// A static injection site plus the dynamic occurrence that should fire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub function: String,
    pub block: String,
    pub insn_index: usize,
    /// 1-based k-th dynamic execution of the instruction; 0 while the site
    /// is still static (before plan time).
    pub ordinal: u64,
}

/// One replayable injection: fault type, site, and fault-specific parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub fault_type: FaultType,
    pub site: Site,
    pub rng_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bit_index: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub size_delta: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub arg_index: Option<usize>,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no injectable sites for {0}")]
    NoSites(&'static str),
    #[error("fault plan is missing parameter {0}")]
    MissingParameter(&'static str),
    #[error("fault plan site {0}.{1}[{2}] does not exist or is incompatible")]
    BadSite(String, String, usize),
}

impl FaultPlan {
    /// Validate that parameters required by the fault type are present.
    pub fn validate(&self) -> Result<(), PlanError> {
        use FaultType::*;
        match self.fault_type {
            DataCorruption | InvalidPointer => {
                if self.bit_index.is_none() {
                    return Err(PlanError::MissingParameter("bit_index"));
                }
            }
            FileIoBufferOverflow | BufferOverflowMalloc => {
                if self.size_delta.is_none() {
                    return Err(PlanError::MissingParameter("size_delta"));
                }
            }
            FunctionCallCorruption => {
                if self.bit_index.is_none() {
                    return Err(PlanError::MissingParameter("bit_index"));
                }
                if self.arg_index.is_none() {
                    return Err(PlanError::MissingParameter("arg_index"));
                }
            }
            RaceCondition => {}
        }
        Ok(())
    }
}

fn is_value_producing(insn: &Insn) -> bool {
    matches!(
        insn,
        Insn::Const { .. }
            | Insn::Arith { .. }
            | Insn::Cmp { .. }
            | Insn::Load { .. }
            | Insn::Len { .. }
            | Insn::Call { dst: Some(_), .. }
    )
}

/// Does a `lock` at (block bi, insn ii) guard at least one store?  We use a
/// structural approximation: some `store` appears in the same function.
fn function_has_store(p: &Program, fi: usize) -> bool {
    p.functions[fi]
        .blocks
        .iter()
        .any(|b| b.insns.iter().any(|i| matches!(i, Insn::Store { .. })))
}

/// Is an instruction a legal site for a fault type?
pub fn site_compatible(p: &Program, fi: usize, insn: &Insn, t: FaultType) -> bool {
    match t {
        FaultType::DataCorruption => is_value_producing(insn),
        FaultType::FileIoBufferOverflow => {
            matches!(insn, Insn::IoRead { .. } | Insn::IoWrite { .. })
        }
        FaultType::BufferOverflowMalloc | FaultType::InvalidPointer => {
            matches!(insn, Insn::Alloc { .. })
        }
        FaultType::FunctionCallCorruption => {
            matches!(insn, Insn::Call { args, .. } if !args.is_empty())
        }
        FaultType::RaceCondition => {
            matches!(insn, Insn::Lock { .. }) && function_has_store(p, fi)
        }
    }
}

/// Enumerate the static sites compatible with a fault type. An empty list
/// means the fault type is inapplicable to this program.
pub fn enumerate_sites(p: &Program, t: FaultType) -> Vec<Site> {
    let mut out = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        for b in f.blocks.iter() {
            for (ii, insn) in b.insns.iter().enumerate() {
                if site_compatible(p, fi, insn, t) {
                    out.push(Site {
                        function: f.name.clone(),
                        block: b.label.clone(),
                        insn_index: ii,
                        ordinal: 0,
                    });
                }
            }
        }
    }
    out
}

/// A site annotated with dynamic information from a profiling run.
#[derive(Debug, Clone)]
pub struct ProfiledSite {
    pub site: Site,
    /// Dynamic executions of the instruction in the profiling run.
    pub occurrences: u64,
    /// Argument count for call sites (drives arg_index draws).
    pub arg_count: usize,
}

/// Attach occurrence counts (from a fault-free profiling run) and call arity
/// to a static site list.
pub fn profile_sites(p: &Program, sites: &[Site], counts: &crate::vm::SiteCounts) -> Vec<ProfiledSite> {
    sites
        .iter()
        .map(|s| {
            let occurrences = counts.get(p, &s.function, &s.block, s.insn_index).unwrap_or(0);
            let arg_count = p
                .find_insn(&s.function, &s.block, s.insn_index)
                .map(|i| match i {
                    Insn::Call { args, .. } => args.len(),
                    _ => 0,
                })
                .unwrap_or(0);
            ProfiledSite {
                site: s.clone(),
                occurrences,
                arg_count,
            }
        })
        .collect()
}

/// Draw one plan: uniform site, uniform dynamic occurrence in `1..=K`
/// (K from the profiling run, minimum 1), and uniform fault parameters.
pub fn make_plan(t: FaultType, sites: &[ProfiledSite], rng_seed: u64) -> Result<FaultPlan, PlanError> {
    if sites.is_empty() {
        return Err(PlanError::NoSites(t.name()));
    }
    let mut rng = SplitMix64::new(rng_seed);
    let chosen = &sites[rng.below(sites.len() as u64) as usize];
    let k = chosen.occurrences.max(1);
    let ordinal = 1 + rng.below(k);
    let mut site = chosen.site.clone();
    site.ordinal = ordinal;

    let mut plan = FaultPlan {
        fault_type: t,
        site,
        rng_seed,
        bit_index: None,
        size_delta: None,
        arg_index: None,
    };
    match t {
        FaultType::DataCorruption | FaultType::InvalidPointer => {
            plan.bit_index = Some(rng.below(64) as u8);
        }
        FaultType::FileIoBufferOverflow | FaultType::BufferOverflowMalloc => {
            plan.size_delta = Some(1 + rng.below(8));
        }
        FaultType::FunctionCallCorruption => {
            plan.arg_index = Some(rng.below(chosen.arg_count.max(1) as u64) as usize);
            plan.bit_index = Some(rng.below(64) as u8);
        }
        FaultType::RaceCondition => {}
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::builtin;

    fn pool_of(n: usize) -> Vec<ProfiledSite> {
        (0..n)
            .map(|i| ProfiledSite {
                site: Site {
                    function: format!("f{}", i),
                    block: "entry".to_string(),
                    insn_index: i,
                    ordinal: 0,
                },
                occurrences: 4,
                arg_count: 2,
            })
            .collect()
    }

    #[test]
    fn plan_drawing_is_deterministic() {
        let pool = pool_of(10);
        let a = make_plan(FaultType::DataCorruption, &pool, 77).unwrap();
        let b = make_plan(FaultType::DataCorruption, &pool, 77).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.bit_index.is_some());
        assert!((1..=4).contains(&a.site.ordinal));
    }

    #[test]
    fn single_site_always_chosen() {
        let pool = pool_of(1);
        for seed in 0..50 {
            let p = make_plan(FaultType::InvalidPointer, &pool, seed).unwrap();
            assert_eq!(p.site.function, "f0");
        }
    }

    #[test]
    fn site_choice_is_roughly_uniform() {
        // 1000 seeds over 10 sites: every site lands in [50, 150]
        let pool = pool_of(10);
        let mut counts = [0usize; 10];
        for seed in 0..1000u64 {
            let p = make_plan(FaultType::DataCorruption, &pool, seed).unwrap();
            let idx: usize = p.site.function[1..].parse().unwrap();
            counts[idx] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            assert!((50..=150).contains(c), "site {} chosen {} times", i, c);
        }
    }

    #[test]
    fn parameter_ranges_match_the_fault_model() {
        let pool = pool_of(3);
        for seed in 0..200u64 {
            let p = make_plan(FaultType::BufferOverflowMalloc, &pool, seed).unwrap();
            assert!((1..=8).contains(&p.size_delta.unwrap()));
            let p = make_plan(FaultType::FunctionCallCorruption, &pool, seed).unwrap();
            assert!(p.arg_index.unwrap() < 2);
            assert!(p.bit_index.unwrap() < 64);
        }
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(matches!(
            make_plan(FaultType::RaceCondition, &[], 0),
            Err(PlanError::NoSites(_))
        ));
    }

    #[test]
    fn missing_parameters_fail_validation() {
        let mut p = make_plan(FaultType::DataCorruption, &pool_of(1), 0).unwrap();
        p.bit_index = None;
        assert!(p.validate().is_err());
    }

    #[test]
    fn plans_round_trip_through_json() {
        let p = make_plan(FaultType::FileIoBufferOverflow, &pool_of(2), 9).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: FaultPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn race_sites_require_a_guarded_store() {
        // every racer/workqueue lock guards stores; httpish's iomutex too
        for name in ["workqueue", "racer", "httpish", "numerikernel"] {
            let p = builtin(name).unwrap();
            let sites = enumerate_sites(&p, FaultType::RaceCondition);
            assert!(!sites.is_empty(), "{}", name);
        }
    }
}
