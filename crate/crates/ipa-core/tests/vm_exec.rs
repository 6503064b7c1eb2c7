//! Execution semantics of the mini VM and its builtins.

use ipa_core::injector::{enumerate_sites, FaultPlan, FaultType, Site};
use ipa_core::trace::write_trace;
use ipa_core::value::Value;
use ipa_core::vm::{
    builtin, builtin_default_input, builtin_names, default_step_budget, execute, load_program,
    Granularity, Outcome, ScheduleSeed, FALLBACK_STEP_BUDGET,
};

fn with_threads(threads: i64, rest: &[Value]) -> Vec<Value> {
    let mut input = vec![Value::I64(threads)];
    input.extend(rest.iter().cloned());
    input
}

fn run_builtin(name: &str, threads: i64, seed: u64) -> ipa_core::vm::RunResult {
    let p = builtin(name).unwrap();
    let input = with_threads(threads, &builtin_default_input(name).unwrap());
    execute(
        &p,
        &input,
        ScheduleSeed(seed),
        Granularity::Function,
        None,
        FALLBACK_STEP_BUDGET,
    )
    .unwrap()
}

#[test]
fn workqueue_single_thread_is_in_order() {
    for seed in [0, 7, 42] {
        let r = run_builtin("workqueue", 1, seed);
        assert_eq!(r.outcome, Outcome::Normal);
        assert_eq!(r.output, vec![Value::I64Array(vec![0, 1, 2, 3])]);
    }
}

#[test]
fn workqueue_single_thread_trace_identical_across_seeds() {
    let a = run_builtin("workqueue", 1, 0);
    let b = run_builtin("workqueue", 1, 999);
    assert_eq!(write_trace(&a.trace), write_trace(&b.trace));
}

#[test]
fn workqueue_multithreaded_output_is_permutation_and_reversal_exists() {
    let mut reversed_seed = None;
    for seed in 0..1000u64 {
        let r = run_builtin("workqueue", 4, seed);
        assert_eq!(r.outcome, Outcome::Normal, "seed {}", seed);
        let Value::I64Array(out) = &r.output[0] else {
            panic!("expected array output")
        };
        let mut sorted = out.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3], "multiset preserved, seed {}", seed);
        if *out == vec![3, 2, 1, 0] {
            reversed_seed = Some(seed);
            break;
        }
    }
    assert!(
        reversed_seed.is_some(),
        "no seed in 0..1000 produced the reversed interleaving"
    );
}

#[test]
fn execute_is_deterministic() {
    for name in builtin_names() {
        let a = run_builtin(name, 4, 1234);
        let b = run_builtin(name, 4, 1234);
        assert_eq!(write_trace(&a.trace), write_trace(&b.trace), "{}", name);
        assert_eq!(a.output, b.output);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.outcome, b.outcome);
    }
}

#[test]
fn qsortmt_sorts_for_every_seed() {
    let p = builtin("qsortmt").unwrap();
    let input = with_threads(4, &[Value::I64Array(vec![3, 1, 2])]);
    for seed in 0..100u64 {
        let r = execute(
            &p,
            &input,
            ScheduleSeed(seed),
            Granularity::Function,
            None,
            FALLBACK_STEP_BUDGET,
        )
        .unwrap();
        assert_eq!(r.outcome, Outcome::Normal, "seed {}", seed);
        assert_eq!(r.output, vec![Value::I64Array(vec![1, 2, 3])], "seed {}", seed);
    }
}

#[test]
fn builtins_fault_free_never_trap_or_time_out() {
    for name in builtin_names() {
        let p = builtin(name).unwrap();
        let input = with_threads(4, &builtin_default_input(name).unwrap());
        let budget = default_step_budget(&p, &input, Granularity::Function, 10).unwrap();
        for seed in 0..20u64 {
            let r = execute(
                &p,
                &input,
                ScheduleSeed(seed),
                Granularity::Function,
                None,
                budget,
            )
            .unwrap();
            assert_eq!(r.outcome, Outcome::Normal, "{} seed {}", name, seed);
            assert!(!r.activated);
        }
    }
}

#[test]
fn racer_counts_all_increments_with_real_lock() {
    for seed in 0..200u64 {
        let r = run_builtin("racer", 4, seed);
        assert_eq!(r.output, vec![Value::I64(8)], "seed {}", seed);
    }
}

#[test]
fn racer_fake_mutex_loses_updates_for_some_seed() {
    let p = builtin("racer").unwrap();
    let sites = enumerate_sites(&p, FaultType::RaceCondition);
    assert_eq!(sites.len(), 1, "racer has exactly one lock");
    let plan = FaultPlan {
        fault_type: FaultType::RaceCondition,
        site: Site {
            ordinal: 1,
            ..sites[0].clone()
        },
        rng_seed: 0,
        bit_index: None,
        size_delta: None,
        arg_index: None,
    };
    let input = with_threads(4, &[]);
    let mut lost = 0;
    for seed in 0..200u64 {
        let r = execute(
            &p,
            &input,
            ScheduleSeed(seed),
            Granularity::Function,
            Some(&plan),
            FALLBACK_STEP_BUDGET,
        )
        .unwrap();
        assert!(r.activated, "seed {}", seed);
        let Value::I64(total) = r.output[0] else {
            panic!()
        };
        assert!(total <= 8);
        if total < 8 {
            lost += 1;
        }
    }
    assert!(lost > 0, "no lost update observed in seeds 0..200");
}

#[test]
fn normalization_preserves_semantics() {
    // same computation written with two rets and with an explicit single exit
    let two_rets = "func f(x: i64) -> i64 {\n\
                    entry:\n  cmp_lt c, x, 0\n  br_cond c, a, b\n\
                    a:\n  sub y, 0, x\n  ret y\n\
                    b:\n  mul y, x, 3\n  ret y\n}\n\
                    func main(t: i64, x: i64) {\n\
                    entry:\n  call r, f, x\n  output r\n  ret\n}\n";
    let single_exit = "func f(x: i64) -> i64 {\n\
                       entry:\n  cmp_lt c, x, 0\n  br_cond c, a, b\n\
                       a:\n  sub y, 0, x\n  br fin\n\
                       b:\n  mul y, x, 3\n  br fin\n\
                       fin:\n  ret y\n}\n\
                       func main(t: i64, x: i64) {\n\
                       entry:\n  call r, f, x\n  output r\n  ret\n}\n";
    let p1 = load_program("two", two_rets).unwrap();
    let p2 = load_program("one", single_exit).unwrap();
    for x in [-7, -1, 0, 1, 5, 100] {
        let input = vec![Value::I64(1), Value::I64(x)];
        let r1 = execute(&p1, &input, ScheduleSeed(0), Granularity::Function, None, 10_000).unwrap();
        let r2 = execute(&p2, &input, ScheduleSeed(0), Granularity::Function, None, 10_000).unwrap();
        assert_eq!(r1.output, r2.output, "x={}", x);
        assert_eq!(r1.outcome, Outcome::Normal);
        assert_eq!(r2.outcome, Outcome::Normal);
    }
}

#[test]
fn deadlock_is_trapped() {
    let src = "func main(t: i64) {\nentry:\n  sem_wait never\n  ret\n}\n";
    let p = load_program("d", src).unwrap();
    let r = execute(
        &p,
        &[Value::I64(1)],
        ScheduleSeed(0),
        Granularity::Function,
        None,
        10_000,
    )
    .unwrap();
    assert_eq!(
        r.outcome,
        Outcome::Trap(ipa_core::vm::TrapReason::Deadlock)
    );
}

#[test]
fn timeout_hits_exactly_at_budget() {
    let src = "func main(t: i64) {\nentry:\n  cmp_lt c, t, 0\n  br_cond c, fin, entry\nfin:\n  ret\n}\n";
    let p = load_program("spin", src).unwrap();
    let r = execute(
        &p,
        &[Value::I64(1)],
        ScheduleSeed(0),
        Granularity::Function,
        None,
        100,
    )
    .unwrap();
    assert_eq!(r.outcome, Outcome::Timeout);
    assert_eq!(r.steps, 100);
}

#[test]
fn out_of_bounds_and_invalid_address_trap() {
    let oob = "func main(t: i64) {\nentry:\n  alloc a, 2\n  store a, 5, 1\n  ret\n}\n";
    let p = load_program("oob", oob).unwrap();
    let r = execute(&p, &[Value::I64(1)], ScheduleSeed(0), Granularity::Function, None, 1000).unwrap();
    assert_eq!(r.outcome, Outcome::Trap(ipa_core::vm::TrapReason::OutOfBounds));

    let bad = "func main(t: i64) {\nentry:\n  alloc a, 2\n  load v, t, 0\n  ret\n}\n";
    let p = load_program("bad", bad).unwrap();
    let r = execute(&p, &[Value::I64(1)], ScheduleSeed(0), Granularity::Function, None, 1000).unwrap();
    assert_eq!(r.outcome, Outcome::Trap(ipa_core::vm::TrapReason::TypeError));
}

#[test]
fn basic_block_granularity_emits_block_samples() {
    let r = {
        let p = builtin("numerikernel").unwrap();
        let input = with_threads(4, &builtin_default_input("numerikernel").unwrap());
        execute(
            &p,
            &input,
            ScheduleSeed(3),
            Granularity::BasicBlock,
            None,
            FALLBACK_STEP_BUDGET,
        )
        .unwrap()
    };
    assert_eq!(r.outcome, Outcome::Normal);
    use ipa_core::trace::PointKind;
    let blocks = r
        .trace
        .samples
        .iter()
        .filter(|s| s.point.kind == PointKind::BasicBlockEntry)
        .count();
    assert!(blocks > 0);
    // the negative-branch block of cndf sees only negative inputs
    let neg_samples: Vec<f64> = r
        .trace
        .samples
        .iter()
        .filter(|s| {
            s.point.kind == PointKind::BasicBlockEntry
                && s.point.function == "cndf"
                && s.point.block.as_deref() == Some("b2")
        })
        .map(|s| s.value_of("x").unwrap().as_f64().unwrap())
        .collect();
    assert!(!neg_samples.is_empty());
    assert!(neg_samples.iter().all(|x| *x < 0.0));
}

#[test]
fn activation_monotonicity_unreached_plan_changes_nothing() {
    let p = builtin("workqueue").unwrap();
    let input = with_threads(4, &builtin_default_input("workqueue").unwrap());
    let sites = enumerate_sites(&p, FaultType::DataCorruption);
    // ordinal far beyond any dynamic occurrence: the hook never fires
    let plan = FaultPlan {
        fault_type: FaultType::DataCorruption,
        site: Site {
            ordinal: 1_000_000,
            ..sites[0].clone()
        },
        rng_seed: 0,
        bit_index: Some(3),
        size_delta: None,
        arg_index: None,
    };
    for seed in [0u64, 5, 77] {
        let clean = execute(&p, &input, ScheduleSeed(seed), Granularity::Function, None, FALLBACK_STEP_BUDGET).unwrap();
        let planned = execute(&p, &input, ScheduleSeed(seed), Granularity::Function, Some(&plan), FALLBACK_STEP_BUDGET).unwrap();
        assert!(!planned.activated);
        assert_eq!(write_trace(&clean.trace), write_trace(&planned.trace));
        assert_eq!(clean.output, planned.output);
        assert_eq!(clean.outcome, planned.outcome);
    }
}

#[test]
fn data_corruption_flips_the_planned_value() {
    // corrupt the guard comparison in addChunk (bit 0): the chunk gets negated
    let p = builtin("workqueue").unwrap();
    let sites = enumerate_sites(&p, FaultType::DataCorruption);
    let cmp_site = sites
        .iter()
        .find(|s| s.function == "addChunk" && s.block == "entry")
        .unwrap();
    let plan = FaultPlan {
        fault_type: FaultType::DataCorruption,
        site: Site {
            ordinal: 2,
            ..cmp_site.clone()
        },
        rng_seed: 0,
        bit_index: Some(0),
        size_delta: None,
        arg_index: None,
    };
    let input = with_threads(1, &builtin_default_input("workqueue").unwrap());
    let r = execute(&p, &input, ScheduleSeed(0), Granularity::Function, Some(&plan), FALLBACK_STEP_BUDGET).unwrap();
    assert!(r.activated);
    assert_eq!(r.outcome, Outcome::Normal);
    // chunk value 1 (second call) was negated
    assert_eq!(r.output, vec![Value::I64Array(vec![0, -1, 2, 3])]);
}

#[test]
fn under_allocation_traps_on_old_size_store() {
    let p = builtin("workqueue").unwrap();
    let sites = enumerate_sites(&p, FaultType::BufferOverflowMalloc);
    // first alloc in main is the 4-slot chunks buffer
    let site = sites
        .iter()
        .find(|s| s.function == "main")
        .unwrap();
    let plan = FaultPlan {
        fault_type: FaultType::BufferOverflowMalloc,
        site: Site {
            ordinal: 1,
            ..site.clone()
        },
        rng_seed: 0,
        bit_index: None,
        size_delta: Some(8),
        arg_index: None,
    };
    let input = with_threads(1, &builtin_default_input("workqueue").unwrap());
    let r = execute(&p, &input, ScheduleSeed(0), Granularity::Function, Some(&plan), FALLBACK_STEP_BUDGET).unwrap();
    assert!(r.activated);
    assert_eq!(r.outcome, Outcome::Trap(ipa_core::vm::TrapReason::OutOfBounds));
}

#[test]
fn enumerate_sites_matches_spec_examples() {
    let wq = builtin("workqueue").unwrap();
    let race = enumerate_sites(&wq, FaultType::RaceCondition);
    assert_eq!(race.len(), 1);
    assert_eq!(race[0].function, "addChunk");
    assert!(enumerate_sites(&wq, FaultType::FileIoBufferOverflow).is_empty());

    // independent oracle: count value-producing mnemonics in the source text
    let src = ipa_core::vm::builtin_source("qsortmt").unwrap();
    let expected = src
        .lines()
        .map(|l| l.trim())
        .filter(|l| {
            let m = l.split_whitespace().next().unwrap_or("");
            matches!(m, "const" | "add" | "sub" | "mul" | "div" | "load" | "len")
                || m.starts_with("cmp_")
                || (m == "call") // all qsortmt calls return values
        })
        .count();
    let qs = builtin("qsortmt").unwrap();
    assert_eq!(enumerate_sites(&qs, FaultType::DataCorruption).len(), expected);
}

#[test]
fn io_size_corruption_shifts_or_traps() {
    let p = builtin("httpish").unwrap();
    let input = with_threads(1, &builtin_default_input("httpish").unwrap());
    let sites = enumerate_sites(&p, FaultType::FileIoBufferOverflow);
    assert!(!sites.is_empty());
    let read_site = sites.iter().find(|s| s.function == "main").unwrap();
    // delta 1 on a 2-slot buffer: silent extra byte consumed
    let plan = FaultPlan {
        fault_type: FaultType::FileIoBufferOverflow,
        site: Site { ordinal: 1, ..read_site.clone() },
        rng_seed: 0,
        bit_index: None,
        size_delta: Some(1),
        arg_index: None,
    };
    let silent = execute(&p, &input, ScheduleSeed(0), Granularity::Function, Some(&plan), FALLBACK_STEP_BUDGET).unwrap();
    assert!(silent.activated);
    assert_eq!(silent.outcome, Outcome::Normal);
    let clean = execute(&p, &input, ScheduleSeed(0), Granularity::Function, None, FALLBACK_STEP_BUDGET).unwrap();
    assert_ne!(clean.output, silent.output, "consumed tape byte shifts responses");

    // delta 8 overflows the buffer: trap
    let plan = FaultPlan {
        size_delta: Some(8),
        ..plan
    };
    let trapped = execute(&p, &input, ScheduleSeed(0), Granularity::Function, Some(&plan), FALLBACK_STEP_BUDGET).unwrap();
    assert!(trapped.activated);
    assert_eq!(trapped.outcome, Outcome::Trap(ipa_core::vm::TrapReason::OutOfBounds));
}

#[test]
fn thread_projection_respects_nonce_nesting() {
    // ENTER/EXIT pairs are well nested per thread (stack discipline)
    use ipa_core::trace::ProgramPoint;
    for name in builtin_names() {
        let r = run_builtin(name, 4, 11);
        let mut stacks: std::collections::HashMap<u64, Vec<(String, u64)>> = Default::default();
        for s in &r.trace.samples {
            // parameterless functions trace only their EXIT; no pairing
            let paired = r
                .trace
                .declaration_for(&ProgramPoint::entry(&s.point.function))
                .is_some();
            if !paired {
                continue;
            }
            let stack = stacks.entry(s.thread_id).or_default();
            match s.point.kind {
                ipa_core::trace::PointKind::FunctionEntry => {
                    stack.push((s.point.function.clone(), s.nonce));
                }
                ipa_core::trace::PointKind::FunctionExit => {
                    let top = stack.pop().expect("exit without enter");
                    assert_eq!(top, (s.point.function.clone(), s.nonce), "{}", name);
                }
                ipa_core::trace::PointKind::BasicBlockEntry => {}
            }
        }
        // every run's trace parses back: pairing validated by the codec too
        let text = write_trace(&r.trace);
        ipa_core::trace::parse_trace(&text).unwrap();
    }
}
