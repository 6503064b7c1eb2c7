//! End-to-end inference/detection behavior on the builtins.

use ipa_core::epa::{detect, diff_traces, mean_pairwise_variance};
use ipa_core::inference::{infer, stability_curve, InvariantClass, Predicate};
use ipa_core::injector::{enumerate_sites, FaultPlan, FaultType, Site};
use ipa_core::rng::derive_seed;
use ipa_core::trace::{PointKind, ProgramPoint, TraceFile};
use ipa_core::value::Value;
use ipa_core::vm::{
    builtin, builtin_default_input, builtin_names, default_step_budget, execute, golden_runs,
    Granularity, GoldenError, Outcome, Program, ScheduleSeed,
};

fn full_input(name: &str, threads: i64) -> Vec<Value> {
    let mut input = vec![Value::I64(threads)];
    input.extend(builtin_default_input(name).unwrap());
    input
}

fn goldens(
    program: &Program,
    input: &[Value],
    granularity: Granularity,
    count: usize,
    salt: &str,
) -> Vec<TraceFile> {
    let budget = default_step_budget(program, input, granularity, 10).unwrap();
    let seeds: Vec<u64> = (0..count)
        .map(|i| derive_seed(7, salt, i as u64))
        .collect();
    golden_runs(program, input, &seeds, granularity, budget).unwrap()
}

#[test]
fn worked_example_invariants_and_detection() {
    let program = builtin("workqueue").unwrap();
    let fours = vec![
        Value::I64(4),
        Value::I64(4),
        Value::I64(4),
        Value::I64(4),
    ];
    let mut input = vec![Value::I64(4)];
    input.extend(fours.clone());
    let traces = goldens(&program, &input, Granularity::Function, 5, "worked");
    let set = infer(&traces, 0.99, Granularity::Function).unwrap();

    let enter = ProgramPoint::entry("addChunk");
    let exit = ProgramPoint::exit("addChunk");
    let has = |point: &ProgramPoint, pred: &Predicate| {
        set.invariants
            .iter()
            .any(|i| &i.point == point && &i.predicate == pred)
    };
    let x_eq_4 = Predicate::EqConst {
        var: "x".into(),
        value: Value::I64(4),
    };
    let ret_eq_1 = Predicate::EqConst {
        var: "return".into(),
        value: Value::I64(1),
    };
    assert!(has(&enter, &x_eq_4), "entry invariant x == 4");
    assert!(has(&exit, &ret_eq_1), "exit invariant return == 1");
    assert!(has(&exit, &x_eq_4), "exit invariant x == 4");

    // the comparison-flip mutation: bit 0 of the guard comparison result
    let cmp_site = enumerate_sites(&program, FaultType::DataCorruption)
        .into_iter()
        .find(|s| s.function == "addChunk" && s.block == "entry")
        .unwrap();
    for threads in [1i64, 4] {
        let mut detect_input = vec![Value::I64(threads)];
        detect_input.extend(fours.clone());
        for run in 0..50u64 {
            let plan = FaultPlan {
                fault_type: FaultType::DataCorruption,
                site: Site {
                    ordinal: 1 + run % 4,
                    ..cmp_site.clone()
                },
                rng_seed: run,
                bit_index: Some(0),
                size_delta: None,
                arg_index: None,
            };
            let r = execute(
                &program,
                &detect_input,
                ScheduleSeed(derive_seed(11, "mut", run * 2 + threads as u64)),
                Granularity::Function,
                Some(&plan),
                1_000_000,
            )
            .unwrap();
            assert!(r.activated);
            let report = detect(&set, &r.trace);
            let exit_x_violated = report.violations.iter().any(|v| {
                v.function == "addChunk"
                    && v.boundary == ipa_core::epa::Boundary::Exit
                    && v.predicate == "x == 4"
            });
            assert!(exit_x_violated, "threads={} run={}", threads, run);
            // the entry invariant of addChunk is retained: the window is
            // inside the call
            assert!(report
                .violations
                .iter()
                .all(|v| !(v.function == "addChunk"
                    && v.boundary == ipa_core::epa::Boundary::Entry)));
            assert!(report
                .violations
                .iter()
                .filter(|v| v.function == "addChunk"
                    && v.boundary == ipa_core::epa::Boundary::Exit)
                .all(|v| v.entry_clean == Some(true)));
        }
    }
}

#[test]
fn stability_converges_by_five_runs_at_function_level() {
    for name in builtin_names() {
        let program = builtin(name).unwrap();
        let input = full_input(name, 4);
        let budget = default_step_budget(&program, &input, Granularity::Function, 10).unwrap();
        let curve = stability_curve(
            |i| -> Result<TraceFile, GoldenError> {
                let seed = derive_seed(23, name, i as u64);
                golden_runs(&program, &input, &[seed], Granularity::Function, budget)
                    .map(|mut v| v.pop().unwrap())
            },
            &[1, 2, 3, 4, 5, 10, 15],
            0.99,
            Granularity::Function,
        )
        .unwrap();
        assert_eq!(curve.converged, Some(true), "{}", name);
        let by_n: std::collections::HashMap<usize, &str> = curve
            .rows
            .iter()
            .map(|r| (r.n, r.fingerprint.as_str()))
            .collect();
        assert_eq!(by_n[&5], by_n[&10], "{} n=5 vs n=10", name);
        assert_eq!(by_n[&10], by_n[&15], "{} n=10 vs n=15", name);
        // a single run cannot clear 0.99 with few samples; by n=5 the
        // pooled support does
        assert!(
            curve.rows.iter().filter(|r| r.n >= 5).all(|r| r.invariant_count > 0),
            "{}",
            name
        );
    }
}

#[test]
fn single_threaded_stability_is_flat() {
    let program = builtin("workqueue").unwrap();
    let input = full_input("workqueue", 1);
    let budget = default_step_budget(&program, &input, Granularity::Function, 10).unwrap();
    let curve = stability_curve(
        |i| -> Result<TraceFile, GoldenError> {
            let seed = derive_seed(5, "flat", i as u64);
            golden_runs(&program, &input, &[seed], Granularity::Function, budget)
                .map(|mut v| v.pop().unwrap())
        },
        &[5, 10, 15],
        0.99,
        Granularity::Function,
    )
    .unwrap();
    // identical deterministic traces: once every candidate clears the
    // threshold (by n=5) the count is flat
    let counts: Vec<usize> = curve.rows.iter().map(|r| r.invariant_count).collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{:?}", counts);
    assert_eq!(curve.converged, Some(true));
}

#[test]
fn numerikernel_block_granularity_does_not_stabilize() {
    let program = builtin("numerikernel").unwrap();
    let input = full_input("numerikernel", 4);
    let budget = default_step_budget(&program, &input, Granularity::BasicBlock, 10).unwrap();
    let curve = stability_curve(
        |i| -> Result<TraceFile, GoldenError> {
            let seed = derive_seed(31, "bb", i as u64);
            golden_runs(&program, &input, &[seed], Granularity::BasicBlock, budget)
                .map(|mut v| v.pop().unwrap())
        },
        &[1, 2, 3, 4, 5, 10, 15, 20],
        0.99,
        Granularity::BasicBlock,
    )
    .unwrap();
    assert_eq!(curve.converged, Some(false), "rows: {:?}", curve.rows);
}

#[test]
fn zero_false_positives_on_fresh_seeds() {
    for name in builtin_names() {
        let program = builtin(name).unwrap();
        let input = full_input(name, 4);
        let budget = default_step_budget(&program, &input, Granularity::Function, 10).unwrap();
        let training = goldens(&program, &input, Granularity::Function, 5, "train");
        let set = infer(&training, 0.99, Granularity::Function).unwrap();
        let fresh_seeds: Vec<u64> = (0..20).map(|i| derive_seed(99, "fresh", i)).collect();
        let fresh = golden_runs(&program, &input, &fresh_seeds, Granularity::Function, budget)
            .unwrap();
        for (i, t) in fresh.iter().enumerate() {
            let report = detect(&set, t);
            assert!(
                report.violations.is_empty(),
                "{} fresh run {} raised {:?}",
                name,
                i,
                report.violations.first()
            );
        }
    }
}

#[test]
fn zero_false_positives_on_training_traces() {
    for name in builtin_names() {
        let program = builtin(name).unwrap();
        let input = full_input(name, 4);
        let training = goldens(&program, &input, Granularity::Function, 5, "selftrain");
        let set = infer(&training, 0.99, Granularity::Function).unwrap();
        for t in &training {
            assert!(detect(&set, t).violations.is_empty(), "{}", name);
        }
    }
}

#[test]
fn qsortmt_order_invariant_matches_brute_force() {
    let program = builtin("qsortmt").unwrap();
    let input = full_input("qsortmt", 4);
    let traces = goldens(&program, &input, Granularity::Function, 5, "sortcheck");
    // brute-force oracle: every array sampled at check:::ENTER is sorted
    let point = ProgramPoint::entry("check");
    let mut seen = 0;
    for t in &traces {
        for s in t.samples.iter().filter(|s| s.point == point) {
            let Some(Value::I64Array(xs)) = s.value_of("out") else {
                panic!("check out binding")
            };
            assert!(xs.windows(2).all(|w| w[0] <= w[1]), "sample not sorted");
            seen += 1;
        }
    }
    assert!(seen >= 10);
    let set = infer(&traces, 0.99, Granularity::Function).unwrap();
    assert!(
        set.invariants.iter().any(|i| {
            i.point == point
                && i.class == InvariantClass::F
                && i.predicate
                    == Predicate::Sorted {
                        var: "out".into(),
                        ascending: true,
                    }
        }),
        "F-class sorted-ascending invariant at check:::ENTER"
    );
}

#[test]
fn numerikernel_elementwise_invariant_present() {
    let program = builtin("numerikernel").unwrap();
    let input = full_input("numerikernel", 4);
    let traces = goldens(&program, &input, Granularity::Function, 5, "elem");
    let set = infer(&traces, 0.99, Granularity::Function).unwrap();
    let point = ProgramPoint::entry("finalize");
    assert!(
        set.invariants.iter().any(|i| {
            i.point == point
                && i.class == InvariantClass::C
                && matches!(
                    &i.predicate,
                    Predicate::ElemCmp { rel, left, right }
                        if rel.symbol() == "<" && left == "a" && right == "b"
                )
        }),
        "C-class a[] < b[] at finalize:::ENTER; have: {:?}",
        set.invariants
            .iter()
            .filter(|i| i.point == point)
            .map(|i| i.predicate.to_string())
            .collect::<Vec<_>>()
    );
}

#[test]
fn rq1_multithreaded_variance_positive_single_threaded_zero() {
    let program = builtin("workqueue").unwrap();
    let multi = goldens(
        &program,
        &full_input("workqueue", 4),
        Granularity::Function,
        5,
        "rq1multi",
    );
    let v_multi = mean_pairwise_variance(&multi).unwrap();
    assert!(v_multi > 0.0, "variance {}", v_multi);
    assert!(!diff_traces(&multi[0], &multi[1]).is_empty());

    let single = goldens(
        &program,
        &full_input("workqueue", 1),
        Granularity::Function,
        5,
        "rq1single",
    );
    assert_eq!(mean_pairwise_variance(&single).unwrap(), 0.0);
}

#[test]
fn threshold_monotonicity_on_builtins() {
    for name in builtin_names() {
        let program = builtin(name).unwrap();
        let input = full_input(name, 4);
        let traces = goldens(&program, &input, Granularity::Function, 5, "thresh");
        let ids = |th: f64| -> std::collections::HashSet<String> {
            infer(&traces, th, Granularity::Function)
                .unwrap()
                .invariants
                .iter()
                .map(|i| i.id())
                .collect()
        };
        let hi = ids(0.99);
        let mid = ids(0.80);
        let lo = ids(0.60);
        assert!(hi.is_subset(&mid), "{}: 0.99 subset of 0.80", name);
        assert!(mid.is_subset(&lo), "{}: 0.80 subset of 0.60", name);
    }
}

#[test]
fn detect_verdict_is_order_insensitive() {
    // permuting whole nonce-blocks of samples leaves the violated multiset
    // unchanged
    let program = builtin("workqueue").unwrap();
    let input = full_input("workqueue", 4);
    let traces = goldens(&program, &input, Granularity::Function, 5, "perm");
    let set = infer(&traces, 0.99, Granularity::Function).unwrap();

    let site = enumerate_sites(&program, FaultType::DataCorruption)
        .into_iter()
        .find(|s| s.function == "addChunk")
        .unwrap();
    let plan = FaultPlan {
        fault_type: FaultType::DataCorruption,
        site: Site { ordinal: 3, ..site },
        rng_seed: 1,
        bit_index: Some(5),
        size_delta: None,
        arg_index: None,
    };
    let r = execute(
        &program,
        &input,
        ScheduleSeed(123),
        Granularity::Function,
        Some(&plan),
        1_000_000,
    )
    .unwrap();
    assert!(r.activated);

    let violated = |t: &TraceFile| -> Vec<String> {
        let mut v: Vec<String> = detect(&set, t)
            .violations
            .iter()
            .map(|x| x.invariant_id.clone())
            .collect();
        v.sort();
        v
    };
    let base = violated(&r.trace);
    assert!(!base.is_empty());

    // group samples by (thread, nonce) and emit the groups in reverse order
    let mut groups: Vec<((u64, u64), Vec<ipa_core::trace::TraceSample>)> = Vec::new();
    for s in &r.trace.samples {
        let key = (s.thread_id, s.nonce);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(s.clone()),
            None => groups.push((key, vec![s.clone()])),
        }
    }
    groups.reverse();
    let mut permuted = TraceFile {
        declarations: r.trace.declarations.clone(),
        samples: Vec::new(),
    };
    for (_, g) in groups {
        for mut s in g {
            s.seq = permuted.samples.len();
            permuted.samples.push(s);
        }
    }
    assert_eq!(violated(&permuted), base);
}

#[test]
fn truncated_crash_trace_detects_without_panic() {
    let program = builtin("workqueue").unwrap();
    let input = full_input("workqueue", 4);
    let traces = goldens(&program, &input, Granularity::Function, 5, "crash");
    let set = infer(&traces, 0.99, Granularity::Function).unwrap();
    // under-allocate the chunks buffer: the store traps mid-run
    let site = enumerate_sites(&program, FaultType::BufferOverflowMalloc)
        .into_iter()
        .next()
        .unwrap();
    let plan = FaultPlan {
        fault_type: FaultType::BufferOverflowMalloc,
        site: Site { ordinal: 1, ..site },
        rng_seed: 0,
        bit_index: None,
        size_delta: Some(8),
        arg_index: None,
    };
    let r = execute(
        &program,
        &input,
        ScheduleSeed(5),
        Granularity::Function,
        Some(&plan),
        1_000_000,
    )
    .unwrap();
    assert!(matches!(r.outcome, Outcome::Trap(_)));
    // orphan ENTER samples are fine; detection only sees what is there
    let report = detect(&set, &r.trace);
    assert_eq!(report.samples_scanned, r.trace.samples.len());
}
