//! Property tests for the trace codec and sample grouping.

use proptest::prelude::*;

use ipa_core::trace::{
    group_samples, parse_trace, write_trace, Declaration, PointKind, ProgramPoint, TraceFile,
    TraceSample,
};
use ipa_core::value::{Value, VarType};

fn arb_var_type() -> impl Strategy<Value = VarType> {
    prop_oneof![
        Just(VarType::I64),
        Just(VarType::F64),
        Just(VarType::Bool),
        Just(VarType::I64Array),
        Just(VarType::F64Array),
    ]
}

prop_compose! {
    fn arb_declaration(fn_idx: usize)
        (kind in 0..3usize,
         var_count in 1..4usize,
         types in proptest::collection::vec(arb_var_type(), 4))
        -> Declaration
    {
        let function = format!("fn{}", fn_idx);
        let point = match kind {
            0 => ProgramPoint::entry(&function),
            1 => ProgramPoint::exit(&function),
            _ => ProgramPoint::block(&function, "b0"),
        };
        let vars = (0..var_count)
            .map(|i| (format!("v{}", i), types[i]))
            .collect();
        Declaration { point, vars }
    }
}

fn arb_trace() -> impl Strategy<Value = TraceFile> {
    proptest::collection::vec(any::<prop::sample::Index>(), 0..12)
        .prop_flat_map(|picks| {
            (1..4usize).prop_flat_map(move |decl_count| {
                let picks = picks.clone();
                proptest::collection::vec(any::<u8>(), decl_count)
                    .prop_flat_map(move |_salts| {
                        let decls: Vec<BoxedStrategy<Declaration>> = (0..decl_count)
                            .map(|i| arb_declaration(i).boxed())
                            .collect();
                        let picks = picks.clone();
                        decls.prop_map(move |mut declarations| {
                            // unique points only
                            declarations.dedup_by(|a, b| a.point == b.point);
                            let mut trace = TraceFile {
                                declarations,
                                samples: Vec::new(),
                            };
                            build_samples(&mut trace, &picks);
                            trace
                        })
                    })
            })
        })
}

fn build_samples(trace: &mut TraceFile, picks: &[prop::sample::Index]) {
    // deterministic values per slot keep this fast; variety comes from decls
    let mut nonce_per_fn: std::collections::HashMap<String, u64> = Default::default();
    for (si, pick) in picks.iter().enumerate() {
        if trace.declarations.is_empty() {
            break;
        }
        let d = &trace.declarations[pick.index(trace.declarations.len())];
        // EXIT samples need a matching ENTER to satisfy pairing; emit pairs
        // only when the trace declares the entry point too
        if d.point.kind == PointKind::FunctionExit
            && trace
                .declaration_for(&ProgramPoint::entry(&d.point.function))
                .is_some()
        {
            continue;
        }
        let nonce = {
            let c = nonce_per_fn.entry(d.point.function.clone()).or_insert(0);
            *c += 1;
            *c
        };
        let bindings = d
            .vars
            .iter()
            .enumerate()
            .map(|(i, (name, ty))| {
                let v = match ty {
                    VarType::I64 => Value::I64((si * 7 + i) as i64 - 3),
                    // sprinkle the specials a faulty trace may carry
                    VarType::F64 => Value::f64(match si % 5 {
                        3 => f64::INFINITY,
                        4 => f64::NAN,
                        _ => si as f64 * 0.25 - i as f64,
                    }),
                    VarType::Bool => Value::Bool((si + i) % 2 == 0),
                    VarType::I64Array => Value::I64Array(vec![si as i64, -(i as i64)]),
                    VarType::F64Array => Value::f64_array(vec![0.5 * si as f64]),
                };
                (name.clone(), v)
            })
            .collect();
        let seq = trace.samples.len();
        trace.samples.push(TraceSample {
            point: d.point.clone(),
            nonce,
            thread_id: (si % 3) as u64,
            bindings,
            seq,
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn write_parse_round_trips(t in arb_trace()) {
        let text = write_trace(&t);
        let back = parse_trace(&text).unwrap();
        prop_assert_eq!(&back, &t);
        // serialization is canonical: re-serializing is byte-identical
        prop_assert_eq!(write_trace(&back), text);
    }

    #[test]
    fn grouping_partitions_samples(t in arb_trace()) {
        let groups = group_samples(&t);
        let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
        prop_assert_eq!(total, t.samples.len());
        // concatenating groups and re-sorting by seq yields the original order
        let mut seqs: Vec<usize> = groups
            .iter()
            .flat_map(|(_, g)| g.iter().map(|s| s.seq))
            .collect();
        seqs.sort_unstable();
        prop_assert_eq!(seqs, (0..t.samples.len()).collect::<Vec<_>>());
        // within each group, file order is preserved
        for (_, g) in &groups {
            prop_assert!(g.windows(2).all(|w| w[0].seq < w[1].seq));
        }
    }

    #[test]
    fn random_float_values_round_trip(x in any::<f64>()) {
        let v = Value::f64(x);
        let text = v.to_string();
        let back = ipa_core::value::parse_value(&text, VarType::F64).unwrap();
        prop_assert_eq!(back, v);
    }
}

#[test]
fn vm_traces_round_trip_bitwise() {
    use ipa_core::vm::*;
    for name in builtin_names() {
        let p = builtin(name).unwrap();
        let mut input = vec![Value::I64(4)];
        input.extend(builtin_default_input(name).unwrap());
        for granularity in [Granularity::Function, Granularity::BasicBlock] {
            let r = execute(
                &p,
                &input,
                ScheduleSeed(99),
                granularity,
                None,
                FALLBACK_STEP_BUDGET,
            )
            .unwrap();
            let text = write_trace(&r.trace);
            let back = parse_trace(&text).unwrap();
            assert_eq!(back, r.trace, "{}", name);
            assert_eq!(write_trace(&back), text, "{}", name);
        }
    }
}
