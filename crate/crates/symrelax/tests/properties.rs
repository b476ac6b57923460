//! Property suites: symbolic-expression consistency, subsumption order laws,
//! parser round-trips, kernel classification, and pass composition.

mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symrelax::ir::{subsumes, Annotation, DType, ShapeSpec};
use symrelax::symexpr::{evaluate, normalize, prove_equal, Provability, SymExpr, SymVar};
use symrelax::text::{parse_module, print_module};
use symrelax::tprog::{classify, PatternKind};
use symrelax::vm::interpret;

use common::{
    apply_passes, classify_cases, classify_only_prim, corpus, gen_module, synth_args,
    values_close, DEFAULT_PASSES,
};

// ---------------------------------------------------------------------------
// Symbolic expressions
// ---------------------------------------------------------------------------

fn arb_expr() -> impl Strategy<Value = SymExpr> {
    let leaf = prop_oneof![
        (-5i64..=5).prop_map(SymExpr::constant),
        (0u32..3).prop_map(|i| SymExpr::var(SymVar::new(["n", "m", "k"][i as usize], i))),
    ];
    leaf.prop_recursive(4, 48, 2, |inner| {
        (inner.clone(), inner, 0u8..7).prop_map(|(a, b, op)| match op {
            0 => SymExpr::add(a, b),
            1 => SymExpr::sub(a, b),
            2 => SymExpr::mul(a, b),
            3 => SymExpr::floordiv(a, b),
            4 => SymExpr::modulo(a, b),
            5 => SymExpr::max(a, b),
            _ => SymExpr::min(a, b),
        })
    })
}

fn env3(n: i64, m: i64, k: i64) -> HashMap<u32, i64> {
    HashMap::from([(0, n), (1, m), (2, k)])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, .. ProptestConfig::default() })]

    /// Normalization preserves evaluation and is idempotent. Simplification
    /// may remove a failing subterm, so an error on the raw tree is allowed
    /// to become a value, but never the reverse.
    #[test]
    fn normalize_preserves_evaluation(e in arb_expr(), n in -6i64..=6, m in -6i64..=6, k in -6i64..=6) {
        let env = env3(n, m, k);
        let norm = normalize(&e);
        prop_assert_eq!(&normalize(&norm), &norm, "normalize is idempotent");
        if let Ok(v) = evaluate(&e, &env) {
            prop_assert_eq!(evaluate(&norm, &env), Ok(v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2_000, .. ProptestConfig::default() })]

    /// A provable (in)equality verdict is never contradicted by evaluation.
    #[test]
    fn prove_equal_is_sound(a in arb_expr(), b in arb_expr(), n in -6i64..=6, m in -6i64..=6, k in -6i64..=6) {
        let env = env3(n, m, k);
        if let (Ok(x), Ok(y)) = (evaluate(&a, &env), evaluate(&b, &env)) {
            match prove_equal(&a, &b) {
                Provability::ProvablyEqual => prop_assert_eq!(x, y),
                Provability::ProvablyUnequal => prop_assert_ne!(x, y),
                Provability::Unknown => {}
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Subsumption partial order
// ---------------------------------------------------------------------------

fn arb_dim() -> impl Strategy<Value = SymExpr> {
    prop_oneof![
        (1i64..=8).prop_map(SymExpr::constant),
        (0u32..2).prop_map(|i| SymExpr::var(SymVar::new(["n", "m"][i as usize], i))),
        (0u32..2, 1i64..=4).prop_map(|(i, c)| SymExpr::mul(
            SymExpr::constant(c),
            SymExpr::var(SymVar::new(["n", "m"][i as usize], i)),
        )),
        (0u32..2, 0i64..=3).prop_map(|(i, c)| SymExpr::add(
            SymExpr::var(SymVar::new(["n", "m"][i as usize], i)),
            SymExpr::constant(c),
        )),
    ]
}

fn arb_spec() -> impl Strategy<Value = ShapeSpec> {
    prop_oneof![
        prop::collection::vec(arb_dim(), 0..3).prop_map(ShapeSpec::Known),
        (0usize..3).prop_map(ShapeSpec::RankOnly),
        Just(ShapeSpec::Unconstrained),
    ]
}

fn arb_ann() -> impl Strategy<Value = Annotation> {
    let dtype = prop_oneof![
        Just(None),
        Just(Some(DType::F32)),
        Just(Some(DType::I64)),
        Just(Some(DType::Bool)),
    ];
    let base = prop_oneof![
        (arb_spec(), dtype).prop_map(|(shape, dtype)| Annotation::Tensor { shape, dtype }),
        arb_spec().prop_map(|spec| Annotation::Shape { spec }),
        Just(Annotation::Object),
    ];
    base.clone()
        .prop_recursive(2, 8, 3, |inner| {
            prop::collection::vec(inner, 0..3).prop_map(Annotation::Tuple)
        })
        .boxed()
        .prop_union(base.boxed())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2_000, .. ProptestConfig::default() })]

    #[test]
    fn subsumption_is_reflexive_with_object_as_top(a in arb_ann()) {
        prop_assert_eq!(subsumes(&a, &a), Provability::ProvablyEqual);
        prop_assert_eq!(subsumes(&a, &Annotation::Object), Provability::ProvablyEqual);
    }

    /// Provable subsumption composes: a ⊑ b and b ⊑ c imply a ⊑ c.
    #[test]
    fn subsumption_is_transitive(a in arb_ann(), b in arb_ann(), c in arb_ann()) {
        if subsumes(&a, &b) == Provability::ProvablyEqual
            && subsumes(&b, &c) == Provability::ProvablyEqual
        {
            prop_assert_eq!(subsumes(&a, &c), Provability::ProvablyEqual);
        }
    }

    /// Mutually subsuming annotations are interchangeable against any third.
    #[test]
    fn mutual_subsumption_is_equivalence(a in arb_ann(), b in arb_ann(), c in arb_ann()) {
        if subsumes(&a, &b) == Provability::ProvablyEqual
            && subsumes(&b, &a) == Provability::ProvablyEqual
        {
            prop_assert_eq!(subsumes(&a, &c), subsumes(&b, &c));
            prop_assert_eq!(subsumes(&c, &a), subsumes(&c, &b));
        }
    }
}

// ---------------------------------------------------------------------------
// Parser round-trips
// ---------------------------------------------------------------------------

fn assert_round_trip(name: &str, src: &str) {
    let m1 = parse_module(src).unwrap_or_else(|e| panic!("{}: parse failed: {}", name, e));
    let p1 = print_module(&m1);
    let m2 = parse_module(&p1).unwrap_or_else(|e| panic!("{}: reparse failed: {}", name, e));
    let p2 = print_module(&m2);
    assert_eq!(p1, p2, "{}: printed form is not a fixpoint", name);
}

#[test]
fn corpus_round_trips_through_the_printer() {
    for (name, src) in corpus() {
        assert_round_trip(&name, &src);
    }
}

#[test]
fn generated_modules_round_trip_through_the_printer() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e_ed);
    for i in 0..100 {
        let src = gen_module(&mut rng);
        assert_round_trip(&format!("generated #{}", i), &src);
    }
}

// ---------------------------------------------------------------------------
// Kernel classification
// ---------------------------------------------------------------------------

#[test]
fn classification_matches_the_golden_table() {
    for (name, src, want) in classify_cases() {
        assert_eq!(classify_only_prim(src), want, "{}", name);
    }

    // A hand-written routine with a workspace stays opaque.
    let m = parse_module(
        "prim_fn ws(A: Buffer((n,), f32), O: Buffer((n,), f32)) outputs(1) {\n  workspace W: Buffer((n,), f32);\n  stage W(i < n) { (A[i] * 2.0) }\n  stage O(i < n) { (W[i] + 1.0) }\n}\nfn main(x: Tensor((k,), f32)) -> Tensor sym(k) {\n  y = call_tir(@ws, (x,), Tensor((k,), f32));\n  return y;\n}\n",
    )
    .unwrap();
    assert_eq!(classify(m.prim_funcs.values().next().unwrap()), PatternKind::Opaque);
}

// ---------------------------------------------------------------------------
// Pass composition
// ---------------------------------------------------------------------------

/// Every prefix of the standard pipeline preserves observable behavior.
#[test]
fn each_pipeline_prefix_preserves_semantics() {
    for (name, src) in corpus() {
        let m = parse_module(&src).unwrap();
        let (args, env) = synth_args(&m, "main", 3, 7)
            .unwrap_or_else(|e| panic!("{}: {}", name, e));
        let want = interpret(&m, "main", &args, &env)
            .unwrap_or_else(|e| panic!("{}: baseline: {}", name, e));
        for len in 0..=DEFAULT_PASSES.len() {
            let prefix = &DEFAULT_PASSES[..len];
            let staged = apply_passes(&m, prefix)
                .unwrap_or_else(|e| panic!("{}: passes {:?}: {}", name, prefix, e));
            let got = interpret(&staged, "main", &args, &env)
                .unwrap_or_else(|e| panic!("{}: after {:?}: {}", name, prefix, e));
            values_close(&got, &want, 1e-5)
                .unwrap_or_else(|e| panic!("{}: after {:?}: {}", name, prefix, e));
        }
    }
}

/// Idempotent passes can be applied twice without changing behavior.
#[test]
fn repeated_passes_compose() {
    for (name, src) in corpus().into_iter().take(8) {
        let m = parse_module(&src).unwrap();
        let (args, env) = synth_args(&m, "main", 2, 11).unwrap();
        let want = interpret(&m, "main", &args, &env).unwrap();
        let staged = apply_passes(&m, &["legalize", "legalize", "fuse", "fuse-tir"])
            .unwrap_or_else(|e| panic!("{}: {}", name, e));
        let got = interpret(&staged, "main", &args, &env)
            .unwrap_or_else(|e| panic!("{}: {}", name, e));
        values_close(&got, &want, 1e-5).unwrap_or_else(|e| panic!("{}: {}", name, e));
    }
}
