//! Acceptance gate: eight end-to-end criteria, one printed pass/fail line
//! each. Run with `--nocapture` to see the lines for passing criteria too.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symrelax::deduce::annotate_module;
use symrelax::ir::{subsumes, Annotation, DType, Module, ShapeSpec};
use symrelax::passes;
use symrelax::symexpr::{evaluate, normalize, Provability, SymExpr, SymVar};
use symrelax::tensor::Tensor;
use symrelax::text::{annotation_str, parse_module, print_module};
use symrelax::vm::{
    default_library_registry, interpret, lower_to_vm, run_vm, Instruction, RuntimeValue,
    ShapeStep, VMProgram, VmError,
};

use common::{
    apply_passes, classify_cases, classify_only_prim, corpus, differential, gen_module,
    param_vars, synth_args, values_close, DEFAULT_PASSES,
};

fn report(id: u32, what: &str, budget: Duration, body: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let mut outcome = body();
    let elapsed = start.elapsed();
    if outcome.is_ok() && elapsed > budget {
        outcome = Err(format!("took {:?}, budget {:?}", elapsed, budget));
    }
    match outcome {
        Ok(detail) => println!("criterion {}: PASS - {} ({:?})", id, detail, elapsed),
        Err(e) => {
            println!("criterion {}: FAIL - {}: {}", id, what, e);
            panic!("criterion {} failed: {}", id, e);
        }
    }
}

fn binding_ann(m: &Module, var: &str) -> Result<String, String> {
    let f = m.graph_funcs.get("main").ok_or("no main")?;
    for b in f.body.blocks.iter().flat_map(|bl| bl.bindings()) {
        if b.var() == var {
            return b
                .ann()
                .map(annotation_str)
                .ok_or_else(|| format!("`{}` has no deduced annotation", var));
        }
    }
    Err(format!("no binding `{}`", var))
}

fn expect_ann(m: &Module, var: &str, want: &str) -> Result<(), String> {
    let got = binding_ann(m, var)?;
    if got == want {
        Ok(())
    } else {
        Err(format!("`{}`: deduced {}, expected {}", var, got, want))
    }
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_shape_deduction() {
    report(1, "deduction on the flatten/reshape/unique program", Duration::from_secs(1), || {
        let src = "fn main(x: Tensor((n, 4), f32)) -> Tensor sym(n, m) {\n  s = shape(n, 4);\n  lv0 = flatten(x);\n  lv1 = reshape(lv0, s);\n  lv2 = exp(lv0);\n  lv3 = unique(lv2);\n  lv4 = match_cast(lv3, Tensor((m,), f32));\n  return lv4;\n}\n";
        let m = parse_module(src).map_err(|e| e.to_string())?;
        let (am, _) = annotate_module(&m).map_err(|e| e.to_string())?;
        expect_ann(&am, "lv0", "Tensor((4*n,), f32)")?;
        expect_ann(&am, "lv1", "Tensor((n, 4), f32)")?;
        expect_ann(&am, "lv3", "Tensor(ndim=1, f32)")?;
        expect_ann(&am, "lv4", "Tensor((m,), f32)")?;
        // m is fresh: bound by the cast, not derivable from any parameter
        let f = &am.graph_funcs["main"];
        let mut ids = Vec::new();
        for (_, ann) in &f.params {
            param_vars(ann, &mut ids);
        }
        let m_var = f.sym_vars.iter().find(|v| v.name == "m").ok_or("no sym var m")?;
        if ids.contains(&m_var.id) {
            return Err("`m` is not fresh: it appears in a parameter shape".into());
        }
        Ok("flatten/reshape/unique/match_cast annotations all exact".into())
    });
}

#[test]
fn criterion_2_cross_function_deduction() {
    report(2, "signature-only deduction across calls", Duration::from_secs(1), || {
        let src = "fn subfn(t: Tensor((p, q), f32)) -> Tensor((p*q,), f32) sym(p, q) {\n  df {\n    z = flatten(t);\n  }\n  return z;\n}\nfn main(x: Tensor((n, m), f32), w: Tensor((m, 4), f32)) -> Tuple(Tensor((n*m,), f32), Tensor((4*m,), f32)) sym(n, m) {\n  a = subfn(x);\n  b = subfn(w);\n  t = tuple(a, b);\n  return t;\n}\n";
        let m = parse_module(src).map_err(|e| e.to_string())?;
        let (am, _) = annotate_module(&m).map_err(|e| e.to_string())?;
        expect_ann(&am, "a", "Tensor((n*m,), f32)")?;
        expect_ann(&am, "b", "Tensor((4*m,), f32)")?;
        Ok("two call sites of subfn get distinct substituted annotations".into())
    });
}

#[test]
fn criterion_3_fusion_with_compound_shapes() {
    report(3, "add+relu fusion over (2*n,)", Duration::from_secs(1), || {
        let src = "fn main(x: Tensor((2*n,), f32), y: Tensor((2*n,), f32)) -> Tensor((2*n,), f32) sym(n) {\n  df {\n    a = add(x, y);\n    b = relu(a);\n  }\n  return b;\n}\n";
        let m = parse_module(src).map_err(|e| e.to_string())?;

        let fused = apply_passes(&m, &["legalize", "fuse"])?;
        let (name, sub) = fused
            .graph_funcs
            .iter()
            .find(|(n, _)| *n != "main")
            .ok_or("fusion produced no sub-function")?;
        if sub.params.len() != 3 {
            return Err(format!("`{}` has {} params, expected 3", name, sub.params.len()));
        }
        let shape_params = sub
            .params
            .iter()
            .filter(|(_, a)| matches!(a, Annotation::Shape { .. }))
            .count();
        if shape_params != 1 {
            return Err(format!("`{}` carries {} shape params, expected 1", name, shape_params));
        }

        let merged = apply_passes(&m, &["legalize", "fuse", "fuse-tir"])?;
        let mut call_tirs = Vec::new();
        for f in merged.graph_funcs.values() {
            for b in f.body.blocks.iter().flat_map(|bl| bl.bindings()) {
                if let symrelax::ir::Expr::CallTir { prim, .. } = b.value() {
                    call_tirs.push(prim.clone());
                }
            }
        }
        if call_tirs.len() != 1 {
            return Err(format!("{} CallTir bindings after merge, expected 1", call_tirs.len()));
        }
        let prim = &merged.prim_funcs[&call_tirs[0]];
        if prim.stages.len() != 2 {
            return Err(format!("merged kernel has {} stages, expected 2", prim.stages.len()));
        }
        if prim.scalar_params.len() != 1 || prim.scalar_params[0].name != "n" {
            return Err(format!(
                "merged kernel scalars {:?}, expected a single deduplicated n",
                prim.scalar_params.iter().map(|v| v.name.clone()).collect::<Vec<_>>()
            ));
        }
        Ok("one extra shape param, single CallTir, 2 stages, scalar n deduplicated".into())
    });
}

#[test]
fn criterion_4_memory_planning() {
    report(4, "four-intermediate program plans to 2 storages", Duration::from_secs(1), || {
        let src = "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) bound(n <= 64) {\n  df {\n    a = exp(x);\n    b = relu(a);\n    c = exp(b);\n    d = relu(c);\n    u = unique(d);\n  }\n  return u;\n}\n";
        let m = parse_module(src).map_err(|e| e.to_string())?;
        // skip fusion so the four intermediates stay distinct kernels
        let staged = apply_passes(&m, &["legalize", "lower-libs"])?;
        let (_, plan) = passes::plan_memory(&staged).map_err(|e| e.to_string())?;

        if plan.storages.len() != 2 {
            return Err(format!("{} storages, expected exactly 2", plan.storages.len()));
        }
        if plan.assignments.len() != 4 {
            return Err(format!("{} assignments, expected 4", plan.assignments.len()));
        }

        // interval-overlap safety: tensors sharing a storage must have
        // disjoint live ranges in the pre-plan module
        let f = &staged.graph_funcs["main"];
        let bindings = f.body.blocks[0].bindings();
        let mut def: HashMap<&str, usize> = HashMap::new();
        let mut last: HashMap<&str, usize> = HashMap::new();
        for (i, b) in bindings.iter().enumerate() {
            def.insert(b.var(), i);
            last.entry(b.var()).or_insert(i);
            let mut used = Vec::new();
            b.value().free_vars(&mut used);
            for u in used {
                if let Some((k, v)) = last.get_key_value(u.as_str()) {
                    let k = *k;
                    let v = (*v).max(i);
                    last.insert(k, v);
                }
            }
        }
        for (fa, va, sa) in &plan.assignments {
            for (fb, vb, sb) in &plan.assignments {
                if (fa, va) >= (fb, vb) || sa != sb {
                    continue;
                }
                let (da, la) = (def[va.as_str()], last[va.as_str()]);
                let (db, lb) = (def[vb.as_str()], last[vb.as_str()]);
                if !(la < db || lb < da) {
                    return Err(format!(
                        "`{}` [{},{}] and `{}` [{},{}] overlap on storage {}",
                        va, da, la, vb, db, lb, sa
                    ));
                }
            }
        }
        Ok("2 storages, 4 intervals packed without overlap".into())
    });
}

#[test]
fn criterion_5_differential_suite() {
    report(5, "interpreter vs VM across the corpus", Duration::from_secs(60), || {
        let programs = corpus();
        let mut runs = 0usize;
        for (name, src) in &programs {
            let program = common::compile(src).map_err(|e| format!("{}: {}", name, e))?;
            for binding in [1i64, 2, 3, 5, 8, 17] {
                for seed in 0u64..5 {
                    differential(src, &program, binding, seed)
                        .map_err(|e| format!("{} n={} seed={}: {}", name, binding, seed, e))?;
                    runs += 1;
                }
            }
        }
        Ok(format!("{} programs x 6 bindings x 5 seeds = {} agreeing runs", programs.len(), runs))
    });
}

#[test]
fn criterion_6_allocation_budget() {
    report(6, "prologue-only allocation under bound(n <= 64)", Duration::from_secs(5), || {
        let (_, src) = corpus()
            .into_iter()
            .find(|(n, _)| n == "16_bound_plan")
            .ok_or("bounded corpus program missing")?;
        let m = parse_module(&src).map_err(|e| e.to_string())?;
        let staged = apply_passes(&m, &["legalize", "fuse", "fuse-tir", "lower-libs"])?;
        let (planned, plan) = passes::plan_memory(&staged).map_err(|e| e.to_string())?;
        let prog = lower_to_vm(&planned).map_err(|e| e.to_string())?;

        // AllocStorage must sit in the prologue, before any kernel runs
        let f = &prog.funcs["main"];
        let first_work = f
            .instrs
            .iter()
            .position(|i| {
                matches!(i, Instruction::InvokeKernel { .. } | Instruction::InvokeLibrary { .. })
            })
            .unwrap_or(f.instrs.len());
        for (idx, i) in f.instrs.iter().enumerate() {
            if matches!(i, Instruction::AllocStorage { .. }) && idx >= first_work {
                return Err(format!("AllocStorage at {} after first kernel at {}", idx, first_work));
            }
        }

        let ub_total: usize = plan
            .storages
            .iter()
            .map(|s| s.upper_bound.ok_or(format!("storage {} has no upper bound", s.id)))
            .sum::<Result<i64, String>>()? as usize;
        let registry = default_library_registry();
        for i in 0..100u64 {
            let n = (i % 64) as i64 + 1;
            let (args, _) = synth_args(&m, "main", n, 0xb0_0b + i)?;
            let (_, stats) =
                run_vm(&prog, "main", &args, &registry).map_err(|e| e.to_string())?;
            if stats.allocs != plan.storages.len() {
                return Err(format!(
                    "n={}: {} allocations, plan has {} storages",
                    n, stats.allocs, plan.storages.len()
                ));
            }
            if stats.peak_bytes > ub_total {
                return Err(format!(
                    "n={}: peak {} bytes exceeds plan bound {}",
                    n, stats.peak_bytes, ub_total
                ));
            }
        }
        Ok(format!(
            "100 invocations: allocs always {} (the plan's), peak <= {} bytes",
            plan.storages.len(),
            ub_total
        ))
    });
}

// ---------------------------------------------------------------------------

struct Adversarial {
    name: &'static str,
    src: String,
    args: Vec<RuntimeValue>,
    site: SiteOf,
}

/// How to read the expected site id back out of the compiled artifacts.
enum SiteOf {
    /// Rank/dtype gate of the given parameter register.
    Check(usize),
    /// Dim verification of (register, dim).
    BindExpect(usize, usize),
    /// First re-derivation assert in the prologue.
    Assert,
    /// Deduced check site at the named binding.
    Binding(&'static str),
}

fn expected_site(prog: &VMProgram, planned: &Module, sel: &SiteOf) -> Result<usize, String> {
    let f = &prog.funcs["main"];
    match sel {
        SiteOf::Check(reg) => f
            .instrs
            .iter()
            .find_map(|i| match i {
                Instruction::CheckShape { reg: r, site, .. } if *r == *reg => {
                    Some(*site)
                }
                _ => None,
            })
            .ok_or(format!("no CheckShape for r{}", reg)),
        SiteOf::BindExpect(reg, dim) => f
            .instrs
            .iter()
            .find_map(|i| match i {
                Instruction::BindShape { src, dim: d, expect: Some((_, site)), .. }
                    if *src == *reg && d == dim =>
                {
                    Some(*site)
                }
                _ => None,
            })
            .ok_or(format!("no verifying BindShape for r{}[{}]", reg, dim)),
        SiteOf::Assert => f
            .instrs
            .iter()
            .find_map(|i| match i {
                Instruction::ComputeShape { steps } => steps.iter().find_map(|s| match s {
                    ShapeStep::Assert { site, .. } => Some(*site),
                    _ => None,
                }),
                _ => None,
            })
            .ok_or("no prologue assert".into()),
        SiteOf::Binding(var) => {
            let (_, sites) = annotate_module(planned).map_err(|e| e.to_string())?;
            sites
                .iter()
                .find(|s| s.function == "main" && s.location == *var)
                .map(|s| s.id)
                .ok_or(format!("no check site at `{}`", var))
        }
    }
}

fn f32s(dims: &[i64], seed: u64) -> RuntimeValue {
    let t = Tensor::zeros(DType::F32, dims.to_vec());
    let mut rng = common::Rng(seed);
    for i in 0..t.num_elements() {
        t.set_f32(i, rng.f32_unit());
    }
    RuntimeValue::Tensor(t)
}

#[test]
fn criterion_7_runtime_checks() {
    report(7, "adversarial inputs fail at the right site", Duration::from_secs(1), || {
        let rank2 = "fn main(x: Tensor((n, 4), f32)) -> Tensor((n, 4), f32) sym(n) {\n  df {\n    r = exp(x);\n  }\n  return r;\n}\n".to_string();
        let square = "fn main(x: Tensor((k, k), f32)) -> Tensor((k, k), f32) sym(k) {\n  df {\n    r = relu(x);\n  }\n  return r;\n}\n".to_string();
        let cases = vec![
            Adversarial {
                name: "wrong rank",
                src: rank2.clone(),
                args: vec![f32s(&[8], 1)],
                site: SiteOf::Check(0),
            },
            Adversarial {
                name: "wrong dtype",
                src: rank2.clone(),
                args: vec![RuntimeValue::Tensor(Tensor::from_i64(vec![2, 4], &[0; 8]))],
                site: SiteOf::Check(0),
            },
            Adversarial {
                name: "wrong constant dim",
                src: rank2.clone(),
                args: vec![f32s(&[2, 5], 2)],
                site: SiteOf::BindExpect(0, 1),
            },
            Adversarial {
                name: "violated (n, n) symmetry",
                src: square,
                args: vec![f32s(&[3, 4], 3)],
                site: SiteOf::BindExpect(0, 1),
            },
            Adversarial {
                name: "non-square matmul(x, x)",
                src: "fn main(x: Tensor((n, n), f32)) -> Tensor((n, n), f32) sym(n) {\n  df {\n    r = matmul(x, x);\n  }\n  return r;\n}\n".into(),
                args: vec![f32s(&[3, 4], 4)],
                site: SiteOf::BindExpect(0, 1),
            },
            Adversarial {
                name: "cross-parameter dim mismatch",
                src: "fn main(x: Tensor((n, m), f32), y: Tensor((m, n), f32)) -> Tensor((n, n), f32) sym(n, m) {\n  df {\n    r = matmul(x, y);\n  }\n  return r;\n}\n".into(),
                args: vec![f32s(&[2, 3], 5), f32s(&[2, 3], 6)],
                site: SiteOf::BindExpect(1, 0),
            },
            Adversarial {
                name: "failed match_cast after unique",
                src: "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n  u = unique(x);\n  v = match_cast(u, Tensor((4,), f32));\n  w = exp(v);\n  return w;\n}\n".into(),
                args: vec![RuntimeValue::Tensor(Tensor::from_f32(
                    vec![4],
                    &[1.0, 1.0, 2.0, 3.0],
                ))],
                site: SiteOf::Binding("v"),
            },
            Adversarial {
                name: "match_cast to transposed shape",
                src: "fn main(x: Tensor((n, m), f32)) -> Tensor sym(n, m) {\n  y = match_cast(x, Tensor((m, n), f32));\n  df {\n    z = exp(y);\n  }\n  return z;\n}\n".into(),
                args: vec![f32s(&[2, 3], 7)],
                site: SiteOf::Binding("y"),
            },
            Adversarial {
                name: "shape argument disagrees with tensor",
                src: "fn main(x: Tensor((k, 2), f32), s: Shape((k, 2))) -> Tensor((k, 2), f32) sym(k) {\n  df {\n    r = exp(x);\n  }\n  return r;\n}\n".into(),
                args: vec![f32s(&[3, 2], 8), RuntimeValue::Shape(vec![4, 2])],
                site: SiteOf::BindExpect(1, 0),
            },
            Adversarial {
                name: "odd extent for a 2*n dim",
                src: "fn main(x: Tensor((2*n,), f32)) -> Tensor((2*n,), f32) sym(n) {\n  df {\n    r = exp(x);\n  }\n  return r;\n}\n".into(),
                args: vec![f32s(&[5], 9)],
                site: SiteOf::Assert,
            },
        ];
        if cases.len() != 10 {
            return Err(format!("{} cases, expected 10", cases.len()));
        }

        let registry = default_library_registry();
        for case in &cases {
            let m = parse_module(&case.src).map_err(|e| format!("{}: {}", case.name, e))?;
            let planned = apply_passes(&m, DEFAULT_PASSES)
                .map_err(|e| format!("{}: {}", case.name, e))?;
            let prog = lower_to_vm(&planned).map_err(|e| format!("{}: {}", case.name, e))?;
            let want = expected_site(&prog, &planned, &case.site)
                .map_err(|e| format!("{}: {}", case.name, e))?;
            match run_vm(&prog, "main", &case.args, &registry) {
                Err(VmError::ShapeCheckFailed { site, .. }) if site == want => {}
                Err(VmError::ShapeCheckFailed { site, .. }) => {
                    return Err(format!("{}: failed at site {}, expected {}", case.name, site, want));
                }
                Err(other) => return Err(format!("{}: wrong error: {}", case.name, other)),
                Ok(v) => {
                    return Err(format!("{}: returned {} instead of failing", case.name, v.0.describe()))
                }
            }
        }
        Ok("10 adversarial inputs all stopped by ShapeCheckFailed at the right site".into())
    });
}

// ---------------------------------------------------------------------------

fn check_symexpr_suite() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut checked = 0usize;
    while checked < 10_000 {
        let e = common::rand_expr(&mut rng, 4);
        let env: HashMap<u32, i64> = {
            use rand::Rng as _;
            (0..3).map(|i| (i, rng.gen_range(-6..=6))).collect()
        };
        let norm = normalize(&e);
        if normalize(&norm) != norm {
            return Err(format!("normalize not idempotent on {}", e));
        }
        if let Ok(v) = evaluate(&e, &env) {
            match evaluate(&norm, &env) {
                Ok(w) if w == v => {}
                other => {
                    return Err(format!("{} evaluates to {}, normalized gives {:?}", e, v, other))
                }
            }
        }
        checked += 1;
    }
    Ok(())
}

fn check_subsumption_suite() -> Result<(), String> {
    use Provability::*;
    let n = SymExpr::var(SymVar::new("n", 0));
    let m = SymExpr::var(SymVar::new("m", 1));
    let known = |dims: Vec<SymExpr>| ShapeSpec::Known(dims);
    let tensor = |spec: ShapeSpec, dt: Option<DType>| Annotation::Tensor { shape: spec, dtype: dt };
    let pool: Vec<Annotation> = vec![
        Annotation::Object,
        tensor(ShapeSpec::Unconstrained, None),
        tensor(ShapeSpec::Unconstrained, Some(DType::F32)),
        tensor(ShapeSpec::RankOnly(1), Some(DType::F32)),
        tensor(ShapeSpec::RankOnly(2), Some(DType::F32)),
        tensor(known(vec![n.clone()]), Some(DType::F32)),
        tensor(known(vec![SymExpr::add(n.clone(), SymExpr::constant(0))]), Some(DType::F32)),
        tensor(known(vec![n.clone()]), None),
        tensor(known(vec![n.clone()]), Some(DType::I64)),
        tensor(known(vec![m.clone()]), Some(DType::F32)),
        tensor(known(vec![SymExpr::mul(SymExpr::constant(2), n.clone())]), Some(DType::F32)),
        tensor(known(vec![n.clone(), m.clone()]), Some(DType::F32)),
        tensor(known(vec![n.clone(), SymExpr::constant(4)]), Some(DType::F32)),
        tensor(known(vec![SymExpr::constant(4)]), Some(DType::Bool)),
        Annotation::Shape { spec: known(vec![n.clone(), SymExpr::constant(4)]) },
        Annotation::Shape { spec: ShapeSpec::RankOnly(2) },
        Annotation::Shape { spec: ShapeSpec::Unconstrained },
        Annotation::Tuple(vec![
            tensor(known(vec![n.clone()]), Some(DType::F32)),
            Annotation::Object,
        ]),
        Annotation::Tuple(vec![
            tensor(ShapeSpec::RankOnly(1), Some(DType::F32)),
            Annotation::Object,
        ]),
        Annotation::Tuple(vec![tensor(known(vec![m]), Some(DType::F32))]),
    ];

    for a in &pool {
        if subsumes(a, a) != ProvablyEqual {
            return Err(format!("not reflexive on {}", annotation_str(a)));
        }
        if subsumes(a, &Annotation::Object) != ProvablyEqual {
            return Err(format!("Object is not above {}", annotation_str(a)));
        }
    }
    for a in &pool {
        for b in &pool {
            let ab = subsumes(a, b);
            for c in &pool {
                if ab == ProvablyEqual && subsumes(b, c) == ProvablyEqual {
                    if subsumes(a, c) != ProvablyEqual {
                        return Err(format!(
                            "transitivity fails: {} <= {} <= {}",
                            annotation_str(a),
                            annotation_str(b),
                            annotation_str(c)
                        ));
                    }
                }
                if ab == ProvablyEqual && subsumes(b, a) == ProvablyEqual {
                    if subsumes(a, c) != subsumes(b, c) || subsumes(c, a) != subsumes(c, b) {
                        return Err(format!(
                            "equivalent {} and {} disagree against {}",
                            annotation_str(a),
                            annotation_str(b),
                            annotation_str(c)
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_round_trip_suite() -> Result<(), String> {
    let mut sources: Vec<(String, String)> = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0dd);
    for i in 0..100 {
        sources.push((format!("generated #{}", i), gen_module(&mut rng)));
    }
    for (name, src) in sources {
        let m1 = parse_module(&src).map_err(|e| format!("{}: {}", name, e))?;
        let p1 = print_module(&m1);
        let m2 = parse_module(&p1).map_err(|e| format!("{}: reparse: {}", name, e))?;
        if print_module(&m2) != p1 {
            return Err(format!("{}: printed form is not a fixpoint", name));
        }
    }
    Ok(())
}

fn check_pass_composition_suite() -> Result<(), String> {
    for (name, src) in corpus() {
        let m = parse_module(&src).map_err(|e| format!("{}: {}", name, e))?;
        let (args, env) = synth_args(&m, "main", 3, 7).map_err(|e| format!("{}: {}", name, e))?;
        let want =
            interpret(&m, "main", &args, &env).map_err(|e| format!("{}: {}", name, e))?;
        for len in 0..=DEFAULT_PASSES.len() {
            let prefix = &DEFAULT_PASSES[..len];
            let staged =
                apply_passes(&m, prefix).map_err(|e| format!("{} {:?}: {}", name, prefix, e))?;
            let got = interpret(&staged, "main", &args, &env)
                .map_err(|e| format!("{} {:?}: {}", name, prefix, e))?;
            values_close(&got, &want, 1e-5).map_err(|e| format!("{} {:?}: {}", name, prefix, e))?;
        }
    }
    Ok(())
}

#[test]
fn criterion_8_property_suites() {
    report(8, "property suites", Duration::from_secs(60), || {
        check_symexpr_suite().map_err(|e| format!("symexpr: {}", e))?;
        check_subsumption_suite().map_err(|e| format!("subsumption: {}", e))?;
        check_round_trip_suite().map_err(|e| format!("round-trip: {}", e))?;
        for (name, src, want) in classify_cases() {
            let got = classify_only_prim(src);
            if got != want {
                return Err(format!("classify: {} -> {:?}, expected {:?}", name, got, want));
            }
        }
        check_pass_composition_suite().map_err(|e| format!("pass composition: {}", e))?;
        Ok("symexpr (10,000 cases), subsumption laws, round-trips, classify, composition".into())
    });
}
