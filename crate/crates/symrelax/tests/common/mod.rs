//! Helpers shared by the integration suites: corpus loading, deterministic
//! input synthesis, full-pipeline compilation, and differential comparison.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

use symrelax::deduce::annotate_module;
use symrelax::ir::{Annotation, DType, Module, ShapeSpec};
use symrelax::passes;
use symrelax::symexpr::evaluate;
use symrelax::tensor::Tensor;
use symrelax::text::parse_module;
use symrelax::vm::{
    default_library_registry, interpret, lower_to_vm, run_vm, ExecStats, RuntimeValue, VMProgram,
};

pub fn corpus() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/corpus");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).expect("corpus directory exists") {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "srx") {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((name, std::fs::read_to_string(&path).unwrap()));
        }
    }
    out.sort();
    assert!(out.len() >= 25, "corpus holds {} programs", out.len());
    out
}

/// Deterministic splitmix-style generator so synthesized inputs depend only
/// on the seed and parameter order.
pub struct Rng(pub u64);

impl Rng {
    pub fn next(&mut self) -> u64 {
        let mut x = self.0.wrapping_add(0x9e3779b97f4a7c15);
        self.0 = x;
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }

    pub fn f32_unit(&mut self) -> f32 {
        (self.next() >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
    }
}

pub fn param_vars(ann: &Annotation, out: &mut Vec<u32>) {
    let spec = match ann {
        Annotation::Tensor { shape, .. } => Some(shape),
        Annotation::Shape { spec } => Some(spec),
        Annotation::Tuple(elems) => {
            for a in elems {
                param_vars(a, out);
            }
            None
        }
        _ => None,
    };
    if let Some(ShapeSpec::Known(dims)) = spec {
        for d in dims {
            for v in d.vars() {
                out.push(v.id);
            }
        }
    }
}

/// Bind each symbolic variable appearing in the parameters of `entry` to
/// `value` and synthesize inputs. Variables introduced by casts stay free.
pub fn synth_args(
    m: &Module,
    entry: &str,
    value: i64,
    seed: u64,
) -> Result<(Vec<RuntimeValue>, HashMap<u32, i64>), String> {
    let f = m.graph_funcs.get(entry).ok_or_else(|| format!("no entry `{}`", entry))?;
    let mut env = HashMap::new();
    let mut ids = Vec::new();
    for (_, ann) in &f.params {
        param_vars(ann, &mut ids);
    }
    for id in ids {
        env.insert(id, value);
    }
    let mut rng = Rng(seed);
    let mut args = Vec::with_capacity(f.params.len());
    for (name, ann) in &f.params {
        args.push(synth_value(name, ann, &env, &mut rng)?);
    }
    Ok((args, env))
}

fn synth_value(
    name: &str,
    ann: &Annotation,
    env: &HashMap<u32, i64>,
    rng: &mut Rng,
) -> Result<RuntimeValue, String> {
    match ann {
        Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype } => {
            let mut shape = Vec::with_capacity(dims.len());
            for d in dims {
                shape.push(
                    evaluate(d, env).map_err(|e| format!("sizing `{}`: {}", name, e))?,
                );
            }
            let dt = dtype.unwrap_or(DType::F32);
            let t = Tensor::zeros(dt, shape);
            for i in 0..t.num_elements() {
                match dt {
                    DType::F32 => t.set_f32(i, rng.f32_unit()),
                    DType::I64 => t.set_i64(i, (rng.next() % 10) as i64),
                    DType::Bool => t.set_bool(i, rng.next() % 2 == 0),
                }
            }
            Ok(RuntimeValue::Tensor(t))
        }
        Annotation::Shape { spec: ShapeSpec::Known(dims) } => {
            let mut out = Vec::with_capacity(dims.len());
            for d in dims {
                out.push(evaluate(d, env).map_err(|e| format!("sizing `{}`: {}", name, e))?);
            }
            Ok(RuntimeValue::Shape(out))
        }
        Annotation::Tuple(elems) => {
            let mut vals = Vec::with_capacity(elems.len());
            for (i, a) in elems.iter().enumerate() {
                vals.push(synth_value(&format!("{}.{}", name, i), a, env, rng)?);
            }
            Ok(RuntimeValue::Tuple(vals))
        }
        other => Err(format!("cannot synthesize `{}` for {:?}", name, other)),
    }
}

pub const DEFAULT_PASSES: &[&str] =
    &["legalize", "fuse", "fuse-tir", "lower-libs", "plan-memory"];

/// Run the annotated module through a named pass prefix.
pub fn apply_passes(m: &Module, names: &[&str]) -> Result<Module, String> {
    let (mut m, _) = annotate_module(m).map_err(|e| e.to_string())?;
    for name in names {
        m = match *name {
            "legalize" => passes::legalize(&m).map_err(|e| e.to_string())?,
            "fuse" => passes::fuse_ops(&m, &[]).map_err(|e| e.to_string())?,
            "fuse-tir" => passes::fuse_tensor_ir(&m).map_err(|e| e.to_string())?,
            "lower-libs" => passes::lower_to_library(&m, &passes::default_registry())
                .map_err(|e| e.to_string())?,
            "plan-memory" => passes::plan_memory(&m).map_err(|e| e.to_string())?.0,
            other => return Err(format!("unknown pass `{}`", other)),
        };
    }
    Ok(m)
}

pub fn compile(src: &str) -> Result<VMProgram, String> {
    let m = parse_module(src).map_err(|e| e.to_string())?;
    let planned = apply_passes(&m, DEFAULT_PASSES)?;
    lower_to_vm(&planned).map_err(|e| e.to_string())
}

/// Combined absolute and relative tolerance over f32 payloads; exact for
/// integers, booleans, shapes, and structure.
pub fn values_close(a: &RuntimeValue, b: &RuntimeValue, rtol: f64) -> Result<(), String> {
    match (a, b) {
        (RuntimeValue::Tensor(x), RuntimeValue::Tensor(y)) => {
            if x.dims != y.dims || x.dtype != y.dtype {
                return Err(format!("{} vs {}", a.describe(), b.describe()));
            }
            for i in 0..x.num_elements() {
                match x.dtype {
                    DType::F32 => {
                        let (p, q) = (x.get_f32(i) as f64, y.get_f32(i) as f64);
                        let tol = rtol + rtol * p.abs().max(q.abs());
                        if !(p - q).abs().le(&tol) {
                            return Err(format!("element {}: {} vs {}", i, p, q));
                        }
                    }
                    DType::I64 => {
                        if x.get_i64(i) != y.get_i64(i) {
                            return Err(format!(
                                "element {}: {} vs {}",
                                i,
                                x.get_i64(i),
                                y.get_i64(i)
                            ));
                        }
                    }
                    DType::Bool => {
                        if x.get_bool(i) != y.get_bool(i) {
                            return Err(format!("element {} differs", i));
                        }
                    }
                }
            }
            Ok(())
        }
        (RuntimeValue::Shape(x), RuntimeValue::Shape(y)) => {
            if x == y {
                Ok(())
            } else {
                Err(format!("{:?} vs {:?}", x, y))
            }
        }
        (RuntimeValue::Tuple(x), RuntimeValue::Tuple(y)) => {
            if x.len() != y.len() {
                return Err(format!("tuple lengths {} vs {}", x.len(), y.len()));
            }
            for (p, q) in x.iter().zip(y) {
                values_close(p, q, rtol)?;
            }
            Ok(())
        }
        _ => Err(format!("{} vs {}", a.describe(), b.describe())),
    }
}

/// Emit a random but syntactically valid module: 1-3 params over sym vars,
/// a chain of operator bindings in plain or dataflow form, optional
/// annotations and a match_cast, returning the last binding.
pub fn gen_module(rng: &mut ChaCha8Rng) -> String {
    let dims = ["n", "m", "4", "2*n", "n + 1", "8"];
    let unary = ["exp", "relu", "sum"];
    let binary = ["add", "mul", "sub", "divide", "matmul"];
    let gen_ann = |rng: &mut ChaCha8Rng| {
        let rank = rng.gen_range(1..=2);
        let ds: Vec<&str> = (0..rank).map(|_| dims[rng.gen_range(0..dims.len())]).collect();
        let tail = if rank == 1 { "," } else { "" };
        format!("Tensor(({}{}), f32)", ds.join(", "), tail)
    };

    let num_params = rng.gen_range(1..=3);
    let params: Vec<String> =
        (0..num_params).map(|i| format!("p{}: {}", i, gen_ann(rng))).collect();

    let mut lines = Vec::new();
    let mut vars: Vec<String> = (0..num_params).map(|i| format!("p{}", i)).collect();
    let steps = rng.gen_range(1..=6);
    for i in 0..steps {
        let v = format!("v{}", i);
        let expr = if rng.gen_bool(0.5) || vars.len() < 2 {
            let op = unary[rng.gen_range(0..unary.len())];
            format!("{}({})", op, vars[rng.gen_range(0..vars.len())])
        } else {
            let op = binary[rng.gen_range(0..binary.len())];
            let a = &vars[rng.gen_range(0..vars.len())];
            let b = &vars[rng.gen_range(0..vars.len())];
            format!("{}({}, {})", op, a, b)
        };
        let line = match rng.gen_range(0..3) {
            0 => format!("  {} = {};", v, expr),
            1 => format!("  {}: {} = {};", v, gen_ann(rng), expr),
            _ => format!("  {} = match_cast({}, {});", v, expr, gen_ann(rng)),
        };
        lines.push(line);
        vars.push(v);
    }
    let body = if rng.gen_bool(0.5) {
        let indented: Vec<String> = lines.iter().map(|l| format!("  {}", l)).collect();
        format!("  df {{\n{}\n  }}", indented.join("\n"))
    } else {
        lines.join("\n")
    };
    format!(
        "fn main({}) -> Tensor sym(n, m) {{\n{}\n  return {};\n}}\n",
        params.join(", "),
        body,
        vars.last().unwrap()
    )
}

/// Random symbolic expression over variables n, m, k (ids 0..3).
pub fn rand_expr(rng: &mut ChaCha8Rng, depth: u32) -> symrelax::symexpr::SymExpr {
    use symrelax::symexpr::{SymExpr, SymVar};
    if depth == 0 || rng.gen_bool(0.3) {
        if rng.gen_bool(0.5) {
            SymExpr::constant(rng.gen_range(-5..=5))
        } else {
            let i = rng.gen_range(0u32..3);
            SymExpr::var(SymVar::new(["n", "m", "k"][i as usize], i))
        }
    } else {
        let a = rand_expr(rng, depth - 1);
        let b = rand_expr(rng, depth - 1);
        match rng.gen_range(0..7) {
            0 => SymExpr::add(a, b),
            1 => SymExpr::sub(a, b),
            2 => SymExpr::mul(a, b),
            3 => SymExpr::floordiv(a, b),
            4 => SymExpr::modulo(a, b),
            5 => SymExpr::max(a, b),
            _ => SymExpr::min(a, b),
        }
    }
}

/// Golden table: single-operator sources and the pattern kind of the kernel
/// that legalization derives for them.
pub fn classify_cases() -> Vec<(&'static str, &'static str, symrelax::tprog::PatternKind)> {
    use symrelax::tprog::PatternKind::*;
    vec![
        (
            "add",
            "fn main(x: Tensor((n, 4), f32), y: Tensor((n, 4), f32)) -> Tensor sym(n) {\n  r = add(x, y);\n  return r;\n}\n",
            ElementWise,
        ),
        (
            "exp",
            "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n  r = exp(x);\n  return r;\n}\n",
            ElementWise,
        ),
        (
            "broadcast add",
            "fn main(x: Tensor((n, 4), f32), y: Tensor((1, 4), f32)) -> Tensor sym(n) {\n  r = add(x, y);\n  return r;\n}\n",
            Broadcast,
        ),
        (
            "permute",
            "fn main(x: Tensor((n, m), f32)) -> Tensor sym(n, m) {\n  r = permute_dims(x, axes=(1, 0));\n  return r;\n}\n",
            Injective,
        ),
        (
            "flatten",
            "fn main(x: Tensor((n, 4), f32)) -> Tensor sym(n) {\n  r = flatten(x);\n  return r;\n}\n",
            Injective,
        ),
        (
            "sum",
            "fn main(x: Tensor((n, 4), f32)) -> Tensor sym(n) {\n  r = sum(x, axis=0);\n  return r;\n}\n",
            Reduction,
        ),
        (
            "matmul",
            "fn main(x: Tensor((n, m), f32), y: Tensor((m, n), f32)) -> Tensor sym(n, m) {\n  r = matmul(x, y);\n  return r;\n}\n",
            Reduction,
        ),
    ]
}

/// Legalize a single-op module and classify the one derived kernel.
pub fn classify_only_prim(src: &str) -> symrelax::tprog::PatternKind {
    let m = parse_module(src).unwrap();
    let m = apply_passes(&m, &["legalize"]).unwrap();
    assert_eq!(m.prim_funcs.len(), 1, "expected a single derived kernel");
    symrelax::tprog::classify(m.prim_funcs.values().next().unwrap())
}

/// interpret(original) versus run_vm(full pipeline) on synthesized inputs.
pub fn differential(
    src: &str,
    program: &VMProgram,
    binding: i64,
    seed: u64,
) -> Result<ExecStats, String> {
    let m = parse_module(src).map_err(|e| e.to_string())?;
    let (args, env) = synth_args(&m, "main", binding, seed)?;
    let want = interpret(&m, "main", &args, &env)
        .map_err(|e| format!("interpret: {}", e))?;
    let registry = default_library_registry();
    let (got, stats) =
        run_vm(program, "main", &args, &registry).map_err(|e| format!("vm: {}", e))?;
    values_close(&got, &want, 1e-5)?;
    Ok(stats)
}
