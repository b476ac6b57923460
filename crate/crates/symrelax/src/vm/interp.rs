//! Big-step reference interpreter over graph-level modules at any stage of
//! lowering. It is the semantic oracle the compiled VM is tested against.

use std::collections::HashMap;

use crate::ir::{Annotation, Binding, Body, Expr, Module, ShapeSpec};
use crate::symexpr::{evaluate, solve_linear, SymExpr};
use crate::tensor::{new_storage, Tensor};
use crate::text::annotation_str;
use crate::tprog::exec_prim;

use super::registry::{default_library_registry, LibraryRegistry, Routine};
use super::{ops, truthy, RuntimeValue, VmError};

/// Evaluate `entry` on concrete arguments. `sym_env` pre-binds symbolic
/// variables that are not derivable from argument shapes.
pub fn interpret(
    m: &Module,
    entry: &str,
    args: &[RuntimeValue],
    sym_env: &HashMap<u32, i64>,
) -> Result<RuntimeValue, VmError> {
    let registry = default_library_registry();
    Interp { m, registry: &registry, next_site: 0 }.call(entry, args, sym_env)
}

/// Where a shape obligation came from, which picks the error flavor.
enum CheckCtx<'a> {
    Param(&'a str),
    Cast,
}

enum DimOutcome {
    Ok,
    Mismatch(i64),
    Unknown,
}

struct Interp<'a> {
    m: &'a Module,
    registry: &'a LibraryRegistry,
    next_site: usize,
}

impl<'a> Interp<'a> {
    fn call(
        &mut self,
        entry: &str,
        args: &[RuntimeValue],
        sym_env: &HashMap<u32, i64>,
    ) -> Result<RuntimeValue, VmError> {
        let f = self
            .m
            .graph_funcs
            .get(entry)
            .ok_or_else(|| VmError::UnknownEntry(entry.to_string()))?;
        if args.len() != f.params.len() {
            return Err(VmError::Arity {
                name: entry.to_string(),
                expected: f.params.len(),
                got: args.len(),
            });
        }
        let mut shapes = sym_env.clone();
        let mut env: HashMap<String, RuntimeValue> = HashMap::new();
        // First sweep binds bare dimension variables, the second verifies
        // every declared dimension, so a later parameter can bind a variable
        // an earlier composite dimension needs.
        for ((_, ann), v) in f.params.iter().zip(args) {
            bind_dims(ann, v, &mut shapes);
        }
        for ((name, ann), v) in f.params.iter().zip(args) {
            self.check_value(ann, v, &mut shapes, &CheckCtx::Param(name))?;
        }
        for ((name, _), v) in f.params.iter().zip(args) {
            env.insert(name.clone(), v.clone());
        }
        self.eval_body(&f.body, &mut env, &mut shapes)
    }

    fn site(&mut self) -> usize {
        let s = self.next_site;
        self.next_site += 1;
        s
    }

    fn fail(
        &mut self,
        ann: &Annotation,
        v: &RuntimeValue,
    ) -> VmError {
        VmError::ShapeCheckFailed {
            site: self.site(),
            expected: annotation_str(ann),
            actual: v.describe(),
        }
    }

    /// Verify a runtime value against an annotation, binding any still-free
    /// dimension variables it determines.
    fn check_value(
        &mut self,
        ann: &Annotation,
        v: &RuntimeValue,
        shapes: &mut HashMap<u32, i64>,
        ctx: &CheckCtx,
    ) -> Result<(), VmError> {
        match ann {
            Annotation::Object | Annotation::Callable { .. } => Ok(()),
            Annotation::Tensor { shape, dtype } => {
                let RuntimeValue::Tensor(t) = v else { return Err(self.fail(ann, v)) };
                if let Some(dt) = dtype {
                    if t.dtype != *dt {
                        return Err(self.fail(ann, v));
                    }
                }
                self.check_spec(ann, shape, &t.dims.clone(), v, shapes, ctx)
            }
            Annotation::Shape { spec } => {
                let RuntimeValue::Shape(dims) = v else { return Err(self.fail(ann, v)) };
                self.check_spec(ann, spec, &dims.clone(), v, shapes, ctx)
            }
            Annotation::Tuple(elems) => {
                let RuntimeValue::Tuple(vals) = v else { return Err(self.fail(ann, v)) };
                if vals.len() != elems.len() {
                    return Err(self.fail(ann, v));
                }
                for (a, x) in elems.iter().zip(vals) {
                    self.check_value(a, x, shapes, ctx)?;
                }
                Ok(())
            }
        }
    }

    fn check_spec(
        &mut self,
        ann: &Annotation,
        spec: &ShapeSpec,
        actual: &[i64],
        v: &RuntimeValue,
        shapes: &mut HashMap<u32, i64>,
        ctx: &CheckCtx,
    ) -> Result<(), VmError> {
        match spec {
            ShapeSpec::Unconstrained => Ok(()),
            ShapeSpec::RankOnly(r) => {
                if actual.len() != *r {
                    return Err(self.fail(ann, v));
                }
                Ok(())
            }
            ShapeSpec::Known(dims) => {
                if actual.len() != dims.len() {
                    return Err(self.fail(ann, v));
                }
                for (i, (d, got)) in dims.iter().zip(actual).enumerate() {
                    match check_dim(d, *got, shapes) {
                        DimOutcome::Ok | DimOutcome::Unknown => {}
                        DimOutcome::Mismatch(expected) => {
                            return Err(match ctx {
                                CheckCtx::Param(name) => VmError::ShapeCheckFailed {
                                    site: self.next_site,
                                    expected: format!("`{}` dim {} = {}", name, i, expected),
                                    actual: got.to_string(),
                                },
                                CheckCtx::Cast => self.fail(ann, v),
                            })
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn eval_body(
        &mut self,
        body: &Body,
        env: &mut HashMap<String, RuntimeValue>,
        shapes: &mut HashMap<u32, i64>,
    ) -> Result<RuntimeValue, VmError> {
        for block in &body.blocks {
            for b in block.bindings() {
                match b {
                    Binding::Bind { var, ann, value, .. } => {
                        let v = self.eval_expr(value, env, shapes)?;
                        if let Some(a) = ann {
                            bind_dims(a, &v, shapes);
                            self.check_value(a, &v, shapes, &CheckCtx::Cast)?;
                        }
                        env.insert(var.clone(), v);
                    }
                    Binding::MatchCast { var, ann, value, .. } => {
                        let v = self.eval_expr(value, env, shapes)?;
                        bind_dims(ann, &v, shapes);
                        self.check_value(ann, &v, shapes, &CheckCtx::Cast)?;
                        env.insert(var.clone(), v);
                    }
                }
            }
        }
        self.eval_expr(&body.result, env, shapes)
    }

    fn eval_expr(
        &mut self,
        e: &Expr,
        env: &mut HashMap<String, RuntimeValue>,
        shapes: &mut HashMap<u32, i64>,
    ) -> Result<RuntimeValue, VmError> {
        match e {
            Expr::Var(n) => env
                .get(n)
                .cloned()
                .ok_or_else(|| VmError::Invalid(format!("unbound variable `{}`", n))),
            Expr::ConstTensor { dims, data } => {
                Ok(RuntimeValue::Tensor(Tensor::from_const(dims, data)))
            }
            Expr::ShapeLit(dims) => {
                let mut out = Vec::with_capacity(dims.len());
                for d in dims {
                    out.push(eval_sym(d, shapes)?);
                }
                Ok(RuntimeValue::Shape(out))
            }
            Expr::TupleMake(elems) => {
                let mut out = Vec::with_capacity(elems.len());
                for x in elems {
                    out.push(self.eval_expr(x, env, shapes)?);
                }
                Ok(RuntimeValue::Tuple(out))
            }
            Expr::TupleGet(x, i) => match self.eval_expr(x, env, shapes)? {
                RuntimeValue::Tuple(elems) if *i < elems.len() => Ok(elems[*i].clone()),
                other => Err(VmError::Invalid(format!(
                    "tuple projection .{} of {}",
                    i,
                    other.describe()
                ))),
            },
            Expr::CallOp { op, attrs, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval_expr(a, env, shapes)?);
                }
                ops::apply_op(*op, attrs, &vals).map_err(VmError::Invalid)
            }
            Expr::CallFunc { callee, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval_expr(a, env, shapes)?);
                }
                self.call(callee, &vals, &HashMap::new())
            }
            Expr::CallTir { prim, args, out_ann } => {
                let p = self
                    .m
                    .prim_funcs
                    .get(prim)
                    .ok_or_else(|| VmError::Invalid(format!("unknown tensor program `{}`", prim)))?;
                let inputs = self.tensor_args(args, env, shapes)?;
                let (outs, value) = alloc_from_ann(out_ann, shapes)?;
                let mut buffers = inputs;
                buffers.extend(outs);
                exec_prim(p, &buffers, shapes).map_err(|source| VmError::Kernel {
                    context: format!("kernel `{}`", prim),
                    source,
                })?;
                Ok(value)
            }
            Expr::CallDpsLibrary { extern_name, args, out_ann } => {
                let routine = self
                    .registry
                    .get(extern_name)
                    .ok_or_else(|| VmError::UnresolvedExtern(extern_name.clone()))?;
                let inputs = self.tensor_args(args, env, shapes)?;
                match routine {
                    Routine::Dyn(run) => run(&inputs)
                        .map(RuntimeValue::Tensor)
                        .map_err(|message| VmError::Library {
                            context: "library call".into(),
                            name: extern_name.clone(),
                            message,
                        }),
                    Routine::Dps(run) => {
                        let (outs, value) = alloc_from_ann(out_ann, shapes)?;
                        run(&inputs, &outs).map_err(|message| VmError::Library {
                            context: "library call".into(),
                            name: extern_name.clone(),
                            message,
                        })?;
                        Ok(value)
                    }
                }
            }
            Expr::If { cond, then_body, else_body } => {
                let c = self.eval_expr(cond, env, shapes)?;
                let body = if truthy(&c)? { then_body } else { else_body };
                let mut env2 = env.clone();
                let mut shapes2 = shapes.clone();
                self.eval_body(body, &mut env2, &mut shapes2)
            }
            Expr::AllocStorage { size_bytes, .. } => {
                let size = eval_sym(size_bytes, shapes)?;
                if size < 0 {
                    return Err(VmError::Invalid(format!("negative storage size {}", size)));
                }
                Ok(RuntimeValue::Storage(new_storage(size as usize)))
            }
            Expr::AllocTensor { storage, dims, dtype } => {
                let s = match self.eval_expr(storage, env, shapes)? {
                    RuntimeValue::Storage(s) => s,
                    other => {
                        return Err(VmError::Invalid(format!(
                            "alloc_tensor over {}",
                            other.describe()
                        )))
                    }
                };
                let mut shape = Vec::with_capacity(dims.len());
                for d in dims {
                    shape.push(eval_sym(d, shapes)?);
                }
                let count: i64 = shape.iter().product();
                if count as usize * dtype.size_bytes() > s.borrow().len() {
                    return Err(VmError::Invalid("tensor view exceeds its storage".into()));
                }
                Ok(RuntimeValue::Tensor(Tensor {
                    dtype: *dtype,
                    dims: shape,
                    storage: s,
                    offset: 0,
                }))
            }
            Expr::KernelCall { prim, args, dests } => {
                let p = self
                    .m
                    .prim_funcs
                    .get(prim)
                    .ok_or_else(|| VmError::Invalid(format!("unknown tensor program `{}`", prim)))?;
                let mut buffers = self.tensor_args(args, env, shapes)?;
                let outs = self.tensor_args(dests, env, shapes)?;
                let first = outs
                    .first()
                    .cloned()
                    .ok_or_else(|| VmError::Invalid("kernel call with no destinations".into()))?;
                buffers.extend(outs);
                exec_prim(p, &buffers, shapes).map_err(|source| VmError::Kernel {
                    context: format!("kernel `{}`", prim),
                    source,
                })?;
                Ok(RuntimeValue::Tensor(first))
            }
            Expr::LibraryCall { extern_name, args, dests } => {
                let routine = self
                    .registry
                    .get(extern_name)
                    .ok_or_else(|| VmError::UnresolvedExtern(extern_name.clone()))?;
                let Routine::Dps(run) = routine else {
                    return Err(VmError::Invalid(format!(
                        "library `{}` allocates its own output and cannot take destinations",
                        extern_name
                    )));
                };
                let inputs = self.tensor_args(args, env, shapes)?;
                let outs = self.tensor_args(dests, env, shapes)?;
                let first = outs
                    .first()
                    .cloned()
                    .ok_or_else(|| VmError::Invalid("library call with no destinations".into()))?;
                run(&inputs, &outs).map_err(|message| VmError::Library {
                    context: "library call".into(),
                    name: extern_name.clone(),
                    message,
                })?;
                Ok(RuntimeValue::Tensor(first))
            }
        }
    }

    fn tensor_args(
        &mut self,
        args: &[Expr],
        env: &mut HashMap<String, RuntimeValue>,
        shapes: &mut HashMap<u32, i64>,
    ) -> Result<Vec<Tensor>, VmError> {
        let mut out = Vec::with_capacity(args.len());
        for a in args {
            match self.eval_expr(a, env, shapes)? {
                RuntimeValue::Tensor(t) => out.push(t),
                other => {
                    return Err(VmError::Invalid(format!(
                        "expected a tensor argument, got {}",
                        other.describe()
                    )))
                }
            }
        }
        Ok(out)
    }
}

fn eval_sym(e: &SymExpr, shapes: &HashMap<u32, i64>) -> Result<i64, VmError> {
    evaluate(e, shapes).map_err(|er| VmError::Invalid(er.to_string()))
}

/// Bind bare dimension variables of an annotation from a value's shape.
fn bind_dims(ann: &Annotation, v: &RuntimeValue, shapes: &mut HashMap<u32, i64>) {
    match (ann, v) {
        (Annotation::Tensor { shape: ShapeSpec::Known(dims), .. }, RuntimeValue::Tensor(t))
            if dims.len() == t.dims.len() =>
        {
            for (d, actual) in dims.iter().zip(&t.dims) {
                if let Some(var) = d.as_var() {
                    shapes.entry(var.id).or_insert(*actual);
                }
            }
        }
        (Annotation::Shape { spec: ShapeSpec::Known(dims) }, RuntimeValue::Shape(elems))
            if dims.len() == elems.len() =>
        {
            for (d, actual) in dims.iter().zip(elems) {
                if let Some(var) = d.as_var() {
                    shapes.entry(var.id).or_insert(*actual);
                }
            }
        }
        (Annotation::Tuple(anns), RuntimeValue::Tuple(vals)) if anns.len() == vals.len() => {
            for (a, x) in anns.iter().zip(vals) {
                bind_dims(a, x, shapes);
            }
        }
        _ => {}
    }
}

/// Compare one symbolic dimension against a concrete extent, solving for a
/// single still-free variable when the expression is linear in it.
fn check_dim(d: &SymExpr, actual: i64, shapes: &mut HashMap<u32, i64>) -> DimOutcome {
    match evaluate(d, shapes) {
        Ok(x) => {
            if x == actual {
                DimOutcome::Ok
            } else {
                DimOutcome::Mismatch(x)
            }
        }
        Err(_) => {
            if let Some(var) = d.as_var() {
                shapes.insert(var.id, actual);
                return DimOutcome::Ok;
            }
            if let Some((var, sol)) = solve_linear(d, &SymExpr::constant(actual)) {
                if !shapes.contains_key(&var.id) {
                    if let Ok(val) = evaluate(&sol, shapes) {
                        shapes.insert(var.id, val);
                        // re-check: integer division in the solution may
                        // have rounded
                        return match evaluate(d, shapes) {
                            Ok(x) if x == actual => DimOutcome::Ok,
                            Ok(x) => DimOutcome::Mismatch(x),
                            Err(_) => DimOutcome::Unknown,
                        };
                    }
                }
            }
            DimOutcome::Unknown
        }
    }
}

/// Allocate output buffers described by a (fully known) result annotation.
/// Returns the buffers in kernel parameter order plus the result value.
fn alloc_from_ann(
    ann: &Annotation,
    shapes: &HashMap<u32, i64>,
) -> Result<(Vec<Tensor>, RuntimeValue), VmError> {
    fn one(ann: &Annotation, shapes: &HashMap<u32, i64>) -> Result<Tensor, VmError> {
        match ann {
            Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype: Some(dt) } => {
                let mut shape = Vec::with_capacity(dims.len());
                for d in dims {
                    shape.push(eval_sym(d, shapes)?);
                }
                Ok(Tensor::zeros(*dt, shape))
            }
            other => Err(VmError::Invalid(format!(
                "cannot allocate output for `{}`; dynamic results go through the library registry",
                annotation_str(other)
            ))),
        }
    }
    match ann {
        Annotation::Tuple(elems) => {
            let mut outs = Vec::with_capacity(elems.len());
            for a in elems {
                outs.push(one(a, shapes)?);
            }
            let value =
                RuntimeValue::Tuple(outs.iter().cloned().map(RuntimeValue::Tensor).collect());
            Ok((outs, value))
        }
        _ => {
            let t = one(ann, shapes)?;
            Ok((vec![t.clone()], RuntimeValue::Tensor(t)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deduce::annotate_module;
    use crate::passes;
    use crate::text::parse_module;

    fn tv(t: Tensor) -> RuntimeValue {
        RuntimeValue::Tensor(t)
    }

    fn run(src: &str, args: Vec<RuntimeValue>) -> Result<RuntimeValue, VmError> {
        let m = parse_module(src).unwrap();
        interpret(&m, "main", &args, &HashMap::new())
    }

    #[test]
    fn const_only_function_returns_the_constant() {
        let out = run(
            "fn main() -> Tensor sym() {\n\
               c = const(f32, (2,), [1.5, -2.0]);\n\
               return c;\n\
             }\n",
            vec![],
        )
        .unwrap();
        assert_eq!(out.as_tensor().unwrap().to_f32_vec(), vec![1.5, -2.0]);
    }

    #[test]
    fn flatten_is_row_major() {
        let x = Tensor::from_f32(vec![3, 4], &(0..12).map(|i| i as f32).collect::<Vec<_>>());
        let out = run(
            "fn main(x: Tensor((n, 4), f32)) -> Tensor sym(n) {\n\
               y = flatten(x);\n\
               return y;\n\
             }\n",
            vec![tv(x)],
        )
        .unwrap();
        let t = out.as_tensor().unwrap();
        assert_eq!(t.dims, vec![12]);
        assert_eq!(t.to_f32_vec(), (0..12).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn original_equals_legalized() {
        let src = "fn main(x: Tensor((n, 4), f32), b: Tensor((4,), f32)) -> Tensor sym(n) {\n\
               y = add(x, b);\n\
               z = exp(y);\n\
               w = flatten(z);\n\
               return w;\n\
             }\n";
        let m = parse_module(src).unwrap();
        let (am, _) = annotate_module(&m).unwrap();
        let lm = passes::legalize(&am).unwrap();
        let x = Tensor::from_f32(vec![2, 4], &[0.1, -0.5, 2.0, 1.0, 3.0, -1.5, 0.0, 0.25]);
        let b = Tensor::from_f32(vec![4], &[1.0, 0.0, -1.0, 0.5]);
        let a = interpret(&m, "main", &[tv(x.clone()), tv(b.clone())], &HashMap::new()).unwrap();
        let c = interpret(&lm, "main", &[tv(x), tv(b)], &HashMap::new()).unwrap();
        assert_eq!(a.as_tensor().unwrap().to_f32_vec(), c.as_tensor().unwrap().to_f32_vec());
    }

    #[test]
    fn match_cast_rank_mismatch_fails() {
        let x = Tensor::zeros(crate::ir::DType::F32, vec![2, 3]);
        let err = run(
            "fn main(x: Tensor(f32)) -> Tensor sym(m) {\n\
               y = match_cast(x, Tensor((m,), f32));\n\
               return y;\n\
             }\n",
            vec![tv(x)],
        )
        .unwrap_err();
        assert!(matches!(err, VmError::ShapeCheckFailed { .. }), "{err}");
    }

    #[test]
    fn param_dim_mismatch_names_the_dim() {
        let x = Tensor::zeros(crate::ir::DType::F32, vec![2, 3]);
        let err = run(
            "fn main(x: Tensor((n, n), f32)) -> Tensor sym(n) {\n\
               return x;\n\
             }\n",
            vec![tv(x)],
        )
        .unwrap_err();
        match err {
            VmError::ShapeCheckFailed { expected, actual, .. } => {
                assert!(expected.contains("dim 1 = 2"), "{}", expected);
                assert_eq!(actual, "3");
            }
            other => panic!("expected a failed shape check, got {other}"),
        }
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let a = Tensor::from_f32(vec![2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
        let b = Tensor::from_f32(vec![3, 2], &[1.0, 2.0, -1.0, 0.5, 0.25, -2.0]);
        let out = run(
            "fn main(a: Tensor((n, k), f32), b: Tensor((k, m), f32)) -> Tensor sym(n, k, m) {\n\
               c = matmul(a, b);\n\
               return c;\n\
             }\n",
            vec![tv(a.clone()), tv(b.clone())],
        )
        .unwrap();
        let got = out.as_tensor().unwrap().to_f32_vec();
        for i in 0..2 {
            for j in 0..2 {
                let mut want = 0f64;
                for p in 0..3 {
                    want += a.get_f32(i * 3 + p) as f64 * b.get_f32(p * 2 + j) as f64;
                }
                assert!((got[i * 2 + j] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn if_selects_the_branch() {
        let src = "fn main(x: Tensor((2,), f32), c: Tensor((1,), bool)) -> Tensor sym() {\n\
               r = if c {\n\
                 a = exp(x);\n\
                 return a;\n\
               } else {\n\
                 return x;\n\
               };\n\
               return r;\n\
             }\n";
        let x = Tensor::from_f32(vec![2], &[0.0, 1.0]);
        let yes = Tensor::from_const(&[1], &crate::ir::ConstData::Bool(vec![true]));
        let no = Tensor::from_const(&[1], &crate::ir::ConstData::Bool(vec![false]));
        let a = run(src, vec![tv(x.clone()), tv(yes)]).unwrap();
        let b = run(src, vec![tv(x.clone()), tv(no)]).unwrap();
        assert_eq!(a.as_tensor().unwrap().to_f32_vec(), vec![1.0, 1.0f32.exp()]);
        assert_eq!(b.as_tensor().unwrap().to_f32_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn cross_function_call_evaluates_callee() {
        let out = run(
            "fn inner(x: Tensor((p, q), f32)) -> Tensor sym(p, q) {\n\
               y = flatten(x);\n\
               return y;\n\
             }\n\
             \n\
             fn main(x: Tensor((2, 3), f32)) -> Tensor sym() {\n\
               r = inner(x);\n\
               return r;\n\
             }\n",
            vec![tv(Tensor::from_f32(vec![2, 3], &[1., 2., 3., 4., 5., 6.]))],
        )
        .unwrap();
        assert_eq!(out.as_tensor().unwrap().dims, vec![6]);
    }

    #[test]
    fn full_pipeline_preserves_semantics() {
        let src = "fn main(a: Tensor((n, k), f32), b: Tensor((k, 4), f32), c: Tensor((n, 4), f32)) \
             -> Tensor sym(n, k) {\n\
               df {\n\
                 p = matmul(a, b);\n\
                 q = add(p, c);\n\
                 r = relu(q);\n\
               }\n\
               return r;\n\
             }\n";
        let m = parse_module(src).unwrap();
        let (am, _) = annotate_module(&m).unwrap();
        let m1 = passes::legalize(&am).unwrap();
        let m2 = passes::fuse_ops(&m1, &[]).unwrap();
        let m3 = passes::fuse_tensor_ir(&m2).unwrap();
        let m4 = passes::lower_to_library(&m3, &passes::default_registry()).unwrap();
        let (m5, _) = passes::plan_memory(&m4).unwrap();

        let a = Tensor::from_f32(vec![2, 3], &[1., -2., 0.5, 3., 0., -1.]);
        let b = Tensor::from_f32(
            vec![3, 4],
            &[1., 0., 0.5, -1., 2., 1., 0., 0., -1., 0.5, 1., 2.],
        );
        let c = Tensor::from_f32(vec![2, 4], &[0.1, 0.2, -0.3, 0.4, -0.1, 0.0, 0.25, -2.0]);
        let args = vec![tv(a), tv(b), tv(c)];
        let want = interpret(&m, "main", &args, &HashMap::new()).unwrap();
        for (stage, mm) in [&am, &m1, &m2, &m3, &m4, &m5].iter().enumerate() {
            let got = interpret(mm, "main", &args, &HashMap::new()).unwrap();
            let (w, g) =
                (want.as_tensor().unwrap().to_f32_vec(), got.as_tensor().unwrap().to_f32_vec());
            for (x, y) in w.iter().zip(&g) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "stage {}: {} vs {}", stage, x, y);
            }
        }
    }

    #[test]
    fn legalized_unique_dispatches_to_the_registry() {
        let src = "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n\
               u = unique(x);\n\
               return u;\n\
             }\n";
        let m = parse_module(src).unwrap();
        let (am, _) = annotate_module(&m).unwrap();
        let lm = passes::legalize(&am).unwrap();
        let x = Tensor::from_f32(vec![5], &[3., 1., 3., 2., 1.]);
        let out = interpret(&lm, "main", &[tv(x)], &HashMap::new()).unwrap();
        assert_eq!(out.as_tensor().unwrap().to_f32_vec(), vec![1., 2., 3.]);
    }
}
