//! Forward shape-annotation deduction: per-operator rules, call-boundary
//! unification against callee signatures, and dynamic-check insertion points
//! where static reasoning runs out.

use std::collections::HashMap;

use thiserror::Error;

use crate::ir::{
    subsumes, Annotation, Binding, Block, Body, DType, Expr, Function, Module, OpAttrs, OpName,
    ShapeSpec, SourceSpan,
};
use crate::symexpr::{
    div_exact, normalize, prove_equal, solve_linear, substitute, Provability, SymExpr, SymVar,
};

/// A point where static deduction could not settle a shape question; each
/// site becomes exactly one runtime check in the lowered program.
#[derive(Clone, Debug)]
pub struct CheckSite {
    pub id: usize,
    pub function: String,
    /// Binding variable, `return`, or `call <callee>`.
    pub location: String,
    pub span: SourceSpan,
    pub expected: Annotation,
    pub actual: Annotation,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum DeduceError {
    #[error("annotation conflict in `{function}` at {location}: {message}")]
    AnnotationConflict { function: String, location: String, message: String },
    #[error("call to `{callee}` in `{function}` expects {expected} arguments, got {got}")]
    ArityMismatch { function: String, callee: String, expected: usize, got: usize },
    #[error("call to unknown function `{0}`")]
    UnknownFunction(String),
}

// ---------------------------------------------------------------------------
// Operator rules
// ---------------------------------------------------------------------------

/// Result of one deduction rule: the output annotation, reasons for runtime
/// checks where equality could not be proven, or a proven conflict.
pub struct RuleOutput {
    pub ann: Annotation,
    pub checks: Vec<String>,
    pub conflict: Option<String>,
}

impl RuleOutput {
    fn ok(ann: Annotation) -> RuleOutput {
        RuleOutput { ann, checks: Vec::new(), conflict: None }
    }

    fn check(ann: Annotation, reason: impl Into<String>) -> RuleOutput {
        RuleOutput { ann, checks: vec![reason.into()], conflict: None }
    }

    fn conflict(msg: impl Into<String>) -> RuleOutput {
        RuleOutput { ann: Annotation::Object, checks: Vec::new(), conflict: Some(msg.into()) }
    }
}

pub struct DeductionRule {
    pub op: OpName,
    pub rule: fn(&OpAttrs, &[Annotation]) -> RuleOutput,
}

pub fn rule_table() -> HashMap<OpName, DeductionRule> {
    let entries: [(OpName, fn(&OpAttrs, &[Annotation]) -> RuleOutput); 14] = [
        (OpName::Add, broadcast_rule),
        (OpName::Sub, broadcast_rule),
        (OpName::Mul, broadcast_rule),
        (OpName::Divide, broadcast_rule),
        (OpName::Exp, unary_rule),
        (OpName::Relu, unary_rule),
        (OpName::Matmul, matmul_rule),
        (OpName::Reshape, reshape_rule),
        (OpName::Flatten, flatten_rule),
        (OpName::PermuteDims, permute_rule),
        (OpName::Concat, concat_rule),
        (OpName::Split, split_rule),
        (OpName::Sum, sum_rule),
        (OpName::Unique, unique_rule),
    ];
    entries
        .into_iter()
        .map(|(op, rule)| (op, DeductionRule { op, rule }))
        .collect()
}

pub fn apply_rule(op: OpName, attrs: &OpAttrs, arg_anns: &[Annotation]) -> RuleOutput {
    let f = match op {
        OpName::Add | OpName::Sub | OpName::Mul | OpName::Divide => broadcast_rule,
        OpName::Exp | OpName::Relu => unary_rule,
        OpName::Matmul => matmul_rule,
        OpName::Reshape => reshape_rule,
        OpName::Flatten => flatten_rule,
        OpName::PermuteDims => permute_rule,
        OpName::Concat => concat_rule,
        OpName::Split => split_rule,
        OpName::Sum => sum_rule,
        OpName::Unique => unique_rule,
    };
    f(attrs, arg_anns)
}

fn tensor_of(a: &Annotation) -> Option<(&ShapeSpec, Option<DType>)> {
    a.as_tensor()
}

fn common_dtype(a: Option<DType>, b: Option<DType>) -> Result<Option<DType>, String> {
    match (a, b) {
        (Some(x), Some(y)) if x != y => {
            Err(format!("dtype mismatch: {} vs {}", x.name(), y.name()))
        }
        (Some(x), _) => Ok(Some(x)),
        (_, y) => Ok(y),
    }
}

fn is_one(e: &SymExpr) -> bool {
    prove_equal(e, &SymExpr::constant(1)) == Provability::ProvablyEqual
}

fn broadcast_rule(_attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let (Some((sa, da)), Some((sb, db))) = (tensor_of(&anns[0]), tensor_of(&anns[1])) else {
        return RuleOutput::conflict("binary operator arguments must be tensors");
    };
    let dtype = match common_dtype(da, db) {
        Ok(dt) => dt,
        Err(msg) => return RuleOutput::conflict(msg),
    };
    match (sa, sb) {
        (ShapeSpec::Known(a), ShapeSpec::Known(b)) => {
            let rank = a.len().max(b.len());
            let mut out = Vec::with_capacity(rank);
            for i in 0..rank {
                let x = (i + a.len() >= rank).then(|| &a[i + a.len() - rank]);
                let y = (i + b.len() >= rank).then(|| &b[i + b.len() - rank]);
                let dim = match (x, y) {
                    (Some(x), None) => x.clone(),
                    (None, Some(y)) => y.clone(),
                    (Some(x), Some(y)) => {
                        if is_one(x) {
                            y.clone()
                        } else if is_one(y) {
                            x.clone()
                        } else {
                            match prove_equal(x, y) {
                                Provability::ProvablyEqual => x.clone(),
                                Provability::ProvablyUnequal => {
                                    return RuleOutput::conflict(format!(
                                        "broadcast mismatch: {} vs {}",
                                        x, y
                                    ))
                                }
                                Provability::Unknown => {
                                    return RuleOutput::check(
                                        Annotation::Tensor {
                                            shape: ShapeSpec::RankOnly(rank),
                                            dtype,
                                        },
                                        format!("broadcast dims {} vs {} not provably equal", x, y),
                                    )
                                }
                            }
                        }
                    }
                    (None, None) => unreachable!(),
                };
                out.push(dim);
            }
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Known(out), dtype })
        }
        _ => match (sa.ndim(), sb.ndim()) {
            (Some(ra), Some(rb)) => RuleOutput::ok(Annotation::Tensor {
                shape: ShapeSpec::RankOnly(ra.max(rb)),
                dtype,
            }),
            _ => RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype }),
        },
    }
}

fn unary_rule(_attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    match tensor_of(&anns[0]) {
        Some(_) => RuleOutput::ok(anns[0].clone()),
        None => RuleOutput::conflict("unary operator argument must be a tensor"),
    }
}

fn matmul_rule(_attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let (Some((sa, da)), Some((sb, db))) = (tensor_of(&anns[0]), tensor_of(&anns[1])) else {
        return RuleOutput::conflict("matmul arguments must be tensors");
    };
    let dtype = match common_dtype(da, db) {
        Ok(dt) => dt,
        Err(msg) => return RuleOutput::conflict(msg),
    };
    if sa.ndim().is_some_and(|r| r != 2) || sb.ndim().is_some_and(|r| r != 2) {
        return RuleOutput::conflict("matmul operands must be rank-2");
    }
    match (sa, sb) {
        (ShapeSpec::Known(a), ShapeSpec::Known(b)) => {
            let out = Annotation::Tensor {
                shape: ShapeSpec::Known(vec![a[0].clone(), b[1].clone()]),
                dtype,
            };
            match prove_equal(&a[1], &b[0]) {
                Provability::ProvablyEqual => RuleOutput::ok(out),
                Provability::ProvablyUnequal => RuleOutput::conflict(format!(
                    "matmul inner dims {} vs {} differ",
                    a[1], b[0]
                )),
                Provability::Unknown => RuleOutput::check(
                    out,
                    format!("matmul inner dims {} vs {} not provably equal", a[1], b[0]),
                ),
            }
        }
        _ => RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(2), dtype }),
    }
}

fn reshape_rule(_attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let Some((sx, dt)) = tensor_of(&anns[0]) else {
        return RuleOutput::conflict("reshape input must be a tensor");
    };
    let spec = match &anns[1] {
        Annotation::Shape { spec } => spec,
        _ => return RuleOutput::conflict("reshape target must be a shape value"),
    };
    match spec {
        ShapeSpec::Known(dims) => {
            let out = Annotation::Tensor { shape: ShapeSpec::Known(dims.clone()), dtype: dt };
            if let ShapeSpec::Known(src) = sx {
                let prod = |ds: &[SymExpr]| {
                    normalize(&ds.iter().fold(SymExpr::constant(1), |a, d| {
                        SymExpr::mul(a, d.clone())
                    }))
                };
                match prove_equal(&prod(src), &prod(dims)) {
                    Provability::ProvablyEqual => RuleOutput::ok(out),
                    Provability::ProvablyUnequal => RuleOutput::conflict(format!(
                        "reshape changes element count: {} vs {}",
                        prod(src),
                        prod(dims)
                    )),
                    Provability::Unknown => RuleOutput::check(
                        out,
                        "reshape element count not provably preserved".to_string(),
                    ),
                }
            } else {
                RuleOutput::ok(out)
            }
        }
        ShapeSpec::RankOnly(r) => {
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(*r), dtype: dt })
        }
        ShapeSpec::Unconstrained => {
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype: dt })
        }
    }
}

fn flatten_rule(_attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let Some((sx, dt)) = tensor_of(&anns[0]) else {
        return RuleOutput::conflict("flatten input must be a tensor");
    };
    match sx {
        ShapeSpec::Known(dims) => {
            let count = normalize(
                &dims.iter().fold(SymExpr::constant(1), |a, d| SymExpr::mul(a, d.clone())),
            );
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Known(vec![count]), dtype: dt })
        }
        _ => RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(1), dtype: dt }),
    }
}

fn permute_rule(attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let Some((sx, dt)) = tensor_of(&anns[0]) else {
        return RuleOutput::conflict("permute_dims input must be a tensor");
    };
    match sx {
        ShapeSpec::Known(dims) => {
            let axes: Vec<usize> = match attrs {
                OpAttrs::Axes(a) => a.clone(),
                _ => (0..dims.len()).rev().collect(),
            };
            if axes.len() != dims.len() {
                return RuleOutput::conflict("permute_dims axes rank mismatch");
            }
            let mut seen = vec![false; dims.len()];
            for &a in &axes {
                if a >= dims.len() || seen[a] {
                    return RuleOutput::conflict("permute_dims axes must be a permutation");
                }
                seen[a] = true;
            }
            let out = axes.iter().map(|&a| dims[a].clone()).collect();
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Known(out), dtype: dt })
        }
        ShapeSpec::RankOnly(r) => {
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(*r), dtype: dt })
        }
        ShapeSpec::Unconstrained => {
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype: dt })
        }
    }
}

fn concat_rule(attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let axis = match attrs {
        OpAttrs::Axis(a) => *a,
        _ => 0,
    };
    if anns.is_empty() {
        return RuleOutput::conflict("concat needs at least one argument");
    }
    let mut dtype = None;
    let mut rank: Option<usize> = None;
    let mut all_known = true;
    for a in anns {
        let Some((s, dt)) = tensor_of(a) else {
            return RuleOutput::conflict("concat arguments must be tensors");
        };
        dtype = match common_dtype(dtype, dt) {
            Ok(d) => d,
            Err(msg) => return RuleOutput::conflict(msg),
        };
        match s.ndim() {
            Some(r) => match rank {
                Some(r0) if r0 != r => {
                    return RuleOutput::conflict("concat arguments must share a rank")
                }
                _ => rank = Some(r),
            },
            None => all_known = false,
        }
        if s.known_dims().is_none() {
            all_known = false;
        }
    }
    let Some(rank) = rank else {
        return RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype });
    };
    if axis >= rank {
        return RuleOutput::conflict("concat axis out of range");
    }
    if !all_known {
        return RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(rank), dtype });
    }
    let first = tensor_of(&anns[0]).unwrap().0.known_dims().unwrap();
    let mut checks = Vec::new();
    let mut axis_sum = SymExpr::constant(0);
    for a in anns {
        let dims = tensor_of(a).unwrap().0.known_dims().unwrap();
        for (j, (x, y)) in first.iter().zip(dims).enumerate() {
            if j == axis {
                continue;
            }
            match prove_equal(x, y) {
                Provability::ProvablyEqual => {}
                Provability::ProvablyUnequal => {
                    return RuleOutput::conflict(format!(
                        "concat off-axis dims {} vs {} differ",
                        x, y
                    ))
                }
                Provability::Unknown => checks.push(format!(
                    "concat off-axis dims {} vs {} not provably equal",
                    x, y
                )),
            }
        }
        axis_sum = SymExpr::add(axis_sum, dims[axis].clone());
    }
    let mut out = first.to_vec();
    out[axis] = normalize(&axis_sum);
    RuleOutput {
        ann: Annotation::Tensor { shape: ShapeSpec::Known(out), dtype },
        checks,
        conflict: None,
    }
}

fn split_rule(attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let (sections, axis) = match attrs {
        OpAttrs::SplitArgs { sections, axis } => (*sections, *axis),
        _ => return RuleOutput::conflict("split requires sections and axis attributes"),
    };
    if sections == 0 {
        return RuleOutput::conflict("split needs at least one section");
    }
    let Some((sx, dt)) = tensor_of(&anns[0]) else {
        return RuleOutput::conflict("split input must be a tensor");
    };
    match sx {
        ShapeSpec::Known(dims) => {
            if axis >= dims.len() {
                return RuleOutput::conflict("split axis out of range");
            }
            let part = match div_exact(&dims[axis], sections as i64) {
                Some(p) => p,
                None => {
                    if dims[axis].as_const().is_some() {
                        return RuleOutput::conflict(format!(
                            "dim {} not divisible into {} sections",
                            dims[axis], sections
                        ));
                    }
                    normalize(&SymExpr::floordiv(
                        dims[axis].clone(),
                        SymExpr::constant(sections as i64),
                    ))
                }
            };
            let mut out_dims = dims.clone();
            out_dims[axis] = part;
            let elem = Annotation::Tensor { shape: ShapeSpec::Known(out_dims), dtype: dt };
            RuleOutput::ok(Annotation::Tuple(vec![elem; sections]))
        }
        ShapeSpec::RankOnly(r) => RuleOutput::ok(Annotation::Tuple(vec![
            Annotation::Tensor { shape: ShapeSpec::RankOnly(*r), dtype: dt };
            sections
        ])),
        ShapeSpec::Unconstrained => RuleOutput::ok(Annotation::Tuple(vec![
            Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype: dt };
            sections
        ])),
    }
}

fn sum_rule(attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let axis = match attrs {
        OpAttrs::Axis(a) => *a,
        _ => 0,
    };
    let Some((sx, dt)) = tensor_of(&anns[0]) else {
        return RuleOutput::conflict("sum input must be a tensor");
    };
    match sx {
        ShapeSpec::Known(dims) => {
            if axis >= dims.len() {
                return RuleOutput::conflict("sum axis out of range");
            }
            let out: Vec<SymExpr> = dims
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != axis)
                .map(|(_, d)| d.clone())
                .collect();
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Known(out), dtype: dt })
        }
        ShapeSpec::RankOnly(r) if *r > axis => {
            RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(r - 1), dtype: dt })
        }
        _ => RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype: dt }),
    }
}

fn unique_rule(_attrs: &OpAttrs, anns: &[Annotation]) -> RuleOutput {
    let Some((sx, dt)) = tensor_of(&anns[0]) else {
        return RuleOutput::conflict("unique input must be a tensor");
    };
    if sx.ndim().is_some_and(|r| r != 1) {
        return RuleOutput::conflict("unique is defined on rank-1 input");
    }
    // The output length is data-dependent: rank is all we can say.
    RuleOutput::ok(Annotation::Tensor { shape: ShapeSpec::RankOnly(1), dtype: dt })
}

// ---------------------------------------------------------------------------
// Forward deduction over functions
// ---------------------------------------------------------------------------

struct Deducer<'m> {
    m: &'m Module,
    fname: String,
    next_id: u32,
    site_id: usize,
    checks: Vec<CheckSite>,
    new_vars: Vec<SymVar>,
}

/// Deduce and annotate a single function. Returns the annotated function and
/// the check sites discovered; fresh variables introduced at call boundaries
/// or by data-dependent operators are appended to the function's symbol table.
pub fn deduce_function(m: &Module, fname: &str) -> Result<(Function, Vec<CheckSite>), DeduceError> {
    let mut next_id = m.next_sym_id;
    let mut site_id = 0;
    deduce_function_inner(m, fname, &mut next_id, &mut site_id)
}

fn deduce_function_inner(
    m: &Module,
    fname: &str,
    next_id: &mut u32,
    site_id: &mut usize,
) -> Result<(Function, Vec<CheckSite>), DeduceError> {
    let f = m
        .graph_funcs
        .get(fname)
        .ok_or_else(|| DeduceError::UnknownFunction(fname.to_string()))?;
    let mut d = Deducer {
        m,
        fname: fname.to_string(),
        next_id: *next_id,
        site_id: *site_id,
        checks: Vec::new(),
        new_vars: Vec::new(),
    };
    let mut env: HashMap<String, Annotation> = HashMap::new();
    for (p, ann) in &f.params {
        env.insert(p.clone(), ann.clone());
    }
    let (body, result_ann) = d.deduce_body(&f.body, &mut env)?;

    match subsumes(&result_ann, &f.ret_ann) {
        Provability::ProvablyEqual => {}
        Provability::Unknown => d.record(
            "return",
            f.span,
            f.ret_ann.clone(),
            result_ann,
            "return annotation not statically provable",
        ),
        Provability::ProvablyUnequal => {
            return Err(DeduceError::AnnotationConflict {
                function: d.fname,
                location: "return".into(),
                message: "deduced return annotation contradicts the declared one".into(),
            })
        }
    }

    let mut out = f.clone();
    out.body = body;
    out.sym_vars.extend(d.new_vars);
    *next_id = d.next_id;
    *site_id = d.site_id;
    Ok((out, d.checks))
}

/// Deduce every function of the module in order. Binding annotations are
/// filled in with deduced ones where absent; user annotations are kept.
pub fn annotate_module(m: &Module) -> Result<(Module, Vec<CheckSite>), DeduceError> {
    let mut next_id = m.next_sym_id;
    let mut site_id = 0;
    let mut out = m.clone();
    let mut checks = Vec::new();
    let names: Vec<String> = m.graph_funcs.keys().cloned().collect();
    for name in names {
        let (f, cs) = deduce_function_inner(m, &name, &mut next_id, &mut site_id)?;
        out.graph_funcs[&name] = f;
        checks.extend(cs);
    }
    out.next_sym_id = next_id;
    Ok((out, checks))
}

impl Deducer<'_> {
    fn fresh(&mut self, name: &str) -> SymVar {
        let v = SymVar::new(name, self.next_id);
        self.next_id += 1;
        self.new_vars.push(v.clone());
        v
    }

    fn record(
        &mut self,
        location: &str,
        span: SourceSpan,
        expected: Annotation,
        actual: Annotation,
        reason: impl Into<String>,
    ) {
        self.checks.push(CheckSite {
            id: self.site_id,
            function: self.fname.clone(),
            location: location.to_string(),
            span,
            expected,
            actual,
            reason: reason.into(),
        });
        self.site_id += 1;
    }

    fn conflict(&self, location: &str, message: impl Into<String>) -> DeduceError {
        DeduceError::AnnotationConflict {
            function: self.fname.clone(),
            location: location.to_string(),
            message: message.into(),
        }
    }

    fn deduce_body(
        &mut self,
        body: &Body,
        env: &mut HashMap<String, Annotation>,
    ) -> Result<(Body, Annotation), DeduceError> {
        let mut blocks = Vec::with_capacity(body.blocks.len());
        for block in &body.blocks {
            let bindings = block.bindings();
            let mut out_bindings = Vec::with_capacity(bindings.len());
            for b in bindings {
                out_bindings.push(self.deduce_binding(b, env)?);
            }
            blocks.push(match block {
                Block::Dataflow(_) => Block::Dataflow(out_bindings),
                Block::Plain(_) => Block::Plain(out_bindings),
            });
        }
        let span = body
            .blocks
            .last()
            .and_then(|b| b.bindings().last())
            .map(|b| b.span())
            .unwrap_or_default();
        let (result, ann) = self.deduce_expr(&body.result, "return", span, env)?;
        Ok((Body { blocks, result }, ann))
    }

    fn deduce_binding(
        &mut self,
        b: &Binding,
        env: &mut HashMap<String, Annotation>,
    ) -> Result<Binding, DeduceError> {
        match b {
            Binding::Bind { var, ann, value, span } => {
                let (value, actual) = self.deduce_expr(value, var, *span, env)?;
                let stored;
                let out_ann;
                match ann {
                    None => {
                        stored = actual.clone();
                        out_ann = Some(actual);
                    }
                    Some(user) => {
                        match subsumes(&actual, user) {
                            Provability::ProvablyEqual => {
                                // user annotation verified; keep the more
                                // precise deduced one for downstream reasoning
                                stored = actual;
                            }
                            Provability::Unknown => {
                                self.record(
                                    var,
                                    *span,
                                    user.clone(),
                                    actual,
                                    "binding annotation not statically provable",
                                );
                                stored = user.clone();
                            }
                            Provability::ProvablyUnequal => {
                                return Err(self.conflict(
                                    var,
                                    format!("deduced annotation contradicts `{}`", var),
                                ))
                            }
                        }
                        out_ann = ann.clone();
                    }
                }
                env.insert(var.clone(), stored);
                Ok(Binding::Bind { var: var.clone(), ann: out_ann, value, span: *span })
            }
            Binding::MatchCast { var, ann, value, span } => {
                let (value, actual) = self.deduce_expr(value, var, *span, env)?;
                if subsumes(&actual, ann) == Provability::ProvablyUnequal {
                    return Err(self.conflict(var, "match_cast can never succeed"));
                }
                // every match_cast is a runtime check
                self.record(var, *span, ann.clone(), actual, "match_cast assertion");
                env.insert(var.clone(), ann.clone());
                Ok(Binding::MatchCast { var: var.clone(), ann: ann.clone(), value, span: *span })
            }
        }
    }

    fn deduce_expr(
        &mut self,
        e: &Expr,
        location: &str,
        span: SourceSpan,
        env: &HashMap<String, Annotation>,
    ) -> Result<(Expr, Annotation), DeduceError> {
        let ann = match e {
            Expr::Var(n) => env.get(n).cloned().unwrap_or(Annotation::Object),
            Expr::ConstTensor { dims, data } => Annotation::tensor(
                dims.iter().map(|d| SymExpr::constant(*d)).collect(),
                data.dtype(),
            ),
            Expr::ShapeLit(dims) => Annotation::Shape { spec: ShapeSpec::Known(dims.clone()) },
            Expr::TupleMake(elems) => {
                let mut anns = Vec::with_capacity(elems.len());
                let mut out = Vec::with_capacity(elems.len());
                for x in elems {
                    let (x2, a) = self.deduce_expr(x, location, span, env)?;
                    out.push(x2);
                    anns.push(a);
                }
                return Ok((Expr::TupleMake(out), Annotation::Tuple(anns)));
            }
            Expr::TupleGet(x, i) => {
                let (x2, a) = self.deduce_expr(x, location, span, env)?;
                let ann = match a {
                    Annotation::Tuple(elems) if *i < elems.len() => elems[*i].clone(),
                    _ => Annotation::Object,
                };
                return Ok((Expr::TupleGet(Box::new(x2), *i), ann));
            }
            Expr::CallOp { op, attrs, args } => {
                let mut anns = Vec::with_capacity(args.len());
                for a in args {
                    anns.push(self.deduce_expr(a, location, span, env)?.1);
                }
                let out = apply_rule(*op, attrs, &anns);
                if let Some(msg) = out.conflict {
                    return Err(self.conflict(location, msg));
                }
                for reason in out.checks {
                    self.record(location, span, out.ann.clone(), Annotation::Tuple(anns.clone()), reason);
                }
                out.ann
            }
            Expr::CallFunc { callee, args } => {
                let mut anns = Vec::with_capacity(args.len());
                for a in args {
                    anns.push(self.deduce_expr(a, location, span, env)?.1);
                }
                let callee_fn = self
                    .m
                    .graph_funcs
                    .get(callee)
                    .ok_or_else(|| DeduceError::UnknownFunction(callee.clone()))?;
                self.deduce_call(callee_fn, &anns, span)?
            }
            Expr::CallTir { out_ann, .. } | Expr::CallDpsLibrary { out_ann, .. } => {
                out_ann.clone()
            }
            Expr::If { cond, then_body, else_body } => {
                let (cond2, _) = self.deduce_expr(cond, location, span, env)?;
                let mut env1 = env.clone();
                let (tb, ta) = self.deduce_body(then_body, &mut env1)?;
                let mut env2 = env.clone();
                let (eb, ea) = self.deduce_body(else_body, &mut env2)?;
                return Ok((
                    Expr::If {
                        cond: Box::new(cond2),
                        then_body: Box::new(tb),
                        else_body: Box::new(eb),
                    },
                    join(&ta, &ea),
                ));
            }
            Expr::AllocStorage { .. } => Annotation::Object,
            Expr::AllocTensor { dims, dtype, .. } => Annotation::tensor(dims.clone(), *dtype),
            Expr::KernelCall { .. } | Expr::LibraryCall { .. } => Annotation::Object,
        };
        Ok((e.clone(), ann))
    }

    /// Signature-only deduction at a call boundary: unify caller argument
    /// shapes against callee parameter patterns, then substitute into the
    /// callee's return annotation.
    fn deduce_call(
        &mut self,
        callee: &Function,
        arg_anns: &[Annotation],
        span: SourceSpan,
    ) -> Result<Annotation, DeduceError> {
        if arg_anns.len() != callee.params.len() {
            return Err(DeduceError::ArityMismatch {
                function: self.fname.clone(),
                callee: callee.name.clone(),
                expected: callee.params.len(),
                got: arg_anns.len(),
            });
        }
        let location = format!("call {}", callee.name);
        let mut subst: HashMap<u32, SymExpr> = HashMap::new();
        // two sweeps so a parameter bound later (e.g. an explicit Shape
        // argument) can still resolve a compound pattern seen earlier
        for sweep in 0..2 {
            let before = subst.len();
            let mut coarse: Vec<String> = Vec::new();
            for ((_, pann), aann) in callee.params.iter().zip(arg_anns) {
                self.unify_ann(pann, aann, &mut subst, &mut coarse, &location)?;
            }
            if coarse.is_empty() {
                break;
            }
            if sweep == 1 || subst.len() == before {
                // no further progress possible: record the remaining reasons
                coarse.dedup();
                for reason in coarse {
                    self.record(
                        &location,
                        span,
                        Annotation::Tuple(callee.params.iter().map(|(_, a)| a.clone()).collect()),
                        Annotation::Tuple(arg_anns.to_vec()),
                        reason,
                    );
                }
                break;
            }
        }

        // callee variables that never got bound become fresh caller unknowns
        let mut ret = callee.ret_ann.clone();
        for v in ret.vars() {
            if !subst.contains_key(&v.id) {
                let fresh = self.fresh(&v.name);
                subst.insert(v.id, SymExpr::Var(fresh));
            }
        }
        ret = ret.map_exprs(&|e| substitute(e, &subst));
        Ok(ret)
    }

    fn unify_ann(
        &mut self,
        pattern: &Annotation,
        actual: &Annotation,
        subst: &mut HashMap<u32, SymExpr>,
        coarse: &mut Vec<String>,
        location: &str,
    ) -> Result<(), DeduceError> {
        match (pattern, actual) {
            (
                Annotation::Tensor { shape: ps, dtype: pd },
                Annotation::Tensor { shape: as_, dtype: ad },
            ) => {
                if let (Some(x), Some(y)) = (pd, ad) {
                    if x != y {
                        return Err(self.conflict(
                            location,
                            format!("argument dtype {} does not match parameter {}", y.name(), x.name()),
                        ));
                    }
                }
                self.unify_spec(ps, as_, subst, coarse, location)
            }
            (Annotation::Shape { spec: ps }, Annotation::Shape { spec: as_ }) => {
                self.unify_spec(ps, as_, subst, coarse, location)
            }
            (Annotation::Tuple(pe), Annotation::Tuple(ae)) if pe.len() == ae.len() => {
                for (p, a) in pe.iter().zip(ae) {
                    self.unify_ann(p, a, subst, coarse, location)?;
                }
                Ok(())
            }
            _ => {
                if subsumes(actual, pattern) == Provability::ProvablyUnequal {
                    return Err(self.conflict(
                        location,
                        "argument annotation is incompatible with the parameter",
                    ));
                }
                if !pattern.vars().is_empty() {
                    coarse.push("coarse argument for a symbolic parameter pattern".into());
                }
                Ok(())
            }
        }
    }

    fn unify_spec(
        &mut self,
        pattern: &ShapeSpec,
        actual: &ShapeSpec,
        subst: &mut HashMap<u32, SymExpr>,
        coarse: &mut Vec<String>,
        location: &str,
    ) -> Result<(), DeduceError> {
        match (pattern, actual) {
            (ShapeSpec::Known(pd), ShapeSpec::Known(ad)) => {
                if pd.len() != ad.len() {
                    return Err(self.conflict(
                        location,
                        format!("rank mismatch: expected {}, got {}", pd.len(), ad.len()),
                    ));
                }
                for (p, a) in pd.iter().zip(ad) {
                    self.unify_dim(p, a, subst, coarse, location)?;
                }
                Ok(())
            }
            (ShapeSpec::Known(pd), _) => {
                if actual.ndim().is_some_and(|r| r != pd.len()) {
                    return Err(self.conflict(location, "rank mismatch at call boundary"));
                }
                if !pd.iter().all(|d| d.vars().is_empty()) {
                    coarse.push("coarse argument for a symbolic parameter pattern".into());
                }
                Ok(())
            }
            (ShapeSpec::RankOnly(r), other) => {
                if other.ndim().is_some_and(|n| n != *r) {
                    return Err(self.conflict(location, "rank mismatch at call boundary"));
                }
                Ok(())
            }
            (ShapeSpec::Unconstrained, _) => Ok(()),
        }
    }

    fn unify_dim(
        &mut self,
        pattern: &SymExpr,
        actual: &SymExpr,
        subst: &mut HashMap<u32, SymExpr>,
        coarse: &mut Vec<String>,
        location: &str,
    ) -> Result<(), DeduceError> {
        let p = substitute(pattern, subst);
        if p.vars().is_empty() {
            return match prove_equal(&p, actual) {
                Provability::ProvablyEqual => Ok(()),
                Provability::ProvablyUnequal => {
                    if p.as_const().is_some() && actual.as_const().is_some() {
                        Err(self.conflict(
                            location,
                            format!("parameter dim {} does not match argument dim {}", p, actual),
                        ))
                    } else {
                        coarse.push(format!("dims {} vs {} not provably equal", p, actual));
                        Ok(())
                    }
                }
                Provability::Unknown => {
                    coarse.push(format!("dims {} vs {} not provably equal", p, actual));
                    Ok(())
                }
            };
        }
        if let Some(v) = p.as_var() {
            subst.insert(v.id, normalize(actual));
            return Ok(());
        }
        if let Some((v, sol)) = solve_linear(&p, actual) {
            subst.insert(v.id, sol);
            return Ok(());
        }
        coarse.push(format!("cannot solve parameter pattern {} against {}", p, actual));
        Ok(())
    }
}

/// Least coarse common annotation of two branch results.
fn join(a: &Annotation, b: &Annotation) -> Annotation {
    if subsumes(a, b) == Provability::ProvablyEqual && subsumes(b, a) == Provability::ProvablyEqual
    {
        return a.clone();
    }
    match (a, b) {
        (
            Annotation::Tensor { shape: sa, dtype: da },
            Annotation::Tensor { shape: sb, dtype: db },
        ) => {
            let dtype = if da == db { *da } else { None };
            let shape = join_specs(sa, sb);
            Annotation::Tensor { shape, dtype }
        }
        (Annotation::Shape { spec: sa }, Annotation::Shape { spec: sb }) => {
            Annotation::Shape { spec: join_specs(sa, sb) }
        }
        (Annotation::Tuple(ea), Annotation::Tuple(eb)) if ea.len() == eb.len() => {
            Annotation::Tuple(ea.iter().zip(eb).map(|(x, y)| join(x, y)).collect())
        }
        _ => Annotation::Object,
    }
}

fn join_specs(a: &ShapeSpec, b: &ShapeSpec) -> ShapeSpec {
    if let (ShapeSpec::Known(da), ShapeSpec::Known(db)) = (a, b) {
        if da.len() == db.len()
            && da
                .iter()
                .zip(db)
                .all(|(x, y)| prove_equal(x, y) == Provability::ProvablyEqual)
        {
            return a.clone();
        }
    }
    match (a.ndim(), b.ndim()) {
        (Some(ra), Some(rb)) if ra == rb => ShapeSpec::RankOnly(ra),
        _ => ShapeSpec::Unconstrained,
    }
}
