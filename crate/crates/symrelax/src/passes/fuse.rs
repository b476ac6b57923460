//! Operator fusion: group tensor-program calls into primitive sub-functions
//! (fuse_ops), then merge each group's kernels into a single tensor program
//! (fuse_tensor_ir).

use std::collections::{HashMap, HashSet};

use super::{env_insert, param_env, PassError};
use crate::ir::{
    Annotation, Binding, Block, Body, Expr, Function, Module, ShapeSpec, SourceSpan,
};
use crate::symexpr::{SymExpr, SymVar};
use crate::tprog::{classify, BufferDecl, PatternKind, PrimFunc, ScalarExpr, Stage};

/// A contiguous run of tensor-program call bindings inside one dataflow
/// block, fused into a primitive sub-function.
#[derive(Clone, Debug)]
pub struct FusionGroup {
    pub function: String,
    pub block: usize,
    /// Binding index range `[start, end)` within the block.
    pub start: usize,
    pub end: usize,
    /// Filled in by the pass.
    pub anchor: PatternKind,
    /// Symbolic variables passed through the extra Shape parameter.
    pub extra_sym_params: Vec<SymVar>,
}

impl FusionGroup {
    pub fn new(function: impl Into<String>, block: usize, start: usize, end: usize) -> Self {
        FusionGroup {
            function: function.into(),
            block,
            start,
            end,
            anchor: PatternKind::Opaque,
            extra_sym_params: Vec::new(),
        }
    }
}

/// Where each variable of a function is consumed: binding positions plus
/// whether it escapes to a body result or an `If` arm.
pub(crate) struct Uses {
    /// var -> (block, binding) positions of consuming bindings.
    pub(crate) at: HashMap<String, Vec<(usize, usize)>>,
    /// vars consumed by block results or nested bodies.
    pub(crate) escaped: HashSet<String>,
}

pub(crate) fn collect_uses(f: &Function) -> Uses {
    let mut at: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    let mut escaped: HashSet<String> = HashSet::new();
    for (bi, block) in f.body.blocks.iter().enumerate() {
        for (i, b) in block.bindings().iter().enumerate() {
            let mut vars = Vec::new();
            b.value().free_vars(&mut vars);
            if let Expr::If { .. } = b.value() {
                escaped.extend(vars);
            } else {
                for v in vars {
                    at.entry(v).or_default().push((bi, i));
                }
            }
        }
    }
    let mut res = Vec::new();
    f.body.result.free_vars(&mut res);
    escaped.extend(res);
    Uses { at, escaped }
}

impl Uses {
    /// All consumers of `var` sit at binding indices within `range` of block
    /// `bi`, and nothing else sees it.
    pub(crate) fn confined(&self, var: &str, bi: usize, range: std::ops::Range<usize>) -> bool {
        if self.escaped.contains(var) {
            return false;
        }
        self.at
            .get(var)
            .map(|ps| ps.iter().all(|&(b, i)| b == bi && range.contains(&i)))
            .unwrap_or(true)
    }

    pub(crate) fn used_in(&self, var: &str, bi: usize, range: std::ops::Range<usize>) -> bool {
        self.at
            .get(var)
            .map(|ps| ps.iter().any(|&(b, i)| b == bi && range.contains(&i)))
            .unwrap_or(false)
    }
}

/// Pattern kind of a binding that is eligible for fusion; `None` is a
/// barrier (library calls, match_cast, tuple plumbing, `If`, non-var args,
/// multi-output kernels).
fn fusable_kind(m: &Module, b: &Binding) -> Option<PatternKind> {
    let Binding::Bind { value: Expr::CallTir { prim, args, out_ann }, .. } = b else {
        return None;
    };
    if !matches!(out_ann, Annotation::Tensor { shape: ShapeSpec::Known(_), dtype: Some(_) }) {
        return None;
    }
    if !args.iter().all(|a| matches!(a, Expr::Var(_))) {
        return None;
    }
    let kind = classify(m.prim_funcs.get(prim)?);
    (kind != PatternKind::Opaque).then_some(kind)
}

const UPSTREAM: [PatternKind; 3] =
    [PatternKind::ElementWise, PatternKind::Broadcast, PatternKind::Injective];
const DOWNSTREAM: [PatternKind; 2] = [PatternKind::ElementWise, PatternKind::Broadcast];

/// Detect fusion groups and outline each into a primitive sub-function,
/// rewriting the call site to a cross-function call. Custom groups are
/// honored first; the default algorithm covers the rest.
pub fn fuse_ops(m: &Module, custom_groups: &[FusionGroup]) -> Result<Module, PassError> {
    let mut out = m.clone();
    let mut counter = 0usize;
    let names: Vec<String> = m.graph_funcs.keys().cloned().collect();
    for fname in &names {
        let f = &m.graph_funcs[fname];
        let uses = collect_uses(f);
        let custom: Vec<&FusionGroup> =
            custom_groups.iter().filter(|g| &g.function == fname).collect();
        let mut groups: Vec<FusionGroup> = Vec::new();

        // claimed[bi][i] marks bindings already in a group
        let mut claimed: Vec<Vec<bool>> = f
            .body
            .blocks
            .iter()
            .map(|b| vec![false; b.bindings().len()])
            .collect();

        for g in &custom {
            validate_custom(m, f, g, &uses, &claimed)?;
            for i in g.start..g.end {
                claimed[g.block][i] = true;
            }
            groups.push((*g).clone());
        }

        for (bi, block) in f.body.blocks.iter().enumerate() {
            let Block::Dataflow(bindings) = block else { continue };
            let kinds: Vec<Option<PatternKind>> =
                bindings.iter().map(|b| fusable_kind(m, b)).collect();

            // seed at reduction anchors, absorb producers and consumers
            for r in 0..bindings.len() {
                if claimed[bi][r] || kinds[r] != Some(PatternKind::Reduction) {
                    continue;
                }
                let mut s = r;
                let mut e = r + 1;
                while s > 0
                    && !claimed[bi][s - 1]
                    && kinds[s - 1].is_some_and(|k| UPSTREAM.contains(&k))
                    && uses.used_in(bindings[s - 1].var(), bi, s..e)
                    && uses.confined(bindings[s - 1].var(), bi, s..e)
                {
                    s -= 1;
                }
                while e < bindings.len()
                    && !claimed[bi][e]
                    && kinds[e].is_some_and(|k| DOWNSTREAM.contains(&k))
                    && uses.used_in(bindings[e - 1].var(), bi, e..e + 1)
                    && uses.confined(bindings[e - 1].var(), bi, e..e + 1)
                {
                    e += 1;
                }
                if e - s >= 2 {
                    for i in s..e {
                        claimed[bi][i] = true;
                    }
                    groups.push(FusionGroup::new(fname.clone(), bi, s, e));
                }
            }

            // remaining chains of injective-or-simpler kernels
            let mut i = 0;
            while i < bindings.len() {
                if claimed[bi][i] || !kinds[i].is_some_and(|k| UPSTREAM.contains(&k)) {
                    i += 1;
                    continue;
                }
                let mut j = i + 1;
                while j < bindings.len()
                    && !claimed[bi][j]
                    && kinds[j].is_some_and(|k| UPSTREAM.contains(&k))
                    && uses.used_in(bindings[j - 1].var(), bi, j..j + 1)
                    && uses.confined(bindings[j - 1].var(), bi, j..j + 1)
                {
                    j += 1;
                }
                if j - i >= 2 {
                    for k in i..j {
                        claimed[bi][k] = true;
                    }
                    groups.push(FusionGroup::new(fname.clone(), bi, i, j));
                }
                i = j;
            }
        }

        // outline back-to-front so earlier indices stay valid
        groups.sort_by_key(|g| std::cmp::Reverse((g.block, g.start)));
        for g in &groups {
            outline_group(&mut out, fname, g, &mut counter)?;
        }
    }
    Ok(out)
}

fn validate_custom(
    m: &Module,
    f: &Function,
    g: &FusionGroup,
    uses: &Uses,
    claimed: &[Vec<bool>],
) -> Result<(), PassError> {
    let err = |msg: String| PassError::InvalidCustomGroup(msg);
    let block = f
        .body
        .blocks
        .get(g.block)
        .ok_or_else(|| err(format!("no block {} in `{}`", g.block, g.function)))?;
    if !matches!(block, Block::Dataflow(_)) {
        return Err(err(format!("block {} of `{}` is not a dataflow block", g.block, g.function)));
    }
    let bindings = block.bindings();
    if g.start >= g.end || g.end > bindings.len() {
        return Err(err(format!("empty or out-of-range member span in `{}`", g.function)));
    }
    let mut reductions = 0;
    for i in g.start..g.end {
        if claimed[g.block][i] {
            return Err(err(format!("group overlaps another group in `{}`", g.function)));
        }
        match fusable_kind(m, &bindings[i]) {
            None => {
                return Err(err(format!(
                    "member `{}` is opaque or not a tensor-program call",
                    bindings[i].var()
                )))
            }
            Some(PatternKind::Reduction) => reductions += 1,
            Some(_) => {}
        }
    }
    if reductions > 1 {
        return Err(err(format!("more than one reduction anchor in `{}`", g.function)));
    }
    for i in g.start..g.end - 1 {
        if !uses.confined(bindings[i].var(), g.block, i + 1..g.end) {
            return Err(err(format!(
                "intermediate `{}` escapes the group in `{}`",
                bindings[i].var(),
                g.function
            )));
        }
    }
    Ok(())
}

fn outline_group(
    m: &mut Module,
    fname: &str,
    g: &FusionGroup,
    counter: &mut usize,
) -> Result<(), PassError> {
    let f = m.graph_funcs[fname].clone();

    // precise annotations up to the group start
    let mut env = param_env(&f);
    'prefix: for (bi, block) in f.body.blocks.iter().enumerate() {
        for (i, b) in block.bindings().iter().enumerate() {
            if bi > g.block || (bi == g.block && i >= g.start) {
                break 'prefix;
            }
            env_insert(&mut env, b);
        }
    }

    let bindings = f.body.blocks[g.block].bindings();
    let members: Vec<Binding> = bindings[g.start..g.end].to_vec();
    let member_vars: HashSet<&str> = members.iter().map(|b| b.var()).collect();

    // external inputs in first-use order
    let mut inputs: Vec<String> = Vec::new();
    for b in &members {
        let mut vs = Vec::new();
        b.value().free_vars(&mut vs);
        for v in vs {
            if !member_vars.contains(v.as_str()) && !inputs.contains(&v) {
                inputs.push(v);
            }
        }
    }

    let out_binding = members.last().unwrap().clone();
    let out_var = out_binding.var().to_string();
    let ret_ann = match out_binding.value() {
        Expr::CallTir { out_ann, .. } => out_ann.clone(),
        _ => unreachable!("group members are tensor-program calls"),
    };

    let mut params: Vec<(String, Annotation)> = inputs
        .iter()
        .map(|v| (v.clone(), env.get(v).cloned().unwrap_or(Annotation::Object)))
        .collect();

    // variables the sub-function needs but cannot read off a bare input dim
    // travel through one extra Shape parameter, in id order
    let mut ann_vars: Vec<SymVar> = Vec::new();
    let push_vars = |a: &Annotation, ann_vars: &mut Vec<SymVar>| {
        for v in a.vars() {
            if !ann_vars.iter().any(|w| w.id == v.id) {
                ann_vars.push(v);
            }
        }
    };
    for (_, a) in &params {
        push_vars(a, &mut ann_vars);
    }
    for b in &members {
        if let Expr::CallTir { out_ann, .. } = b.value() {
            push_vars(out_ann, &mut ann_vars);
        }
    }
    let mut bindable: HashSet<u32> = HashSet::new();
    for (_, a) in &params {
        if let Some((ShapeSpec::Known(dims), _)) = a.as_tensor() {
            for d in dims {
                if let Some(v) = d.as_var() {
                    bindable.insert(v.id);
                }
            }
        }
    }
    let mut extra: Vec<SymVar> =
        ann_vars.iter().filter(|v| !bindable.contains(&v.id)).cloned().collect();
    extra.sort_by_key(|v| v.id);
    if !extra.is_empty() {
        params.push((
            "s_sym".to_string(),
            Annotation::Shape {
                spec: ShapeSpec::Known(extra.iter().map(|v| SymExpr::Var(v.clone())).collect()),
            },
        ));
    }

    let sub_name = format!("{}_fused{}", fname, counter);
    *counter += 1;

    let sub_body = Body {
        blocks: vec![Block::Dataflow(
            members
                .iter()
                .map(|b| match b {
                    Binding::Bind { var, value, span, .. } => Binding::Bind {
                        var: var.clone(),
                        ann: Some(match value {
                            Expr::CallTir { out_ann, .. } => out_ann.clone(),
                            _ => Annotation::Object,
                        }),
                        value: value.clone(),
                        span: *span,
                    },
                    other => other.clone(),
                })
                .collect(),
        )],
        result: Expr::Var(out_var.clone()),
    };

    let needed: HashSet<u32> = ann_vars.iter().map(|v| v.id).collect();
    let sub_fn = Function {
        name: sub_name.clone(),
        params,
        ret_ann: ret_ann.clone(),
        sym_vars: f.sym_vars.iter().filter(|v| needed.contains(&v.id)).cloned().collect(),
        upper_bounds: f
            .upper_bounds
            .iter()
            .filter(|(id, _)| needed.contains(id))
            .map(|(id, b)| (*id, *b))
            .collect(),
        body: sub_body,
        is_primitive: true,
        span: SourceSpan::default(),
    };

    let mut call_args: Vec<Expr> = inputs.iter().map(Expr::var).collect();
    if !extra.is_empty() {
        call_args.push(Expr::ShapeLit(extra.iter().map(|v| SymExpr::Var(v.clone())).collect()));
    }
    let call = Binding::Bind {
        var: out_var,
        ann: Some(ret_ann),
        value: Expr::CallFunc { callee: sub_name.clone(), args: call_args },
        span: out_binding.span(),
    };

    let fmut = m.graph_funcs.get_mut(fname).unwrap();
    let bs = fmut.body.blocks[g.block].bindings_mut();
    bs.splice(g.start..g.end, [call]);
    m.graph_funcs.insert(sub_name, sub_fn);
    Ok(())
}

// ---------------------------------------------------------------------------
// fuse_tensor_ir
// ---------------------------------------------------------------------------

fn rename_scalar(e: &ScalarExpr, map: &HashMap<String, String>) -> ScalarExpr {
    match e {
        ScalarExpr::Read { buffer, indices } => ScalarExpr::Read {
            buffer: map.get(buffer).cloned().unwrap_or_else(|| buffer.clone()),
            indices: indices.clone(),
        },
        ScalarExpr::Bin(op, a, b) => ScalarExpr::Bin(
            *op,
            Box::new(rename_scalar(a, map)),
            Box::new(rename_scalar(b, map)),
        ),
        ScalarExpr::Exp(a) => ScalarExpr::Exp(Box::new(rename_scalar(a, map))),
        ScalarExpr::Select { cond, then_val, else_val } => ScalarExpr::Select {
            cond: cond.clone(),
            then_val: Box::new(rename_scalar(then_val, map)),
            else_val: Box::new(rename_scalar(else_val, map)),
        },
        other => other.clone(),
    }
}

fn tensor_decl(name: &str, ann: &Annotation) -> Option<BufferDecl> {
    match ann {
        Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype: Some(dt) } => {
            Some(BufferDecl { name: name.to_string(), dims: dims.clone(), dtype: *dt })
        }
        _ => None,
    }
}

/// Merge each primitive sub-function's tensor programs into one PrimFunc and
/// replace its call sites by `call_tir`.
pub fn fuse_tensor_ir(m: &Module) -> Result<Module, PassError> {
    let mut out = m.clone();
    let prim_subs: Vec<String> = m
        .graph_funcs
        .iter()
        .filter(|(_, f)| f.is_primitive)
        .map(|(n, _)| n.clone())
        .collect();

    for name in &prim_subs {
        let f = &m.graph_funcs[name];
        let merged = merge_group(m, f)?;
        out.graph_funcs.shift_remove(name);
        out.prim_funcs.insert(name.clone(), merged);

        // how many leading args are tensors (the rest is the Shape param)
        let n_tensor = f
            .params
            .iter()
            .take_while(|(_, a)| matches!(a, Annotation::Tensor { .. }))
            .count();
        let ret_ann = f.ret_ann.clone();
        for (_, gf) in out.graph_funcs.iter_mut() {
            rewrite_calls(&mut gf.body, name, n_tensor, &ret_ann);
        }
    }
    Ok(out)
}

fn rewrite_calls(body: &mut Body, callee: &str, n_tensor: usize, ret_ann: &Annotation) {
    for block in &mut body.blocks {
        for b in block.bindings_mut() {
            if let Binding::Bind { value, .. } = b {
                match value {
                    Expr::CallFunc { callee: c, args } if c == callee => {
                        *value = Expr::CallTir {
                            prim: callee.to_string(),
                            args: args[..n_tensor.min(args.len())].to_vec(),
                            out_ann: ret_ann.clone(),
                        };
                    }
                    Expr::If { then_body, else_body, .. } => {
                        rewrite_calls(then_body, callee, n_tensor, ret_ann);
                        rewrite_calls(else_body, callee, n_tensor, ret_ann);
                    }
                    _ => {}
                }
            }
        }
    }
}

fn merge_group(m: &Module, f: &Function) -> Result<PrimFunc, PassError> {
    let bad = || PassError::NonStraightLineGroup(f.name.clone());
    if f.body.blocks.len() != 1 {
        return Err(bad());
    }
    let bindings = f.body.blocks[0].bindings();
    if bindings.is_empty() {
        return Err(bad());
    }
    let last_var = bindings.last().unwrap().var();
    if f.body.result.as_var() != Some(last_var) {
        return Err(bad());
    }

    let mut inputs: Vec<BufferDecl> = Vec::new();
    for (pname, ann) in &f.params {
        match ann {
            Annotation::Tensor { .. } => {
                inputs.push(tensor_decl(pname, ann).ok_or_else(bad)?);
            }
            Annotation::Shape { .. } => {} // symbolic plumbing only
            _ => return Err(bad()),
        }
    }

    let mut stages: Vec<Stage> = Vec::new();
    let mut temps: Vec<BufferDecl> = Vec::new();
    let mut op_hints = Vec::new();
    for (i, b) in bindings.iter().enumerate() {
        let Binding::Bind { var, value: Expr::CallTir { prim, args, out_ann }, .. } = b else {
            return Err(bad());
        };
        let p = m.prim_funcs.get(prim).ok_or_else(bad)?;
        if p.num_outputs != 1 || !p.temps.is_empty() || p.workspace.is_some() {
            return Err(bad());
        }
        if args.len() != p.inputs().len() {
            return Err(bad());
        }
        let mut rename: HashMap<String, String> = HashMap::new();
        for (decl, arg) in p.inputs().iter().zip(args) {
            let v = arg.as_var().ok_or_else(bad)?;
            rename.insert(decl.name.clone(), v.to_string());
        }
        rename.insert(p.outputs()[0].name.clone(), var.clone());
        for st in &p.stages {
            stages.push(Stage {
                out: rename.get(&st.out).cloned().unwrap_or_else(|| st.out.clone()),
                out_loop_vars: st.out_loop_vars.clone(),
                out_dims: st.out_dims.clone(),
                reduce_dims: st.reduce_dims.clone(),
                init: st.init.clone(),
                combiner: st.combiner,
                body: rename_scalar(&st.body, &rename),
                span: st.span,
            });
        }
        op_hints.extend(p.op_hints.iter().copied());
        if i + 1 < bindings.len() {
            temps.push(tensor_decl(var, out_ann).ok_or_else(bad)?);
        }
    }

    let out_decl = tensor_decl(last_var, &f.ret_ann).ok_or_else(bad)?;
    let mut buffer_params = inputs;
    buffer_params.push(out_decl);
    let mut merged = PrimFunc {
        name: f.name.clone(),
        buffer_params,
        num_outputs: 1,
        scalar_params: Vec::new(),
        temps,
        workspace: None,
        op_hints,
        stages,
        span: SourceSpan::default(),
    };
    merged.scalar_params = merged.underivable_vars();
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deduce::annotate_module;
    use crate::ir::well_formed;
    use crate::passes::legalize;
    use crate::text::parse_module;

    fn prep(src: &str) -> Module {
        let (m, _) = annotate_module(&parse_module(src).unwrap()).unwrap();
        legalize(&m).unwrap()
    }

    fn fused_subfns(m: &Module) -> Vec<&Function> {
        m.graph_funcs.values().filter(|f| f.is_primitive).collect()
    }

    #[test]
    fn matmul_add_relu_forms_one_group() {
        let m = prep(
            "fn main(a: Tensor((n, k), f32), b: Tensor((k, 4), f32), c: Tensor((n, 4), f32)) \
             -> Tensor sym(n, k) {\n\
               df {\n\
                 p = matmul(a, b);\n\
                 q = add(p, c);\n\
                 r = relu(q);\n\
               }\n\
               return r;\n\
             }\n",
        );
        let out = fuse_ops(&m, &[]).unwrap();
        let subs = fused_subfns(&out);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].body.blocks[0].bindings().len(), 3);
        assert!(well_formed(&out).is_empty());

        let merged = fuse_tensor_ir(&out).unwrap();
        assert!(fused_subfns(&merged).is_empty());
        let prim = &merged.prim_funcs[&subs[0].name];
        assert_eq!(prim.stages.len(), 3);
        assert_eq!(prim.temps.len(), 2);
        assert!(well_formed(&merged).is_empty());
    }

    #[test]
    fn compound_shape_gets_extra_shape_param() {
        let m = prep(
            "fn main(x: Tensor((2*n,), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 a = add(x, x);\n\
                 b = relu(a);\n\
               }\n\
               return b;\n\
             }\n",
        );
        let out = fuse_ops(&m, &[]).unwrap();
        let subs = fused_subfns(&out);
        assert_eq!(subs.len(), 1);
        let last = subs[0].params.last().unwrap();
        assert!(matches!(last.1, Annotation::Shape { .. }), "extra shape param expected");
        assert!(well_formed(&out).is_empty());

        // the merged kernel needs n as a scalar param: 2*n is not readable
        // off a bare input dim
        let merged = fuse_tensor_ir(&out).unwrap();
        let prim = &merged.prim_funcs[&subs[0].name];
        assert_eq!(prim.scalar_params.len(), 1);
        assert_eq!(prim.scalar_params[0].name, "n");
        assert!(well_formed(&merged).is_empty());
    }

    #[test]
    fn opaque_call_is_a_barrier() {
        let m = prep(
            "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 a = exp(x);\n\
                 u = unique(a);\n\
                 c = match_cast(u, Tensor((m,), f32));\n\
                 d = exp(c);\n\
                 e = relu(d);\n\
               }\n\
               return e;\n\
             }\n",
        );
        let out = fuse_ops(&m, &[]).unwrap();
        // only the d;e chain fuses: a's group would need >= 2 members
        let subs = fused_subfns(&out);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].body.blocks[0].bindings().len(), 2);
    }

    #[test]
    fn shared_symbol_deduplicated_in_merged_kernel() {
        let m = prep(
            "fn main(x: Tensor((2*n,), f32), y: Tensor((2*n,), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 a = add(x, y);\n\
                 b = mul(a, y);\n\
               }\n\
               return b;\n\
             }\n",
        );
        let fused = fuse_tensor_ir(&fuse_ops(&m, &[]).unwrap()).unwrap();
        let prim = fused.prim_funcs.values().last().unwrap();
        assert_eq!(prim.scalar_params.len(), 1);
    }

    #[test]
    fn custom_group_overlap_is_rejected() {
        let m = prep(
            "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 a = exp(x);\n\
                 b = relu(a);\n\
                 c = exp(b);\n\
               }\n\
               return c;\n\
             }\n",
        );
        let g1 = FusionGroup::new("main", 0, 0, 2);
        let g2 = FusionGroup::new("main", 0, 1, 3);
        assert!(matches!(
            fuse_ops(&m, &[g1, g2]),
            Err(PassError::InvalidCustomGroup(_))
        ));
    }

    #[test]
    fn custom_singleton_group_rewraps() {
        let m = prep(
            "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 a = exp(x);\n\
               }\n\
               return a;\n\
             }\n",
        );
        let g = FusionGroup::new("main", 0, 0, 1);
        let out = fuse_ops(&m, &[g]).unwrap();
        let subs = fused_subfns(&out);
        assert_eq!(subs.len(), 1);
        let merged = fuse_tensor_ir(&out).unwrap();
        let prim = &merged.prim_funcs[&subs[0].name];
        assert_eq!(prim.stages.len(), 1);
    }

    #[test]
    fn no_fusion_across_escaping_intermediate() {
        let m = prep(
            "fn main(x: Tensor((n,), f32)) -> Tuple(Tensor, Tensor) sym(n) {\n\
               df {\n\
                 a = exp(x);\n\
                 b = relu(a);\n\
                 t = tuple(a, b);\n\
               }\n\
               return t;\n\
             }\n",
        );
        let out = fuse_ops(&m, &[]).unwrap();
        assert!(fused_subfns(&out).is_empty(), "a escapes via the tuple");
    }
}
