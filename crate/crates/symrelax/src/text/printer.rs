//! Canonical printer for the `.srx` syntax. The output is a fixpoint of
//! `print . parse`, which is what module round-trip tests compare.

use std::collections::{HashMap, HashSet};
use std::fmt::Write;

use crate::ir::{
    Annotation, Binding, Block, Body, ConstData, Expr, Function, Module, OpAttrs, ShapeSpec,
};
use crate::symexpr::{substitute, SymExpr, SymVar};
use crate::tprog::{Cmp, CmpOp, Combiner, PrimFunc, ScalarBinOp, ScalarConst, ScalarExpr, Stage};

pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    for name in &m.extern_decls {
        let _ = writeln!(out, "extern \"{}\";", name);
    }
    if !m.extern_decls.is_empty() && (!m.prim_funcs.is_empty() || !m.graph_funcs.is_empty()) {
        out.push('\n');
    }
    let mut first = true;
    for (_, p) in &m.prim_funcs {
        if !first {
            out.push('\n');
        }
        first = false;
        print_prim_fn(&mut out, p);
    }
    for (_, f) in &m.graph_funcs {
        if !first {
            out.push('\n');
        }
        first = false;
        print_fn(&mut out, f);
    }
    out
}

/// Assigns parse-safe, collision-free printed names to symbolic variables.
struct Namer {
    names: HashMap<u32, String>,
    used: HashSet<String>,
}

const RESERVED: &[&str] = &[
    "max", "min", "mod", "floordiv", "exp", "select", "sym", "true", "false", "ndim", "f32",
    "i64", "bool", "if", "else", "return", "df",
];

impl Namer {
    fn new() -> Namer {
        Namer { names: HashMap::new(), used: RESERVED.iter().map(|s| s.to_string()).collect() }
    }

    fn name(&mut self, v: &SymVar) -> String {
        if let Some(n) = self.names.get(&v.id) {
            return n.clone();
        }
        let mut cand = v.name.clone();
        let mut k = 1;
        while self.used.contains(&cand) {
            cand = format!("{}_{}", v.name, k);
            k += 1;
        }
        self.used.insert(cand.clone());
        self.names.insert(v.id, cand.clone());
        cand
    }

    /// Substitution renaming every named variable to its printed name.
    fn subst(&self) -> HashMap<u32, SymExpr> {
        self.names
            .iter()
            .map(|(id, n)| (*id, SymExpr::Var(SymVar::new(n.clone(), *id))))
            .collect()
    }
}

fn sym_str(e: &SymExpr, subst: &HashMap<u32, SymExpr>) -> String {
    substitute(e, subst).to_string()
}

fn dims_str(dims: &[SymExpr], subst: &HashMap<u32, SymExpr>) -> String {
    match dims.len() {
        1 => format!("({},)", sym_str(&dims[0], subst)),
        _ => format!(
            "({})",
            dims.iter().map(|d| sym_str(d, subst)).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Render an annotation with its variables' stored names, for diagnostics.
pub fn annotation_str(a: &Annotation) -> String {
    ann_str(a, &HashMap::new())
}

fn ann_str(a: &Annotation, subst: &HashMap<u32, SymExpr>) -> String {
    match a {
        Annotation::Tensor { shape, dtype } => match (shape, dtype) {
            (ShapeSpec::Known(dims), Some(dt)) => {
                format!("Tensor({}, {})", dims_str(dims, subst), dt.name())
            }
            (ShapeSpec::Known(dims), None) => format!("Tensor({})", dims_str(dims, subst)),
            (ShapeSpec::RankOnly(n), Some(dt)) => format!("Tensor(ndim={}, {})", n, dt.name()),
            (ShapeSpec::RankOnly(n), None) => format!("Tensor(ndim={})", n),
            (ShapeSpec::Unconstrained, Some(dt)) => format!("Tensor({})", dt.name()),
            (ShapeSpec::Unconstrained, None) => "Tensor".into(),
        },
        Annotation::Shape { spec } => match spec {
            ShapeSpec::Known(dims) => format!("Shape({})", dims_str(dims, subst)),
            ShapeSpec::RankOnly(n) => format!("Shape(ndim={})", n),
            ShapeSpec::Unconstrained => "Shape".into(),
        },
        Annotation::Tuple(elems) => format!(
            "Tuple({})",
            elems.iter().map(|e| ann_str(e, subst)).collect::<Vec<_>>().join(", ")
        ),
        Annotation::Callable { params, ret } => format!(
            "Callable(({}), {})",
            params.iter().map(|p| ann_str(p, subst)).collect::<Vec<_>>().join(", "),
            ann_str(ret, subst)
        ),
        Annotation::Object => "Object".into(),
    }
}

// ---------------------------------------------------------------------------
// Graph functions
// ---------------------------------------------------------------------------

fn print_fn(out: &mut String, f: &Function) {
    // Name variables in the order the parser will re-declare them: first use
    // inside parameter annotations, then the remaining symbol-table order.
    let mut order: Vec<SymVar> = Vec::new();
    for (_, ann) in &f.params {
        for v in ann.vars() {
            if !order.iter().any(|w| w.id == v.id) {
                order.push(v);
            }
        }
    }
    for v in &f.sym_vars {
        if !order.iter().any(|w| w.id == v.id) {
            order.push(v.clone());
        }
    }
    let mut namer = Namer::new();
    for v in &order {
        namer.name(v);
    }
    let subst = namer.subst();

    let params = f
        .params
        .iter()
        .map(|(n, a)| format!("{}: {}", n, ann_str(a, &subst)))
        .collect::<Vec<_>>()
        .join(", ");
    let _ = write!(out, "fn {}({}) -> {}", f.name, params, ann_str(&f.ret_ann, &subst));
    if !order.is_empty() {
        let names = order.iter().map(|v| namer.name(v)).collect::<Vec<_>>().join(", ");
        let _ = write!(out, " sym({})", names);
    }
    let bounds: Vec<String> = order
        .iter()
        .filter_map(|v| f.upper_bounds.get(&v.id).map(|b| format!("{} <= {}", namer.name(v), b)))
        .collect();
    if !bounds.is_empty() {
        let _ = write!(out, " bound({})", bounds.join(", "));
    }
    if f.is_primitive {
        out.push_str(" primitive");
    }
    out.push_str(" {\n");
    print_body(out, &f.body, &subst, 1);
    out.push_str("}\n");
}

fn indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn print_body(out: &mut String, b: &Body, subst: &HashMap<u32, SymExpr>, level: usize) {
    for block in &b.blocks {
        match block {
            Block::Dataflow(bindings) => {
                indent(out, level);
                out.push_str("df {\n");
                for binding in bindings {
                    print_binding(out, binding, subst, level + 1);
                }
                indent(out, level);
                out.push_str("}\n");
            }
            Block::Plain(bindings) => {
                for binding in bindings {
                    print_binding(out, binding, subst, level);
                }
            }
        }
    }
    indent(out, level);
    let _ = writeln!(out, "return {};", expr_str(&b.result, subst, level));
}

fn print_binding(out: &mut String, b: &Binding, subst: &HashMap<u32, SymExpr>, level: usize) {
    indent(out, level);
    match b {
        Binding::Bind { var, ann, value, .. } => {
            match ann {
                Some(a) => {
                    let _ = writeln!(
                        out,
                        "{}: {} = {};",
                        var,
                        ann_str(a, subst),
                        expr_str(value, subst, level)
                    );
                }
                None => {
                    let _ = writeln!(out, "{} = {};", var, expr_str(value, subst, level));
                }
            }
        }
        Binding::MatchCast { var, ann, value, .. } => {
            let _ = writeln!(
                out,
                "{} = match_cast({}, {});",
                var,
                expr_str(value, subst, level),
                ann_str(ann, subst)
            );
        }
    }
}

fn exprs_str(args: &[Expr], subst: &HashMap<u32, SymExpr>, level: usize) -> String {
    args.iter().map(|a| expr_str(a, subst, level)).collect::<Vec<_>>().join(", ")
}

fn expr_str(e: &Expr, subst: &HashMap<u32, SymExpr>, level: usize) -> String {
    match e {
        Expr::Var(n) => n.clone(),
        Expr::ConstTensor { dims, data } => {
            let dims_s = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ");
            let data_s = match data {
                ConstData::F32(v) => {
                    v.iter().map(|x| format!("{:?}", x)).collect::<Vec<_>>().join(", ")
                }
                ConstData::I64(v) => {
                    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
                }
                ConstData::Bool(v) => {
                    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
                }
            };
            format!("const({}, ({}), [{}])", data.dtype().name(), dims_s, data_s)
        }
        Expr::ShapeLit(dims) => format!(
            "shape({})",
            dims.iter().map(|d| sym_str(d, subst)).collect::<Vec<_>>().join(", ")
        ),
        Expr::TupleMake(elems) => format!("tuple({})", exprs_str(elems, subst, level)),
        Expr::TupleGet(x, i) => format!("{}.{}", expr_str(x, subst, level), i),
        Expr::CallOp { op, attrs, args } => {
            let mut parts: Vec<String> =
                args.iter().map(|a| expr_str(a, subst, level)).collect();
            match attrs {
                OpAttrs::None => {}
                OpAttrs::Axes(axes) => parts.push(format!(
                    "axes=({})",
                    axes.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ")
                )),
                OpAttrs::Axis(a) => parts.push(format!("axis={}", a)),
                OpAttrs::SplitArgs { sections, axis } => {
                    parts.push(format!("sections={}", sections));
                    parts.push(format!("axis={}", axis));
                }
            }
            format!("{}({})", op.name(), parts.join(", "))
        }
        Expr::CallFunc { callee, args } => {
            format!("{}({})", callee, exprs_str(args, subst, level))
        }
        Expr::CallTir { prim, args, out_ann } => format!(
            "call_tir(@{}, ({}), {})",
            prim,
            exprs_str(args, subst, level),
            ann_str(out_ann, subst)
        ),
        Expr::CallDpsLibrary { extern_name, args, out_ann } => format!(
            "call_dps_library(\"{}\", ({}), {})",
            extern_name,
            exprs_str(args, subst, level),
            ann_str(out_ann, subst)
        ),
        Expr::If { cond, then_body, else_body } => {
            let mut s = format!("if {} {{\n", expr_str(cond, subst, level));
            print_body(&mut s, then_body, subst, level + 1);
            indent(&mut s, level);
            s.push_str("} else {\n");
            print_body(&mut s, else_body, subst, level + 1);
            indent(&mut s, level);
            s.push('}');
            s
        }
        Expr::AllocStorage { size_bytes, dtype } => {
            format!("alloc_storage({}, {})", sym_str(size_bytes, subst), dtype.name())
        }
        Expr::AllocTensor { storage, dims, dtype } => format!(
            "alloc_tensor({}, ({}), {})",
            expr_str(storage, subst, level),
            dims.iter().map(|d| sym_str(d, subst)).collect::<Vec<_>>().join(", "),
            dtype.name()
        ),
        Expr::KernelCall { prim, args, dests } => format!(
            "kernel_call(@{}, ({}), ({}))",
            prim,
            exprs_str(args, subst, level),
            exprs_str(dests, subst, level)
        ),
        Expr::LibraryCall { extern_name, args, dests } => format!(
            "library_call(\"{}\", ({}), ({}))",
            extern_name,
            exprs_str(args, subst, level),
            exprs_str(dests, subst, level)
        ),
    }
}

// ---------------------------------------------------------------------------
// Tensor programs
// ---------------------------------------------------------------------------

fn print_prim_fn(out: &mut String, p: &PrimFunc) {
    let mut namer = Namer::new();
    for v in &p.scalar_params {
        namer.name(v);
    }
    for b in p.buffer_params.iter().chain(&p.temps).chain(p.workspace.as_ref()) {
        for d in &b.dims {
            for v in d.vars() {
                namer.name(&v);
            }
        }
    }
    let subst = namer.subst();

    let buf = |b: &crate::tprog::BufferDecl| {
        format!("{}: Buffer({}, {})", b.name, dims_str(&b.dims, &subst), b.dtype.name())
    };
    let params = p.buffer_params.iter().map(&buf).collect::<Vec<_>>().join(", ");
    let _ = write!(out, "prim_fn {}({})", p.name, params);
    if !p.scalar_params.is_empty() {
        let names =
            p.scalar_params.iter().map(|v| namer.name(v)).collect::<Vec<_>>().join(", ");
        let _ = write!(out, " sym({})", names);
    }
    let _ = write!(out, " outputs({})", p.num_outputs);
    if !p.op_hints.is_empty() {
        let hints = p.op_hints.iter().map(|o| o.name()).collect::<Vec<_>>().join(", ");
        let _ = write!(out, " hints({})", hints);
    }
    out.push_str(" {\n");
    for t in &p.temps {
        let _ = writeln!(out, "  temp {};", buf(t));
    }
    if let Some(w) = &p.workspace {
        let _ = writeln!(out, "  workspace {};", buf(w));
    }
    for st in &p.stages {
        print_stage(out, st, &namer, &subst);
    }
    out.push_str("}\n");
}

fn print_stage(out: &mut String, st: &Stage, prim_namer: &Namer, prim_subst: &HashMap<u32, SymExpr>) {
    // Loop variables shadow program-level names, so rename against them.
    let mut namer = Namer {
        names: HashMap::new(),
        used: prim_namer.used.clone(),
    };
    let mut subst = prim_subst.clone();
    for v in st.out_loop_vars.iter().chain(st.reduce_dims.iter().map(|(v, _)| v)) {
        let n = namer.name(v);
        subst.insert(v.id, SymExpr::Var(SymVar::new(n, v.id)));
    }

    let loops = st
        .out_loop_vars
        .iter()
        .zip(&st.out_dims)
        .map(|(v, d)| format!("{} < {}", namer.name(v), sym_str(d, prim_subst)))
        .collect::<Vec<_>>()
        .join(", ");
    let _ = write!(out, "  stage {}({})", st.out, loops);
    if !st.reduce_dims.is_empty() {
        let reds = st
            .reduce_dims
            .iter()
            .map(|(v, d)| format!("{} < {}", namer.name(v), sym_str(d, prim_subst)))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = write!(out, " reduce({})", reds);
    }
    if let Some(init) = &st.init {
        match init {
            ScalarConst::F(x) => {
                let _ = write!(out, " init({:?})", x);
            }
            ScalarConst::I(x) => {
                let _ = write!(out, " init({})", x);
            }
        }
    }
    if let Some(c) = &st.combiner {
        let _ = write!(
            out,
            " combine({})",
            match c {
                Combiner::Sum => "sum",
                Combiner::Max => "max",
            }
        );
    }
    out.push_str(" {\n");
    let _ = writeln!(out, "    {}", scalar_str(&st.body, &subst));
    out.push_str("  }\n");
}

fn scalar_str(e: &ScalarExpr, subst: &HashMap<u32, SymExpr>) -> String {
    match e {
        ScalarExpr::Read { buffer, indices } => format!(
            "{}[{}]",
            buffer,
            indices.iter().map(|i| sym_str(i, subst)).collect::<Vec<_>>().join(", ")
        ),
        ScalarExpr::ConstF(x) => format!("{:?}", x),
        ScalarExpr::ConstI(x) => x.to_string(),
        ScalarExpr::Bin(op, a, b) => {
            let (a, b) = (scalar_str(a, subst), scalar_str(b, subst));
            match op {
                ScalarBinOp::Add => format!("({} + {})", a, b),
                ScalarBinOp::Sub => format!("({} - {})", a, b),
                ScalarBinOp::Mul => format!("({} * {})", a, b),
                ScalarBinOp::Div => format!("({} / {})", a, b),
                ScalarBinOp::Max => format!("max({}, {})", a, b),
                ScalarBinOp::Min => format!("min({}, {})", a, b),
            }
        }
        ScalarExpr::Exp(a) => format!("exp({})", scalar_str(a, subst)),
        ScalarExpr::Sym(s) => format!("sym({})", sym_str(s, subst)),
        ScalarExpr::Select { cond, then_val, else_val } => {
            let Cmp { lhs, op, rhs } = cond.as_ref();
            let op = match op {
                CmpOp::Lt => "<",
                CmpOp::Le => "<=",
                CmpOp::Eq => "==",
                CmpOp::Ge => ">=",
                CmpOp::Gt => ">",
            };
            format!(
                "select({} {} {}, {}, {})",
                sym_str(lhs, subst),
                op,
                sym_str(rhs, subst),
                scalar_str(then_val, subst),
                scalar_str(else_val, subst)
            )
        }
    }
}
