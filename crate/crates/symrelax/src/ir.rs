//! Graph-level IR: annotations, expressions, bindings, functions, modules.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use thiserror::Error;

use crate::symexpr::{self, Provability, SymExpr, SymVar};
use crate::tprog::PrimFunc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I64,
    Bool,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::Bool => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I64 => "i64",
            DType::Bool => "bool",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeSpec {
    Known(Vec<SymExpr>),
    RankOnly(usize),
    Unconstrained,
}

impl ShapeSpec {
    pub fn ndim(&self) -> Option<usize> {
        match self {
            ShapeSpec::Known(dims) => Some(dims.len()),
            ShapeSpec::RankOnly(n) => Some(*n),
            ShapeSpec::Unconstrained => None,
        }
    }

    pub fn known_dims(&self) -> Option<&[SymExpr]> {
        match self {
            ShapeSpec::Known(dims) => Some(dims),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Tensor { shape: ShapeSpec, dtype: Option<DType> },
    Shape { spec: ShapeSpec },
    Tuple(Vec<Annotation>),
    Callable { params: Vec<Annotation>, ret: Box<Annotation> },
    Object,
}

impl Annotation {
    pub fn tensor(dims: Vec<SymExpr>, dtype: DType) -> Self {
        Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype: Some(dtype) }
    }

    pub fn tensor_rank(ndim: usize, dtype: DType) -> Self {
        Annotation::Tensor { shape: ShapeSpec::RankOnly(ndim), dtype: Some(dtype) }
    }

    pub fn as_tensor(&self) -> Option<(&ShapeSpec, Option<DType>)> {
        match self {
            Annotation::Tensor { shape, dtype } => Some((shape, *dtype)),
            _ => None,
        }
    }

    /// Variables appearing anywhere in the annotation.
    pub fn vars(&self) -> Vec<SymVar> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<SymVar>) {
        let spec = match self {
            Annotation::Tensor { shape, .. } => Some(shape),
            Annotation::Shape { spec } => Some(spec),
            Annotation::Tuple(elems) => {
                for e in elems {
                    e.collect_vars(out);
                }
                None
            }
            Annotation::Callable { params, ret } => {
                for p in params {
                    p.collect_vars(out);
                }
                ret.collect_vars(out);
                None
            }
            Annotation::Object => None,
        };
        if let Some(ShapeSpec::Known(dims)) = spec {
            for d in dims {
                for v in d.vars() {
                    if !out.iter().any(|w| w.id == v.id) {
                        out.push(v);
                    }
                }
            }
        }
    }

    pub fn map_exprs(&self, f: &impl Fn(&SymExpr) -> SymExpr) -> Annotation {
        let map_spec = |s: &ShapeSpec| match s {
            ShapeSpec::Known(dims) => ShapeSpec::Known(dims.iter().map(f).collect()),
            other => other.clone(),
        };
        match self {
            Annotation::Tensor { shape, dtype } => {
                Annotation::Tensor { shape: map_spec(shape), dtype: *dtype }
            }
            Annotation::Shape { spec } => Annotation::Shape { spec: map_spec(spec) },
            Annotation::Tuple(elems) => {
                Annotation::Tuple(elems.iter().map(|e| e.map_exprs(f)).collect())
            }
            Annotation::Callable { params, ret } => Annotation::Callable {
                params: params.iter().map(|p| p.map_exprs(f)).collect(),
                ret: Box::new(ret.map_exprs(f)),
            },
            Annotation::Object => Annotation::Object,
        }
    }
}

/// Does `a` subsume into `b`? I.e. is `a` at least as precise as `b`
/// (`a ⊑ b`), with Object as top. Known dims compare by provable equality;
/// Unknown comparisons make the whole answer Unknown.
pub fn subsumes(a: &Annotation, b: &Annotation) -> Provability {
    use Provability::*;
    match (a, b) {
        (_, Annotation::Object) => ProvablyEqual,
        (Annotation::Tensor { shape: sa, dtype: da }, Annotation::Tensor { shape: sb, dtype: db }) => {
            match (da, db) {
                (_, None) => {}
                (Some(x), Some(y)) if x == y => {}
                (None, Some(_)) => return Unknown,
                _ => return ProvablyUnequal,
            }
            spec_subsumes(sa, sb)
        }
        (Annotation::Shape { spec: sa }, Annotation::Shape { spec: sb }) => spec_subsumes(sa, sb),
        (Annotation::Tuple(ea), Annotation::Tuple(eb)) => {
            if ea.len() != eb.len() {
                return ProvablyUnequal;
            }
            let mut acc = ProvablyEqual;
            for (x, y) in ea.iter().zip(eb) {
                match subsumes(x, y) {
                    ProvablyEqual => {}
                    ProvablyUnequal => return ProvablyUnequal,
                    Unknown => acc = Unknown,
                }
            }
            acc
        }
        (
            Annotation::Callable { params: pa, ret: ra },
            Annotation::Callable { params: pb, ret: rb },
        ) => {
            if pa.len() != pb.len() {
                return ProvablyUnequal;
            }
            let mut acc = subsumes(ra, rb);
            if acc == ProvablyUnequal {
                return ProvablyUnequal;
            }
            for (x, y) in pa.iter().zip(pb) {
                match subsumes(y, x) {
                    ProvablyEqual => {}
                    ProvablyUnequal => return ProvablyUnequal,
                    Unknown => acc = Unknown,
                }
            }
            acc
        }
        _ => ProvablyUnequal,
    }
}

fn spec_subsumes(a: &ShapeSpec, b: &ShapeSpec) -> Provability {
    use Provability::*;
    match (a, b) {
        (_, ShapeSpec::Unconstrained) => ProvablyEqual,
        (ShapeSpec::Unconstrained, _) => Unknown,
        (ShapeSpec::Known(da), ShapeSpec::Known(db)) => {
            if da.len() != db.len() {
                return ProvablyUnequal;
            }
            let mut acc = ProvablyEqual;
            for (x, y) in da.iter().zip(db) {
                match symexpr::prove_equal(x, y) {
                    ProvablyEqual => {}
                    ProvablyUnequal => return ProvablyUnequal,
                    Unknown => acc = Unknown,
                }
            }
            acc
        }
        (ShapeSpec::Known(da), ShapeSpec::RankOnly(n)) => {
            if da.len() == *n {
                ProvablyEqual
            } else {
                ProvablyUnequal
            }
        }
        (ShapeSpec::RankOnly(n), ShapeSpec::Known(db)) => {
            if *n == db.len() {
                Unknown
            } else {
                ProvablyUnequal
            }
        }
        (ShapeSpec::RankOnly(na), ShapeSpec::RankOnly(nb)) => {
            if na == nb {
                ProvablyEqual
            } else {
                ProvablyUnequal
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpName {
    Add,
    Sub,
    Mul,
    Divide,
    Exp,
    Relu,
    Matmul,
    Reshape,
    Flatten,
    PermuteDims,
    Concat,
    Split,
    Sum,
    Unique,
}

impl OpName {
    pub fn name(self) -> &'static str {
        match self {
            OpName::Add => "add",
            OpName::Sub => "sub",
            OpName::Mul => "mul",
            OpName::Divide => "divide",
            OpName::Exp => "exp",
            OpName::Relu => "relu",
            OpName::Matmul => "matmul",
            OpName::Reshape => "reshape",
            OpName::Flatten => "flatten",
            OpName::PermuteDims => "permute_dims",
            OpName::Concat => "concat",
            OpName::Split => "split",
            OpName::Sum => "sum",
            OpName::Unique => "unique",
        }
    }

    pub fn from_name(s: &str) -> Option<OpName> {
        Some(match s {
            "add" => OpName::Add,
            "sub" => OpName::Sub,
            "mul" => OpName::Mul,
            "divide" => OpName::Divide,
            "exp" => OpName::Exp,
            "relu" => OpName::Relu,
            "matmul" => OpName::Matmul,
            "reshape" => OpName::Reshape,
            "flatten" => OpName::Flatten,
            "permute_dims" => OpName::PermuteDims,
            "concat" => OpName::Concat,
            "split" => OpName::Split,
            "sum" => OpName::Sum,
            "unique" => OpName::Unique,
            _ => return None,
        })
    }
}

/// Per-operator attributes carried on `CallOp`.
#[derive(Clone, Debug, PartialEq)]
pub enum OpAttrs {
    None,
    Axes(Vec<usize>),
    Axis(usize),
    SplitArgs { sections: usize, axis: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConstData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
}

impl ConstData {
    pub fn dtype(&self) -> DType {
        match self {
            ConstData::F32(_) => DType::F32,
            ConstData::I64(_) => DType::I64,
            ConstData::Bool(_) => DType::Bool,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ConstData::F32(v) => v.len(),
            ConstData::I64(v) => v.len(),
            ConstData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Var(String),
    ConstTensor { dims: Vec<i64>, data: ConstData },
    ShapeLit(Vec<SymExpr>),
    TupleMake(Vec<Expr>),
    TupleGet(Box<Expr>, usize),
    CallOp { op: OpName, attrs: OpAttrs, args: Vec<Expr> },
    CallFunc { callee: String, args: Vec<Expr> },
    CallTir { prim: String, args: Vec<Expr>, out_ann: Annotation },
    CallDpsLibrary { extern_name: String, args: Vec<Expr>, out_ann: Annotation },
    If { cond: Box<Expr>, then_body: Box<Body>, else_body: Box<Body> },
    // Introduced by memory planning.
    AllocStorage { size_bytes: SymExpr, dtype: DType },
    AllocTensor { storage: Box<Expr>, dims: Vec<SymExpr>, dtype: DType },
    /// A DPS kernel invocation writing into pre-planned destinations
    /// (outputs first, then any lifted workspace). Value is the first dest.
    KernelCall { prim: String, args: Vec<Expr>, dests: Vec<Expr> },
    /// DPS library invocation with planned destinations.
    LibraryCall { extern_name: String, args: Vec<Expr>, dests: Vec<Expr> },
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn as_var(&self) -> Option<&str> {
        match self {
            Expr::Var(n) => Some(n),
            _ => None,
        }
    }

    /// Variable names referenced by this expression (not transitively
    /// through nested bodies of `If`, which are included too).
    pub fn free_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Var(n) => out.push(n.clone()),
            Expr::ConstTensor { .. } | Expr::ShapeLit(_) | Expr::AllocStorage { .. } => {}
            Expr::TupleMake(elems) => {
                for e in elems {
                    e.free_vars(out);
                }
            }
            Expr::TupleGet(e, _) => e.free_vars(out),
            Expr::CallOp { args, .. }
            | Expr::CallFunc { args, .. }
            | Expr::CallTir { args, .. }
            | Expr::CallDpsLibrary { args, .. } => {
                for a in args {
                    a.free_vars(out);
                }
            }
            Expr::If { cond, then_body, else_body } => {
                cond.free_vars(out);
                then_body.free_vars(out);
                else_body.free_vars(out);
            }
            Expr::AllocTensor { storage, .. } => storage.free_vars(out),
            Expr::KernelCall { args, dests, .. } | Expr::LibraryCall { args, dests, .. } => {
                for a in args.iter().chain(dests) {
                    a.free_vars(out);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SourceSpan {
    pub start_line: u32,
    pub start_col: u32,
    pub end_line: u32,
    pub end_col: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Binding {
    Bind { var: String, ann: Option<Annotation>, value: Expr, span: SourceSpan },
    MatchCast { var: String, ann: Annotation, value: Expr, span: SourceSpan },
}

impl Binding {
    pub fn var(&self) -> &str {
        match self {
            Binding::Bind { var, .. } | Binding::MatchCast { var, .. } => var,
        }
    }

    pub fn value(&self) -> &Expr {
        match self {
            Binding::Bind { value, .. } | Binding::MatchCast { value, .. } => value,
        }
    }

    pub fn ann(&self) -> Option<&Annotation> {
        match self {
            Binding::Bind { ann, .. } => ann.as_ref(),
            Binding::MatchCast { ann, .. } => Some(ann),
        }
    }

    pub fn span(&self) -> SourceSpan {
        match self {
            Binding::Bind { span, .. } | Binding::MatchCast { span, .. } => *span,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Dataflow(Vec<Binding>),
    Plain(Vec<Binding>),
}

impl Block {
    pub fn bindings(&self) -> &[Binding] {
        match self {
            Block::Dataflow(b) | Block::Plain(b) => b,
        }
    }

    pub fn bindings_mut(&mut self) -> &mut Vec<Binding> {
        match self {
            Block::Dataflow(b) | Block::Plain(b) => b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub blocks: Vec<Block>,
    pub result: Expr,
}

impl Body {
    fn free_vars(&self, out: &mut Vec<String>) {
        for b in &self.blocks {
            for binding in b.bindings() {
                binding.value().free_vars(out);
            }
        }
        self.result.free_vars(out);
    }
}

#[derive(Clone, Debug)]
pub struct Function {
    pub name: String,
    pub params: Vec<(String, Annotation)>,
    pub ret_ann: Annotation,
    pub sym_vars: Vec<SymVar>,
    pub upper_bounds: HashMap<u32, i64>,
    pub body: Body,
    pub is_primitive: bool,
    pub span: SourceSpan,
}

impl Function {
    pub fn sym_var(&self, name: &str) -> Option<&SymVar> {
        self.sym_vars.iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Module {
    pub graph_funcs: IndexMap<String, Function>,
    pub prim_funcs: IndexMap<String, PrimFunc>,
    pub extern_decls: Vec<String>,
    pub next_sym_id: u32,
}

impl Module {
    pub fn fresh_sym(&mut self, name: impl Into<String>) -> SymVar {
        let v = SymVar::new(name, self.next_sym_id);
        self.next_sym_id += 1;
        v
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostic {
    pub message: String,
    pub span: Option<SourceSpan>,
}

impl Diagnostic {
    fn new(message: impl Into<String>, span: Option<SourceSpan>) -> Self {
        Diagnostic { message: message.into(), span }
    }
}

#[derive(Debug, Error)]
pub enum IrError {
    #[error("module is not fully lowered: a graph-level operator call remains in `{0}`")]
    NotLowered(String),
}

// ---------------------------------------------------------------------------
// well_formed
// ---------------------------------------------------------------------------

pub fn well_formed(m: &Module) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for (_, f) in &m.graph_funcs {
        check_function(m, f, &mut diags);
    }
    for (_, p) in &m.prim_funcs {
        p.check_well_formed(&mut diags);
    }
    diags
}

fn check_function(m: &Module, f: &Function, diags: &mut Vec<Diagnostic>) {
    let mut scope: HashSet<String> = f.params.iter().map(|(n, _)| n.clone()).collect();
    let declared: HashSet<u32> = f.sym_vars.iter().map(|v| v.id).collect();

    for (_, ann) in &f.params {
        check_ann_vars(f, ann, &declared, diags);
    }
    check_body(m, f, &f.body, &mut scope, &declared, diags, false);
}

#[allow(clippy::too_many_arguments)]
fn check_body(
    m: &Module,
    f: &Function,
    body: &Body,
    scope: &mut HashSet<String>,
    declared: &HashSet<u32>,
    diags: &mut Vec<Diagnostic>,
    _in_dataflow: bool,
) {
    for (bi, block) in body.blocks.iter().enumerate() {
        let in_df = matches!(block, Block::Dataflow(_));
        for binding in block.bindings() {
            check_expr(m, f, binding.value(), scope, diags, in_df, bi);
            if let Some(ann) = binding.ann() {
                check_ann_vars(f, ann, declared, diags);
                check_out_ann_shape(binding, ann, diags);
            }
            scope.insert(binding.var().to_string());
        }
    }
    let mut used = Vec::new();
    body.result.free_vars(&mut used);
    for u in &used {
        if !scope.contains(u) {
            diags.push(Diagnostic::new(
                format!("use of undefined variable `{}` in `{}`", u, f.name),
                None,
            ));
        }
    }
}

fn check_out_ann_shape(binding: &Binding, _ann: &Annotation, diags: &mut Vec<Diagnostic>) {
    if let Expr::CallTir { out_ann, .. } | Expr::CallDpsLibrary { out_ann, .. } = binding.value() {
        let ok = match out_ann {
            Annotation::Tensor { shape, .. } => {
                matches!(shape, ShapeSpec::Known(_) | ShapeSpec::RankOnly(_))
            }
            Annotation::Tuple(elems) => elems.iter().all(|e| {
                matches!(
                    e,
                    Annotation::Tensor { shape: ShapeSpec::Known(_) | ShapeSpec::RankOnly(_), .. }
                )
            }),
            _ => false,
        };
        if !ok {
            diags.push(Diagnostic::new(
                format!(
                    "binding `{}`: call_tir/call_dps_library output annotation must be a \
                     tensor (or tuple of tensors) with known or rank-only shape",
                    binding.var()
                ),
                Some(binding.span()),
            ));
        }
    }
}

fn check_ann_vars(f: &Function, ann: &Annotation, declared: &HashSet<u32>, diags: &mut Vec<Diagnostic>) {
    for v in ann.vars() {
        if !declared.contains(&v.id) {
            diags.push(Diagnostic::new(
                format!(
                    "symbolic variable `{}` used in `{}` is not in the function's symbol table",
                    v.name, f.name
                ),
                None,
            ));
        }
    }
}

fn check_expr(
    m: &Module,
    f: &Function,
    e: &Expr,
    scope: &HashSet<String>,
    diags: &mut Vec<Diagnostic>,
    in_dataflow: bool,
    block_idx: usize,
) {
    match e {
        Expr::Var(n) => {
            if !scope.contains(n) {
                diags.push(Diagnostic::new(
                    format!("use of undefined variable `{}` in `{}`", n, f.name),
                    None,
                ));
            }
        }
        Expr::ConstTensor { dims, data } => {
            let count: i64 = dims.iter().product();
            if count != data.len() as i64 {
                diags.push(Diagnostic::new(
                    format!("constant tensor in `{}` has {} elements for shape {:?}", f.name, data.len(), dims),
                    None,
                ));
            }
        }
        Expr::ShapeLit(_) | Expr::AllocStorage { .. } => {}
        Expr::TupleMake(elems) => {
            for x in elems {
                check_expr(m, f, x, scope, diags, in_dataflow, block_idx);
            }
        }
        Expr::TupleGet(x, _) => check_expr(m, f, x, scope, diags, in_dataflow, block_idx),
        Expr::CallOp { args, .. } => {
            for a in args {
                check_expr(m, f, a, scope, diags, in_dataflow, block_idx);
            }
        }
        Expr::CallFunc { callee, args } => {
            if !m.graph_funcs.contains_key(callee) {
                diags.push(Diagnostic::new(
                    format!("call to unknown function `{}` in `{}`", callee, f.name),
                    None,
                ));
            }
            for a in args {
                check_expr(m, f, a, scope, diags, in_dataflow, block_idx);
            }
        }
        Expr::CallTir { prim, args, .. } | Expr::KernelCall { prim, args, .. } => {
            if !m.prim_funcs.contains_key(prim) {
                diags.push(Diagnostic::new(
                    format!("call_tir references missing tensor program `{}` in `{}`", prim, f.name),
                    None,
                ));
            }
            for a in args {
                check_expr(m, f, a, scope, diags, in_dataflow, block_idx);
            }
            if let Expr::KernelCall { dests, .. } = e {
                for d in dests {
                    check_expr(m, f, d, scope, diags, in_dataflow, block_idx);
                }
            }
        }
        Expr::CallDpsLibrary { args, .. } => {
            for a in args {
                check_expr(m, f, a, scope, diags, in_dataflow, block_idx);
            }
        }
        Expr::LibraryCall { args, dests, .. } => {
            for a in args.iter().chain(dests) {
                check_expr(m, f, a, scope, diags, in_dataflow, block_idx);
            }
        }
        Expr::If { cond, then_body, else_body } => {
            if in_dataflow {
                diags.push(Diagnostic::new(
                    format!("`if` may not appear inside dataflow block {} of `{}`", block_idx, f.name),
                    None,
                ));
            }
            check_expr(m, f, cond, scope, diags, in_dataflow, block_idx);
            let declared: HashSet<u32> = f.sym_vars.iter().map(|v| v.id).collect();
            let mut s1 = scope.clone();
            check_body(m, f, then_body, &mut s1, &declared, diags, in_dataflow);
            let mut s2 = scope.clone();
            check_body(m, f, else_body, &mut s2, &declared, diags, in_dataflow);
        }
        Expr::AllocTensor { storage, .. } => {
            check_expr(m, f, storage, scope, diags, in_dataflow, block_idx);
        }
    }
}

// ---------------------------------------------------------------------------
// dataflow_dce
// ---------------------------------------------------------------------------

/// Remove bindings inside dataflow blocks that are transitively unused.
/// Plain-block bindings are conservatively retained.
pub fn dataflow_dce(f: &Function) -> Function {
    let mut live: HashSet<String> = HashSet::new();
    let mut seed = Vec::new();
    f.body.result.free_vars(&mut seed);
    // Everything referenced from plain blocks or the result seeds liveness.
    for block in &f.body.blocks {
        if let Block::Plain(bindings) = block {
            for b in bindings {
                b.value().free_vars(&mut seed);
                seed.push(b.var().to_string());
            }
        }
    }
    live.extend(seed);

    // Backward propagation across all dataflow bindings.
    let mut changed = true;
    while changed {
        changed = false;
        for block in &f.body.blocks {
            if let Block::Dataflow(bindings) = block {
                for b in bindings.iter().rev() {
                    if live.contains(b.var()) {
                        let mut uses = Vec::new();
                        b.value().free_vars(&mut uses);
                        for u in uses {
                            if live.insert(u) {
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = f.clone();
    for block in &mut out.body.blocks {
        if let Block::Dataflow(bindings) = block {
            bindings.retain(|b| live.contains(b.var()));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// erase_annotations
// ---------------------------------------------------------------------------

/// Replace every annotation by Object. Requires a fully lowered module.
pub fn erase_annotations(m: &Module) -> Result<Module, IrError> {
    for (name, f) in &m.graph_funcs {
        if function_has_call_op(f) {
            return Err(IrError::NotLowered(name.clone()));
        }
    }
    let mut out = m.clone();
    for (_, f) in out.graph_funcs.iter_mut() {
        for (_, ann) in f.params.iter_mut() {
            *ann = Annotation::Object;
        }
        f.ret_ann = Annotation::Object;
        erase_body(&mut f.body);
    }
    Ok(out)
}

fn erase_body(body: &mut Body) {
    for block in &mut body.blocks {
        for binding in block.bindings_mut() {
            match binding {
                Binding::Bind { ann, value, .. } => {
                    *ann = ann.as_ref().map(|_| Annotation::Object);
                    erase_expr(value);
                }
                Binding::MatchCast { value, .. } => {
                    // match_cast annotations survive: they are the runtime checks.
                    erase_expr(value);
                }
            }
        }
    }
    erase_expr(&mut body.result);
}

fn erase_expr(e: &mut Expr) {
    match e {
        Expr::If { cond, then_body, else_body } => {
            erase_expr(cond);
            erase_body(then_body);
            erase_body(else_body);
        }
        Expr::TupleMake(elems) => elems.iter_mut().for_each(erase_expr),
        Expr::TupleGet(x, _) => erase_expr(x),
        Expr::CallFunc { args, .. }
        | Expr::CallTir { args, .. }
        | Expr::CallDpsLibrary { args, .. } => args.iter_mut().for_each(erase_expr),
        Expr::KernelCall { args, dests, .. } | Expr::LibraryCall { args, dests, .. } => {
            args.iter_mut().for_each(erase_expr);
            dests.iter_mut().for_each(erase_expr);
        }
        _ => {}
    }
}

fn function_has_call_op(f: &Function) -> bool {
    fn body_has(b: &Body) -> bool {
        b.blocks
            .iter()
            .flat_map(|bl| bl.bindings())
            .any(|binding| expr_has(binding.value()))
            || expr_has(&b.result)
    }
    fn expr_has(e: &Expr) -> bool {
        match e {
            Expr::CallOp { .. } => true,
            Expr::TupleMake(elems) => elems.iter().any(expr_has),
            Expr::TupleGet(x, _) => expr_has(x),
            Expr::CallFunc { args, .. }
            | Expr::CallTir { args, .. }
            | Expr::CallDpsLibrary { args, .. } => args.iter().any(expr_has),
            Expr::If { cond, then_body, else_body } => {
                expr_has(cond) || body_has(then_body) || body_has(else_body)
            }
            Expr::KernelCall { args, dests, .. } | Expr::LibraryCall { args, dests, .. } => {
                args.iter().any(expr_has) || dests.iter().any(expr_has)
            }
            _ => false,
        }
    }
    body_has(&f.body)
}
