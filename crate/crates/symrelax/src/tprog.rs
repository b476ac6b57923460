//! Loop-level tensor programs in destination-passing style, their reference
//! executor, and compute-pattern classification.

use std::collections::HashMap;

use thiserror::Error;

use crate::ir::{Annotation, Diagnostic, DType, OpAttrs, OpName, ShapeSpec, SourceSpan};
use crate::symexpr::{self, evaluate, normalize, prove_equal, Provability, SymExpr, SymVar};
use crate::tensor::{index_space, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BufferDecl {
    pub name: String,
    pub dims: Vec<SymExpr>,
    pub dtype: DType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combiner {
    Sum,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScalarConst {
    F(f64),
    I(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarBinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScalarExpr {
    Read { buffer: String, indices: Vec<SymExpr> },
    ConstF(f64),
    ConstI(i64),
    Bin(ScalarBinOp, Box<ScalarExpr>, Box<ScalarExpr>),
    Exp(Box<ScalarExpr>),
    /// A symbolic integer value used as a scalar (loop vars, shape params).
    Sym(SymExpr),
    Select { cond: Box<Cmp>, then_val: Box<ScalarExpr>, else_val: Box<ScalarExpr> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cmp {
    pub lhs: SymExpr,
    pub op: CmpOp,
    pub rhs: SymExpr,
}

impl ScalarExpr {
    pub fn read(buffer: impl Into<String>, indices: Vec<SymExpr>) -> ScalarExpr {
        ScalarExpr::Read { buffer: buffer.into(), indices }
    }

    pub fn bin(op: ScalarBinOp, a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Bin(op, Box::new(a), Box::new(b))
    }

    fn collect_reads<'a>(&'a self, out: &mut Vec<(&'a str, &'a [SymExpr])>) {
        match self {
            ScalarExpr::Read { buffer, indices } => out.push((buffer, indices)),
            ScalarExpr::Bin(_, a, b) => {
                a.collect_reads(out);
                b.collect_reads(out);
            }
            ScalarExpr::Exp(a) => a.collect_reads(out),
            ScalarExpr::Select { then_val, else_val, .. } => {
                then_val.collect_reads(out);
                else_val.collect_reads(out);
            }
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub out: String,
    pub out_loop_vars: Vec<SymVar>,
    pub out_dims: Vec<SymExpr>,
    pub reduce_dims: Vec<(SymVar, SymExpr)>,
    pub init: Option<ScalarConst>,
    pub combiner: Option<Combiner>,
    pub body: ScalarExpr,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimFunc {
    pub name: String,
    /// Inputs first, then `num_outputs` output buffers.
    pub buffer_params: Vec<BufferDecl>,
    pub num_outputs: usize,
    pub scalar_params: Vec<SymVar>,
    pub temps: Vec<BufferDecl>,
    /// One optional workspace temporary that memory planning may lift out
    /// into an extra caller-allocated parameter.
    pub workspace: Option<BufferDecl>,
    /// Operator provenance used by library pattern matching.
    pub op_hints: Vec<OpName>,
    pub stages: Vec<Stage>,
    pub span: SourceSpan,
}

impl PrimFunc {
    pub fn inputs(&self) -> &[BufferDecl] {
        &self.buffer_params[..self.buffer_params.len() - self.num_outputs]
    }

    pub fn outputs(&self) -> &[BufferDecl] {
        &self.buffer_params[self.buffer_params.len() - self.num_outputs..]
    }

    pub fn check_well_formed(&self, diags: &mut Vec<Diagnostic>) {
        if self.num_outputs == 0 || self.num_outputs > self.buffer_params.len() {
            diags.push(Diagnostic {
                message: format!("tensor program `{}` has an invalid output count", self.name),
                span: Some(self.span),
            });
        }
        for st in &self.stages {
            if !self.reduce_ok(st) {
                diags.push(Diagnostic {
                    message: format!(
                        "stage writing `{}` in `{}` has reduce loops but no init/combiner",
                        st.out, self.name
                    ),
                    span: Some(st.span),
                });
            }
            if self.buffer(&st.out).is_none() {
                diags.push(Diagnostic {
                    message: format!("stage writes unknown buffer `{}` in `{}`", st.out, self.name),
                    span: Some(st.span),
                });
            }
            let mut reads = Vec::new();
            st.body.collect_reads(&mut reads);
            for (b, _) in reads {
                if self.buffer(b).is_none() {
                    diags.push(Diagnostic {
                        message: format!("stage reads unknown buffer `{}` in `{}`", b, self.name),
                        span: Some(st.span),
                    });
                }
            }
        }
    }

    fn reduce_ok(&self, st: &Stage) -> bool {
        st.reduce_dims.is_empty() || (st.init.is_some() && st.combiner.is_some())
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferDecl> {
        self.buffer_params
            .iter()
            .chain(&self.temps)
            .chain(self.workspace.as_ref())
            .find(|b| b.name == name)
    }

    /// Variables appearing in buffer dims that cannot be bound from a bare
    /// input-buffer dimension; these must be supplied as scalar params.
    pub fn underivable_vars(&self) -> Vec<SymVar> {
        let mut derivable: Vec<u32> = Vec::new();
        for b in self.inputs() {
            for d in &b.dims {
                if let Some(v) = d.as_var() {
                    derivable.push(v.id);
                }
            }
        }
        let mut out: Vec<SymVar> = Vec::new();
        for b in self.buffer_params.iter().chain(&self.temps).chain(self.workspace.as_ref()) {
            for d in &b.dims {
                for v in d.vars() {
                    if !derivable.contains(&v.id) && !out.iter().any(|w| w.id == v.id) {
                        out.push(v);
                    }
                }
            }
        }
        out.sort_by_key(|v| v.id);
        out
    }
}

// ---------------------------------------------------------------------------
// Pattern classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PatternKind {
    ElementWise,
    Broadcast,
    Injective,
    Reduction,
    Opaque,
}

pub fn classify(p: &PrimFunc) -> PatternKind {
    if p.stages.iter().any(|s| !s.reduce_dims.is_empty()) {
        return PatternKind::Reduction;
    }
    if p.stages.len() != 1 || !p.temps.is_empty() || p.workspace.is_some() {
        return PatternKind::Opaque;
    }
    let st = &p.stages[0];
    let mut reads = Vec::new();
    st.body.collect_reads(&mut reads);
    if reads.is_empty() {
        return PatternKind::ElementWise;
    }

    let out_vars: Vec<&SymVar> = st.out_loop_vars.iter().collect();
    let identity = |indices: &[SymExpr]| {
        indices.len() == out_vars.len()
            && indices
                .iter()
                .zip(&out_vars)
                .all(|(e, v)| matches!(e.as_var(), Some(w) if w.id == v.id))
    };

    if reads.iter().all(|(_, idx)| identity(idx)) {
        return PatternKind::ElementWise;
    }

    // Broadcast: every index slot is a constant or a distinct out var, and the
    // vars appear as an order-preserving subsequence of the out loop vars.
    let broadcast = |indices: &[SymExpr]| {
        let mut last_pos: isize = -1;
        for e in indices {
            match e {
                SymExpr::Const(_) => {}
                SymExpr::Var(v) => {
                    match out_vars.iter().position(|w| w.id == v.id) {
                        Some(p) if (p as isize) > last_pos => last_pos = p as isize,
                        _ => return false,
                    }
                }
                _ => return false,
            }
        }
        true
    };
    if reads.iter().all(|(_, idx)| broadcast(idx)) {
        return PatternKind::Broadcast;
    }

    // Injective: unit-coefficient affine slots with each out var used at most
    // once per read, or a linearize/delinearize pair with matching extents.
    let loop_var_ids: Vec<u32> = st.out_loop_vars.iter().map(|v| v.id).collect();
    let affine_injective = |indices: &[SymExpr]| {
        let mut used: Vec<u32> = Vec::new();
        for e in indices {
            match single_unit_var(e, &loop_var_ids) {
                Some(Some(id)) => {
                    if used.contains(&id) {
                        return false;
                    }
                    used.push(id);
                }
                Some(None) => {}
                None => return false,
            }
        }
        true
    };
    let reshape_like = |buffer: &str, indices: &[SymExpr]| {
        let Some(buf) = p.buffer(buffer) else { return false };
        if indices.len() != buf.dims.len() {
            return false;
        }
        let linear = linearize(
            &st.out_loop_vars.iter().map(|v| SymExpr::Var(v.clone())).collect::<Vec<_>>(),
            &st.out_dims,
        );
        let expected = delinearize(&linear, &buf.dims);
        indices
            .iter()
            .zip(&expected)
            .all(|(a, b)| prove_equal(a, b) == Provability::ProvablyEqual)
    };
    if reads
        .iter()
        .all(|(b, idx)| affine_injective(idx) || reshape_like(b, idx))
    {
        return PatternKind::Injective;
    }
    PatternKind::Opaque
}

/// For an index slot: Some(Some(id)) if it is `v + offset` with unit
/// coefficient on exactly one loop var `v` (offset free of loop vars),
/// Some(None) if it contains no loop vars at all, None otherwise.
fn single_unit_var(e: &SymExpr, loop_vars: &[u32]) -> Option<Option<u32>> {
    let vars = e.vars();
    let used: Vec<&SymVar> = vars.iter().filter(|v| loop_vars.contains(&v.id)).collect();
    match used.len() {
        0 => Some(None),
        1 => {
            let v = used[0];
            // e - v must be free of loop vars
            let rest = normalize(&SymExpr::sub(e.clone(), SymExpr::Var(v.clone())));
            if rest.vars().iter().any(|w| loop_vars.contains(&w.id)) {
                None
            } else {
                Some(Some(v.id))
            }
        }
        _ => None,
    }
}

/// Row-major flat index expression of `vars` within extents `dims`.
pub fn linearize(vars: &[SymExpr], dims: &[SymExpr]) -> SymExpr {
    let mut acc = SymExpr::constant(0);
    for (v, d) in vars.iter().zip(dims) {
        acc = SymExpr::add(SymExpr::mul(acc, d.clone()), v.clone());
    }
    normalize(&acc)
}

/// Inverse of `linearize`: multi-index expressions of a flat index.
pub fn delinearize(flat: &SymExpr, dims: &[SymExpr]) -> Vec<SymExpr> {
    let n = dims.len();
    let mut out = vec![SymExpr::constant(0); n];
    let mut rest = flat.clone();
    for i in (0..n).rev() {
        if i == 0 {
            out[0] = normalize(&rest);
        } else {
            out[i] = normalize(&SymExpr::modulo(rest.clone(), dims[i].clone()));
            rest = SymExpr::floordiv(rest, dims[i].clone());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("shape mismatch in `{prim}`: {message}")]
    ShapeMismatch { prim: String, message: String },
    #[error("out-of-bounds read of `{buffer}` at {indices:?} in `{prim}`")]
    OutOfBoundsRead { prim: String, buffer: String, indices: Vec<i64> },
    #[error("symbolic evaluation failed in `{prim}`: {source}")]
    Eval {
        prim: String,
        #[source]
        source: symexpr::EvalError,
    },
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    F(f64),
    I(i64),
    B(bool),
}

impl Scalar {
    fn as_f(self) -> f64 {
        match self {
            Scalar::F(x) => x,
            Scalar::I(x) => x as f64,
            Scalar::B(x) => x as i64 as f64,
        }
    }

    fn as_i(self) -> i64 {
        match self {
            Scalar::F(x) => x as i64,
            Scalar::I(x) => x,
            Scalar::B(x) => x as i64,
        }
    }
}

fn scalar_bin(op: ScalarBinOp, a: Scalar, b: Scalar) -> Scalar {
    let float = matches!(a, Scalar::F(_)) || matches!(b, Scalar::F(_));
    if float {
        let (x, y) = (a.as_f(), b.as_f());
        Scalar::F(match op {
            ScalarBinOp::Add => x + y,
            ScalarBinOp::Sub => x - y,
            ScalarBinOp::Mul => x * y,
            ScalarBinOp::Div => x / y,
            ScalarBinOp::Max => x.max(y),
            ScalarBinOp::Min => x.min(y),
        })
    } else {
        let (x, y) = (a.as_i(), b.as_i());
        Scalar::I(match op {
            ScalarBinOp::Add => x.wrapping_add(y),
            ScalarBinOp::Sub => x.wrapping_sub(y),
            ScalarBinOp::Mul => x.wrapping_mul(y),
            ScalarBinOp::Div => {
                if y == 0 {
                    0
                } else {
                    symexpr::floor_div(x, y)
                }
            }
            ScalarBinOp::Max => x.max(y),
            ScalarBinOp::Min => x.min(y),
        })
    }
}

/// Execute a tensor program over concrete buffers (inputs then outputs, in
/// parameter order). Outputs must be pre-allocated; inputs are never written.
pub fn exec_prim(
    p: &PrimFunc,
    buffers: &[Tensor],
    scalars: &HashMap<u32, i64>,
) -> Result<(), ExecError> {
    if buffers.len() != p.buffer_params.len() {
        return Err(ExecError::ShapeMismatch {
            prim: p.name.clone(),
            message: format!("expected {} buffers, got {}", p.buffer_params.len(), buffers.len()),
        });
    }
    let mut env: HashMap<u32, i64> = scalars.clone();

    // Bind bare-var dims from input buffers, then verify all dims.
    let num_inputs = p.buffer_params.len() - p.num_outputs;
    for (decl, t) in p.buffer_params.iter().take(num_inputs).zip(buffers) {
        if decl.dims.len() != t.dims.len() {
            return Err(ExecError::ShapeMismatch {
                prim: p.name.clone(),
                message: format!(
                    "buffer `{}` expects rank {}, got rank {}",
                    decl.name,
                    decl.dims.len(),
                    t.dims.len()
                ),
            });
        }
        for (d, actual) in decl.dims.iter().zip(&t.dims) {
            if let Some(v) = d.as_var() {
                env.entry(v.id).or_insert(*actual);
            }
        }
    }
    for (decl, t) in p.buffer_params.iter().zip(buffers) {
        for (d, actual) in decl.dims.iter().zip(&t.dims) {
            let expected = evaluate(d, &env)
                .map_err(|e| ExecError::Eval { prim: p.name.clone(), source: e })?;
            if expected != *actual {
                return Err(ExecError::ShapeMismatch {
                    prim: p.name.clone(),
                    message: format!(
                        "buffer `{}` dim `{}` expects {}, got {}",
                        decl.name, d, expected, actual
                    ),
                });
            }
        }
    }

    // Allocate temporaries (and a not-yet-lifted workspace).
    let mut frame: HashMap<&str, Tensor> = HashMap::new();
    for (decl, t) in p.buffer_params.iter().zip(buffers) {
        frame.insert(decl.name.as_str(), t.clone());
    }
    for decl in p.temps.iter().chain(p.workspace.as_ref()) {
        let dims: Result<Vec<i64>, _> = decl.dims.iter().map(|d| evaluate(d, &env)).collect();
        let dims = dims.map_err(|e| ExecError::Eval { prim: p.name.clone(), source: e })?;
        frame.insert(decl.name.as_str(), Tensor::zeros(decl.dtype, dims));
    }

    for st in &p.stages {
        run_stage(p, st, &frame, &env)?;
    }
    Ok(())
}

fn run_stage(
    p: &PrimFunc,
    st: &Stage,
    frame: &HashMap<&str, Tensor>,
    env: &HashMap<u32, i64>,
) -> Result<(), ExecError> {
    let out = frame.get(st.out.as_str()).expect("checked buffer");
    let extents: Result<Vec<i64>, _> = st.out_dims.iter().map(|d| evaluate(d, env)).collect();
    let extents = extents.map_err(|e| ExecError::Eval { prim: p.name.clone(), source: e })?;
    let red_extents: Result<Vec<i64>, _> =
        st.reduce_dims.iter().map(|(_, d)| evaluate(d, env)).collect();
    let red_extents = red_extents.map_err(|e| ExecError::Eval { prim: p.name.clone(), source: e })?;

    for out_idx in index_space(&extents) {
        let mut local = env.clone();
        for (v, i) in st.out_loop_vars.iter().zip(&out_idx) {
            local.insert(v.id, *i);
        }
        let value = if st.reduce_dims.is_empty() {
            eval_scalar(p, &st.body, frame, &local)?
        } else {
            let mut acc = match st.init.as_ref().unwrap() {
                ScalarConst::F(x) => Scalar::F(*x),
                ScalarConst::I(x) => Scalar::I(*x),
            };
            for red_idx in index_space(&red_extents) {
                for ((v, _), i) in st.reduce_dims.iter().zip(&red_idx) {
                    local.insert(v.id, *i);
                }
                let x = eval_scalar(p, &st.body, frame, &local)?;
                acc = match st.combiner.unwrap() {
                    Combiner::Sum => scalar_bin(ScalarBinOp::Add, acc, x),
                    Combiner::Max => scalar_bin(ScalarBinOp::Max, acc, x),
                };
            }
            acc
        };
        let flat = out.flat_index(&out_idx).expect("output index in bounds");
        match out.dtype {
            DType::F32 => out.set_f32(flat, value.as_f() as f32),
            DType::I64 => out.set_i64(flat, value.as_i()),
            DType::Bool => out.set_bool(flat, value.as_i() != 0),
        }
    }
    Ok(())
}

fn eval_scalar(
    p: &PrimFunc,
    e: &ScalarExpr,
    frame: &HashMap<&str, Tensor>,
    env: &HashMap<u32, i64>,
) -> Result<Scalar, ExecError> {
    match e {
        ScalarExpr::Read { buffer, indices } => {
            let t = frame.get(buffer.as_str()).expect("checked buffer");
            let idx: Result<Vec<i64>, _> = indices.iter().map(|i| evaluate(i, env)).collect();
            let idx = idx.map_err(|er| ExecError::Eval { prim: p.name.clone(), source: er })?;
            let flat = t.flat_index(&idx).ok_or_else(|| ExecError::OutOfBoundsRead {
                prim: p.name.clone(),
                buffer: buffer.clone(),
                indices: idx.clone(),
            })?;
            Ok(match t.dtype {
                DType::F32 => Scalar::F(t.get_f32(flat) as f64),
                DType::I64 => Scalar::I(t.get_i64(flat)),
                DType::Bool => Scalar::B(t.get_bool(flat)),
            })
        }
        ScalarExpr::ConstF(x) => Ok(Scalar::F(*x)),
        ScalarExpr::ConstI(x) => Ok(Scalar::I(*x)),
        ScalarExpr::Bin(op, a, b) => Ok(scalar_bin(
            *op,
            eval_scalar(p, a, frame, env)?,
            eval_scalar(p, b, frame, env)?,
        )),
        ScalarExpr::Exp(a) => {
            let x = eval_scalar(p, a, frame, env)?.as_f();
            Ok(Scalar::F((x as f32).exp() as f64))
        }
        ScalarExpr::Sym(s) => evaluate(s, env)
            .map(Scalar::I)
            .map_err(|er| ExecError::Eval { prim: p.name.clone(), source: er }),
        ScalarExpr::Select { cond, then_val, else_val } => {
            let l = evaluate(&cond.lhs, env)
                .map_err(|er| ExecError::Eval { prim: p.name.clone(), source: er })?;
            let r = evaluate(&cond.rhs, env)
                .map_err(|er| ExecError::Eval { prim: p.name.clone(), source: er })?;
            let taken = match cond.op {
                CmpOp::Lt => l < r,
                CmpOp::Le => l <= r,
                CmpOp::Eq => l == r,
                CmpOp::Ge => l >= r,
                CmpOp::Gt => l > r,
            };
            if taken {
                eval_scalar(p, then_val, frame, env)
            } else {
                eval_scalar(p, else_val, frame, env)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Legalization of graph operators to tensor programs
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum DeriveError {
    #[error("operator `{0}` has no loop-level form")]
    UnsupportedOp(String),
    #[error("operator `{0}` needs a match_cast: input shape is not fully known")]
    NeedsMatchCast(String),
    #[error("operator `{op}` cannot be legalized: {message}")]
    Invalid { op: String, message: String },
}

fn known_dims<'a>(op: OpName, ann: &'a Annotation) -> Result<(&'a [SymExpr], DType), DeriveError> {
    match ann {
        Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype: Some(dt) } => Ok((dims, *dt)),
        Annotation::Tensor { .. } => Err(DeriveError::NeedsMatchCast(op.name().into())),
        _ => Err(DeriveError::Invalid {
            op: op.name().into(),
            message: "argument is not a tensor".into(),
        }),
    }
}

fn fresh_loop_vars(prefix: &str, n: usize, next_id: &mut u32) -> Vec<SymVar> {
    (0..n)
        .map(|i| {
            let v = SymVar::new(format!("{}{}", prefix, i), *next_id);
            *next_id += 1;
            v
        })
        .collect()
}

/// Derive the loop-level tensor program implementing `op` at the given
/// (fully known) shapes. Symbolic dims flow into buffer dims unchanged.
pub fn derive_prim(
    op: OpName,
    attrs: &OpAttrs,
    arg_anns: &[Annotation],
    out_ann: &Annotation,
    name: &str,
    next_id: &mut u32,
) -> Result<PrimFunc, DeriveError> {
    let span = SourceSpan::default();
    let mk = |buffer_params: Vec<BufferDecl>, num_outputs: usize, stages: Vec<Stage>| PrimFunc {
        name: name.to_string(),
        buffer_params,
        num_outputs,
        scalar_params: Vec::new(),
        temps: Vec::new(),
        workspace: None,
        op_hints: vec![op],
        stages,
        span,
    };
    let mut prim = match op {
        OpName::Add | OpName::Sub | OpName::Mul | OpName::Divide => {
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let (b_dims, _) = known_dims(op, &arg_anns[1])?;
            let (o_dims, odt) = known_dims(op, out_ann)?;
            let vars = fresh_loop_vars("i", o_dims.len(), next_id);
            let read = |dims: &[SymExpr], bname: &str| {
                let offset = o_dims.len() - dims.len();
                let idx: Vec<SymExpr> = dims
                    .iter()
                    .enumerate()
                    .map(|(j, d)| {
                        let ov = &vars[offset + j];
                        let arg_is_one = prove_equal(d, &SymExpr::constant(1))
                            == Provability::ProvablyEqual;
                        let out_is_one = prove_equal(&o_dims[offset + j], &SymExpr::constant(1))
                            == Provability::ProvablyEqual;
                        if arg_is_one && !out_is_one {
                            SymExpr::constant(0)
                        } else {
                            SymExpr::Var(ov.clone())
                        }
                    })
                    .collect();
                ScalarExpr::read(bname, idx)
            };
            let bop = match op {
                OpName::Add => ScalarBinOp::Add,
                OpName::Sub => ScalarBinOp::Sub,
                OpName::Mul => ScalarBinOp::Mul,
                _ => ScalarBinOp::Div,
            };
            let body = ScalarExpr::bin(bop, read(a_dims, "A"), read(b_dims, "B"));
            mk(
                vec![
                    BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "B".into(), dims: b_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "O".into(), dims: o_dims.to_vec(), dtype: odt },
                ],
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![],
                    init: None,
                    combiner: None,
                    body,
                    span,
                }],
            )
        }
        OpName::Exp | OpName::Relu => {
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let vars = fresh_loop_vars("i", a_dims.len(), next_id);
            let idx: Vec<SymExpr> = vars.iter().map(|v| SymExpr::Var(v.clone())).collect();
            let read = ScalarExpr::read("A", idx);
            let body = if op == OpName::Exp {
                ScalarExpr::Exp(Box::new(read))
            } else {
                let zero = match dt {
                    DType::I64 => ScalarExpr::ConstI(0),
                    _ => ScalarExpr::ConstF(0.0),
                };
                ScalarExpr::bin(ScalarBinOp::Max, read, zero)
            };
            mk(
                vec![
                    BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "O".into(), dims: a_dims.to_vec(), dtype: dt },
                ],
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: a_dims.to_vec(),
                    reduce_dims: vec![],
                    init: None,
                    combiner: None,
                    body,
                    span,
                }],
            )
        }
        OpName::Matmul => {
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let (b_dims, _) = known_dims(op, &arg_anns[1])?;
            if a_dims.len() != 2 || b_dims.len() != 2 {
                return Err(DeriveError::Invalid {
                    op: "matmul".into(),
                    message: "only rank-2 operands are supported".into(),
                });
            }
            let (o_dims, odt) = known_dims(op, out_ann)?;
            let vars = fresh_loop_vars("i", 2, next_id);
            let red = fresh_loop_vars("k", 1, next_id);
            let body = ScalarExpr::bin(
                ScalarBinOp::Mul,
                ScalarExpr::read("A", vec![SymExpr::Var(vars[0].clone()), SymExpr::Var(red[0].clone())]),
                ScalarExpr::read("B", vec![SymExpr::Var(red[0].clone()), SymExpr::Var(vars[1].clone())]),
            );
            let init = match odt {
                DType::I64 => ScalarConst::I(0),
                _ => ScalarConst::F(0.0),
            };
            mk(
                vec![
                    BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "B".into(), dims: b_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "O".into(), dims: o_dims.to_vec(), dtype: odt },
                ],
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![(red[0].clone(), a_dims[1].clone())],
                    init: Some(init),
                    combiner: Some(Combiner::Sum),
                    body,
                    span,
                }],
            )
        }
        OpName::Flatten | OpName::Reshape => {
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let (o_dims, _) = known_dims(op, out_ann)?;
            let vars = fresh_loop_vars("i", o_dims.len(), next_id);
            let var_exprs: Vec<SymExpr> = vars.iter().map(|v| SymExpr::Var(v.clone())).collect();
            let flat = linearize(&var_exprs, o_dims);
            let idx = delinearize(&flat, a_dims);
            mk(
                vec![
                    BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "O".into(), dims: o_dims.to_vec(), dtype: dt },
                ],
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![],
                    init: None,
                    combiner: None,
                    body: ScalarExpr::read("A", idx),
                    span,
                }],
            )
        }
        OpName::PermuteDims => {
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let axes = match attrs {
                OpAttrs::Axes(axes) => axes.clone(),
                _ => (0..a_dims.len()).rev().collect(),
            };
            let (o_dims, _) = known_dims(op, out_ann)?;
            let vars = fresh_loop_vars("i", o_dims.len(), next_id);
            // out[i0..ik] = A at input axis p read from the out var t with axes[t] == p
            let idx: Vec<SymExpr> = (0..a_dims.len())
                .map(|p| {
                    let t = axes.iter().position(|a| *a == p).expect("axes is a permutation");
                    SymExpr::Var(vars[t].clone())
                })
                .collect();
            mk(
                vec![
                    BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "O".into(), dims: o_dims.to_vec(), dtype: dt },
                ],
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![],
                    init: None,
                    combiner: None,
                    body: ScalarExpr::read("A", idx),
                    span,
                }],
            )
        }
        OpName::Concat => {
            let axis = match attrs {
                OpAttrs::Axis(a) => *a,
                _ => 0,
            };
            let mut inputs = Vec::new();
            for (i, ann) in arg_anns.iter().enumerate() {
                let (dims, dt) = known_dims(op, ann)?;
                inputs.push((format!("A{}", i), dims.to_vec(), dt));
            }
            let (o_dims, odt) = known_dims(op, out_ann)?;
            let vars = fresh_loop_vars("i", o_dims.len(), next_id);
            let axis_var = SymExpr::Var(vars[axis].clone());
            // Cumulative start offset of each input along the axis.
            let mut offsets = Vec::with_capacity(inputs.len());
            let mut acc = SymExpr::constant(0);
            for (_, dims, _) in &inputs {
                offsets.push(normalize(&acc));
                acc = SymExpr::add(acc, dims[axis].clone());
            }
            // Nested selects, innermost read is the last input.
            let mut body: Option<ScalarExpr> = None;
            for ((name_, dims, _), off) in inputs.iter().zip(&offsets).rev() {
                let local_idx: Vec<SymExpr> = vars
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        if j == axis {
                            normalize(&SymExpr::sub(axis_var.clone(), off.clone()))
                        } else {
                            SymExpr::Var(v.clone())
                        }
                    })
                    .collect();
                let read = ScalarExpr::read(name_.clone(), local_idx);
                body = Some(match body {
                    None => read,
                    Some(rest) => ScalarExpr::Select {
                        cond: Box::new(Cmp {
                            lhs: axis_var.clone(),
                            op: CmpOp::Lt,
                            rhs: normalize(&SymExpr::add(off.clone(), dims[axis].clone())),
                        }),
                        then_val: Box::new(read),
                        else_val: Box::new(rest),
                    },
                });
            }
            let body = body.unwrap();
            let mut params: Vec<BufferDecl> = inputs
                .iter()
                .map(|(n, d, dt)| BufferDecl { name: n.clone(), dims: d.clone(), dtype: *dt })
                .collect();
            params.push(BufferDecl { name: "O".into(), dims: o_dims.to_vec(), dtype: odt });
            mk(
                params,
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![],
                    init: None,
                    combiner: None,
                    body,
                    span,
                }],
            )
        }
        OpName::Split => {
            let (sections, axis) = match attrs {
                OpAttrs::SplitArgs { sections, axis } => (*sections, *axis),
                _ => {
                    return Err(DeriveError::Invalid {
                        op: "split".into(),
                        message: "split requires sections and axis attributes".into(),
                    })
                }
            };
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let out_anns = match out_ann {
                Annotation::Tuple(elems) => elems,
                _ => {
                    return Err(DeriveError::Invalid {
                        op: "split".into(),
                        message: "split output must be a tuple".into(),
                    })
                }
            };
            let mut params = vec![BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt }];
            let mut stages = Vec::new();
            for (s, ann) in out_anns.iter().enumerate() {
                let (o_dims, odt) = known_dims(op, ann)?;
                let bname = format!("O{}", s);
                let vars = fresh_loop_vars(&format!("s{}_i", s), o_dims.len(), next_id);
                let idx: Vec<SymExpr> = vars
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        if j == axis {
                            normalize(&SymExpr::add(
                                SymExpr::Var(v.clone()),
                                SymExpr::mul(SymExpr::constant(s as i64), o_dims[axis].clone()),
                            ))
                        } else {
                            SymExpr::Var(v.clone())
                        }
                    })
                    .collect();
                stages.push(Stage {
                    out: bname.clone(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![],
                    init: None,
                    combiner: None,
                    body: ScalarExpr::read("A", idx),
                    span,
                });
                params.push(BufferDecl { name: bname, dims: o_dims.to_vec(), dtype: odt });
            }
            mk(params, sections, stages)
        }
        OpName::Sum => {
            let axis = match attrs {
                OpAttrs::Axis(a) => *a,
                _ => 0,
            };
            let (a_dims, dt) = known_dims(op, &arg_anns[0])?;
            let (o_dims, odt) = known_dims(op, out_ann)?;
            let vars = fresh_loop_vars("i", o_dims.len(), next_id);
            let red = fresh_loop_vars("k", 1, next_id);
            let mut idx = Vec::new();
            let mut vi = 0;
            for j in 0..a_dims.len() {
                if j == axis {
                    idx.push(SymExpr::Var(red[0].clone()));
                } else {
                    idx.push(SymExpr::Var(vars[vi].clone()));
                    vi += 1;
                }
            }
            let init = match odt {
                DType::I64 => ScalarConst::I(0),
                _ => ScalarConst::F(0.0),
            };
            mk(
                vec![
                    BufferDecl { name: "A".into(), dims: a_dims.to_vec(), dtype: dt },
                    BufferDecl { name: "O".into(), dims: o_dims.to_vec(), dtype: odt },
                ],
                1,
                vec![Stage {
                    out: "O".into(),
                    out_loop_vars: vars,
                    out_dims: o_dims.to_vec(),
                    reduce_dims: vec![(red[0].clone(), a_dims[axis].clone())],
                    init: Some(init),
                    combiner: Some(Combiner::Sum),
                    body: ScalarExpr::read("A", idx),
                    span,
                }],
            )
        }
        OpName::Unique => return Err(DeriveError::UnsupportedOp("unique".into())),
    };
    prim.scalar_params = prim.underivable_vars();
    Ok(prim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Annotation;

    fn sv(name: &str, id: u32) -> SymVar {
        SymVar::new(name, id)
    }

    fn add_kernel() -> PrimFunc {
        let n = sv("n", 0);
        let mut next = 10;
        derive_prim(
            OpName::Add,
            &OpAttrs::None,
            &[
                Annotation::tensor(vec![SymExpr::Var(n.clone()), SymExpr::constant(4)], DType::F32),
                Annotation::tensor(vec![SymExpr::Var(n.clone()), SymExpr::constant(4)], DType::F32),
            ],
            &Annotation::tensor(vec![SymExpr::Var(n), SymExpr::constant(4)], DType::F32),
            "add0",
            &mut next,
        )
        .unwrap()
    }

    #[test]
    fn classify_add_elementwise() {
        assert_eq!(classify(&add_kernel()), PatternKind::ElementWise);
    }

    #[test]
    fn classify_bias_broadcast() {
        // C[i,j] = A[i,j] + B[j]
        let mut next = 0;
        let p = derive_prim(
            OpName::Add,
            &OpAttrs::None,
            &[
                Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(3)], DType::F32),
                Annotation::tensor(vec![SymExpr::constant(3)], DType::F32),
            ],
            &Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(3)], DType::F32),
            "bias",
            &mut next,
        )
        .unwrap();
        assert_eq!(classify(&p), PatternKind::Broadcast);
    }

    #[test]
    fn classify_matmul_reduction() {
        let mut next = 0;
        let p = derive_prim(
            OpName::Matmul,
            &OpAttrs::None,
            &[
                Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(3)], DType::F32),
                Annotation::tensor(vec![SymExpr::constant(3), SymExpr::constant(2)], DType::F32),
            ],
            &Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(2)], DType::F32),
            "mm",
            &mut next,
        )
        .unwrap();
        assert_eq!(classify(&p), PatternKind::Reduction);
    }

    #[test]
    fn classify_flatten_injective() {
        let n = sv("n", 0);
        let mut next = 1;
        let p = derive_prim(
            OpName::Flatten,
            &OpAttrs::None,
            &[Annotation::tensor(
                vec![SymExpr::Var(n.clone()), SymExpr::constant(4)],
                DType::F32,
            )],
            &Annotation::tensor(
                vec![SymExpr::mul(SymExpr::constant(4), SymExpr::Var(n))],
                DType::F32,
            ),
            "fl",
            &mut next,
        )
        .unwrap();
        assert_eq!(classify(&p), PatternKind::Injective);
    }

    #[test]
    fn flatten_exec_row_major() {
        let n = sv("n", 0);
        let mut next = 1;
        let p = derive_prim(
            OpName::Flatten,
            &OpAttrs::None,
            &[Annotation::tensor(
                vec![SymExpr::Var(n.clone()), SymExpr::constant(4)],
                DType::F32,
            )],
            &Annotation::tensor(
                vec![SymExpr::mul(SymExpr::constant(4), SymExpr::Var(n))],
                DType::F32,
            ),
            "fl",
            &mut next,
        )
        .unwrap();
        let input = Tensor::from_f32(vec![2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let out = Tensor::zeros(DType::F32, vec![8]);
        exec_prim(&p, &[input, out.clone()], &HashMap::new()).unwrap();
        assert_eq!(out.to_f32_vec(), vec![0., 1., 2., 3., 4., 5., 6., 7.]);
    }

    #[test]
    fn matmul_identity() {
        let mut next = 0;
        let p = derive_prim(
            OpName::Matmul,
            &OpAttrs::None,
            &[
                Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(2)], DType::F32),
                Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(2)], DType::F32),
            ],
            &Annotation::tensor(vec![SymExpr::constant(2), SymExpr::constant(2)], DType::F32),
            "mm",
            &mut next,
        )
        .unwrap();
        let ident = Tensor::from_f32(vec![2, 2], &[1., 0., 0., 1.]);
        let x = Tensor::from_f32(vec![2, 2], &[3., -1., 2., 7.]);
        let out = Tensor::zeros(DType::F32, vec![2, 2]);
        exec_prim(&p, &[ident, x.clone(), out.clone()], &HashMap::new()).unwrap();
        assert_eq!(out.to_f32_vec(), x.to_f32_vec());
    }

    #[test]
    fn exp_kernel_matches_libm() {
        let mut next = 0;
        let p = derive_prim(
            OpName::Exp,
            &OpAttrs::None,
            &[Annotation::tensor(vec![SymExpr::constant(2)], DType::F32)],
            &Annotation::tensor(vec![SymExpr::constant(2)], DType::F32),
            "exp0",
            &mut next,
        )
        .unwrap();
        let x = Tensor::from_f32(vec![2], &[0.0, 1.0]);
        let out = Tensor::zeros(DType::F32, vec![2]);
        exec_prim(&p, &[x, out.clone()], &HashMap::new()).unwrap();
        let got = out.to_f32_vec();
        assert_eq!(got[0], 1.0f32);
        assert_eq!(got[1], 1.0f32.exp());
        assert_eq!(got[1], 2.7182817f32);
    }

    #[test]
    fn unique_has_no_loop_form() {
        let mut next = 0;
        let err = derive_prim(
            OpName::Unique,
            &OpAttrs::None,
            &[Annotation::tensor(vec![SymExpr::constant(4)], DType::F32)],
            &Annotation::tensor_rank(1, DType::F32),
            "u",
            &mut next,
        )
        .unwrap_err();
        assert!(matches!(err, DeriveError::UnsupportedOp(_)));
    }

    #[test]
    fn exec_rejects_shape_mismatch() {
        let p = add_kernel();
        let a = Tensor::zeros(DType::F32, vec![2, 4]);
        let b = Tensor::zeros(DType::F32, vec![3, 4]);
        let o = Tensor::zeros(DType::F32, vec![2, 4]);
        let err = exec_prim(&p, &[a, b, o], &HashMap::new()).unwrap_err();
        assert!(matches!(err, ExecError::ShapeMismatch { .. }));
    }

    #[test]
    fn exec_does_not_write_inputs() {
        let p = add_kernel();
        let a = Tensor::from_f32(vec![1, 4], &[1., 2., 3., 4.]);
        let b = Tensor::from_f32(vec![1, 4], &[5., 6., 7., 8.]);
        let o = Tensor::zeros(DType::F32, vec![1, 4]);
        exec_prim(&p, &[a.clone(), b.clone(), o.clone()], &HashMap::new()).unwrap();
        assert_eq!(a.to_f32_vec(), vec![1., 2., 3., 4.]);
        assert_eq!(b.to_f32_vec(), vec![5., 6., 7., 8.]);
        assert_eq!(o.to_f32_vec(), vec![6., 8., 10., 12.]);
    }
}
