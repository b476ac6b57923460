//! Lowering a fully optimized module to register-machine instructions with a
//! host-side shape heap: slots hold runtime values of symbolic expressions,
//! populated from input dims and small arithmetic programs.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use crate::deduce::{annotate_module, CheckSite};
use crate::ir::{Annotation, Binding, Body, DType, Expr, Function, Module, ShapeSpec};
use crate::symexpr::{
    normalize, prove_equal, solve_linear, substitute, Provability, SymExpr, SymVar,
};
use crate::tensor::Tensor;
use crate::tprog::PrimFunc;

use super::VmError;

pub type Reg = usize;
pub type Slot = usize;

/// A shape-heap slot or an immediate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    Slot(Slot),
    Const(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeBin {
    Add,
    Sub,
    Mul,
    FloorDiv,
    Mod,
    Max,
    Min,
}

/// One step of a shape-arithmetic program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShapeStep {
    Set { dst: Slot, a: Operand, bin: Option<(ShapeBin, Operand)> },
    /// Runtime equality obligation tied to a check site.
    Assert { site: usize, lhs: Operand, rhs: Operand },
}

/// One dimension of a shape pattern: compare against a value, or capture the
/// runtime extent into a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimPat {
    Expect(Operand),
    Bind(Slot),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShapePat {
    Tensor { rank: Option<usize>, dims: Option<Vec<DimPat>>, dtype: Option<DType> },
    Shape { rank: Option<usize>, dims: Option<Vec<DimPat>> },
    Tuple(Vec<ShapePat>),
    Any,
}

impl ShapePat {
    pub fn describe(&self) -> String {
        fn rank_str(rank: &Option<usize>) -> String {
            rank.map(|r| r.to_string()).unwrap_or_else(|| "_".into())
        }
        fn dims_str(dims: &Option<Vec<DimPat>>) -> String {
            match dims {
                None => "_".into(),
                Some(ds) => {
                    let parts: Vec<String> = ds
                        .iter()
                        .map(|d| match d {
                            DimPat::Expect(Operand::Const(c)) => format!("={}", c),
                            DimPat::Expect(Operand::Slot(s)) => format!("=s{}", s),
                            DimPat::Bind(s) => format!(">s{}", s),
                        })
                        .collect();
                    format!("[{}]", parts.join(", "))
                }
            }
        }
        match self {
            ShapePat::Tensor { rank, dims, dtype } => format!(
                "tensor({}, {}, {})",
                rank_str(rank),
                dims_str(dims),
                dtype.map(|d| d.name().to_string()).unwrap_or_else(|| "_".into())
            ),
            ShapePat::Shape { rank, dims } => {
                format!("shape({}, {})", rank_str(rank), dims_str(dims))
            }
            ShapePat::Tuple(elems) => format!(
                "tuple({})",
                elems.iter().map(|e| e.describe()).collect::<Vec<_>>().join(", ")
            ),
            ShapePat::Any => "any".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instruction {
    /// Load `src.dims[dim]` into `dst`; with `expect`, verify instead,
    /// failing the given check site.
    BindShape {
        name: String,
        src: Reg,
        dim: usize,
        dst: Slot,
        expect: Option<(Operand, usize)>,
    },
    ComputeShape { steps: Vec<ShapeStep> },
    CheckShape { reg: Reg, pat: ShapePat, site: usize },
    AllocStorage { dst: Reg, size: Operand, dtype: DType },
    AllocTensor { dst: Reg, storage: Reg, dims: Vec<Operand>, dtype: DType },
    /// Buffer registers are inputs then destinations; scalars are positional
    /// over the program's scalar parameters.
    InvokeKernel { prim: String, args: Vec<Reg>, scalars: Vec<Operand> },
    /// With `dst`, the routine allocates its own output (dynamic shape) and
    /// `args` are inputs only; otherwise the last `num_outputs` of `args`
    /// are pre-allocated destinations.
    InvokeLibrary { extern_name: String, args: Vec<Reg>, num_outputs: usize, dst: Option<Reg> },
    MakeShape { dst: Reg, dims: Vec<Operand> },
    MakeTuple { dst: Reg, elems: Vec<Reg> },
    GetTuple { dst: Reg, src: Reg, index: usize },
    LoadConst { dst: Reg, pool: usize },
    CallFn { dst: Reg, callee: String, args: Vec<Reg> },
    /// Taking both targets equal makes this an unconditional jump.
    CondBranch { cond: Reg, then_pc: usize, else_pc: usize },
    Move { dst: Reg, src: Reg },
    Ret { reg: Reg },
}

#[derive(Clone, Debug)]
pub struct VMFunction {
    pub name: String,
    pub num_params: usize,
    pub num_regs: usize,
    pub slot_names: Vec<String>,
    pub instrs: Vec<Instruction>,
}

#[derive(Clone, Debug, Default)]
pub struct VMProgram {
    pub funcs: IndexMap<String, VMFunction>,
    pub prims: IndexMap<String, PrimFunc>,
    pub consts: Vec<Tensor>,
    pub externs: Vec<String>,
}

/// Compile a fully lowered, memory-planned module to VM instructions. Every
/// check site static deduction reports at a binding or the return becomes
/// exactly one `CheckShape`; call-boundary sites are enforced by the callee's
/// own prologue.
pub fn lower_to_vm(m: &Module) -> Result<VMProgram, VmError> {
    for (name, f) in &m.graph_funcs {
        if body_has_call_op(&f.body) {
            return Err(VmError::NotPlanned(format!(
                "function `{}` still contains operator calls",
                name
            )));
        }
    }
    let (am, sites) = annotate_module(m)?;
    let mut synth = sites.iter().map(|s| s.id + 1).max().unwrap_or(0);
    let mut prog = VMProgram {
        funcs: IndexMap::new(),
        prims: am.prim_funcs.clone(),
        consts: Vec::new(),
        externs: am.extern_decls.clone(),
    };
    let names: Vec<String> = am.graph_funcs.keys().cloned().collect();
    for name in names {
        let f = &am.graph_funcs[&name];
        let mut site_map: HashMap<String, Vec<CheckSite>> = HashMap::new();
        for s in sites.iter().filter(|s| s.function == name) {
            site_map.entry(s.location.clone()).or_default().push(s.clone());
        }
        let mut consts = std::mem::take(&mut prog.consts);
        let vmf = FnLower {
            m: &am,
            f,
            consts: &mut consts,
            regs: f.params.len(),
            var_reg: HashMap::new(),
            slot_names: Vec::new(),
            slot_of: HashMap::new(),
            instrs: Vec::new(),
            steps: Vec::new(),
            sites: site_map,
            synth: &mut synth,
        }
        .lower()?;
        prog.consts = consts;
        prog.funcs.insert(name, vmf);
    }
    Ok(prog)
}

fn expr_has_call_op(e: &Expr) -> bool {
    match e {
        Expr::CallOp { .. } => true,
        Expr::TupleMake(elems) => elems.iter().any(expr_has_call_op),
        Expr::TupleGet(x, _) => expr_has_call_op(x),
        Expr::CallFunc { args, .. }
        | Expr::CallTir { args, .. }
        | Expr::CallDpsLibrary { args, .. } => args.iter().any(expr_has_call_op),
        Expr::If { cond, then_body, else_body } => {
            expr_has_call_op(cond) || body_has_call_op(then_body) || body_has_call_op(else_body)
        }
        Expr::KernelCall { args, dests, .. } | Expr::LibraryCall { args, dests, .. } => {
            args.iter().any(expr_has_call_op) || dests.iter().any(expr_has_call_op)
        }
        Expr::AllocTensor { storage, .. } => expr_has_call_op(storage),
        _ => false,
    }
}

fn body_has_call_op(b: &Body) -> bool {
    b.blocks
        .iter()
        .flat_map(|bl| bl.bindings())
        .any(|bind| expr_has_call_op(bind.value()))
        || expr_has_call_op(&b.result)
}

struct FnLower<'a> {
    m: &'a Module,
    f: &'a Function,
    consts: &'a mut Vec<Tensor>,
    regs: usize,
    var_reg: HashMap<String, Reg>,
    slot_names: Vec<String>,
    slot_of: HashMap<SymExpr, Slot>,
    instrs: Vec<Instruction>,
    /// Pending shape-arithmetic steps, flushed as one ComputeShape right
    /// before the next instruction that needs them.
    steps: Vec<ShapeStep>,
    sites: HashMap<String, Vec<CheckSite>>,
    synth: &'a mut usize,
}

impl<'a> FnLower<'a> {
    fn lower(mut self) -> Result<VMFunction, VmError> {
        self.prologue()?;
        let result = self.lower_body_at(&self.f.body.clone(), None)?;
        for site in self.sites.remove("return").unwrap_or_default() {
            self.check_site(result, &site)?;
        }
        self.push(Instruction::Ret { reg: result });
        Ok(VMFunction {
            name: self.f.name.clone(),
            num_params: self.f.params.len(),
            num_regs: self.regs,
            slot_names: self.slot_names,
            instrs: self.instrs,
        })
    }

    fn new_reg(&mut self) -> Reg {
        let r = self.regs;
        self.regs += 1;
        r
    }

    fn new_slot(&mut self, name: String) -> Slot {
        self.slot_names.push(name);
        self.slot_names.len() - 1
    }

    fn synth_site(&mut self) -> usize {
        let s = *self.synth;
        *self.synth += 1;
        s
    }

    /// Emit an instruction, flushing pending shape arithmetic first.
    fn push(&mut self, i: Instruction) {
        self.flush();
        self.instrs.push(i);
    }

    fn flush(&mut self) {
        if !self.steps.is_empty() {
            let steps = std::mem::take(&mut self.steps);
            self.instrs.push(Instruction::ComputeShape { steps });
        }
    }

    fn operand(&mut self, e: &SymExpr) -> Result<Operand, VmError> {
        let n = normalize(e);
        let mut steps = std::mem::take(&mut self.steps);
        let r = self.compile(&n, &mut steps);
        self.steps = steps;
        r
    }

    fn compile(&mut self, e: &SymExpr, steps: &mut Vec<ShapeStep>) -> Result<Operand, VmError> {
        if let Some(c) = e.as_const() {
            return Ok(Operand::Const(c));
        }
        if let Some(s) = self.slot_of.get(e) {
            return Ok(Operand::Slot(*s));
        }
        let (bin, a, b) = match e {
            SymExpr::Var(v) => {
                return Err(VmError::Invalid(format!(
                    "symbolic variable `{}` is not derivable from the inputs of `{}`",
                    v.name, self.f.name
                )))
            }
            SymExpr::Add(a, b) => (ShapeBin::Add, a, b),
            SymExpr::Sub(a, b) => (ShapeBin::Sub, a, b),
            SymExpr::Mul(a, b) => (ShapeBin::Mul, a, b),
            SymExpr::FloorDiv(a, b) => (ShapeBin::FloorDiv, a, b),
            SymExpr::Mod(a, b) => (ShapeBin::Mod, a, b),
            SymExpr::Max(a, b) => (ShapeBin::Max, a, b),
            SymExpr::Min(a, b) => (ShapeBin::Min, a, b),
            SymExpr::Const(_) => unreachable!("handled above"),
        };
        let oa = self.compile(&normalize(a), steps)?;
        let ob = self.compile(&normalize(b), steps)?;
        let dst = self.new_slot(e.to_string());
        steps.push(ShapeStep::Set { dst, a: oa, bin: Some((bin, ob)) });
        self.slot_of.insert(e.clone(), dst);
        Ok(Operand::Slot(dst))
    }

    fn all_bound(&self, e: &SymExpr) -> bool {
        e.vars().iter().all(|v| self.slot_of.contains_key(&SymExpr::Var(v.clone())))
    }

    // -- prologue -----------------------------------------------------------

    /// Bind parameter dimensions into slots and verify the declared shapes.
    /// A first sweep over all parameters binds bare variables so later
    /// composite dimensions can be checked in the second.
    fn prologue(&mut self) -> Result<(), VmError> {
        let params = self.f.params.clone();
        let mut leaves: Vec<(Reg, String, Annotation)> = Vec::new();
        for (i, (name, ann)) in params.iter().enumerate() {
            self.var_reg.insert(name.clone(), i);
            self.flatten_param(i, name, ann, &mut leaves)?;
        }
        // rank and dtype gates first, so dim reads are in bounds
        for (reg, _, ann) in &leaves.clone() {
            if let Some(pat) = rank_pat(ann) {
                let site = self.synth_site();
                self.push(Instruction::CheckShape { reg: *reg, pat, site });
            }
        }
        // sweep 1: bind bare variables
        let mut bound: HashSet<(Reg, usize)> = HashSet::new();
        for (reg, name, ann) in &leaves {
            for (j, d) in known_dims(ann).iter().enumerate() {
                let n = normalize(d);
                if let SymExpr::Var(v) = &n {
                    if !self.slot_of.contains_key(&n) {
                        let dst = self.new_slot(v.name.clone());
                        self.slot_of.insert(n.clone(), dst);
                        self.push(Instruction::BindShape {
                            name: name.clone(),
                            src: *reg,
                            dim: j,
                            dst,
                            expect: None,
                        });
                        bound.insert((*reg, j));
                    }
                }
            }
        }
        // sweep 2: verify everything else, solving one-variable dims
        for (reg, name, ann) in &leaves.clone() {
            for (j, d) in known_dims(ann).iter().enumerate() {
                if bound.contains(&(*reg, j)) {
                    continue;
                }
                let n = normalize(d);
                if self.all_bound(&n) {
                    let expect = self.operand(&n)?;
                    let site = self.synth_site();
                    let dst = self.new_slot(format!("_{}", n));
                    self.push(Instruction::BindShape {
                        name: name.clone(),
                        src: *reg,
                        dim: j,
                        dst,
                        expect: Some((expect, site)),
                    });
                } else {
                    let raw = self.new_slot(format!("_{}", n));
                    self.push(Instruction::BindShape {
                        name: name.clone(),
                        src: *reg,
                        dim: j,
                        dst: raw,
                        expect: None,
                    });
                    let site = self.synth_site();
                    self.solve_from_raw(&n, raw, site);
                }
            }
        }
        Ok(())
    }

    /// Recover a single free variable of `e` from the raw extent in `raw`,
    /// then re-derive `e` and assert it matches. Steps go into the pending
    /// buffer (or `post` callers provide).
    fn solve_from_raw_into(
        &mut self,
        e: &SymExpr,
        raw: Slot,
        site: usize,
        steps: &mut Vec<ShapeStep>,
    ) {
        let free: Vec<SymVar> = e
            .vars()
            .into_iter()
            .filter(|v| !self.slot_of.contains_key(&SymExpr::Var(v.clone())))
            .collect();
        if free.len() != 1 {
            return; // undeterminable here; later uses surface an error
        }
        // a synthetic variable stands for the raw runtime extent
        let probe = SymVar::new(format!("_raw{}", raw), u32::MAX - raw as u32);
        self.slot_of.insert(SymExpr::Var(probe.clone()), raw);
        if let Some((var, sol)) = solve_linear(e, &SymExpr::Var(probe)) {
            let Ok(op) = self.compile(&normalize(&sol), steps) else { return };
            let vslot = self.new_slot(var.name.clone());
            steps.push(ShapeStep::Set { dst: vslot, a: op, bin: None });
            self.slot_of.insert(SymExpr::Var(var), vslot);
        } else if !self.solve_by_division(e, &free[0], raw, steps) {
            return;
        }
        // integer division may have rounded; re-derive and compare
        if let Ok(chk) = self.compile(&normalize(e), steps) {
            steps.push(ShapeStep::Assert { site, lhs: chk, rhs: Operand::Slot(raw) });
        }
    }

    /// For dims linear in the free variable, `c*v + rest == raw` solves as
    /// `v = (raw - rest) floordiv c`; the caller's re-derive/assert catches
    /// any rounding. Returns false when `e` is not linear in `v`.
    fn solve_by_division(
        &mut self,
        e: &SymExpr,
        v: &SymVar,
        raw: Slot,
        steps: &mut Vec<ShapeStep>,
    ) -> bool {
        let at = |x: i64| {
            let mut env = HashMap::new();
            env.insert(v.id, SymExpr::constant(x));
            normalize(&substitute(e, &env))
        };
        let rest = at(0);
        let coef = normalize(&SymExpr::sub(at(1), rest.clone()));
        let Some(c) = coef.as_const() else { return false };
        if c == 0 {
            return false;
        }
        let recon = SymExpr::add(
            SymExpr::mul(SymExpr::constant(c), SymExpr::Var(v.clone())),
            rest.clone(),
        );
        if prove_equal(e, &recon) != Provability::ProvablyEqual {
            return false;
        }
        let Ok(rest_op) = self.compile(&rest, steps) else { return false };
        let diff = self.new_slot(format!("_{}-rest", v.name));
        steps.push(ShapeStep::Set {
            dst: diff,
            a: Operand::Slot(raw),
            bin: Some((ShapeBin::Sub, rest_op)),
        });
        let vslot = self.new_slot(v.name.clone());
        steps.push(ShapeStep::Set {
            dst: vslot,
            a: Operand::Slot(diff),
            bin: Some((ShapeBin::FloorDiv, Operand::Const(c))),
        });
        self.slot_of.insert(SymExpr::Var(v.clone()), vslot);
        true
    }

    fn solve_from_raw(&mut self, e: &SymExpr, raw: Slot, site: usize) {
        let mut steps = std::mem::take(&mut self.steps);
        self.solve_from_raw_into(e, raw, site, &mut steps);
        self.steps = steps;
    }

    /// Project tuple parameters into registers so their leaves can be bound.
    fn flatten_param(
        &mut self,
        reg: Reg,
        name: &str,
        ann: &Annotation,
        out: &mut Vec<(Reg, String, Annotation)>,
    ) -> Result<(), VmError> {
        match ann {
            Annotation::Tuple(elems) => {
                for (i, a) in elems.iter().enumerate() {
                    let r = self.new_reg();
                    self.push(Instruction::GetTuple { dst: r, src: reg, index: i });
                    self.flatten_param(r, &format!("{}.{}", name, i), a, out)?;
                }
                Ok(())
            }
            _ => {
                out.push((reg, name.to_string(), ann.clone()));
                Ok(())
            }
        }
    }

    // -- checks -------------------------------------------------------------

    fn check_site(&mut self, reg: Reg, site: &CheckSite) -> Result<(), VmError> {
        let mut post = Vec::new();
        let pat = self.pat_from_ann(&site.expected, site.id, &mut post)?;
        self.push(Instruction::CheckShape { reg, pat, site: site.id });
        if !post.is_empty() {
            self.instrs.push(Instruction::ComputeShape { steps: post });
        }
        Ok(())
    }

    /// Compile an annotation into a runtime shape pattern. Dimensions whose
    /// variables are all known become comparisons; a bare new variable is
    /// captured; a composite with one new variable is captured raw and
    /// solved in `post`.
    fn pat_from_ann(
        &mut self,
        ann: &Annotation,
        site: usize,
        post: &mut Vec<ShapeStep>,
    ) -> Result<ShapePat, VmError> {
        match ann {
            Annotation::Object | Annotation::Callable { .. } => Ok(ShapePat::Any),
            Annotation::Tuple(elems) => {
                let mut pats = Vec::with_capacity(elems.len());
                for a in elems {
                    pats.push(self.pat_from_ann(a, site, post)?);
                }
                Ok(ShapePat::Tuple(pats))
            }
            Annotation::Tensor { shape, dtype } => {
                let (rank, dims) = self.spec_pats(shape, site, post)?;
                Ok(ShapePat::Tensor { rank, dims, dtype: *dtype })
            }
            Annotation::Shape { spec } => {
                let (rank, dims) = self.spec_pats(spec, site, post)?;
                Ok(ShapePat::Shape { rank, dims })
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn spec_pats(
        &mut self,
        spec: &ShapeSpec,
        site: usize,
        post: &mut Vec<ShapeStep>,
    ) -> Result<(Option<usize>, Option<Vec<DimPat>>), VmError> {
        match spec {
            ShapeSpec::Unconstrained => Ok((None, None)),
            ShapeSpec::RankOnly(r) => Ok((Some(*r), None)),
            ShapeSpec::Known(dims) => {
                let mut pats = Vec::with_capacity(dims.len());
                for d in dims {
                    let n = normalize(d);
                    if self.all_bound(&n) {
                        pats.push(DimPat::Expect(self.operand(&n)?));
                    } else if let SymExpr::Var(v) = &n {
                        let dst = self.new_slot(v.name.clone());
                        self.slot_of.insert(n.clone(), dst);
                        pats.push(DimPat::Bind(dst));
                    } else {
                        let raw = self.new_slot(format!("_{}", n));
                        pats.push(DimPat::Bind(raw));
                        self.solve_from_raw_into(&n, raw, site, post);
                    }
                }
                Ok((Some(dims.len()), Some(pats)))
            }
        }
    }

    // -- body ---------------------------------------------------------------

    fn lower_body_at(&mut self, body: &Body, want: Option<Reg>) -> Result<Reg, VmError> {
        for block in &body.blocks {
            for b in block.bindings() {
                self.lower_binding(b)?;
            }
        }
        self.lower_expr(&body.result, want)
    }

    fn lower_binding(&mut self, b: &Binding) -> Result<(), VmError> {
        match b {
            Binding::Bind { var, ann, value, .. } => {
                let reg = self.lower_expr(value, None)?;
                self.var_reg.insert(var.clone(), reg);
                for site in self.sites.remove(var.as_str()).unwrap_or_default() {
                    self.check_site(reg, &site)?;
                }
                if let Some(a) = ann {
                    self.bind_result_dims(reg, var, a);
                }
                Ok(())
            }
            Binding::MatchCast { var, value, .. } => {
                let reg = self.lower_expr(value, None)?;
                for site in self.sites.remove(var.as_str()).unwrap_or_default() {
                    self.check_site(reg, &site)?;
                }
                self.var_reg.insert(var.clone(), reg);
                Ok(())
            }
        }
    }

    /// Capture still-free bare dimension variables of a binding's deduced
    /// annotation (e.g. fresh variables standing for a callee's late-bound
    /// result dims) from the runtime value.
    fn bind_result_dims(&mut self, reg: Reg, var: &str, ann: &Annotation) {
        if let Annotation::Tensor { shape: ShapeSpec::Known(dims), .. } = ann {
            for (j, d) in dims.iter().enumerate() {
                let n = normalize(d);
                if let SymExpr::Var(v) = &n {
                    if !self.slot_of.contains_key(&n) {
                        let dst = self.new_slot(v.name.clone());
                        self.slot_of.insert(n.clone(), dst);
                        self.push(Instruction::BindShape {
                            name: var.to_string(),
                            src: reg,
                            dim: j,
                            dst,
                            expect: None,
                        });
                    }
                }
            }
        }
    }

    fn lower_expr(&mut self, e: &Expr, want: Option<Reg>) -> Result<Reg, VmError> {
        match e {
            Expr::Var(n) => {
                let r = *self
                    .var_reg
                    .get(n)
                    .ok_or_else(|| VmError::Invalid(format!("unbound variable `{}`", n)))?;
                match want {
                    Some(w) if w != r => {
                        self.push(Instruction::Move { dst: w, src: r });
                        Ok(w)
                    }
                    _ => Ok(r),
                }
            }
            Expr::ConstTensor { dims, data } => {
                let t = Tensor::from_const(dims, data);
                let pool = self.intern_const(t);
                let dst = self.want_reg(want);
                self.push(Instruction::LoadConst { dst, pool });
                Ok(dst)
            }
            Expr::ShapeLit(dims) => {
                let mut ops = Vec::with_capacity(dims.len());
                for d in dims {
                    ops.push(self.operand(d)?);
                }
                let dst = self.want_reg(want);
                self.push(Instruction::MakeShape { dst, dims: ops });
                Ok(dst)
            }
            Expr::TupleMake(elems) => {
                let mut regs = Vec::with_capacity(elems.len());
                for x in elems {
                    regs.push(self.lower_expr(x, None)?);
                }
                let dst = self.want_reg(want);
                self.push(Instruction::MakeTuple { dst, elems: regs });
                Ok(dst)
            }
            Expr::TupleGet(x, i) => {
                let src = self.lower_expr(x, None)?;
                let dst = self.want_reg(want);
                self.push(Instruction::GetTuple { dst, src, index: *i });
                Ok(dst)
            }
            Expr::CallOp { op, .. } => Err(VmError::NotPlanned(format!(
                "operator call `{}` remains in `{}`",
                op.name(),
                self.f.name
            ))),
            Expr::CallFunc { callee, args } => {
                if !self.m.graph_funcs.contains_key(callee) {
                    return Err(VmError::Invalid(format!("unknown function `{}`", callee)));
                }
                let mut regs = Vec::with_capacity(args.len());
                for a in args {
                    regs.push(self.lower_expr(a, None)?);
                }
                let dst = self.want_reg(want);
                self.push(Instruction::CallFn { dst, callee: callee.clone(), args: regs });
                Ok(dst)
            }
            Expr::CallTir { prim, args, out_ann } => {
                let p = self
                    .m
                    .prims_get(prim)
                    .ok_or_else(|| VmError::Invalid(format!("unknown tensor program `{}`", prim)))?
                    .clone();
                let mut regs = Vec::with_capacity(args.len());
                for a in args {
                    regs.push(self.lower_expr(a, None)?);
                }
                let (outs, result) = self.alloc_outputs(out_ann)?;
                regs.extend(&outs);
                let mut scalars = Vec::with_capacity(p.scalar_params.len());
                for v in &p.scalar_params {
                    scalars.push(self.operand(&SymExpr::Var(v.clone()))?);
                }
                self.push(Instruction::InvokeKernel { prim: prim.clone(), args: regs, scalars });
                self.finish(result, want)
            }
            Expr::CallDpsLibrary { extern_name, args, out_ann } => {
                if !self.m.extern_decls.iter().any(|x| x == extern_name) {
                    return Err(VmError::UnresolvedExtern(extern_name.clone()));
                }
                let mut regs = Vec::with_capacity(args.len());
                for a in args {
                    regs.push(self.lower_expr(a, None)?);
                }
                if fully_known(out_ann) {
                    let (outs, result) = self.alloc_outputs(out_ann)?;
                    let num_outputs = outs.len();
                    regs.extend(&outs);
                    self.push(Instruction::InvokeLibrary {
                        extern_name: extern_name.clone(),
                        args: regs,
                        num_outputs,
                        dst: None,
                    });
                    self.finish(result, want)
                } else {
                    let dst = self.want_reg(want);
                    self.push(Instruction::InvokeLibrary {
                        extern_name: extern_name.clone(),
                        args: regs,
                        num_outputs: 1,
                        dst: Some(dst),
                    });
                    Ok(dst)
                }
            }
            Expr::If { cond, then_body, else_body } => {
                let c = self.lower_expr(cond, None)?;
                let dst = self.want_reg(want);
                self.flush();
                let branch_at = self.instrs.len();
                self.instrs.push(Instruction::CondBranch { cond: c, then_pc: 0, else_pc: 0 });
                // expressions computed inside one arm are not available
                // outside it
                let saved = self.slot_of.clone();
                let then_pc = self.instrs.len();
                self.lower_body_at(then_body, Some(dst))?;
                self.flush();
                let jump_at = self.instrs.len();
                self.instrs.push(Instruction::CondBranch { cond: c, then_pc: 0, else_pc: 0 });
                self.slot_of = saved.clone();
                let else_pc = self.instrs.len();
                self.lower_body_at(else_body, Some(dst))?;
                self.flush();
                self.slot_of = saved;
                let end = self.instrs.len();
                self.instrs[branch_at] = Instruction::CondBranch { cond: c, then_pc, else_pc };
                self.instrs[jump_at] =
                    Instruction::CondBranch { cond: c, then_pc: end, else_pc: end };
                Ok(dst)
            }
            Expr::AllocStorage { size_bytes, dtype } => {
                let size = self.operand(size_bytes)?;
                let dst = self.want_reg(want);
                self.push(Instruction::AllocStorage { dst, size, dtype: *dtype });
                Ok(dst)
            }
            Expr::AllocTensor { storage, dims, dtype } => {
                let sreg = self.lower_expr(storage, None)?;
                let mut ops = Vec::with_capacity(dims.len());
                for d in dims {
                    ops.push(self.operand(d)?);
                }
                let dst = self.want_reg(want);
                self.push(Instruction::AllocTensor {
                    dst,
                    storage: sreg,
                    dims: ops,
                    dtype: *dtype,
                });
                Ok(dst)
            }
            Expr::KernelCall { prim, args, dests } => {
                let p = self
                    .m
                    .prims_get(prim)
                    .ok_or_else(|| VmError::Invalid(format!("unknown tensor program `{}`", prim)))?
                    .clone();
                let mut regs = Vec::with_capacity(args.len() + dests.len());
                for a in args {
                    regs.push(self.lower_expr(a, None)?);
                }
                let mut dest_regs = Vec::with_capacity(dests.len());
                for d in dests {
                    dest_regs.push(self.lower_expr(d, None)?);
                }
                let first = *dest_regs
                    .first()
                    .ok_or_else(|| VmError::Invalid("kernel call with no destinations".into()))?;
                regs.extend(&dest_regs);
                let mut scalars = Vec::with_capacity(p.scalar_params.len());
                for v in &p.scalar_params {
                    scalars.push(self.operand(&SymExpr::Var(v.clone()))?);
                }
                self.push(Instruction::InvokeKernel { prim: prim.clone(), args: regs, scalars });
                self.finish(first, want)
            }
            Expr::LibraryCall { extern_name, args, dests } => {
                if !self.m.extern_decls.iter().any(|x| x == extern_name) {
                    return Err(VmError::UnresolvedExtern(extern_name.clone()));
                }
                let mut regs = Vec::with_capacity(args.len() + dests.len());
                for a in args {
                    regs.push(self.lower_expr(a, None)?);
                }
                let mut dest_regs = Vec::with_capacity(dests.len());
                for d in dests {
                    dest_regs.push(self.lower_expr(d, None)?);
                }
                let first = *dest_regs
                    .first()
                    .ok_or_else(|| VmError::Invalid("library call with no destinations".into()))?;
                let num_outputs = dest_regs.len();
                regs.extend(&dest_regs);
                self.push(Instruction::InvokeLibrary {
                    extern_name: extern_name.clone(),
                    args: regs,
                    num_outputs,
                    dst: None,
                });
                self.finish(first, want)
            }
        }
    }

    fn want_reg(&mut self, want: Option<Reg>) -> Reg {
        want.unwrap_or_else(|| self.new_reg())
    }

    fn finish(&mut self, reg: Reg, want: Option<Reg>) -> Result<Reg, VmError> {
        match want {
            Some(w) if w != reg => {
                self.push(Instruction::Move { dst: w, src: reg });
                Ok(w)
            }
            _ => Ok(reg),
        }
    }

    fn intern_const(&mut self, t: Tensor) -> usize {
        for (i, c) in self.consts.iter().enumerate() {
            if c.dtype == t.dtype && c.dims == t.dims && *c.storage.borrow() == *t.storage.borrow()
            {
                return i;
            }
        }
        self.consts.push(t);
        self.consts.len() - 1
    }

    /// Allocate storage and a tensor view for each output described by the
    /// annotation; returns output registers plus the result register.
    fn alloc_outputs(&mut self, ann: &Annotation) -> Result<(Vec<Reg>, Reg), VmError> {
        match ann {
            Annotation::Tuple(elems) => {
                let mut outs = Vec::with_capacity(elems.len());
                for a in elems {
                    outs.push(self.alloc_one(a)?);
                }
                let dst = self.new_reg();
                self.push(Instruction::MakeTuple { dst, elems: outs.clone() });
                Ok((outs, dst))
            }
            _ => {
                let r = self.alloc_one(ann)?;
                Ok((vec![r], r))
            }
        }
    }

    fn alloc_one(&mut self, ann: &Annotation) -> Result<Reg, VmError> {
        let Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype: Some(dt) } = ann else {
            return Err(VmError::Invalid(format!(
                "cannot pre-allocate output `{}`",
                crate::text::annotation_str(ann)
            )));
        };
        let mut size = SymExpr::constant(dt.size_bytes() as i64);
        for d in dims {
            size = SymExpr::mul(size, d.clone());
        }
        let sop = self.operand(&size)?;
        let sreg = self.new_reg();
        self.push(Instruction::AllocStorage { dst: sreg, size: sop, dtype: *dt });
        let mut ops = Vec::with_capacity(dims.len());
        for d in dims {
            ops.push(self.operand(d)?);
        }
        let treg = self.new_reg();
        self.push(Instruction::AllocTensor { dst: treg, storage: sreg, dims: ops, dtype: *dt });
        Ok(treg)
    }
}

trait PrimsGet {
    fn prims_get(&self, name: &str) -> Option<&PrimFunc>;
}

impl PrimsGet for Module {
    fn prims_get(&self, name: &str) -> Option<&PrimFunc> {
        self.prim_funcs.get(name)
    }
}

fn rank_pat(ann: &Annotation) -> Option<ShapePat> {
    match ann {
        Annotation::Tensor { shape, dtype } => {
            let rank = match shape {
                ShapeSpec::Known(dims) => Some(dims.len()),
                ShapeSpec::RankOnly(r) => Some(*r),
                ShapeSpec::Unconstrained => None,
            };
            if rank.is_none() && dtype.is_none() {
                return None;
            }
            Some(ShapePat::Tensor { rank, dims: None, dtype: *dtype })
        }
        Annotation::Shape { spec } => {
            let rank = match spec {
                ShapeSpec::Known(dims) => Some(dims.len()),
                ShapeSpec::RankOnly(r) => Some(*r),
                ShapeSpec::Unconstrained => return None,
            };
            Some(ShapePat::Shape { rank, dims: None })
        }
        _ => None,
    }
}

fn known_dims(ann: &Annotation) -> Vec<SymExpr> {
    match ann {
        Annotation::Tensor { shape: ShapeSpec::Known(dims), .. }
        | Annotation::Shape { spec: ShapeSpec::Known(dims) } => dims.clone(),
        _ => Vec::new(),
    }
}

fn fully_known(ann: &Annotation) -> bool {
    match ann {
        Annotation::Tensor { shape: ShapeSpec::Known(_), dtype: Some(_) } => true,
        Annotation::Tuple(elems) => elems.iter().all(fully_known),
        _ => false,
    }
}
