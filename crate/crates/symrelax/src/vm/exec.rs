//! Register-machine execution with a per-activation shape heap and
//! allocation accounting.

use std::collections::HashMap;
use std::rc::Rc;

use crate::symexpr::{floor_div, floor_mod};
use crate::tensor::{new_storage, Storage, Tensor};
use crate::tprog::exec_prim;

use super::lower::{
    DimPat, Instruction, Operand, ShapeBin, ShapePat, ShapeStep, VMFunction, VMProgram,
};
use super::registry::{LibraryRegistry, Routine};
use super::{truthy, RuntimeValue, VmError};

/// Allocation behaviour of one entry invocation: every storage allocation
/// counts once; peak is the high-water mark of live bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub allocs: usize,
    pub peak_bytes: usize,
}

pub fn run_vm(
    p: &VMProgram,
    entry: &str,
    args: &[RuntimeValue],
    registry: &LibraryRegistry,
) -> Result<(RuntimeValue, ExecStats), VmError> {
    let mut exec = Exec { p, registry, stats: ExecStats::default(), live_bytes: 0 };
    let value = exec.call_fn(entry, args.to_vec())?;
    Ok((value, exec.stats))
}

struct Exec<'a> {
    p: &'a VMProgram,
    registry: &'a LibraryRegistry,
    stats: ExecStats,
    live_bytes: usize,
}

impl<'a> Exec<'a> {
    fn alloc(&mut self, bytes: usize) {
        self.stats.allocs += 1;
        self.live_bytes += bytes;
        self.stats.peak_bytes = self.stats.peak_bytes.max(self.live_bytes);
    }

    fn call_fn(&mut self, name: &str, args: Vec<RuntimeValue>) -> Result<RuntimeValue, VmError> {
        let f = self
            .p
            .funcs
            .get(name)
            .ok_or_else(|| VmError::UnknownEntry(name.to_string()))?;
        if args.len() != f.num_params {
            return Err(VmError::Arity {
                name: name.to_string(),
                expected: f.num_params,
                got: args.len(),
            });
        }
        let mut regs: Vec<Option<RuntimeValue>> = vec![None; f.num_regs];
        for (i, a) in args.into_iter().enumerate() {
            regs[i] = Some(a);
        }
        let mut slots = vec![0i64; f.slot_names.len()];
        // storages allocated by this activation, released (for accounting)
        // unless still reachable from the returned value
        let mut owned: Vec<(Storage, usize)> = Vec::new();
        let value = self.frame(f, &mut regs, &mut slots, &mut owned)?;
        let mut reachable = Vec::new();
        collect_storages(&value, &mut reachable);
        for (s, bytes) in owned {
            if !reachable.iter().any(|r| Rc::ptr_eq(r, &s)) {
                self.live_bytes -= bytes;
            }
        }
        Ok(value)
    }

    fn frame(
        &mut self,
        f: &VMFunction,
        regs: &mut Vec<Option<RuntimeValue>>,
        slots: &mut [i64],
        owned: &mut Vec<(Storage, usize)>,
    ) -> Result<RuntimeValue, VmError> {
        let read = |regs: &[Option<RuntimeValue>], r: usize| -> Result<RuntimeValue, VmError> {
            regs.get(r)
                .and_then(|v| v.clone())
                .ok_or_else(|| VmError::Invalid(format!("read of uninitialized register r{}", r)))
        };
        let mut pc = 0usize;
        loop {
            let instr = f.instrs.get(pc).ok_or_else(|| {
                VmError::Invalid(format!("fell off the end of `{}` at pc {}", f.name, pc))
            })?;
            match instr {
                Instruction::BindShape { name, src, dim, dst, expect } => {
                    let v = read(regs, *src)?;
                    let extent = match &v {
                        RuntimeValue::Tensor(t) => {
                            *t.dims.get(*dim).ok_or_else(|| {
                                VmError::Invalid(format!(
                                    "`{}` has no dimension {}",
                                    name, dim
                                ))
                            })?
                        }
                        RuntimeValue::Shape(ds) => *ds.get(*dim).ok_or_else(|| {
                            VmError::Invalid(format!("`{}` has no element {}", name, dim))
                        })?,
                        other => {
                            return Err(VmError::Invalid(format!(
                                "`{}` is {}, not a shaped value",
                                name,
                                other.describe()
                            )))
                        }
                    };
                    if let Some((op, site)) = expect {
                        let want = operand(slots, *op);
                        if want != extent {
                            return Err(VmError::ShapeCheckFailed {
                                site: *site,
                                expected: format!("`{}` dim {} = {}", name, dim, want),
                                actual: extent.to_string(),
                            });
                        }
                    }
                    slots[*dst] = extent;
                }
                Instruction::ComputeShape { steps } => {
                    for step in steps {
                        match step {
                            ShapeStep::Set { dst, a, bin } => {
                                let x = operand(slots, *a);
                                let v = match bin {
                                    None => x,
                                    Some((op, b)) => {
                                        shape_bin(*op, x, operand(slots, *b), pc)?
                                    }
                                };
                                slots[*dst] = v;
                            }
                            ShapeStep::Assert { site, lhs, rhs } => {
                                let (x, y) = (operand(slots, *lhs), operand(slots, *rhs));
                                if x != y {
                                    return Err(VmError::ShapeCheckFailed {
                                        site: *site,
                                        expected: x.to_string(),
                                        actual: y.to_string(),
                                    });
                                }
                            }
                        }
                    }
                }
                Instruction::CheckShape { reg, pat, site } => {
                    let v = read(regs, *reg)?;
                    if let Err(actual) = match_pat(pat, &v, slots) {
                        return Err(VmError::ShapeCheckFailed {
                            site: *site,
                            expected: pat.describe(),
                            actual,
                        });
                    }
                }
                Instruction::AllocStorage { dst, size, .. } => {
                    let bytes = operand(slots, *size);
                    if bytes < 0 {
                        return Err(VmError::Invalid(format!(
                            "negative storage size {} at pc {}",
                            bytes, pc
                        )));
                    }
                    let s = new_storage(bytes as usize);
                    self.alloc(bytes as usize);
                    owned.push((s.clone(), bytes as usize));
                    regs[*dst] = Some(RuntimeValue::Storage(s));
                }
                Instruction::AllocTensor { dst, storage, dims, dtype } => {
                    let s = match read(regs, *storage)? {
                        RuntimeValue::Storage(s) => s,
                        other => {
                            return Err(VmError::Invalid(format!(
                                "alloc_tensor over {}",
                                other.describe()
                            )))
                        }
                    };
                    let shape: Vec<i64> = dims.iter().map(|d| operand(slots, *d)).collect();
                    let count: i64 = shape.iter().product();
                    if count < 0 || count as usize * dtype.size_bytes() > s.borrow().len() {
                        return Err(VmError::Invalid(format!(
                            "tensor view exceeds its storage at pc {}",
                            pc
                        )));
                    }
                    regs[*dst] = Some(RuntimeValue::Tensor(Tensor {
                        dtype: *dtype,
                        dims: shape,
                        storage: s,
                        offset: 0,
                    }));
                }
                Instruction::InvokeKernel { prim, args, scalars } => {
                    let p = self.p.prims.get(prim).ok_or_else(|| {
                        VmError::Invalid(format!("unknown tensor program `{}`", prim))
                    })?;
                    let mut buffers = Vec::with_capacity(args.len());
                    for r in args {
                        buffers.push(as_tensor(&read(regs, *r)?)?);
                    }
                    let mut env = HashMap::new();
                    for (v, op) in p.scalar_params.iter().zip(scalars) {
                        env.insert(v.id, operand(slots, *op));
                    }
                    exec_prim(p, &buffers, &env).map_err(|source| VmError::Kernel {
                        context: format!("kernel `{}` at pc {}", prim, pc),
                        source,
                    })?;
                }
                Instruction::InvokeLibrary { extern_name, args, num_outputs, dst } => {
                    let routine = self
                        .registry
                        .get(extern_name)
                        .ok_or_else(|| VmError::UnresolvedExtern(extern_name.clone()))?;
                    let mut tensors = Vec::with_capacity(args.len());
                    for r in args {
                        tensors.push(as_tensor(&read(regs, *r)?)?);
                    }
                    match (routine, dst) {
                        (Routine::Dps(run), None) => {
                            let split = tensors.len() - num_outputs;
                            let (inputs, outs) = tensors.split_at(split);
                            run(inputs, outs).map_err(|message| VmError::Library {
                                context: format!("library call at pc {}", pc),
                                name: extern_name.clone(),
                                message,
                            })?;
                        }
                        (Routine::Dyn(run), Some(d)) => {
                            let t = run(&tensors).map_err(|message| VmError::Library {
                                context: format!("library call at pc {}", pc),
                                name: extern_name.clone(),
                                message,
                            })?;
                            self.alloc(t.byte_size());
                            owned.push((t.storage.clone(), t.byte_size()));
                            regs[*d] = Some(RuntimeValue::Tensor(t));
                        }
                        (Routine::Dps(_), Some(_)) => {
                            return Err(VmError::Invalid(format!(
                                "library `{}` follows the destination-passing convention",
                                extern_name
                            )))
                        }
                        (Routine::Dyn(_), None) => {
                            return Err(VmError::Invalid(format!(
                                "library `{}` allocates its own output and cannot take \
                                 destinations",
                                extern_name
                            )))
                        }
                    }
                }
                Instruction::MakeShape { dst, dims } => {
                    let ds: Vec<i64> = dims.iter().map(|d| operand(slots, *d)).collect();
                    regs[*dst] = Some(RuntimeValue::Shape(ds));
                }
                Instruction::MakeTuple { dst, elems } => {
                    let mut vals = Vec::with_capacity(elems.len());
                    for r in elems {
                        vals.push(read(regs, *r)?);
                    }
                    regs[*dst] = Some(RuntimeValue::Tuple(vals));
                }
                Instruction::GetTuple { dst, src, index } => match read(regs, *src)? {
                    RuntimeValue::Tuple(elems) if *index < elems.len() => {
                        regs[*dst] = Some(elems[*index].clone());
                    }
                    other => {
                        return Err(VmError::Invalid(format!(
                            "tuple projection .{} of {}",
                            index,
                            other.describe()
                        )))
                    }
                },
                Instruction::LoadConst { dst, pool } => {
                    let t = self.p.consts.get(*pool).ok_or_else(|| {
                        VmError::Invalid(format!("constant pool index {} out of range", pool))
                    })?;
                    // constants share one storage across invocations and are
                    // not counted as runtime allocations
                    regs[*dst] = Some(RuntimeValue::Tensor(t.clone()));
                }
                Instruction::CallFn { dst, callee, args } => {
                    let mut vals = Vec::with_capacity(args.len());
                    for r in args {
                        vals.push(read(regs, *r)?);
                    }
                    let v = self.call_fn(callee, vals)?;
                    regs[*dst] = Some(v);
                }
                Instruction::CondBranch { cond, then_pc, else_pc } => {
                    pc = if then_pc == else_pc {
                        *then_pc
                    } else if truthy(&read(regs, *cond)?)? {
                        *then_pc
                    } else {
                        *else_pc
                    };
                    continue;
                }
                Instruction::Move { dst, src } => {
                    regs[*dst] = Some(read(regs, *src)?);
                }
                Instruction::Ret { reg } => return read(regs, *reg),
            }
            pc += 1;
        }
    }
}

fn operand(slots: &[i64], op: Operand) -> i64 {
    match op {
        Operand::Slot(s) => slots[s],
        Operand::Const(c) => c,
    }
}

fn shape_bin(op: ShapeBin, x: i64, y: i64, pc: usize) -> Result<i64, VmError> {
    match op {
        ShapeBin::Add => Ok(x.wrapping_add(y)),
        ShapeBin::Sub => Ok(x.wrapping_sub(y)),
        ShapeBin::Mul => Ok(x.wrapping_mul(y)),
        ShapeBin::FloorDiv | ShapeBin::Mod if y == 0 => {
            Err(VmError::Invalid(format!("shape division by zero at pc {}", pc)))
        }
        ShapeBin::FloorDiv => Ok(floor_div(x, y)),
        ShapeBin::Mod => Ok(floor_mod(x, y)),
        ShapeBin::Max => Ok(x.max(y)),
        ShapeBin::Min => Ok(x.min(y)),
    }
}

fn as_tensor(v: &RuntimeValue) -> Result<Tensor, VmError> {
    match v {
        RuntimeValue::Tensor(t) => Ok(t.clone()),
        other => Err(VmError::Invalid(format!("expected a tensor, got {}", other.describe()))),
    }
}

/// Match a value against a pattern, binding captured dims into slots.
/// On mismatch, returns a description of what was found.
fn match_pat(pat: &ShapePat, v: &RuntimeValue, slots: &mut [i64]) -> Result<(), String> {
    match pat {
        ShapePat::Any => Ok(()),
        ShapePat::Tensor { rank, dims, dtype } => {
            let RuntimeValue::Tensor(t) = v else { return Err(v.describe()) };
            if let Some(dt) = dtype {
                if t.dtype != *dt {
                    return Err(v.describe());
                }
            }
            if let Some(r) = rank {
                if t.dims.len() != *r {
                    return Err(v.describe());
                }
            }
            if let Some(pats) = dims {
                match_dims(pats, &t.dims, slots).map_err(|_| v.describe())?;
            }
            Ok(())
        }
        ShapePat::Shape { rank, dims } => {
            let RuntimeValue::Shape(ds) = v else { return Err(v.describe()) };
            if let Some(r) = rank {
                if ds.len() != *r {
                    return Err(v.describe());
                }
            }
            if let Some(pats) = dims {
                match_dims(pats, ds, slots).map_err(|_| v.describe())?;
            }
            Ok(())
        }
        ShapePat::Tuple(pats) => {
            let RuntimeValue::Tuple(elems) = v else { return Err(v.describe()) };
            if elems.len() != pats.len() {
                return Err(v.describe());
            }
            for (p, e) in pats.iter().zip(elems) {
                match_pat(p, e, slots).map_err(|_| v.describe())?;
            }
            Ok(())
        }
    }
}

fn match_dims(pats: &[DimPat], dims: &[i64], slots: &mut [i64]) -> Result<(), ()> {
    if pats.len() != dims.len() {
        return Err(());
    }
    for (p, d) in pats.iter().zip(dims) {
        match p {
            DimPat::Expect(op) => {
                if operand(slots, *op) != *d {
                    return Err(());
                }
            }
            DimPat::Bind(s) => slots[*s] = *d,
        }
    }
    Ok(())
}

fn collect_storages(v: &RuntimeValue, out: &mut Vec<Storage>) {
    match v {
        RuntimeValue::Tensor(t) => out.push(t.storage.clone()),
        RuntimeValue::Storage(s) => out.push(s.clone()),
        RuntimeValue::Tuple(elems) => {
            for e in elems {
                collect_storages(e, out);
            }
        }
        RuntimeValue::Shape(_) => {}
    }
}
