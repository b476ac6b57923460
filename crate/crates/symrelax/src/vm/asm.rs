//! Deterministic textual listing of a compiled program, parseable back into
//! the exact same program: tensor programs and extern declarations are
//! embedded as module text, constants as inline tensor literals, and each
//! function as one instruction per line.

use std::fmt::Write as _;

use crate::ir::{DType, Module};
use crate::tensor::Tensor;
use crate::text::rten::parse_literal;
use crate::text::{parse_module, print_module};

use super::lower::{
    DimPat, Instruction, Operand, ShapeBin, ShapePat, ShapeStep, VMFunction, VMProgram,
};

pub fn print_program(p: &VMProgram) -> String {
    let mut out = String::new();
    let module = Module {
        graph_funcs: indexmap::IndexMap::new(),
        prim_funcs: p.prims.clone(),
        extern_decls: p.externs.clone(),
        next_sym_id: 0,
    };
    let text = print_module(&module);
    out.push_str(".module\n");
    out.push_str(&text);
    out.push_str(".end\n");
    for c in &p.consts {
        let _ = writeln!(out, ".const {}", literal_str(c));
    }
    for f in p.funcs.values() {
        let _ = writeln!(out, ".fn {} params {} regs {}", f.name, f.num_params, f.num_regs);
        for name in &f.slot_names {
            let _ = writeln!(out, ".slot {}", name);
        }
        for i in &f.instrs {
            let _ = writeln!(out, "  {}", instr_str(i));
        }
        out.push_str(".endfn\n");
    }
    out
}

fn literal_str(t: &Tensor) -> String {
    let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
    let mut data = Vec::with_capacity(t.num_elements());
    for i in 0..t.num_elements() {
        data.push(match t.dtype {
            DType::F32 => t.get_f32(i).to_string(),
            DType::I64 => t.get_i64(i).to_string(),
            DType::Bool => if t.get_bool(i) { "1" } else { "0" }.to_string(),
        });
    }
    format!(
        "{{\"dtype\": \"{}\", \"dims\": [{}], \"data\": [{}]}}",
        t.dtype.name(),
        dims.join(", "),
        data.join(", ")
    )
}

fn op_str(op: Operand) -> String {
    match op {
        Operand::Slot(s) => format!("s{}", s),
        Operand::Const(c) => c.to_string(),
    }
}

fn bin_str(b: ShapeBin) -> &'static str {
    match b {
        ShapeBin::Add => "add",
        ShapeBin::Sub => "sub",
        ShapeBin::Mul => "mul",
        ShapeBin::FloorDiv => "div",
        ShapeBin::Mod => "mod",
        ShapeBin::Max => "max",
        ShapeBin::Min => "min",
    }
}

fn regs_str(regs: &[usize]) -> String {
    let parts: Vec<String> = regs.iter().map(|r| format!("r{}", r)).collect();
    format!("({})", parts.join(", "))
}

fn instr_str(i: &Instruction) -> String {
    match i {
        Instruction::BindShape { name, src, dim, dst, expect } => {
            let mut s = format!("bind \"{}\" r{}[{}] s{}", name, src, dim, dst);
            if let Some((e, site)) = expect {
                let _ = write!(s, " expect {} @{}", op_str(*e), site);
            }
            s
        }
        Instruction::ComputeShape { steps } => {
            let parts: Vec<String> = steps
                .iter()
                .map(|st| match st {
                    ShapeStep::Set { dst, a, bin: None } => {
                        format!("s{} = {}", dst, op_str(*a))
                    }
                    ShapeStep::Set { dst, a, bin: Some((b, c)) } => {
                        format!("s{} = {} {} {}", dst, op_str(*a), bin_str(*b), op_str(*c))
                    }
                    ShapeStep::Assert { site, lhs, rhs } => {
                        format!("assert @{} {} {}", site, op_str(*lhs), op_str(*rhs))
                    }
                })
                .collect();
            format!("compute {}", parts.join("; "))
        }
        Instruction::CheckShape { reg, pat, site } => {
            format!("check r{} @{} {}", reg, site, pat.describe())
        }
        Instruction::AllocStorage { dst, size, dtype } => {
            format!("alloc_storage r{} {} {}", dst, op_str(*size), dtype.name())
        }
        Instruction::AllocTensor { dst, storage, dims, dtype } => {
            let ds: Vec<String> = dims.iter().map(|d| op_str(*d)).collect();
            format!("alloc_tensor r{} r{} [{}] {}", dst, storage, ds.join(", "), dtype.name())
        }
        Instruction::InvokeKernel { prim, args, scalars } => {
            let sc: Vec<String> = scalars.iter().map(|s| op_str(*s)).collect();
            format!("invoke_kernel \"{}\" {} scalars({})", prim, regs_str(args), sc.join(", "))
        }
        Instruction::InvokeLibrary { extern_name, args, num_outputs, dst } => match dst {
            Some(d) => format!("invoke_library \"{}\" {} dyn r{}", extern_name, regs_str(args), d),
            None => {
                format!("invoke_library \"{}\" {} outs {}", extern_name, regs_str(args), num_outputs)
            }
        },
        Instruction::MakeShape { dst, dims } => {
            let ds: Vec<String> = dims.iter().map(|d| op_str(*d)).collect();
            format!("make_shape r{} [{}]", dst, ds.join(", "))
        }
        Instruction::MakeTuple { dst, elems } => {
            format!("make_tuple r{} {}", dst, regs_str(elems))
        }
        Instruction::GetTuple { dst, src, index } => {
            format!("get_tuple r{} r{} {}", dst, src, index)
        }
        Instruction::LoadConst { dst, pool } => format!("load_const r{} c{}", dst, pool),
        Instruction::CallFn { dst, callee, args } => {
            format!("call_fn r{} \"{}\" {}", dst, callee, regs_str(args))
        }
        Instruction::CondBranch { cond, then_pc, else_pc } => {
            format!("branch r{} {} {}", cond, then_pc, else_pc)
        }
        Instruction::Move { dst, src } => format!("move r{} r{}", dst, src),
        Instruction::Ret { reg } => format!("ret r{}", reg),
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, thiserror::Error)]
#[error("listing error at line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

pub fn parse_program(src: &str) -> Result<VMProgram, AsmError> {
    let lines: Vec<&str> = src.lines().collect();
    let err = |line: usize, message: String| AsmError { line: line + 1, message };
    let mut p = VMProgram::default();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        if line.is_empty() {
            i += 1;
            continue;
        }
        if line == ".module" {
            let start = i + 1;
            let mut end = start;
            while end < lines.len() && lines[end].trim() != ".end" {
                end += 1;
            }
            if end == lines.len() {
                return Err(err(i, "unterminated .module section".into()));
            }
            let text = lines[start..end].join("\n");
            let m = parse_module(&text)
                .map_err(|e| err(start, format!("embedded module: {}", e)))?;
            p.prims = m.prim_funcs;
            p.externs = m.extern_decls;
            i = end + 1;
        } else if let Some(rest) = line.strip_prefix(".const ") {
            let t = parse_literal(rest.trim()).map_err(|e| err(i, e.to_string()))?;
            p.consts.push(t);
            i += 1;
        } else if let Some(rest) = line.strip_prefix(".fn ") {
            let (f, next) = parse_fn(rest, &lines, i)?;
            p.funcs.insert(f.name.clone(), f);
            i = next;
        } else {
            return Err(err(i, format!("unexpected line `{}`", line)));
        }
    }
    Ok(p)
}

fn parse_fn(header: &str, lines: &[&str], at: usize) -> Result<(VMFunction, usize), AsmError> {
    let err = |line: usize, message: String| AsmError { line: line + 1, message };
    let mut c = Cursor::new(header);
    let name = c.ident().map_err(|m| err(at, m))?;
    c.keyword("params").map_err(|m| err(at, m))?;
    let num_params = c.number().map_err(|m| err(at, m))? as usize;
    c.keyword("regs").map_err(|m| err(at, m))?;
    let num_regs = c.number().map_err(|m| err(at, m))? as usize;
    let mut slot_names = Vec::new();
    let mut instrs = Vec::new();
    let mut i = at + 1;
    while i < lines.len() {
        let line = lines[i].trim();
        if line == ".endfn" {
            let f = VMFunction { name, num_params, num_regs, slot_names, instrs };
            return Ok((f, i + 1));
        }
        if let Some(rest) = line.strip_prefix(".slot") {
            slot_names.push(rest.trim().to_string());
        } else if !line.is_empty() {
            instrs.push(parse_instr(line).map_err(|m| err(i, m))?);
        }
        i += 1;
    }
    Err(err(at, format!("function `{}` has no .endfn", name)))
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Cursor<'a> {
        Cursor { s, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> Result<(), String> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(format!("expected `{}` before `{}`", tok, self.rest()))
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), String> {
        let got = self.ident()?;
        if got == kw {
            Ok(())
        } else {
            Err(format!("expected `{}`, got `{}`", kw, got))
        }
    }

    fn ident(&mut self) -> Result<String, String> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_' || ch == '.'))
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(format!("expected an identifier before `{}`", rest));
        }
        self.pos += end;
        Ok(rest[..end].to_string())
    }

    fn string(&mut self) -> Result<String, String> {
        self.expect("\"")?;
        let rest = self.rest();
        let end = rest.find('"').ok_or_else(|| "unterminated string".to_string())?;
        self.pos += end + 1;
        Ok(rest[..end].to_string())
    }

    fn number(&mut self) -> Result<i64, String> {
        self.skip_ws();
        let rest = self.rest();
        let neg = rest.starts_with('-');
        let body = if neg { &rest[1..] } else { rest };
        let digits = body.find(|ch: char| !ch.is_ascii_digit()).unwrap_or(body.len());
        if digits == 0 {
            return Err(format!("expected a number before `{}`", rest));
        }
        let end = digits + usize::from(neg);
        let v: i64 = rest[..end].parse().map_err(|_| "number out of range".to_string())?;
        self.pos += end;
        Ok(v)
    }

    fn reg(&mut self) -> Result<usize, String> {
        self.expect("r")?;
        Ok(self.number()? as usize)
    }

    fn slot(&mut self) -> Result<usize, String> {
        self.expect("s")?;
        Ok(self.number()? as usize)
    }

    fn operand(&mut self) -> Result<Operand, String> {
        self.skip_ws();
        if self.rest().starts_with('s') {
            Ok(Operand::Slot(self.slot()?))
        } else {
            Ok(Operand::Const(self.number()?))
        }
    }

    fn reg_list(&mut self) -> Result<Vec<usize>, String> {
        self.expect("(")?;
        let mut out = Vec::new();
        if !self.eat(")") {
            loop {
                out.push(self.reg()?);
                if !self.eat(",") {
                    break;
                }
            }
            self.expect(")")?;
        }
        Ok(out)
    }

    fn operand_list(&mut self, close: &str) -> Result<Vec<Operand>, String> {
        let mut out = Vec::new();
        if !self.eat(close) {
            loop {
                out.push(self.operand()?);
                if !self.eat(",") {
                    break;
                }
            }
            self.expect(close)?;
        }
        Ok(out)
    }

    fn dtype(&mut self) -> Result<DType, String> {
        let name = self.ident()?;
        match name.as_str() {
            "f32" => Ok(DType::F32),
            "i64" => Ok(DType::I64),
            "bool" => Ok(DType::Bool),
            other => Err(format!("unknown dtype `{}`", other)),
        }
    }

    fn done(&mut self) -> Result<(), String> {
        self.skip_ws();
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(format!("trailing input `{}`", self.rest()))
        }
    }

    fn shape_pat(&mut self) -> Result<ShapePat, String> {
        self.skip_ws();
        if self.eat("any") {
            return Ok(ShapePat::Any);
        }
        if self.eat("tuple(") {
            let mut elems = Vec::new();
            if !self.eat(")") {
                loop {
                    elems.push(self.shape_pat()?);
                    if !self.eat(",") {
                        break;
                    }
                }
                self.expect(")")?;
            }
            return Ok(ShapePat::Tuple(elems));
        }
        if self.eat("tensor(") {
            let rank = self.opt_rank()?;
            self.expect(",")?;
            let dims = self.opt_dims()?;
            self.expect(",")?;
            self.skip_ws();
            let dtype = if self.eat("_") { None } else { Some(self.dtype()?) };
            self.expect(")")?;
            return Ok(ShapePat::Tensor { rank, dims, dtype });
        }
        if self.eat("shape(") {
            let rank = self.opt_rank()?;
            self.expect(",")?;
            let dims = self.opt_dims()?;
            self.expect(")")?;
            return Ok(ShapePat::Shape { rank, dims });
        }
        Err(format!("expected a shape pattern before `{}`", self.rest()))
    }

    fn opt_rank(&mut self) -> Result<Option<usize>, String> {
        self.skip_ws();
        if self.eat("_") {
            Ok(None)
        } else {
            Ok(Some(self.number()? as usize))
        }
    }

    fn opt_dims(&mut self) -> Result<Option<Vec<DimPat>>, String> {
        self.skip_ws();
        if self.eat("_") {
            return Ok(None);
        }
        self.expect("[")?;
        let mut out = Vec::new();
        if !self.eat("]") {
            loop {
                self.skip_ws();
                if self.eat("=") {
                    out.push(DimPat::Expect(self.operand()?));
                } else {
                    self.expect(">")?;
                    out.push(DimPat::Bind(self.slot()?));
                }
                if !self.eat(",") {
                    break;
                }
            }
            self.expect("]")?;
        }
        Ok(Some(out))
    }
}

fn parse_instr(line: &str) -> Result<Instruction, String> {
    let mut c = Cursor::new(line);
    let head = c.ident()?;
    let instr = match head.as_str() {
        "bind" => {
            let name = c.string()?;
            let src = c.reg()?;
            c.expect("[")?;
            let dim = c.number()? as usize;
            c.expect("]")?;
            let dst = c.slot()?;
            let expect = if c.eat("expect") {
                let op = c.operand()?;
                c.expect("@")?;
                Some((op, c.number()? as usize))
            } else {
                None
            };
            Instruction::BindShape { name, src, dim, dst, expect }
        }
        "compute" => {
            let mut steps = Vec::new();
            loop {
                c.skip_ws();
                if c.eat("assert") {
                    c.expect("@")?;
                    let site = c.number()? as usize;
                    let lhs = c.operand()?;
                    let rhs = c.operand()?;
                    steps.push(ShapeStep::Assert { site, lhs, rhs });
                } else {
                    let dst = c.slot()?;
                    c.expect("=")?;
                    let a = c.operand()?;
                    c.skip_ws();
                    let bin = if c.rest().is_empty() || c.rest().starts_with(';') {
                        None
                    } else {
                        let b = match c.ident()?.as_str() {
                            "add" => ShapeBin::Add,
                            "sub" => ShapeBin::Sub,
                            "mul" => ShapeBin::Mul,
                            "div" => ShapeBin::FloorDiv,
                            "mod" => ShapeBin::Mod,
                            "max" => ShapeBin::Max,
                            "min" => ShapeBin::Min,
                            other => return Err(format!("unknown shape op `{}`", other)),
                        };
                        Some((b, c.operand()?))
                    };
                    steps.push(ShapeStep::Set { dst, a, bin });
                }
                if !c.eat(";") {
                    break;
                }
            }
            Instruction::ComputeShape { steps }
        }
        "check" => {
            let reg = c.reg()?;
            c.expect("@")?;
            let site = c.number()? as usize;
            let pat = c.shape_pat()?;
            Instruction::CheckShape { reg, pat, site }
        }
        "alloc_storage" => {
            let dst = c.reg()?;
            let size = c.operand()?;
            let dtype = c.dtype()?;
            Instruction::AllocStorage { dst, size, dtype }
        }
        "alloc_tensor" => {
            let dst = c.reg()?;
            let storage = c.reg()?;
            c.expect("[")?;
            let dims = c.operand_list("]")?;
            let dtype = c.dtype()?;
            Instruction::AllocTensor { dst, storage, dims, dtype }
        }
        "invoke_kernel" => {
            let prim = c.string()?;
            let args = c.reg_list()?;
            c.keyword("scalars")?;
            c.expect("(")?;
            let scalars = c.operand_list(")")?;
            Instruction::InvokeKernel { prim, args, scalars }
        }
        "invoke_library" => {
            let extern_name = c.string()?;
            let args = c.reg_list()?;
            if c.eat("dyn") {
                let dst = c.reg()?;
                Instruction::InvokeLibrary { extern_name, args, num_outputs: 1, dst: Some(dst) }
            } else {
                c.keyword("outs")?;
                let num_outputs = c.number()? as usize;
                Instruction::InvokeLibrary { extern_name, args, num_outputs, dst: None }
            }
        }
        "make_shape" => {
            let dst = c.reg()?;
            c.expect("[")?;
            let dims = c.operand_list("]")?;
            Instruction::MakeShape { dst, dims }
        }
        "make_tuple" => {
            let dst = c.reg()?;
            let elems = c.reg_list()?;
            Instruction::MakeTuple { dst, elems }
        }
        "get_tuple" => {
            let dst = c.reg()?;
            let src = c.reg()?;
            let index = c.number()? as usize;
            Instruction::GetTuple { dst, src, index }
        }
        "load_const" => {
            let dst = c.reg()?;
            c.expect("c")?;
            let pool = c.number()? as usize;
            Instruction::LoadConst { dst, pool }
        }
        "call_fn" => {
            let dst = c.reg()?;
            let callee = c.string()?;
            let args = c.reg_list()?;
            Instruction::CallFn { dst, callee, args }
        }
        "branch" => {
            let cond = c.reg()?;
            let then_pc = c.number()? as usize;
            let else_pc = c.number()? as usize;
            Instruction::CondBranch { cond, then_pc, else_pc }
        }
        "move" => {
            let dst = c.reg()?;
            let src = c.reg()?;
            Instruction::Move { dst, src }
        }
        "ret" => Instruction::Ret { reg: c.reg()? },
        other => return Err(format!("unknown instruction `{}`", other)),
    };
    c.done()?;
    Ok(instr)
}
