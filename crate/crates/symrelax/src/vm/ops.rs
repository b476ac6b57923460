//! Reference implementations of the graph operators over concrete tensors,
//! written independently of the legalized loop programs so the interpreter
//! can serve as a differential oracle.

use crate::ir::{DType, OpAttrs, OpName};
use crate::tensor::{index_space, Tensor};

use super::RuntimeValue;

#[derive(Clone, Copy)]
enum Val {
    F(f64),
    I(i64),
}

impl Val {
    fn as_f(self) -> f64 {
        match self {
            Val::F(x) => x,
            Val::I(x) => x as f64,
        }
    }

    fn as_i(self) -> i64 {
        match self {
            Val::F(x) => x as i64,
            Val::I(x) => x,
        }
    }
}

fn get(t: &Tensor, flat: usize) -> Val {
    match t.dtype {
        DType::F32 => Val::F(t.get_f32(flat) as f64),
        DType::I64 => Val::I(t.get_i64(flat)),
        DType::Bool => Val::I(t.get_bool(flat) as i64),
    }
}

fn set(t: &Tensor, flat: usize, v: Val) {
    match t.dtype {
        DType::F32 => t.set_f32(flat, v.as_f() as f32),
        DType::I64 => t.set_i64(flat, v.as_i()),
        DType::Bool => t.set_bool(flat, v.as_i() != 0),
    }
}

fn arith(op: OpName, a: Val, b: Val) -> Val {
    let float = matches!(a, Val::F(_)) || matches!(b, Val::F(_));
    if float {
        let (x, y) = (a.as_f(), b.as_f());
        Val::F(match op {
            OpName::Add => x + y,
            OpName::Sub => x - y,
            OpName::Mul => x * y,
            OpName::Divide => x / y,
            _ => unreachable!("not an arithmetic op"),
        })
    } else {
        let (x, y) = (a.as_i(), b.as_i());
        Val::I(match op {
            OpName::Add => x.wrapping_add(y),
            OpName::Sub => x.wrapping_sub(y),
            OpName::Mul => x.wrapping_mul(y),
            OpName::Divide => {
                if y == 0 {
                    0
                } else {
                    crate::symexpr::floor_div(x, y)
                }
            }
            _ => unreachable!("not an arithmetic op"),
        })
    }
}

fn dim_or_one(dims: &[i64], rank: usize, k: usize) -> i64 {
    if k + dims.len() >= rank {
        dims[k + dims.len() - rank]
    } else {
        1
    }
}

fn broadcast_dims(a: &[i64], b: &[i64]) -> Result<Vec<i64>, String> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for k in 0..rank {
        let (da, db) = (dim_or_one(a, rank, k), dim_or_one(b, rank, k));
        if da == db || db == 1 {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else {
            return Err(format!("cannot broadcast dims {} and {}", da, db));
        }
    }
    Ok(out)
}

/// Index into an operand of a broadcast op given the output multi-index.
fn narrow(idx: &[i64], dims: &[i64]) -> Vec<i64> {
    let skip = idx.len() - dims.len();
    idx[skip..]
        .iter()
        .zip(dims)
        .map(|(i, d)| if *d == 1 { 0 } else { *i })
        .collect()
}

pub fn binop(op: OpName, a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    let dims = broadcast_dims(&a.dims, &b.dims)?;
    let dtype = if a.dtype == b.dtype {
        a.dtype
    } else if a.dtype == DType::F32 || b.dtype == DType::F32 {
        DType::F32
    } else {
        DType::I64
    };
    let out = Tensor::zeros(dtype, dims.clone());
    for idx in index_space(&dims) {
        let av = get(a, a.flat_index(&narrow(&idx, &a.dims)).unwrap());
        let bv = get(b, b.flat_index(&narrow(&idx, &b.dims)).unwrap());
        set(&out, out.flat_index(&idx).unwrap(), arith(op, av, bv));
    }
    Ok(out)
}

pub fn exp(a: &Tensor) -> Tensor {
    let out = Tensor::zeros(a.dtype, a.dims.clone());
    for i in 0..a.num_elements() {
        let x = get(a, i).as_f();
        set(&out, i, Val::F((x as f32).exp() as f64));
    }
    out
}

pub fn relu(a: &Tensor) -> Tensor {
    let out = Tensor::zeros(a.dtype, a.dims.clone());
    for i in 0..a.num_elements() {
        match get(a, i) {
            Val::F(x) => set(&out, i, Val::F(x.max(0.0))),
            Val::I(x) => set(&out, i, Val::I(x.max(0))),
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err("matmul expects rank-2 operands".into());
    }
    if a.dims[1] != b.dims[0] {
        return Err(format!("inner dims differ: {} vs {}", a.dims[1], b.dims[0]));
    }
    let (n, k, m) = (a.dims[0], a.dims[1], b.dims[1]);
    let dtype = if a.dtype == DType::I64 && b.dtype == DType::I64 { DType::I64 } else { DType::F32 };
    let out = Tensor::zeros(dtype, vec![n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut acc = match dtype {
                DType::I64 => Val::I(0),
                _ => Val::F(0.0),
            };
            for p in 0..k {
                let x = get(a, a.flat_index(&[i, p]).unwrap());
                let y = get(b, b.flat_index(&[p, j]).unwrap());
                acc = arith(OpName::Add, acc, arith(OpName::Mul, x, y));
            }
            set(&out, out.flat_index(&[i, j]).unwrap(), acc);
        }
    }
    Ok(out)
}

pub fn reshape(a: &Tensor, dims: &[i64]) -> Result<Tensor, String> {
    let count: i64 = dims.iter().product();
    if count != a.num_elements() as i64 {
        return Err(format!(
            "cannot reshape {} elements into shape {:?}",
            a.num_elements(),
            dims
        ));
    }
    let out = Tensor::zeros(a.dtype, dims.to_vec());
    for i in 0..a.num_elements() {
        set(&out, i, get(a, i));
    }
    Ok(out)
}

pub fn flatten(a: &Tensor) -> Tensor {
    reshape(a, &[a.num_elements() as i64]).expect("element count preserved")
}

pub fn permute(a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor, String> {
    let default: Vec<usize> = (0..a.ndim()).rev().collect();
    let axes = axes.unwrap_or(&default);
    if axes.len() != a.ndim() {
        return Err("permutation rank mismatch".into());
    }
    let dims: Vec<i64> = axes.iter().map(|p| a.dims[*p]).collect();
    let out = Tensor::zeros(a.dtype, dims.clone());
    for idx in index_space(&dims) {
        let mut src = vec![0i64; a.ndim()];
        for (t, p) in axes.iter().enumerate() {
            src[*p] = idx[t];
        }
        set(&out, out.flat_index(&idx).unwrap(), get(a, a.flat_index(&src).unwrap()));
    }
    Ok(out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, String> {
    let first = parts.first().ok_or("concat of zero tensors")?;
    let rank = first.ndim();
    if axis >= rank {
        return Err("concat axis out of range".into());
    }
    let mut dims = first.dims.clone();
    dims[axis] = 0;
    for p in parts {
        if p.ndim() != rank {
            return Err("concat rank mismatch".into());
        }
        for (k, (d, e)) in p.dims.iter().zip(&first.dims).enumerate() {
            if k != axis && d != e {
                return Err(format!("concat off-axis dim mismatch: {} vs {}", d, e));
            }
        }
        dims[axis] += p.dims[axis];
    }
    let out = Tensor::zeros(first.dtype, dims.clone());
    let mut offset = 0i64;
    for p in parts {
        for idx in index_space(&p.dims) {
            let mut dst = idx.clone();
            dst[axis] += offset;
            set(&out, out.flat_index(&dst).unwrap(), get(p, p.flat_index(&idx).unwrap()));
        }
        offset += p.dims[axis];
    }
    Ok(out)
}

pub fn split(a: &Tensor, sections: usize, axis: usize) -> Result<Vec<Tensor>, String> {
    if axis >= a.ndim() {
        return Err("split axis out of range".into());
    }
    let total = a.dims[axis];
    if sections == 0 || total % sections as i64 != 0 {
        return Err(format!("cannot split extent {} into {} sections", total, sections));
    }
    let piece = total / sections as i64;
    let mut out = Vec::with_capacity(sections);
    for s in 0..sections as i64 {
        let mut dims = a.dims.clone();
        dims[axis] = piece;
        let part = Tensor::zeros(a.dtype, dims.clone());
        for idx in index_space(&dims) {
            let mut src = idx.clone();
            src[axis] += s * piece;
            set(&part, part.flat_index(&idx).unwrap(), get(a, a.flat_index(&src).unwrap()));
        }
        out.push(part);
    }
    Ok(out)
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor, String> {
    if axis >= a.ndim() {
        return Err("sum axis out of range".into());
    }
    let dims: Vec<i64> = a
        .dims
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != axis)
        .map(|(_, d)| *d)
        .collect();
    let out = Tensor::zeros(a.dtype, dims.clone());
    for idx in index_space(&dims) {
        let mut acc = match a.dtype {
            DType::F32 => Val::F(0.0),
            _ => Val::I(0),
        };
        for r in 0..a.dims[axis] {
            let mut src = Vec::with_capacity(a.ndim());
            src.extend_from_slice(&idx[..axis]);
            src.push(r);
            src.extend_from_slice(&idx[axis..]);
            acc = arith(OpName::Add, acc, get(a, a.flat_index(&src).unwrap()));
        }
        set(&out, out.flat_index(&idx).unwrap(), acc);
    }
    Ok(out)
}

/// Sorted distinct values of a tensor, as a rank-1 tensor. The output length
/// depends on the data, which is why this op never legalizes to a loop
/// program.
pub fn unique(a: &Tensor) -> Tensor {
    match a.dtype {
        DType::F32 => {
            let mut v = a.to_f32_vec();
            v.sort_by(|x, y| x.total_cmp(y));
            v.dedup();
            Tensor::from_f32(vec![v.len() as i64], &v)
        }
        DType::I64 => {
            let mut v = a.to_i64_vec();
            v.sort_unstable();
            v.dedup();
            Tensor::from_i64(vec![v.len() as i64], &v)
        }
        DType::Bool => {
            let mut v: Vec<i64> = a.to_bool_vec().iter().map(|x| *x as i64).collect();
            v.sort_unstable();
            v.dedup();
            let out = Tensor::zeros(DType::Bool, vec![v.len() as i64]);
            for (i, x) in v.iter().enumerate() {
                out.set_bool(i, *x != 0);
            }
            out
        }
    }
}

fn tensor_arg<'a>(args: &'a [RuntimeValue], i: usize, op: OpName) -> Result<&'a Tensor, String> {
    args.get(i)
        .and_then(|v| v.as_tensor())
        .ok_or_else(|| format!("`{}` expects a tensor argument at position {}", op.name(), i))
}

/// Execute a graph operator over runtime values.
pub fn apply_op(
    op: OpName,
    attrs: &OpAttrs,
    args: &[RuntimeValue],
) -> Result<RuntimeValue, String> {
    let t = |x: Tensor| RuntimeValue::Tensor(x);
    match op {
        OpName::Add | OpName::Sub | OpName::Mul | OpName::Divide => {
            Ok(t(binop(op, tensor_arg(args, 0, op)?, tensor_arg(args, 1, op)?)?))
        }
        OpName::Exp => Ok(t(exp(tensor_arg(args, 0, op)?))),
        OpName::Relu => Ok(t(relu(tensor_arg(args, 0, op)?))),
        OpName::Matmul => Ok(t(matmul(tensor_arg(args, 0, op)?, tensor_arg(args, 1, op)?)?)),
        OpName::Reshape => {
            let a = tensor_arg(args, 0, op)?;
            let dims = match args.get(1) {
                Some(RuntimeValue::Shape(dims)) => dims.clone(),
                _ => return Err("reshape expects a shape value".into()),
            };
            Ok(t(reshape(a, &dims)?))
        }
        OpName::Flatten => Ok(t(flatten(tensor_arg(args, 0, op)?))),
        OpName::PermuteDims => {
            let axes = match attrs {
                OpAttrs::Axes(a) => Some(a.as_slice()),
                _ => None,
            };
            Ok(t(permute(tensor_arg(args, 0, op)?, axes)?))
        }
        OpName::Concat => {
            let axis = match attrs {
                OpAttrs::Axis(a) => *a,
                _ => 0,
            };
            let mut parts = Vec::with_capacity(args.len());
            for i in 0..args.len() {
                parts.push(tensor_arg(args, i, op)?);
            }
            Ok(t(concat(&parts, axis)?))
        }
        OpName::Split => {
            let (sections, axis) = match attrs {
                OpAttrs::SplitArgs { sections, axis } => (*sections, *axis),
                _ => return Err("split requires sections and axis".into()),
            };
            let parts = split(tensor_arg(args, 0, op)?, sections, axis)?;
            Ok(RuntimeValue::Tuple(parts.into_iter().map(RuntimeValue::Tensor).collect()))
        }
        OpName::Sum => {
            let axis = match attrs {
                OpAttrs::Axis(a) => *a,
                _ => 0,
            };
            Ok(t(sum_axis(tensor_arg(args, 0, op)?, axis)?))
        }
        OpName::Unique => Ok(t(unique(tensor_arg(args, 0, op)?))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_with_unit_row() {
        let a = Tensor::from_f32(vec![2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_f32(vec![1, 3], &[10., 20., 30.]);
        let c = binop(OpName::Add, &a, &b).unwrap();
        assert_eq!(c.dims, vec![2, 3]);
        assert_eq!(c.to_f32_vec(), vec![11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn broadcast_trailing_vector() {
        let a = Tensor::from_f32(vec![2, 2], &[1., 2., 3., 4.]);
        let b = Tensor::from_f32(vec![2], &[10., 20.]);
        let c = binop(OpName::Mul, &a, &b).unwrap();
        assert_eq!(c.to_f32_vec(), vec![10., 40., 30., 80.]);
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        let a = Tensor::zeros(DType::F32, vec![2, 3]);
        let b = Tensor::zeros(DType::F32, vec![2, 4]);
        assert!(binop(OpName::Add, &a, &b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // independent re-derivation of the expected values inside the test
        let a = Tensor::from_f32(vec![2, 3], &[1., -2., 3., 0.5, 4., -1.]);
        let b = Tensor::from_f32(vec![3, 2], &[2., 1., 0., -1., 1., 3.]);
        let c = matmul(&a, &b).unwrap();
        let mut want = vec![0f32; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0f64;
                for k in 0..3 {
                    acc += a.get_f32(i * 3 + k) as f64 * b.get_f32(k * 2 + j) as f64;
                }
                want[i * 2 + j] = acc as f32;
            }
        }
        for (g, w) in c.to_f32_vec().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{} vs {}", g, w);
        }
    }

    #[test]
    fn reshape_is_row_major() {
        let a = Tensor::from_i64(vec![2, 3], &[0, 1, 2, 3, 4, 5]);
        let r = reshape(&a, &[3, 2]).unwrap();
        assert_eq!(r.to_i64_vec(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(r.dims, vec![3, 2]);
        assert!(reshape(&a, &[4, 2]).is_err());
    }

    #[test]
    fn permute_defaults_to_transpose() {
        let a = Tensor::from_i64(vec![2, 3], &[0, 1, 2, 3, 4, 5]);
        let p = permute(&a, None).unwrap();
        assert_eq!(p.dims, vec![3, 2]);
        assert_eq!(p.to_i64_vec(), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn split_then_concat_round_trips() {
        let a = Tensor::from_f32(vec![4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let parts = split(&a, 2, 0).unwrap();
        assert_eq!(parts[0].dims, vec![2, 2]);
        let back = concat(&[&parts[0], &parts[1]], 0).unwrap();
        assert_eq!(back.to_f32_vec(), a.to_f32_vec());
    }

    #[test]
    fn split_rejects_indivisible() {
        let a = Tensor::zeros(DType::F32, vec![5]);
        assert!(split(&a, 2, 0).is_err());
    }

    #[test]
    fn sum_drops_the_axis() {
        let a = Tensor::from_i64(vec![2, 3], &[1, 2, 3, 4, 5, 6]);
        let s0 = sum_axis(&a, 0).unwrap();
        assert_eq!(s0.dims, vec![3]);
        assert_eq!(s0.to_i64_vec(), vec![5, 7, 9]);
        let s1 = sum_axis(&a, 1).unwrap();
        assert_eq!(s1.to_i64_vec(), vec![6, 15]);
    }

    #[test]
    fn unique_sorts_and_dedups() {
        let a = Tensor::from_i64(vec![6], &[3, 1, 3, 2, 1, 3]);
        let u = unique(&a);
        assert_eq!(u.to_i64_vec(), vec![1, 2, 3]);
        let f = Tensor::from_f32(vec![4], &[2.5, -1.0, 2.5, 0.0]);
        assert_eq!(unique(&f).to_f32_vec(), vec![-1.0, 0.0, 2.5]);
    }

    #[test]
    fn relu_clamps_negative() {
        let a = Tensor::from_f32(vec![3], &[-1., 0., 2.]);
        assert_eq!(relu(&a).to_f32_vec(), vec![0., 0., 2.]);
    }
}
