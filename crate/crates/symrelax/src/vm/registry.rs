//! Native library routines following the destination-passing convention,
//! resolved by extern name at run time. The registry is frozen before the
//! first run.

use std::collections::HashMap;

use crate::tensor::Tensor;

/// A registered routine: either destination-passing (inputs then
/// pre-allocated outputs) or allocating, for data-dependent output shapes.
#[derive(Clone, Copy)]
pub enum Routine {
    Dps(fn(&[Tensor], &[Tensor]) -> Result<(), String>),
    Dyn(fn(&[Tensor]) -> Result<Tensor, String>),
}

#[derive(Default)]
pub struct LibraryRegistry {
    routines: HashMap<String, Routine>,
}

impl LibraryRegistry {
    pub fn new() -> LibraryRegistry {
        LibraryRegistry::default()
    }

    pub fn register(&mut self, name: &str, routine: Routine) {
        self.routines.insert(name.to_string(), routine);
    }

    pub fn get(&self, name: &str) -> Option<&Routine> {
        self.routines.get(name)
    }
}

/// Registry the reference runtime ships with.
pub fn default_library_registry() -> LibraryRegistry {
    let mut r = LibraryRegistry::new();
    r.register("matmul", Routine::Dps(matmul));
    r.register("linear_bias", Routine::Dps(linear_bias));
    r.register("softmax", Routine::Dps(softmax));
    r.register("rms_norm", Routine::Dps(rms_norm));
    r.register("unique", Routine::Dyn(unique));
    r
}

fn want(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn mm_into(a: &Tensor, b: &Tensor, out: &Tensor) -> Result<(), String> {
    want(a.ndim() == 2 && b.ndim() == 2 && out.ndim() == 2, "matmul wants rank-2 buffers")?;
    want(a.dims[1] == b.dims[0], "matmul inner dims differ")?;
    want(out.dims[0] == a.dims[0] && out.dims[1] == b.dims[1], "matmul output shape")?;
    let (n, k, m) = (a.dims[0] as usize, a.dims[1] as usize, b.dims[1] as usize);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0f64;
            for p in 0..k {
                acc += a.get_f32(i * k + p) as f64 * b.get_f32(p * m + j) as f64;
            }
            out.set_f32(i * m + j, acc as f32);
        }
    }
    Ok(())
}

fn matmul(inputs: &[Tensor], outputs: &[Tensor]) -> Result<(), String> {
    want(inputs.len() == 2 && outputs.len() == 1, "matmul wants 2 inputs and 1 output")?;
    mm_into(&inputs[0], &inputs[1], &outputs[0])
}

/// out = a @ b + c, with trailing-dim broadcast on the bias.
fn linear_bias(inputs: &[Tensor], outputs: &[Tensor]) -> Result<(), String> {
    want(inputs.len() == 3 && outputs.len() == 1, "linear_bias wants 3 inputs and 1 output")?;
    let (a, b, c, out) = (&inputs[0], &inputs[1], &inputs[2], &outputs[0]);
    mm_into(a, b, out)?;
    let (n, m) = (out.dims[0] as usize, out.dims[1] as usize);
    for i in 0..n {
        for j in 0..m {
            let bias = match c.ndim() {
                1 => {
                    let jj = if c.dims[0] == 1 { 0 } else { j };
                    c.get_f32(jj)
                }
                2 => {
                    let ii = if c.dims[0] == 1 { 0 } else { i };
                    let jj = if c.dims[1] == 1 { 0 } else { j };
                    c.get_f32(ii * c.dims[1] as usize + jj)
                }
                _ => return Err("linear_bias bias must be rank 1 or 2".into()),
            };
            let v = out.get_f32(i * m + j) as f64 + bias as f64;
            out.set_f32(i * m + j, v as f32);
        }
    }
    Ok(())
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
fn softmax(inputs: &[Tensor], outputs: &[Tensor]) -> Result<(), String> {
    want(inputs.len() == 1 && outputs.len() == 1, "softmax wants 1 input and 1 output")?;
    let (x, out) = (&inputs[0], &outputs[0]);
    want(x.ndim() == 2 && out.dims == x.dims, "softmax wants matching rank-2 buffers")?;
    let (n, m) = (x.dims[0] as usize, x.dims[1] as usize);
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            mx = mx.max(x.get_f32(i * m + j) as f64);
        }
        let mut sum = 0f64;
        for j in 0..m {
            let e = (x.get_f32(i * m + j) as f64 - mx).exp();
            out.set_f32(i * m + j, e as f32);
            sum += e;
        }
        for j in 0..m {
            out.set_f32(i * m + j, (out.get_f32(i * m + j) as f64 / sum) as f32);
        }
    }
    Ok(())
}

/// out[i, j] = x[i, j] / sqrt(mean_j(x[i, j]^2) + eps) * w[j]
fn rms_norm(inputs: &[Tensor], outputs: &[Tensor]) -> Result<(), String> {
    want(inputs.len() == 2 && outputs.len() == 1, "rms_norm wants 2 inputs and 1 output")?;
    let (x, w, out) = (&inputs[0], &inputs[1], &outputs[0]);
    want(x.ndim() == 2 && w.ndim() == 1, "rms_norm wants a rank-2 input and rank-1 weights")?;
    want(w.dims[0] == x.dims[1] && out.dims == x.dims, "rms_norm shape mismatch")?;
    let (n, m) = (x.dims[0] as usize, x.dims[1] as usize);
    let eps = 1e-5f64;
    for i in 0..n {
        let mut ss = 0f64;
        for j in 0..m {
            let v = x.get_f32(i * m + j) as f64;
            ss += v * v;
        }
        let scale = 1.0 / (ss / m as f64 + eps).sqrt();
        for j in 0..m {
            let v = x.get_f32(i * m + j) as f64 * scale * w.get_f32(j) as f64;
            out.set_f32(i * m + j, v as f32);
        }
    }
    Ok(())
}

/// Data-dependent output: sorted distinct values. Shares the reference
/// semantics so the graph operator and the library agree exactly.
fn unique(inputs: &[Tensor]) -> Result<Tensor, String> {
    if inputs.len() != 1 {
        return Err("unique wants 1 input".into());
    }
    Ok(super::ops::unique(&inputs[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DType;
    use crate::vm::ops;

    #[test]
    fn matmul_routine_matches_reference_op() {
        let a = Tensor::from_f32(vec![2, 3], &[1., 2., 3., -1., 0.5, 2.]);
        let b = Tensor::from_f32(vec![3, 2], &[0., 1., 2., -1., 1., 1.]);
        let out = Tensor::zeros(DType::F32, vec![2, 2]);
        matmul(&[a.clone(), b.clone()], &[out.clone()]).unwrap();
        let want = ops::matmul(&a, &b).unwrap();
        assert_eq!(out.to_f32_vec(), want.to_f32_vec());
    }

    #[test]
    fn linear_bias_matches_composed_ops() {
        let a = Tensor::from_f32(vec![2, 2], &[1., 2., 3., 4.]);
        let b = Tensor::from_f32(vec![2, 2], &[1., 0., 0., 1.]);
        let c = Tensor::from_f32(vec![2], &[10., 20.]);
        let out = Tensor::zeros(DType::F32, vec![2, 2]);
        linear_bias(&[a.clone(), b.clone(), c.clone()], &[out.clone()]).unwrap();
        let want = ops::binop(crate::ir::OpName::Add, &ops::matmul(&a, &b).unwrap(), &c).unwrap();
        assert_eq!(out.to_f32_vec(), want.to_f32_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_f32(vec![2, 3], &[1., 2., 3., -5., 0., 5.]);
        let out = Tensor::zeros(DType::F32, vec![2, 3]);
        softmax(&[x], &[out.clone()]).unwrap();
        let v = out.to_f32_vec();
        for row in v.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sums to {}", s);
            assert!(row.iter().all(|p| *p > 0.0));
        }
        // larger logits get larger mass
        assert!(v[2] > v[1] && v[1] > v[0]);
    }

    #[test]
    fn rms_norm_unit_weights_normalize() {
        let x = Tensor::from_f32(vec![1, 4], &[3., 3., 3., 3.]);
        let w = Tensor::from_f32(vec![4], &[1., 1., 1., 1.]);
        let out = Tensor::zeros(DType::F32, vec![1, 4]);
        rms_norm(&[x, w], &[out.clone()]).unwrap();
        // rms of the row is 3, so every element normalizes to ~1
        for v in out.to_f32_vec() {
            assert!((v - 1.0).abs() < 1e-4, "{}", v);
        }
    }

    #[test]
    fn unique_is_dynamic() {
        let t = Tensor::from_i64(vec![5], &[4, 4, 1, 1, 2]);
        let u = unique(&[t]).unwrap();
        assert_eq!(u.dims, vec![3]);
        assert_eq!(u.to_i64_vec(), vec![1, 2, 4]);
    }

    #[test]
    fn default_registry_resolves_all_externs() {
        let r = default_library_registry();
        for name in ["matmul", "linear_bias", "softmax", "rms_norm", "unique"] {
            assert!(r.get(name).is_some(), "missing routine `{}`", name);
        }
        assert!(r.get("gemm").is_none());
    }
}
