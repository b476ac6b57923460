//! Concrete tensors: typed, shaped views into byte storages.

use std::cell::RefCell;
use std::rc::Rc;

use crate::ir::{ConstData, DType};

pub type Storage = Rc<RefCell<Vec<u8>>>;

pub fn new_storage(bytes: usize) -> Storage {
    Rc::new(RefCell::new(vec![0u8; bytes]))
}

/// Row-major dense tensor viewing a storage at an element offset (always 0 in
/// the current planner).
#[derive(Clone, Debug)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<i64>,
    pub storage: Storage,
    pub offset: usize,
}

impl Tensor {
    pub fn zeros(dtype: DType, dims: Vec<i64>) -> Tensor {
        let count: i64 = dims.iter().product();
        let storage = new_storage(count as usize * dtype.size_bytes());
        Tensor { dtype, dims, storage, offset: 0 }
    }

    pub fn from_const(dims: &[i64], data: &ConstData) -> Tensor {
        let t = Tensor::zeros(data.dtype(), dims.to_vec());
        match data {
            ConstData::F32(v) => {
                for (i, x) in v.iter().enumerate() {
                    t.set_f32(i, *x);
                }
            }
            ConstData::I64(v) => {
                for (i, x) in v.iter().enumerate() {
                    t.set_i64(i, *x);
                }
            }
            ConstData::Bool(v) => {
                for (i, x) in v.iter().enumerate() {
                    t.set_bool(i, *x);
                }
            }
        }
        t
    }

    pub fn from_f32(dims: Vec<i64>, data: &[f32]) -> Tensor {
        Tensor::from_const(&dims, &ConstData::F32(data.to_vec()))
    }

    pub fn from_i64(dims: Vec<i64>, data: &[i64]) -> Tensor {
        Tensor::from_const(&dims, &ConstData::I64(data.to_vec()))
    }

    /// View into an existing storage; the view must fit.
    pub fn view(storage: Storage, dtype: DType, dims: Vec<i64>) -> Tensor {
        let count: i64 = dims.iter().product();
        assert!(
            count as usize * dtype.size_bytes() <= storage.borrow().len(),
            "tensor view exceeds storage extent"
        );
        Tensor { dtype, dims, storage, offset: 0 }
    }

    pub fn num_elements(&self) -> usize {
        self.dims.iter().product::<i64>() as usize
    }

    pub fn byte_size(&self) -> usize {
        self.num_elements() * self.dtype.size_bytes()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Flat element index from a multi-index; None if out of bounds.
    pub fn flat_index(&self, idx: &[i64]) -> Option<usize> {
        if idx.len() != self.dims.len() {
            return None;
        }
        let mut flat: i64 = 0;
        for (i, d) in idx.iter().zip(&self.dims) {
            if *i < 0 || i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(flat as usize)
    }

    pub fn get_f32(&self, flat: usize) -> f32 {
        let b = self.storage.borrow();
        let p = (self.offset + flat) * 4;
        f32::from_le_bytes(b[p..p + 4].try_into().unwrap())
    }

    pub fn set_f32(&self, flat: usize, v: f32) {
        let mut b = self.storage.borrow_mut();
        let p = (self.offset + flat) * 4;
        b[p..p + 4].copy_from_slice(&v.to_le_bytes());
    }

    pub fn get_i64(&self, flat: usize) -> i64 {
        let b = self.storage.borrow();
        let p = (self.offset + flat) * 8;
        i64::from_le_bytes(b[p..p + 8].try_into().unwrap())
    }

    pub fn set_i64(&self, flat: usize, v: i64) {
        let mut b = self.storage.borrow_mut();
        let p = (self.offset + flat) * 8;
        b[p..p + 8].copy_from_slice(&v.to_le_bytes());
    }

    pub fn get_bool(&self, flat: usize) -> bool {
        self.storage.borrow()[self.offset + flat] != 0
    }

    pub fn set_bool(&self, flat: usize, v: bool) {
        self.storage.borrow_mut()[self.offset + flat] = v as u8;
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        (0..self.num_elements()).map(|i| self.get_f32(i)).collect()
    }

    pub fn to_i64_vec(&self) -> Vec<i64> {
        (0..self.num_elements()).map(|i| self.get_i64(i)).collect()
    }

    pub fn to_bool_vec(&self) -> Vec<bool> {
        (0..self.num_elements()).map(|i| self.get_bool(i)).collect()
    }

    /// Deep copy with a fresh storage.
    pub fn deep_clone(&self) -> Tensor {
        let out = Tensor::zeros(self.dtype, self.dims.clone());
        let src = self.storage.borrow();
        let start = self.offset * self.dtype.size_bytes();
        out.storage
            .borrow_mut()
            .copy_from_slice(&src[start..start + self.byte_size()]);
        out
    }
}

/// Iterate over all multi-indices of a shape in row-major order.
pub fn index_space(dims: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for d in dims {
        let mut next = Vec::with_capacity(out.len() * (*d as usize).max(1));
        for prefix in &out {
            for i in 0..*d {
                let mut idx = prefix.clone();
                idx.push(i);
                next.push(idx);
            }
        }
        out = next;
    }
    out
}
