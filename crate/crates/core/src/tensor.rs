//! Dense row-major tensors with an emulated storage format.

use num_traits::{Float, Zero};
use rand::Rng;

use crate::error::{Error, Result};
use crate::format::{with_arith, Arith, NumericFormat};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    format: NumericFormat,
}

impl Tensor {
    /// Build a tensor, rounding every value into `format`.
    pub fn new(shape: &[usize], data: Vec<f64>, format: NumericFormat) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::validation(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let data = data.into_iter().map(|x| format.round(x)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
            format,
        })
    }

    pub fn zeros(shape: &[usize], format: NumericFormat) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            format,
        })
    }

    /// Uniform values in `[-1, 1)`, rounded into `format`.
    pub fn random<R: Rng>(shape: &[usize], format: NumericFormat, rng: &mut R) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| format.round(rng.gen_range(-1.0..1.0))).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
            format,
        })
    }

    /// Constructor for values already representable in `format`.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>, format: NumericFormat) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, format }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Overwrite one element; the value is rounded into the tensor's format.
    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = self.format.round(value);
    }

    /// Re-round into another format.
    pub fn to_format(&self, format: NumericFormat) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| format.round(x)).collect(),
            format,
        }
    }

    /// Permute axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::validation(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * self.shape[k + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.len() {
            let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[src]);
            for k in (0..rank).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Tensor::from_raw(out_shape, data, self.format))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::validation(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|x| x.is_nan()) {
            return Err(Error::NumericInput(format!("{what} has NaN at flat index {pos}")));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::validation(format!(
            "shape {shape:?} must be non-empty with positive extents"
        )));
    }
    Ok(())
}

/// `C = A·B` with sequential ascending-index accumulation; every product and
/// partial sum is rounded into the output format.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::validation(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    if a.format != b.format {
        return Err(Error::validation(format!(
            "matmul format mismatch: {} x {}",
            a.format, b.format
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let data = with_arith!(a.format, |ar| matmul_kernel(ar, &a.data, &b.data, m, k, n));
    Ok(Tensor::from_raw(vec![m, n], data, a.format))
}

fn matmul_kernel<A: Arith>(ar: A, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = A::T::zero();
            for t in 0..k {
                let prod = ar.fix(ar.load(a[i * k + t]) * ar.load(b[t * n + j]));
                acc = ar.fix(acc + prod);
            }
            out.push(ar.store(acc));
        }
    }
    out
}

/// Numerically safe softmax along the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    x.check_finite("softmax input")?;
    let n = *x.shape.last().expect("tensors have rank >= 1 by construction");
    let mut data = vec![0.0; x.len()];
    with_arith!(x.format, |ar| {
        for (row, out) in x.data.chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(ar, row, out);
        }
    });
    Ok(Tensor::from_raw(x.shape.clone(), data, x.format))
}

pub(crate) fn softmax_row<A: Arith>(ar: A, row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max = ar.load(max);
    let mut sum = A::T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ar.fix(ar.fix(ar.load(v) - max).exp());
        sum = ar.fix(sum + e);
        *o = ar.store(e);
    }
    for o in out.iter_mut() {
        *o = ar.store(ar.fix(ar.load(*o) / sum));
    }
}
