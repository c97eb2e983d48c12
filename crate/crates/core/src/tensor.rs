//! Dense row-major `f64` tensors.
//!
//! Tensors are immutable once built; the backing buffer is reference counted
//! so clones are cheap and can be shared across threads.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..])
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {} input", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Index of the first maximal entry of every lane along `axis`.
    ///
    /// For a rank-1 tensor only axis 0 is valid and a single index is returned.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let (lanes, len, stride_lane, stride_elem) = self.lanes(axis, "max_over_axis")?;
        if len == 0 {
            return Err(Error::shape("max_over_axis", "empty reduction axis"));
        }
        Ok((0..lanes)
            .map(|l| {
                let mut best = 0;
                let mut best_v = self.data[l * stride_lane];
                for e in 1..len {
                    let v = self.data[l * stride_lane + e * stride_elem];
                    if v > best_v {
                        best_v = v;
                        best = e;
                    }
                }
                best
            })
            .collect())
    }

    /// (number of lanes, lane length, lane stride, element stride) for a reduction.
    pub(crate) fn lanes(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match (self.rank(), axis) {
            (1, 0) => Ok((1, self.shape[0], 0, 1)),
            (2, 0) => Ok((self.shape[1], self.shape[0], 1, self.shape[1])),
            (2, 1) => Ok((self.shape[0], self.shape[1], self.shape[1], 1)),
            (r, a) => Err(Error::shape(op, format!("axis {a} on rank-{r} tensor"))),
        }
    }

    pub(crate) fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        match (self.rank(), axis) {
            (1, _) => vec![],
            (_, 0) => vec![self.shape[1]],
            _ => vec![self.shape[0]],
        }
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (lanes, len, sl, se) = self.lanes(axis, "sum_axis")?;
        let out = (0..lanes)
            .map(|l| (0..len).map(|e| self.data[l * sl + e * se]).sum())
            .collect();
        Ok(Tensor::from_parts(self.reduced_shape(axis), out))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        let (_, _, sl, se) = self.lanes(axis, "max_over_axis")?;
        let idx = self.argmax_axis(axis)?;
        let out = idx
            .iter()
            .enumerate()
            .map(|(l, &e)| self.data[l * sl + e * se])
            .collect();
        Ok(Tensor::from_parts(self.reduced_shape(axis), out))
    }

    /// Row-wise log-softmax (rank 1 treated as a single row), stabilised by
    /// subtracting the row maximum.
    pub fn log_softmax(&self) -> Result<Self> {
        if self.rank() == 0 || self.rank() > 2 {
            return Err(Error::shape("log_softmax", format!("rank {} input", self.rank())));
        }
        let c = self.cols();
        if c == 0 {
            return Err(Error::shape("log_softmax", "zero-width rows"));
        }
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn softmax(&self) -> Result<Self> {
        Ok(self.log_softmax()?.map(f64::exp))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if first.rank() == 0 {
            return Err(Error::shape("concat", "scalars cannot be concatenated"));
        }
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() == 0 || start > end || end > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }
}
