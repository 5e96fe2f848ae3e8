//! Deterministic rank-3 tensors with a small reverse-mode tape.
//!
//! Every value is a dense `(batch, channels, frames)` array of `f64` in
//! row-major `[b][c][t]` order. Weight tensors reuse the same container:
//! a linear map is `(1, out, in)`, a time-axis kernel `(out, in, k)`, a bias
//! `(1, out, 1)` and a scalar `(1, 1, 1)`.

mod gemm;
mod graph;
pub mod ops;
mod param;

pub use graph::{Gradients, Graph, Var};
pub use param::{adam_step, AdamConfig, AdamState, ParamId, ParamStore, Parameter};

use rand::Rng;

use crate::error::{Error, Result};

/// Axis along which a convolution, softmax, or concatenation operates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Channel,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub t: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, t: usize) -> Self {
        Shape { b, c, t }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.b, self.c, self.t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Single-batch tensor from per-channel rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Tensor {
            shape: Shape::new(1, rows.len(), t),
            data: rows.concat(),
        })
    }

    /// Values drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, t: usize) -> usize {
        (b * self.shape.c + c) * self.shape.t + t
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[self.index(b, c, t)]
    }

    pub fn set(&mut self, b: usize, c: usize, t: usize, v: f64) {
        let i = self.index(b, c, t);
        self.data[i] = v;
    }

    /// The `t`-long row for `(b, c)`.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = self.index(b, c, 0);
        &self.data[start..start + self.shape.t]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = self.index(b, c, 0);
        let t = self.shape.t;
        &mut self.data[start..start + t]
    }

    /// Contiguous `(c, t)` block for batch entry `b`.
    pub fn batch(&self, b: usize) -> &[f64] {
        let n = self.shape.c * self.shape.t;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn batch_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape.c * self.shape.t;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Frames `lo..hi` of every row.
    pub fn slice_time(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if lo > hi || hi > self.shape.t {
            return Err(Error::invalid(format!(
                "time slice {lo}..{hi} out of range for {} frames",
                self.shape.t
            )));
        }
        let shape = Shape::new(self.shape.b, self.shape.c, hi - lo);
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..self.shape.b {
            for c in 0..self.shape.c {
                data.extend_from_slice(&self.row(b, c)[lo..hi]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian bytes of every value; used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
