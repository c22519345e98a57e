//! Dense row-major f32 tensors with optional emulated bf16 storage.
//!
//! Every kernel accumulates in a fixed ascending index order so results are
//! bit-reproducible given bit-identical inputs.

mod bf16;
mod ops;
mod rng;

pub use bf16::{is_bf16, round_bf16};
pub use ops::*;
pub use rng::{stream_id, Rng};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage format of a tensor's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    /// f32 values constrained to the bf16 grid (8-bit significand).
    Bf16Emu,
}

impl DType {
    /// Result dtype of a binary kernel: bf16 storage wins.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::Bf16Emu || other == DType::Bf16Emu {
            DType::Bf16Emu
        } else {
            DType::F32
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::Bf16Emu => "bf16emu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    dtype: DType,
}

impl Tensor {
    /// Builds a tensor, checking length, finiteness and (for bf16) grid membership.
    pub fn new(shape: Vec<usize>, data: Vec<f32>, dtype: DType) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("tensor construction (index {i})")));
        }
        if dtype == DType::Bf16Emu && !data.iter().all(|&v| is_bf16(v)) {
            return Err(Error::contract("bf16emu tensor holds off-grid values"));
        }
        Ok(Tensor { shape, data, dtype })
    }

    /// Builds an f32 matrix from rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
            dtype: DType::F32,
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
            dtype,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32, dtype: DType) -> Self {
        let len = shape.iter().product();
        let v = if dtype == DType::Bf16Emu {
            round_bf16(value)
        } else {
            value
        };
        Tensor {
            shape,
            data: vec![v; len],
            dtype,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n], DType::F32);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for kernels: rounds to the grid when needed and
    /// rejects non-finite output.
    pub(crate) fn from_kernel(
        op: &str,
        shape: Vec<usize>,
        mut data: Vec<f32>,
        dtype: DType,
    ) -> Result<Self> {
        if dtype == DType::Bf16Emu {
            for v in &mut data {
                *v = round_bf16(*v);
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(op));
        }
        Ok(Tensor { shape, data, dtype })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Raw mutable access. Callers that write off-grid values into a bf16
    /// tensor (the injector does) take responsibility for that.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D view; 1-D tensors are a single column.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[n - 1],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Re-tags the tensor, rounding to the bf16 grid when narrowing.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let mut out = self.clone();
        if dtype == DType::Bf16Emu && self.dtype != DType::Bf16Emu {
            for v in &mut out.data {
                *v = round_bf16(*v);
            }
        }
        out.dtype = dtype;
        out
    }

    /// Bitwise equality of values (distinguishes -0.0 from 0.0).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
            dtype: self.dtype,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        assert!(start <= end && end <= self.rows(), "row slice out of range");
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
            dtype: self.dtype,
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert!(start <= end && end <= c, "column slice out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![r, w],
            data,
            dtype: self.dtype,
        }
    }

    /// Stacks 2-D tensors vertically in the given order.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let c = first.cols();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols() != c || p.dtype != first.dtype {
                return Err(Error::contract(
                    "concat_rows: column count or dtype mismatch",
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows();
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
            dtype: first.dtype,
        })
    }

    /// Adds `src` into the block of `self` starting at (row0, col0).
    pub fn add_block(&mut self, row0: usize, col0: usize, src: &Tensor) {
        let c = self.cols();
        let (sr, sc) = (src.rows(), src.cols());
        assert!(
            row0 + sr <= self.rows() && col0 + sc <= c,
            "block out of range"
        );
        for i in 0..sr {
            let dst = &mut self.data[(row0 + i) * c + col0..(row0 + i) * c + col0 + sc];
            for (d, s) in dst.iter_mut().zip(src.row(i)) {
                *d += *s;
            }
        }
    }

    /// Copies the block starting at (row0, col0) with the given extent.
    pub fn block(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&self.data[(row0 + i) * c + col0..(row0 + i) * c + col0 + cols]);
        }
        Tensor {
            shape: vec![rows, cols],
            data,
            dtype: self.dtype,
        }
    }

    /// Little-endian byte image of the values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
