//! Dense row-major containers.
//!
//! [`Tensor3`] is the public `(batch, channels, length)` layout. Inside the
//! network activations live in a position-major [`Matrix`] with one row per
//! `(sample, time step)` and one column per channel, which turns every
//! convolution into a single matrix product.

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    batch: usize,
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Self {
            batch,
            channels,
            length,
            data: vec![0.0; batch * channels * length],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * length {
            return Err(shape_err(
                "Tensor3::from_vec",
                format!("{} values for ({batch}, {channels}, {length})", batch * channels * length),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            batch,
            channels,
            length,
            data,
        })
    }

    /// Stacks equal-length single-channel sequences into a `(n, 1, len)` tensor.
    pub fn from_sequences<S: AsRef<[f64]>>(rows: &[S]) -> Result<Self> {
        let length = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * length);
        for r in rows {
            let r = r.as_ref();
            if r.len() != length {
                return Err(shape_err("Tensor3::from_sequences", format!("length {length}"), format!("length {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), 1, length, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.length)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[(b * self.channels + c) * self.length + t]
    }

    pub fn set(&mut self, b: usize, c: usize, t: usize, v: f64) {
        self.data[(b * self.channels + c) * self.length + t] = v;
    }

    pub(crate) fn to_positions(&self) -> Matrix {
        let (bn, cn, ln) = self.shape();
        let mut m = Matrix::zeros(bn * ln, cn);
        for b in 0..bn {
            for c in 0..cn {
                for t in 0..ln {
                    m.data[(b * ln + t) * cn + c] = self.get(b, c, t);
                }
            }
        }
        m
    }

    pub(crate) fn from_positions(m: &Matrix, batch: usize, length: usize) -> Self {
        let cn = m.cols;
        let mut out = Self::zeros(batch, cn, length);
        for b in 0..batch {
            for t in 0..length {
                for c in 0..cn {
                    out.set(b, c, t, m.data[(b * length + t) * cn + c]);
                }
            }
        }
        out
    }
}

/// Row-major 2-D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::from_vec", format!("{}", rows * cols), format!("{}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sum of each column, accumulated in row order.
    pub(crate) fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s
    }
}
