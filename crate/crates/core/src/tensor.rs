// SPDX-License-Identifier: Apache-2.0

//! Dense row-major `f64` tensors.
//!
//! Every operation returns a freshly materialized tensor; there are no
//! strided views. Values are expected to be finite but the constructors do
//! not check it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ordered tensor extents. Rank is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Dimension("shape must have rank >= 1".into()));
        }
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape} holds {} elements but {} were given",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Self { shape, data })
    }

    /// Standard normal draws from `rng`, consumed in row-major order.
    pub fn gaussian(rng: &mut Rng, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(|_| rng.gaussian()).collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index. Panics on a bad index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.rank(), "index rank");
        let offset: usize = index
            .iter()
            .zip(self.dims())
            .zip(self.shape.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                i * s
            })
            .sum();
        self.data[offset]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise operands differ in shape: {} vs {}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    /// Row-major relabeling to a shape with the same element count.
    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::Dimension(format!("cannot reshape {} into {shape}: element counts differ", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let rank = self.shape.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!("{order:?} is not a permutation of the axes of {}", self.shape)));
        }
        let in_strides = self.shape.strides();
        let out_dims: Vec<usize> = order.iter().map(|&a| self.dims()[a]).collect();
        let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[offset]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                index[ax] += 1;
                offset += src_strides[ax];
                if index[ax] < out_dims[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_dims[ax];
                index[ax] = 0;
            }
        }
        Ok(Tensor { shape: Shape(out_dims), data })
    }

    /// Swaps the trailing two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let rank = self.shape.rank();
        if rank < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {}", self.shape)));
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.swap(rank - 2, rank - 1);
        self.permute(&order)
    }

    /// Matrix product over the trailing two axes with broadcast leading axes.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.dims(), rhs.dims());
        let mismatch = || Error::Dimension(format!("matmul shape mismatch: {} x {}", self.shape, rhs.shape));
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let lead_rank = a_lead.len().max(b_lead.len());
        let pad = |lead: &[usize]| -> Vec<usize> {
            let mut v = vec![1; lead_rank - lead.len()];
            v.extend_from_slice(lead);
            v
        };
        let (a_lead, b_lead) = (pad(a_lead), pad(b_lead));
        let mut out_lead = Vec::with_capacity(lead_rank);
        for (&x, &y) in a_lead.iter().zip(&b_lead) {
            match (x, y) {
                _ if x == y => out_lead.push(x),
                (1, _) => out_lead.push(y),
                (_, 1) => out_lead.push(x),
                _ => return Err(mismatch()),
            }
        }
        let batches: usize = out_lead.iter().product();
        let strides_of = |lead: &[usize], block: usize| -> Vec<usize> {
            // broadcast axes get stride zero
            let mut s = vec![0; lead.len()];
            let mut acc = block;
            for i in (0..lead.len()).rev() {
                s[i] = if lead[i] == 1 { 0 } else { acc };
                acc *= lead[i];
            }
            s
        };
        let a_strides = strides_of(&a_lead, m * k);
        let b_strides = strides_of(&b_lead, k * n);

        let mut out = vec![0.0; batches * m * n];
        let mut index = vec![0usize; lead_rank];
        for batch in 0..batches {
            let a_off: usize = index.iter().zip(&a_strides).map(|(i, s)| i * s).sum();
            let b_off: usize = index.iter().zip(&b_strides).map(|(i, s)| i * s).sum();
            let a_blk = &self.data[a_off..a_off + m * k];
            let b_blk = &rhs.data[b_off..b_off + k * n];
            let o_blk = &mut out[batch * m * n..(batch + 1) * m * n];
            for i in 0..m {
                let o_row = &mut o_blk[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a_blk[i * k + p];
                    let b_row = &b_blk[p * n..(p + 1) * n];
                    for (o, &bv) in o_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            for ax in (0..lead_rank).rev() {
                index[ax] += 1;
                if index[ax] < out_lead[ax] {
                    break;
                }
                index[ax] = 0;
            }
        }
        let mut dims = out_lead;
        dims.extend_from_slice(&[m, n]);
        Tensor::new(dims, out)
    }

    /// Softmax of `x / scale` along the trailing axis, stabilized by
    /// subtracting each row's maximum first.
    pub fn softmax_rows(&self, scale: f64) -> Result<Tensor> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Parameter(format!("softmax scale must be positive and finite, got {scale}")));
        }
        if self.shape.rank() < 2 {
            return Err(Error::Dimension(format!("softmax_rows needs rank >= 2, got {}", self.shape)));
        }
        let width = *self.dims().last().unwrap();
        let mut data = self.data.clone();
        if width == 0 {
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        for row in data.chunks_exact_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp((*v - max) / scale);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Root-mean-square normalization along the trailing axis.
    pub fn rms_norm_rows(&self, eps: f64) -> Tensor {
        let width = *self.dims().last().unwrap();
        let mut data = self.data.clone();
        if width > 0 {
            for row in data.chunks_exact_mut(width) {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
                let inv = 1.0 / libm::sqrt(ms + eps);
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Tensor { shape: self.shape.clone(), data }
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Domain("l2 norm of an empty tensor".into()));
        }
        Ok(libm::sqrt(self.data.iter().map(|v| v * v).sum()))
    }

    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        Ok(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }
}
