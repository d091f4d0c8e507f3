// SPDX-License-Identifier: Apache-2.0

//! Frame-axis temporal self-attention and the temporal sub-view of 3D full
//! attention.
//!
//! Latents use the `(B, F, C, H, W)` axis order. Temporal attention folds the
//! spatial axes into the batch: spatial site `(b, h, w)` becomes group
//! `b*H*W + h*W + w`, and each group attends over its `F` frames. 3D full
//! attention flattens a latent to `(B, F*H*W, C)` tokens with token index
//! `f*H*W + h*W + w`.

use alloc::format;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Projection weights for one multi-head attention layer.
///
/// `w_q`, `w_k`, `w_v` are `(d_model, heads * d_k)`; `w_o` is
/// `(heads * d_k, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionParams {
    /// Gaussian weights scaled by `1/sqrt(d_model)`, drawn in the order
    /// `w_q, w_k, w_v, w_o`.
    pub fn seeded(rng: &mut Rng, d_model: usize, d_k: usize, heads: usize) -> Result<Self> {
        if d_model == 0 || d_k == 0 || heads == 0 {
            return Err(Error::Parameter(format!(
                "attention widths must be positive (d_model={d_model}, d_k={d_k}, heads={heads})"
            )));
        }
        let inner = d_k * heads;
        let s = 1.0 / libm::sqrt(d_model as f64);
        let w_q = Tensor::gaussian(rng, [d_model, inner])?.scale(s);
        let w_k = Tensor::gaussian(rng, [d_model, inner])?.scale(s);
        let w_v = Tensor::gaussian(rng, [d_model, inner])?.scale(s);
        let w_o = Tensor::gaussian(rng, [inner, d_model])?.scale(s);
        Self::from_weights(d_model, d_k, heads, w_q, w_k, w_v, w_o)
    }

    pub fn from_weights(
        d_model: usize,
        d_k: usize,
        heads: usize,
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
    ) -> Result<Self> {
        let inner = d_k * heads;
        for (name, w, want) in [
            ("w_q", &w_q, [d_model, inner]),
            ("w_k", &w_k, [d_model, inner]),
            ("w_v", &w_v, [d_model, inner]),
            ("w_o", &w_o, [inner, d_model]),
        ] {
            if w.dims() != want {
                return Err(Error::Dimension(format!(
                    "{name} has shape {} but d_model={d_model}, d_k={d_k}, heads={heads} needs {want:?}",
                    w.shape()
                )));
            }
            if !w.is_finite() {
                return Err(Error::Parameter(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { d_model, d_k, heads, w_q, w_k, w_v, w_o })
    }

    /// Default softmax denominator `sqrt(d_k)`.
    pub fn default_scale(&self) -> f64 {
        libm::sqrt(self.d_k as f64)
    }
}

/// Row-stochastic attention weights of shape `(groups, heads, n, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    /// Wraps weights that are expected to be softmax output. Use
    /// [`AttentionMap::check_row_stochastic`] to validate foreign data.
    pub fn new(weights: Tensor) -> Result<Self> {
        let d = weights.dims();
        if d.len() != 4 || d[2] != d[3] {
            return Err(Error::Dimension(format!(
                "attention map must be (groups, heads, n, n), got {}",
                weights.shape()
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn groups(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.dims()[1]
    }

    /// Side length `n` of each square map.
    pub fn size(&self) -> usize {
        self.weights.dims()[2]
    }

    /// The `n x n` map of one group and head, row-major.
    pub fn matrix(&self, group: usize, head: usize) -> &[f64] {
        let n = self.size();
        let start = (group * self.heads() + head) * n * n;
        &self.weights.data()[start..start + n * n]
    }

    pub fn matrices(&self) -> impl Iterator<Item = &[f64]> {
        let n = self.size();
        self.weights.data().chunks_exact((n * n).max(1))
    }

    /// Mean over groups and heads, as an `(n, n)` tensor.
    pub fn mean_map(&self) -> Tensor {
        let n = self.size();
        let count = (self.groups() * self.heads()) as f64;
        let mut acc = alloc::vec![0.0; n * n];
        for m in self.matrices() {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count);
        Tensor::new([n, n], acc).expect("square map")
    }

    /// Largest deviation of any row sum from one, or an error naming the
    /// first entry outside `[0, 1]`.
    pub fn check_row_stochastic(&self, tol: f64) -> Result<f64> {
        let n = self.size();
        let mut worst = 0.0f64;
        for (r, row) in self.weights.data().chunks_exact(n.max(1)).enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("row {r} holds entry {v} outside [0, 1]")));
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if worst > tol {
            return Err(Error::Domain(format!("row sums deviate from 1 by {worst:e} > {tol:e}")));
        }
        Ok(worst)
    }
}

/// Latent video tensor with axes `(B, F, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    data: Tensor,
}

/// Extents of a latent in axis order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentDims {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentDims {
    pub fn as_array(&self) -> [usize; 5] {
        [self.batch, self.frames, self.channels, self.height, self.width]
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid { frames: self.frames, height: self.height, width: self.width }
    }
}

impl VideoLatent {
    pub fn new(data: Tensor) -> Result<Self> {
        let d = data.dims();
        if d.len() != 5 || d.contains(&0) {
            return Err(Error::Dimension(format!(
                "latent must be (B, F, C, H, W) with positive extents, got {}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn dims(&self) -> LatentDims {
        let d = self.data.dims();
        LatentDims { batch: d[0], frames: d[1], channels: d[2], height: d[3], width: d[4] }
    }

    /// `(B*H*W, F, C)`; group `b*H*W + h*W + w` holds site `(h, w)` of batch `b`.
    pub fn to_frame_axis(&self) -> Tensor {
        let d = self.dims();
        self.data
            .permute(&[0, 3, 4, 1, 2])
            .and_then(|t| t.reshape([d.batch * d.spatial(), d.frames, d.channels]))
            .expect("valid latent permutes")
    }

    /// Inverse of [`VideoLatent::to_frame_axis`].
    pub fn from_frame_axis(x: &Tensor, dims: LatentDims) -> Result<Self> {
        let want = [dims.batch * dims.spatial(), dims.frames, dims.channels];
        if x.dims() != want {
            return Err(Error::Dimension(format!(
                "frame-axis tensor {} does not match latent {:?}",
                x.shape(),
                dims.as_array()
            )));
        }
        let t =
            x.reshape([dims.batch, dims.height, dims.width, dims.frames, dims.channels])?.permute(&[0, 3, 4, 1, 2])?;
        Self::new(t)
    }

    /// `(B, F*H*W, C)` tokens; token `f*H*W + h*W + w`.
    pub fn to_tokens(&self) -> Tensor {
        let d = self.dims();
        self.data
            .permute(&[0, 1, 3, 4, 2])
            .and_then(|t| t.reshape([d.batch, d.frames * d.spatial(), d.channels]))
            .expect("valid latent permutes")
    }

    /// Inverse of [`VideoLatent::to_tokens`].
    pub fn from_tokens(x: &Tensor, dims: LatentDims) -> Result<Self> {
        let want = [dims.batch, dims.frames * dims.spatial(), dims.channels];
        if x.dims() != want {
            return Err(Error::Dimension(format!(
                "token tensor {} does not match latent {:?}",
                x.shape(),
                dims.as_array()
            )));
        }
        let t =
            x.reshape([dims.batch, dims.frames, dims.height, dims.width, dims.channels])?.permute(&[0, 1, 4, 2, 3])?;
        Self::new(t)
    }
}

/// Frame and spatial factorization of a 3D token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }
}

fn check_input(x: &Tensor, params: &AttentionParams, what: &str) -> Result<()> {
    let d = x.dims();
    if d.len() != 3 || d[2] != params.d_model {
        return Err(Error::Dimension(format!(
            "{what} expects (groups, len, {}) input, got {}",
            params.d_model,
            x.shape()
        )));
    }
    Ok(())
}

/// `(G, N, heads*d_k)` projection split into `(G, heads, N, d_k)`.
fn split_heads(x: &Tensor, w: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (g, n) = (x.dims()[0], x.dims()[1]);
    x.matmul(w)?.reshape([g, n, params.heads, params.d_k])?.permute(&[0, 2, 1, 3])
}

fn attention_weights(x: &Tensor, params: &AttentionParams, scale: f64) -> Result<AttentionMap> {
    let q = split_heads(x, &params.w_q, params)?;
    let k = split_heads(x, &params.w_k, params)?;
    let logits = q.matmul(&k.transpose_last()?)?;
    AttentionMap::new(logits.softmax_rows(scale)?)
}

/// Self-attention over axis 1 of a `(G, N, C)` input.
fn attend(x: &Tensor, params: &AttentionParams, scale: f64) -> Result<(Tensor, AttentionMap)> {
    let (g, n) = (x.dims()[0], x.dims()[1]);
    let map = attention_weights(x, params, scale)?;
    let v = split_heads(x, &params.w_v, params)?;
    let mixed = map.weights().matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape([g, n, params.heads * params.d_k])?;
    Ok((mixed.matmul(&params.w_o)?, map))
}

/// Temporal self-attention on a frame-axis tensor `(G, F, C)`.
///
/// The softmax denominator is `sqrt(d_k)` unless `scale_override` supplies
/// the full denominator (e.g. `tau * sqrt(d_k)`). Returns the projected
/// attention output `(G, F, C)` and the `(G, heads, F, F)` map.
pub fn temporal_attention(
    x: &Tensor,
    params: &AttentionParams,
    scale_override: Option<f64>,
) -> Result<(Tensor, AttentionMap)> {
    check_input(x, params, "temporal attention")?;
    attend(x, params, scale_override.unwrap_or_else(|| params.default_scale()))
}

/// Joint attention over all tokens of a `(B, N, C)` sequence.
pub fn full_attention(
    tokens: &Tensor,
    params: &AttentionParams,
    scale_override: Option<f64>,
) -> Result<(Tensor, AttentionMap)> {
    check_input(tokens, params, "full attention")?;
    attend(tokens, params, scale_override.unwrap_or_else(|| params.default_scale()))
}

/// Regroups `(B, F*H*W, C)` tokens to `(B*H*W, F, C)` by fixing the spatial
/// site and varying the frame.
pub fn tokens_to_frame_axis(tokens: &Tensor, grid: TokenGrid) -> Result<Tensor> {
    let d = tokens.dims();
    if d.len() != 3 || d[1] != grid.tokens() || grid.tokens() == 0 {
        return Err(Error::Dimension(format!(
            "token tensor {} does not factor as F*H*W = {}*{}*{}",
            tokens.shape(),
            grid.frames,
            grid.height,
            grid.width
        )));
    }
    let (b, c) = (d[0], d[2]);
    tokens.reshape([b, grid.frames, grid.height, grid.width, c])?.permute(&[0, 2, 3, 1, 4])?.reshape([
        b * grid.height * grid.width,
        grid.frames,
        c,
    ])
}

/// Frame-by-frame attention map of a 3D token sequence, computed with the
/// block's own query/key projections. The map only feeds CFI; the 3D block's
/// output comes from [`full_attention`].
pub fn temporal_subview_3d(
    tokens: &Tensor,
    grid: TokenGrid,
    params: &AttentionParams,
    scale_override: Option<f64>,
) -> Result<AttentionMap> {
    check_input(tokens, params, "temporal subview")?;
    let regrouped = tokens_to_frame_axis(tokens, grid)?;
    attention_weights(&regrouped, params, scale_override.unwrap_or_else(|| params.default_scale()))
}
