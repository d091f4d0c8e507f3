// SPDX-License-Identifier: Apache-2.0

//! Cross-frame intensity and the enhance block.
//!
//! CFI is the mean off-diagonal weight of a frame-by-frame attention map.
//! The enhance block scales it by `tau + F`, floors it at one, and uses the
//! result to rescale the attention output inside the residual connection:
//!
//! ```text
//! cfi          = 1/(F(F-1)) * sum_{i != j} A[i][j]
//! cfi_enhanced = max((tau + F) * cfi, 1)
//! O_final      = cfi_enhanced * O_attn + H
//! ```
//!
//! Two alternatives that push a temperature into the softmax instead are
//! kept behind the same [`Strategy`] switch for comparison.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::attention::{
    full_attention, temporal_attention, temporal_subview_3d, AttentionMap, AttentionParams, TokenGrid,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Plain attention and residual.
    Baseline,
    /// Rescale the attention output by the clipped enhanced CFI.
    EnhanceBlock,
    /// Softmax denominator `tau * sqrt(d_k)`.
    TempAttentionScaling,
    /// Softmax denominator `cfi_enhanced * sqrt(d_k)`, where the CFI comes
    /// from a first pass at the default scale.
    CfiAttentionScaling,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Baseline, Strategy::EnhanceBlock, Strategy::TempAttentionScaling, Strategy::CfiAttentionScaling];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::EnhanceBlock => "enhance_block",
            Strategy::TempAttentionScaling => "temp_attention_scaling",
            Strategy::CfiAttentionScaling => "cfi_attention_scaling",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Layers where the configured strategy applies. Other layers run baseline.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerMask {
    #[default]
    All,
    Only(BTreeSet<usize>),
}

impl LayerMask {
    pub fn none() -> Self {
        LayerMask::Only(BTreeSet::new())
    }

    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerMask::All => true,
            LayerMask::Only(set) => set.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceConfig {
    pub strategy: Strategy,
    /// Enhance temperature. Added to the frame count for the enhance block
    /// and the CFI scaling variant; used directly as the softmax temperature
    /// by [`Strategy::TempAttentionScaling`].
    pub tau: f64,
    pub clip_enabled: bool,
    pub layer_mask: LayerMask,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { strategy: Strategy::EnhanceBlock, tau: 1.0, clip_enabled: true, layer_mask: LayerMask::All }
    }
}

impl EnhanceConfig {
    pub fn baseline() -> Self {
        Self { strategy: Strategy::Baseline, ..Self::default() }
    }

    pub fn with_strategy(strategy: Strategy, tau: f64) -> Self {
        Self { strategy, tau, ..Self::default() }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be finite, got {}", self.tau)));
        }
        if self.strategy == Strategy::TempAttentionScaling && self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "temp_attention_scaling divides logits by tau; tau must be > 0, got {}",
                self.tau
            )));
        }
        if let LayerMask::Only(set) = &self.layer_mask {
            if let Some(bad) = set.iter().find(|&&l| l >= depth) {
                return Err(Error::Config(format!("layer {bad} in mask but model depth is {depth}")));
            }
        }
        Ok(())
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.strategy != Strategy::Baseline && self.layer_mask.contains(layer)
    }
}

/// Scalar CFI plus the per group/head values it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfi {
    pub mean: f64,
    /// `(groups, heads)`.
    pub per_group: Tensor,
}

/// Mean off-diagonal weight per group and head, then averaged to a scalar.
/// A single-frame map has no off-diagonal entries and gets CFI zero.
pub fn cfi(map: &AttentionMap) -> Cfi {
    let n = map.size();
    let per: Vec<f64> = map
        .matrices()
        .map(|m| {
            if n < 2 {
                return 0.0;
            }
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += m[i * n + j];
                    }
                }
            }
            off / (n * (n - 1)) as f64
        })
        .collect();
    let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
    let per_group = Tensor::new([map.groups(), map.heads()], per).expect("one value per matrix");
    Cfi { mean, per_group }
}

/// `(tau + F) * cfi`, floored at one when clipping is on.
pub fn cfi_enhanced(cfi: f64, frames: usize, tau: f64, clip_enabled: bool) -> f64 {
    let value = (tau + frames as f64) * cfi;
    if clip_enabled {
        value.max(1.0)
    } else {
        value
    }
}

/// `c * O_attn + H`.
pub fn fuse_residual(o_attn: &Tensor, h: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::Parameter(format!("residual scale must be finite, got {c}")));
    }
    o_attn.zip_with(h, |o, r| c * o + r)
}

/// CFI instrumentation for one layer evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CfiReport {
    pub step: usize,
    pub layer: usize,
    pub frames: usize,
    /// Scalar CFI of the map the strategy derives its scale from.
    pub cfi: f64,
    /// Enhanced CFI from the scalar CFI (canonical order).
    pub cfi_enhanced: f64,
    /// Mean of the enhanced CFI taken per group/head (alternative order).
    pub cfi_enhanced_groupwise: f64,
    /// Multiplier actually applied to the attention output in the residual.
    pub residual_scale: f64,
    pub per_group_cfi: Tensor,
}

impl CfiReport {
    fn from_map(map: &AttentionMap, layer: usize, frames: usize, config: &EnhanceConfig) -> Self {
        let c = cfi(map);
        let enhanced = cfi_enhanced(c.mean, frames, config.tau, config.clip_enabled);
        let groupwise =
            c.per_group.data().iter().map(|&v| cfi_enhanced(v, frames, config.tau, config.clip_enabled)).sum::<f64>()
                / c.per_group.numel().max(1) as f64;
        Self {
            step: 0,
            layer,
            frames,
            cfi: c.mean,
            cfi_enhanced: enhanced,
            cfi_enhanced_groupwise: groupwise,
            residual_scale: 1.0,
            per_group_cfi: c.per_group,
        }
    }
}

/// One attention evaluation point in a block.
pub trait AttentionSite {
    /// Frame count `F` of the temporal maps.
    fn frames(&self) -> usize;
    /// Hidden states `H` entering the attention residual.
    fn residual(&self) -> &Tensor;
    fn default_scale(&self) -> f64;
    /// Attention output and temporal `F x F` map at the given softmax
    /// denominator (default `sqrt(d_k)`).
    fn evaluate(&self, scale_override: Option<f64>) -> Result<(Tensor, AttentionMap)>;
}

/// Frame-axis temporal attention over `(G, F, C)`.
#[derive(Debug, Clone, Copy)]
pub struct TemporalSite<'a> {
    pub input: &'a Tensor,
    pub residual: &'a Tensor,
    pub params: &'a AttentionParams,
}

impl AttentionSite for TemporalSite<'_> {
    fn frames(&self) -> usize {
        self.input.dims()[1]
    }

    fn residual(&self) -> &Tensor {
        self.residual
    }

    fn default_scale(&self) -> f64 {
        self.params.default_scale()
    }

    fn evaluate(&self, scale_override: Option<f64>) -> Result<(Tensor, AttentionMap)> {
        temporal_attention(self.input, self.params, scale_override)
    }
}

/// 3D full attention over `(B, F*H*W, C)` tokens. The output is the full
/// attention output; the map is its temporal sub-view.
#[derive(Debug, Clone, Copy)]
pub struct Full3dSite<'a> {
    pub tokens: &'a Tensor,
    pub residual: &'a Tensor,
    pub grid: TokenGrid,
    pub params: &'a AttentionParams,
}

impl AttentionSite for Full3dSite<'_> {
    fn frames(&self) -> usize {
        self.grid.frames
    }

    fn residual(&self) -> &Tensor {
        self.residual
    }

    fn default_scale(&self) -> f64 {
        self.params.default_scale()
    }

    fn evaluate(&self, scale_override: Option<f64>) -> Result<(Tensor, AttentionMap)> {
        let (out, _) = full_attention(self.tokens, self.params, scale_override)?;
        let map = temporal_subview_3d(self.tokens, self.grid, self.params, scale_override)?;
        Ok((out, map))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutcome {
    pub o_final: Tensor,
    pub o_attn: Tensor,
    /// Map used to produce `o_attn`.
    pub attention: AttentionMap,
    /// First-pass default-scale map when it differs from `attention`.
    first_pass: Option<AttentionMap>,
    used_default_scale: bool,
    pub report: CfiReport,
}

impl StrategyOutcome {
    /// The map at the default softmax scale on this input, when the strategy
    /// computed one. `None` only for temperature scaling.
    pub fn default_map(&self) -> Option<&AttentionMap> {
        if self.used_default_scale {
            Some(&self.attention)
        } else {
            self.first_pass.as_ref()
        }
    }
}

/// Runs one attention site under `config`. Layers outside the mask take the
/// baseline path. CFI is reported for every path.
pub fn apply_strategy(config: &EnhanceConfig, layer: usize, site: &impl AttentionSite) -> Result<StrategyOutcome> {
    let frames = site.frames();
    let strategy = if config.layer_mask.contains(layer) { config.strategy } else { Strategy::Baseline };
    match strategy {
        Strategy::Baseline => {
            let (o_attn, attention) = site.evaluate(None)?;
            let report = CfiReport::from_map(&attention, layer, frames, config);
            let o_final = o_attn.add(site.residual())?;
            Ok(StrategyOutcome { o_final, o_attn, attention, first_pass: None, used_default_scale: true, report })
        }
        Strategy::EnhanceBlock => {
            let (o_attn, attention) = site.evaluate(None)?;
            let mut report = CfiReport::from_map(&attention, layer, frames, config);
            report.residual_scale = report.cfi_enhanced;
            let o_final = fuse_residual(&o_attn, site.residual(), report.cfi_enhanced)?;
            Ok(StrategyOutcome { o_final, o_attn, attention, first_pass: None, used_default_scale: true, report })
        }
        Strategy::TempAttentionScaling => {
            if config.tau.is_nan() || config.tau <= 0.0 {
                return Err(Error::Config(format!("temp_attention_scaling needs tau > 0, got {}", config.tau)));
            }
            let (o_attn, attention) = site.evaluate(Some(config.tau * site.default_scale()))?;
            let report = CfiReport::from_map(&attention, layer, frames, config);
            let o_final = o_attn.add(site.residual())?;
            Ok(StrategyOutcome { o_final, o_attn, attention, first_pass: None, used_default_scale: false, report })
        }
        Strategy::CfiAttentionScaling => {
            let (_, first) = site.evaluate(None)?;
            let report = CfiReport::from_map(&first, layer, frames, config);
            let denominator = report.cfi_enhanced * site.default_scale();
            let (o_attn, attention) = site.evaluate(Some(denominator))?;
            let o_final = o_attn.add(site.residual())?;
            Ok(StrategyOutcome {
                o_final,
                o_attn,
                attention,
                first_pass: Some(first),
                used_default_scale: false,
                report,
            })
        }
    }
}
