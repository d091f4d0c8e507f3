// SPDX-License-Identifier: Apache-2.0

//! Trace records and the analyses built on them: attention difference maps,
//! CFI trajectories, residual norm proportions and overhead measurement.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use crate::attention::AttentionMap;
use crate::enhance::Strategy;
use crate::error::{Error, Result};
use crate::pipeline::{run_model, Clock, Layout, RunSpec, TraceOptions};
use crate::tensor::Tensor;

/// Instrumentation for one block evaluation at one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub layer: usize,
    pub layout: Layout,
    pub frames: usize,
    pub cfi: f64,
    pub cfi_enhanced: f64,
    pub cfi_enhanced_groupwise: f64,
    pub residual_scale: f64,
    pub norm_o_attn: f64,
    pub norm_h: f64,
    /// Group/head-mean `F x F` map the block used.
    pub snapshot: Option<Tensor>,
    /// Group/head-mean map at the default softmax scale on the same input.
    pub reference_snapshot: Option<Tensor>,
    pub wall_time_ns: Option<u64>,
    pub captured: Option<Box<Captured>>,
}

/// Full tensors of one block evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Captured {
    /// Normalized attention input.
    pub input: Tensor,
    /// Hidden states `H` of the residual.
    pub residual: Tensor,
    pub attention: AttentionMap,
    /// Default-scale map on the same input.
    pub reference: AttentionMap,
    pub o_attn: Tensor,
    pub o_final: Tensor,
}

/// `variant - base` for two `F x F` maps, with summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub step: usize,
    pub layer: usize,
    pub values: Tensor,
    /// Largest absolute change on the diagonal.
    pub max_abs_diagonal: f64,
    /// Mean signed change over off-diagonal entries.
    pub mean_off_diagonal: f64,
    pub max_abs: f64,
}

impl DiffMap {
    fn between(step: usize, layer: usize, base: &Tensor, variant: &Tensor) -> Result<Self> {
        let values = variant.sub(base)?;
        let n = values.dims()[0];
        let d = values.data();
        let max_abs_diagonal = (0..n).map(|i| d[i * n + i].abs()).fold(0.0, f64::max);
        let off: Vec<f64> = (0..n * n).filter(|k| k / n != k % n).map(|k| d[k]).collect();
        let mean_off_diagonal = if off.is_empty() { 0.0 } else { off.iter().sum::<f64>() / off.len() as f64 };
        let max_abs = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        Ok(Self { step, layer, values, max_abs_diagonal, mean_off_diagonal, max_abs })
    }

    /// Largest absolute row sum; zero up to rounding for stochastic inputs.
    pub fn max_row_sum(&self) -> f64 {
        let n = self.values.dims()[0];
        self.values.data().chunks(n.max(1)).map(|r| r.iter().sum::<f64>().abs()).fold(0.0, f64::max)
    }
}

fn snapshot<'a>(r: &'a TraceRecord, which: &str) -> Result<&'a Tensor> {
    r.snapshot.as_ref().ok_or_else(|| {
        Error::Pairing(format!("{which} record (step {}, layer {}) has no attention snapshot", r.step, r.layer))
    })
}

/// Cross-run difference at matching `(step, layer)`.
pub fn diff_map(base: &TraceRecord, variant: &TraceRecord) -> Result<DiffMap> {
    if (base.step, base.layer, base.frames) != (variant.step, variant.layer, variant.frames) {
        return Err(Error::Pairing(format!(
            "cannot pair (step {}, layer {}, F {}) with (step {}, layer {}, F {})",
            base.step, base.layer, base.frames, variant.step, variant.layer, variant.frames
        )));
    }
    DiffMap::between(base.step, base.layer, snapshot(base, "base")?, snapshot(variant, "variant")?)
}

/// Difference between the map a block used and the default-scale map on
/// the same input.
pub fn within_layer_diff(record: &TraceRecord) -> Result<DiffMap> {
    let reference = record.reference_snapshot.as_ref().ok_or_else(|| {
        Error::Pairing(format!("record (step {}, layer {}) has no reference snapshot", record.step, record.layer))
    })?;
    DiffMap::between(record.step, record.layer, reference, snapshot(record, "variant")?)
}

/// Pairs two traces record by record.
pub fn diff_maps(base: &[TraceRecord], variant: &[TraceRecord]) -> Result<Vec<DiffMap>> {
    if base.len() != variant.len() {
        return Err(Error::Pairing(format!("traces differ in length: {} vs {}", base.len(), variant.len())));
    }
    base.iter().zip(variant).map(|(b, v)| diff_map(b, v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormProportion {
    pub step: usize,
    pub layer: usize,
    /// `|O_attn| / |H|`.
    pub prop_baseline: f64,
    /// `cfi_enhanced * |O_attn| / |H|`.
    pub prop_enhanced: f64,
    pub cfi_enhanced: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormProportions {
    pub samples: Vec<NormProportion>,
    /// Records with `|H| = 0`, excluded from `samples`.
    pub undefined: usize,
}

pub fn norm_proportions(trace: &[TraceRecord]) -> NormProportions {
    let mut out = NormProportions::default();
    for r in trace {
        if r.norm_h == 0.0 {
            out.undefined += 1;
            continue;
        }
        out.samples.push(NormProportion {
            step: r.step,
            layer: r.layer,
            prop_baseline: r.norm_o_attn / r.norm_h,
            prop_enhanced: r.cfi_enhanced * r.norm_o_attn / r.norm_h,
            cfi_enhanced: r.cfi_enhanced,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfiPoint {
    pub step: usize,
    pub cfi: f64,
    pub cfi_enhanced: f64,
}

/// CFI series of one layer in trace order (descending step).
pub fn cfi_trajectory(trace: &[TraceRecord], layer: usize) -> Result<Vec<CfiPoint>> {
    let series: Vec<CfiPoint> = trace
        .iter()
        .filter(|r| r.layer == layer)
        .map(|r| CfiPoint { step: r.step, cfi: r.cfi, cfi_enhanced: r.cfi_enhanced })
        .collect();
    if series.is_empty() {
        return Err(Error::Parameter(format!("no records for layer {layer}")));
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub baseline_strategy: Strategy,
    pub enhanced_strategy: Strategy,
    pub baseline_ns: Vec<u64>,
    pub enhanced_ns: Vec<u64>,
    pub baseline_median_s: f64,
    pub enhanced_median_s: f64,
    /// `(enhanced - baseline) / baseline`.
    pub overhead_fraction: f64,
}

pub fn median_ns(samples: &[u64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] as f64 + s[n / 2] as f64) / 2.0
    }
}

/// Times full sampling runs of `spec` under the baseline strategy and under
/// the spec's own strategy. Arms alternate after one warm-up each; the
/// model is built once and shared. Tracing keeps only scalar fields.
pub fn overhead_bench<C: Clock>(spec: &RunSpec, repetitions: usize, clock: &C) -> Result<OverheadReport> {
    if repetitions < 3 {
        return Err(Error::Parameter(format!("need at least 3 repetitions, got {repetitions}")));
    }
    spec.validate()?;
    let model = spec.build_model()?;
    let mut base_spec = spec.clone();
    base_spec.enhance.strategy = Strategy::Baseline;

    let time = |s: &RunSpec| -> Result<u64> {
        let start = clock.now_ns().ok_or_else(|| Error::Parameter("bench needs a clock".into()))?;
        run_model(s, &model, TraceOptions::scalars_only(), crate::pipeline::NoClock)?;
        let end = clock.now_ns().ok_or_else(|| Error::Parameter("bench needs a clock".into()))?;
        Ok(end.saturating_sub(start))
    };
    time(&base_spec)?;
    time(spec)?;
    let mut baseline_ns = Vec::with_capacity(repetitions);
    let mut enhanced_ns = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        if rep % 2 == 0 {
            baseline_ns.push(time(&base_spec)?);
            enhanced_ns.push(time(spec)?);
        } else {
            enhanced_ns.push(time(spec)?);
            baseline_ns.push(time(&base_spec)?);
        }
    }
    let b = median_ns(&baseline_ns);
    let e = median_ns(&enhanced_ns);
    Ok(OverheadReport {
        baseline_strategy: Strategy::Baseline,
        enhanced_strategy: spec.enhance.strategy,
        baseline_ns,
        enhanced_ns,
        baseline_median_s: b * 1e-9,
        enhanced_median_s: e * 1e-9,
        overhead_fraction: (e - b) / b,
    })
}
