// SPDX-License-Identifier: Apache-2.0

//! Deterministic toy latent-video diffusion sandbox.
//!
//! Forward noising follows `x_t = sqrt(a_t) x_{t-1} + sqrt(1 - a_t) z_t`.
//! The reverse process is a fixed residual update
//! `x_{t-1} = x_t - eta * model(x_t, t)` with `eta = 1/T`, driven by a
//! seeded multi-block denoiser whose attention sites go through
//! [`apply_strategy`].
//!
//! Random streams: model weights come from `Rng::new(seed)` in block order
//! (attention `w_q, w_k, w_v, w_o`, then the two feed-forward maps); the
//! initial latent `x_T` comes from `Rng::new(seed ^ LATENT_STREAM)`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::analysis::{Captured, TraceRecord};
use crate::attention::{AttentionParams, LatentDims, VideoLatent};
use crate::enhance::{apply_strategy, AttentionSite, EnhanceConfig, Full3dSite, TemporalSite};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stream selector mixed into the seed for the initial latent.
pub const LATENT_STREAM: u64 = 0x5E_ED0F_1A7E_u64;

const NORM_EPS: f64 = 1e-6;
const TIME_EMBED_GAIN: f64 = 0.1;

/// Per-step `alpha_t` for `t = 1..=T` with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_t` in `[0, 1]`; zero marks a step that replaces the signal
    /// with pure noise.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Parameter("noise schedule needs at least one step".into()));
        }
        if let Some((t, a)) = alphas.iter().enumerate().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Parameter(format!("alpha_{} = {a} outside [0, 1]", t + 1)));
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    /// Cumulative `alpha_bar_t` linear from `start` at `t = 1` to `end` at
    /// `t = T`. A one-step schedule uses `end`.
    pub fn linear_alpha_bar(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("noise schedule needs at least one step".into()));
        }
        if !(end > 0.0 && end <= start && start <= 1.0) {
            return Err(Error::Parameter(format!(
                "linear alpha_bar needs 0 < end <= start <= 1, got start={start}, end={end}"
            )));
        }
        let bar = |t: usize| {
            if steps == 1 {
                end
            } else {
                start + (end - start) * (t - 1) as f64 / (steps - 1) as f64
            }
        };
        let mut prev = 1.0;
        let alphas = (1..=steps)
            .map(|t| {
                let b = bar(t);
                let a = (b / prev).min(1.0);
                prev = b;
                a
            })
            .collect();
        Self::from_alphas(alphas)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_t`, one-indexed.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, one-indexed.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn noisy(signal: &Tensor, keep: f64, rng: &mut Rng) -> Result<Tensor> {
    let z = Tensor::gaussian(rng, signal.dims().to_vec())?;
    let (a, b) = (libm::sqrt(keep), libm::sqrt(1.0 - keep));
    signal.zip_with(&z, |x, n| a * x + b * n)
}

/// Applies the one-step noising recursion from `x_0` through step `t`, with
/// fresh noise drawn at every step.
pub fn forward_diffuse(x0: &VideoLatent, schedule: &NoiseSchedule, t: usize, rng: &mut Rng) -> Result<VideoLatent> {
    schedule.check_step(t)?;
    let mut x = x0.tensor().clone();
    for step in 1..=t {
        x = noisy(&x, schedule.alpha(step), rng)?;
    }
    VideoLatent::new(x)
}

/// Single jump `sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) z`.
pub fn forward_diffuse_closed_form(
    x0: &VideoLatent,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut Rng,
) -> Result<VideoLatent> {
    schedule.check_step(t)?;
    VideoLatent::new(noisy(x0.tensor(), schedule.alpha_bar(t), rng)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Frame-axis temporal attention per spatial site.
    Temporal,
    /// Joint attention over all frame and spatial tokens.
    Full3d,
}

impl Layout {
    pub fn as_str(&self) -> &'static str {
        match self {
            Layout::Temporal => "temporal",
            Layout::Full3d => "full_3d",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(Layout::Temporal),
            "full_3d" => Ok(Layout::Full3d),
            _ => Err(Error::Config(format!("unknown layout `{s}` (expected temporal or full_3d)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub layout: Layout,
    /// Multiplier on the query weights; large values sharpen the attention.
    pub qk_gain: f64,
}

/// One transformer block: attention site plus a two-layer feed-forward map.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layout: Layout,
    pub attention: AttentionParams,
    /// `(d_model, 2 d_model)`.
    pub ffn_in: Tensor,
    /// `(2 d_model, d_model)`.
    pub ffn_out: Tensor,
}

impl Block {
    fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = x.rms_norm_rows(NORM_EPS).matmul(&self.ffn_in)?.map(libm::tanh);
        x.add(&hidden.matmul(&self.ffn_out)?)
    }
}

/// Seeded stand-in for a video diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub blocks: Vec<Block>,
}

impl ToyDenoiser {
    pub fn seeded(seed: u64, config: &ModelConfig) -> Result<Self> {
        if config.depth == 0 {
            return Err(Error::Parameter("model depth must be >= 1".into()));
        }
        if !config.qk_gain.is_finite() {
            return Err(Error::Parameter(format!("qk_gain must be finite, got {}", config.qk_gain)));
        }
        let mut rng = Rng::new(seed);
        let c = config.d_model;
        let blocks = (0..config.depth)
            .map(|_| {
                let mut attention = AttentionParams::seeded(&mut rng, c, config.d_k, config.heads)?;
                attention.w_q = attention.w_q.scale(config.qk_gain);
                let ffn_in = Tensor::gaussian(&mut rng, [c, 2 * c])?.scale(1.0 / libm::sqrt(c as f64));
                let ffn_out = Tensor::gaussian(&mut rng, [2 * c, c])?.scale(1.0 / libm::sqrt((2 * c) as f64));
                Ok(Block { layout: config.layout, attention, ffn_in, ffn_out })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Monotonic time source for per-block timings. Core code never reads a
/// clock on its own.
pub trait Clock {
    fn now_ns(&self) -> Option<u64>;
}

/// Clock that records nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&self) -> Option<u64> {
        None
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now_ns(&self) -> Option<u64> {
        (**self).now_ns()
    }
}

/// Receives one record per block evaluation, in execution order.
pub trait TraceSink {
    fn record(&mut self, record: TraceRecord);
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, record: TraceRecord) {
        self.push(record);
    }
}

/// Sink that drops records.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: TraceRecord) {}
}

/// What each trace record carries beyond the scalar CFI fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    /// Group/head-mean `F x F` maps: the map used and the default-scale map
    /// on the same input.
    pub snapshots: bool,
    /// Full tensors for replay oracles.
    pub capture: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { snapshots: true, capture: false }
    }
}

impl TraceOptions {
    pub fn scalars_only() -> Self {
        Self { snapshots: false, capture: false }
    }

    pub fn full() -> Self {
        Self { snapshots: true, capture: true }
    }
}

/// Denoiser plus everything a reverse step needs.
pub struct Sampler<'a, C: Clock = NoClock> {
    pub model: &'a ToyDenoiser,
    pub schedule: &'a NoiseSchedule,
    pub enhance: &'a EnhanceConfig,
    pub options: TraceOptions,
    pub clock: C,
}

impl<'a> Sampler<'a, NoClock> {
    pub fn new(model: &'a ToyDenoiser, schedule: &'a NoiseSchedule, enhance: &'a EnhanceConfig) -> Self {
        Self { model, schedule, enhance, options: TraceOptions::default(), clock: NoClock }
    }
}

impl<C: Clock> Sampler<'_, C> {
    fn time_embedding(&self, t: usize, channels: usize) -> Vec<f64> {
        let sigma = libm::sqrt(1.0 - self.schedule.alpha_bar(t));
        (0..channels).map(|c| TIME_EMBED_GAIN * libm::sin(core::f64::consts::PI * sigma * (c + 1) as f64)).collect()
    }

    fn run_block(
        &self,
        block: &Block,
        layer: usize,
        step: usize,
        hidden: &VideoLatent,
        sink: &mut dyn TraceSink,
    ) -> Result<VideoLatent> {
        let dims = hidden.dims();
        let started = self.clock.now_ns();
        let (residual, site_output, input) = match block.layout {
            Layout::Temporal => {
                let h = hidden.to_frame_axis();
                let x = h.rms_norm_rows(NORM_EPS);
                let site = TemporalSite { input: &x, residual: &h, params: &block.attention };
                let out = self.evaluate(&site, layer, step)?;
                (h, out, x)
            }
            Layout::Full3d => {
                let h = hidden.to_tokens();
                let x = h.rms_norm_rows(NORM_EPS);
                let site = Full3dSite { tokens: &x, residual: &h, grid: dims.grid(), params: &block.attention };
                let out = self.evaluate(&site, layer, step)?;
                (h, out, x)
            }
        };
        let (outcome, reference) = site_output;
        let y = block.feed_forward(&outcome.o_final)?;
        let next = match block.layout {
            Layout::Temporal => VideoLatent::from_frame_axis(&y, dims)?,
            Layout::Full3d => VideoLatent::from_tokens(&y, dims)?,
        };
        let finished = self.clock.now_ns();

        let report = outcome.report;
        let mut record = TraceRecord {
            step,
            layer,
            layout: block.layout,
            frames: report.frames,
            cfi: report.cfi,
            cfi_enhanced: report.cfi_enhanced,
            cfi_enhanced_groupwise: report.cfi_enhanced_groupwise,
            residual_scale: report.residual_scale,
            norm_o_attn: outcome.o_attn.l2_norm()?,
            norm_h: residual.l2_norm()?,
            snapshot: None,
            reference_snapshot: None,
            wall_time_ns: started.zip(finished).map(|(a, b)| b.saturating_sub(a)),
            captured: None,
        };
        if self.options.snapshots {
            record.snapshot = Some(outcome.attention.mean_map());
            record.reference_snapshot = reference.as_ref().map(|r| r.mean_map());
        }
        if self.options.capture {
            record.captured = Some(Box::new(Captured {
                input,
                residual,
                attention: outcome.attention,
                reference: reference.expect("reference map computed when capturing"),
                o_attn: outcome.o_attn,
                o_final: outcome.o_final,
            }));
        }
        sink.record(record);
        Ok(next)
    }

    /// Strategy outcome plus the default-scale map on the same input when
    /// instrumentation wants one.
    fn evaluate(
        &self,
        site: &impl AttentionSite,
        layer: usize,
        step: usize,
    ) -> Result<(crate::enhance::StrategyOutcome, Option<crate::attention::AttentionMap>)> {
        let mut outcome = apply_strategy(self.enhance, layer, site)?;
        outcome.report.step = step;
        let want_reference = self.options.snapshots || self.options.capture;
        let reference = match outcome.default_map() {
            Some(m) if want_reference => Some(m.clone()),
            None if want_reference => Some(site.evaluate(None)?.1),
            _ => None,
        };
        Ok((outcome, reference))
    }

    /// Model output for `x_t`: the sum of the residual updates of all blocks.
    pub fn predict(&self, x_t: &VideoLatent, t: usize, sink: &mut dyn TraceSink) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        let dims = x_t.dims();
        let emb = self.time_embedding(t, dims.channels);
        let mut input = x_t.tensor().clone();
        let plane = dims.spatial();
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            *v += emb[(i / plane) % dims.channels];
        }
        let start = VideoLatent::new(input)?;
        let mut hidden = start.clone();
        for (layer, block) in self.model.blocks.iter().enumerate() {
            hidden = self.run_block(block, layer, t, &hidden, sink)?;
        }
        hidden.tensor().sub(start.tensor())
    }

    /// `x_{t-1} = x_t - model(x_t, t) / T`.
    pub fn denoise_step(&self, x_t: &VideoLatent, t: usize, sink: &mut dyn TraceSink) -> Result<VideoLatent> {
        let eta = 1.0 / self.schedule.steps() as f64;
        let update = self.predict(x_t, t, sink)?;
        VideoLatent::new(x_t.tensor().zip_with(&update, |x, u| x - eta * u)?)
    }

    /// Runs steps `T..=1` from `x_T`.
    pub fn sample(&self, x_t: VideoLatent, sink: &mut dyn TraceSink) -> Result<VideoLatent> {
        let mut x = x_t;
        for t in (1..=self.schedule.steps()).rev() {
            x = self.denoise_step(&x, t, sink)?;
        }
        Ok(x)
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub seed: u64,
    pub dims: LatentDims,
    pub steps: usize,
    pub depth: usize,
    pub d_k: usize,
    pub heads: usize,
    pub qk_gain: f64,
    pub layout: Layout,
    pub schedule: NoiseSchedule,
    pub enhance: EnhanceConfig,
}

impl RunSpec {
    /// B=1, F=8, C=16, H=W=4, T=10, depth 4, two heads of width 8.
    pub fn toy_default() -> Self {
        Self {
            seed: 0,
            dims: LatentDims { batch: 1, frames: 8, channels: 16, height: 4, width: 4 },
            steps: 10,
            depth: 4,
            d_k: 8,
            heads: 2,
            qk_gain: 1.0,
            layout: Layout::Temporal,
            schedule: NoiseSchedule::linear_alpha_bar(10, 1.0, 0.01).expect("valid default schedule"),
            enhance: EnhanceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.dims.as_array().contains(&0) {
            return Err(Error::Config(format!("latent extents must be positive: {:?}", self.dims.as_array())));
        }
        if self.depth == 0 || self.d_k == 0 || self.heads == 0 {
            return Err(Error::Config("depth, d_k and heads must be >= 1".into()));
        }
        if self.schedule.steps() != self.steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the run has {}",
                self.schedule.steps(),
                self.steps
            )));
        }
        self.enhance.validate(self.depth)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            d_model: self.dims.channels,
            d_k: self.d_k,
            heads: self.heads,
            layout: self.layout,
            qk_gain: self.qk_gain,
        }
    }

    pub fn build_model(&self) -> Result<ToyDenoiser> {
        ToyDenoiser::seeded(self.seed, &self.model_config())
    }

    /// Seeded Gaussian `x_T`.
    pub fn initial_latent(&self) -> Result<VideoLatent> {
        let mut rng = Rng::new(self.seed ^ LATENT_STREAM);
        VideoLatent::new(Tensor::gaussian(&mut rng, self.dims.as_array())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub latent: VideoLatent,
    pub trace: Vec<TraceRecord>,
}

/// Runs a spec with snapshot tracing and no clock.
pub fn run(spec: &RunSpec) -> Result<RunOutput> {
    run_with(spec, TraceOptions::default(), NoClock)
}

pub fn run_with<C: Clock>(spec: &RunSpec, options: TraceOptions, clock: C) -> Result<RunOutput> {
    spec.validate()?;
    let model = spec.build_model()?;
    run_model(spec, &model, options, clock)
}

/// Runs a spec on a prebuilt model, e.g. one with hand-edited weights.
pub fn run_model<C: Clock>(spec: &RunSpec, model: &ToyDenoiser, options: TraceOptions, clock: C) -> Result<RunOutput> {
    spec.validate()?;
    if model.depth() != spec.depth {
        return Err(Error::Config(format!("model depth {} but spec depth {}", model.depth(), spec.depth)));
    }
    let sampler = Sampler { model, schedule: &spec.schedule, enhance: &spec.enhance, options, clock };
    let mut trace = Vec::with_capacity(spec.steps * spec.depth);
    let latent = sampler.sample(spec.initial_latent()?, &mut trace)?;
    Ok(RunOutput { latent, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::{LayerMask, Strategy};
    use alloc::vec;

    fn small_spec(frames: usize, depth: usize, steps: usize) -> RunSpec {
        RunSpec {
            seed: 17,
            dims: LatentDims { batch: 1, frames, channels: 8, height: 2, width: 2 },
            steps,
            depth,
            d_k: 4,
            heads: 2,
            qk_gain: 1.0,
            layout: Layout::Temporal,
            schedule: NoiseSchedule::linear_alpha_bar(steps, 1.0, 0.01).unwrap(),
            enhance: EnhanceConfig::default(),
        }
    }

    fn scalar_latent(v: f64) -> VideoLatent {
        VideoLatent::new(Tensor::new([1, 1, 1, 1, 1], vec![v]).unwrap()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear_alpha_bar(10, 1.0, 0.01).unwrap();
        assert_eq!(s.steps(), 10);
        assert_eq!(s.alpha_bar(1), 1.0);
        assert!((s.alpha_bar(10) - 0.01).abs() < 1e-12);
        assert!(s.alphas().iter().all(|a| (0.0..=1.0).contains(a)));
        for t in 2..=10 {
            assert!(s.alpha_bar(t) <= s.alpha_bar(t - 1));
        }
        assert!(NoiseSchedule::from_alphas(vec![0.5, 1.2]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![]).is_err());
        assert!(NoiseSchedule::linear_alpha_bar(5, 0.5, 0.9).is_err());
    }

    #[test]
    fn forward_with_unit_alphas_is_identity() {
        let s = NoiseSchedule::from_alphas(vec![1.0; 5]).unwrap();
        let mut rng = Rng::new(1);
        let x0 = VideoLatent::new(Tensor::gaussian(&mut rng, [1, 2, 3, 2, 2]).unwrap()).unwrap();
        assert_eq!(forward_diffuse(&x0, &s, 5, &mut rng).unwrap(), x0);
    }

    #[test]
    fn forward_with_zero_alpha_is_pure_noise() {
        let s = NoiseSchedule::from_alphas(vec![0.9, 0.0]).unwrap();
        let x0 = scalar_latent(3.0);
        let mut a = Rng::new(5);
        let x = forward_diffuse(&x0, &s, 2, &mut a).unwrap();
        let mut b = Rng::new(5);
        let _first = b.gaussian();
        assert_eq!(x.tensor().data()[0], b.gaussian());
    }

    #[test]
    fn forward_step_out_of_range() {
        let s = NoiseSchedule::from_alphas(vec![0.9; 3]).unwrap();
        let mut rng = Rng::new(0);
        assert!(matches!(forward_diffuse(&scalar_latent(0.0), &s, 0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(forward_diffuse(&scalar_latent(0.0), &s, 4, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn iterated_and_closed_form_agree_in_distribution() {
        let s = NoiseSchedule::from_alphas(vec![0.9, 0.7, 0.8, 0.6]).unwrap();
        let x0 = scalar_latent(1.5);
        let mut rng = Rng::new(99);
        let moments = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64)
        };
        let iter: Vec<f64> =
            (0..10_000).map(|_| forward_diffuse(&x0, &s, 4, &mut rng).unwrap().tensor().data()[0]).collect();
        let jump: Vec<f64> = (0..10_000)
            .map(|_| forward_diffuse_closed_form(&x0, &s, 4, &mut rng).unwrap().tensor().data()[0])
            .collect();
        let (m1, v1) = moments(&iter);
        let (m2, v2) = moments(&jump);
        assert!((m1 - m2).abs() < 0.02, "{m1} vs {m2}");
        assert!((v1 - v2).abs() < 0.05, "{v1} vs {v2}");
    }

    #[test]
    fn run_is_deterministic() {
        let spec = small_spec(4, 2, 3);
        assert_eq!(run(&spec).unwrap(), run(&spec).unwrap());
    }

    #[test]
    fn empty_mask_matches_baseline() {
        let mut base = small_spec(4, 2, 3);
        base.enhance = EnhanceConfig::baseline();
        let mut masked = small_spec(4, 2, 3);
        masked.enhance.tau = 3.0;
        masked.enhance.layer_mask = LayerMask::none();
        let a = run(&base).unwrap();
        let b = run(&masked).unwrap();
        assert_eq!(a.latent, b.latent);
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.residual_scale, y.residual_scale);
            assert_eq!(x.snapshot, y.snapshot);
        }
    }

    #[test]
    fn clip_forced_unit_scale_matches_baseline() {
        let mut base = small_spec(4, 2, 2);
        base.enhance = EnhanceConfig::baseline();
        let mut eb = small_spec(4, 2, 2);
        eb.enhance = EnhanceConfig::with_strategy(Strategy::EnhanceBlock, -4.0);
        assert_eq!(run(&base).unwrap().latent, run(&eb).unwrap().latent);
    }

    #[test]
    fn single_frame_enhancement_is_noop() {
        let mut base = small_spec(1, 1, 2);
        base.enhance = EnhanceConfig::baseline();
        let mut eb = small_spec(1, 1, 2);
        eb.enhance.tau = 7.0;
        let out = run(&eb).unwrap();
        assert!(out.trace.iter().all(|r| r.cfi == 0.0 && r.residual_scale == 1.0));
        assert_eq!(run(&base).unwrap().latent, out.latent);
    }

    #[test]
    fn trace_has_depth_times_steps_records() {
        let spec = small_spec(3, 3, 4);
        let out = run(&spec).unwrap();
        assert_eq!(out.trace.len(), 12);
        let coords: Vec<(usize, usize)> = out.trace.iter().map(|r| (r.step, r.layer)).collect();
        assert_eq!(coords[0], (4, 0));
        assert_eq!(coords[11], (1, 2));
    }

    #[test]
    fn full3d_layout_runs_and_traces_frames() {
        let mut spec = small_spec(3, 2, 2);
        spec.layout = Layout::Full3d;
        let out = run(&spec).unwrap();
        assert_eq!(out.trace.len(), 4);
        for r in &out.trace {
            assert_eq!(r.frames, 3);
            assert_eq!(r.layout, Layout::Full3d);
            assert_eq!(r.snapshot.as_ref().unwrap().dims(), &[3, 3]);
        }
        assert!(out.latent.tensor().is_finite());
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(2, 2, 2);
        s.steps = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = small_spec(2, 2, 2);
        s.enhance.layer_mask = LayerMask::Only([5].into_iter().collect());
        assert!(matches!(run(&s), Err(Error::Config(_))));
    }

    #[test]
    fn toy_default_is_finite() {
        let out = run(&RunSpec::toy_default()).unwrap();
        assert!(out.latent.tensor().is_finite());
        assert_eq!(out.trace.len(), 40);
    }
}
