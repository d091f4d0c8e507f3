// SPDX-License-Identifier: Apache-2.0

//! `run`, `compare`, `sweep` and `bench`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use eav_core::analysis::{
    diff_maps, norm_proportions, overhead_bench, within_layer_diff, DiffMap, OverheadReport, TraceRecord,
};
use eav_core::enhance::Strategy;
use eav_core::pipeline::{run_with, Clock, RunOutput, RunSpec, TraceOptions};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigFile, Overrides, SCHEMA};
use crate::error::CliError;
use crate::formats::{export_map, fmt_f64, latent_to_string, trace_to_string, write_atomic};

/// Monotonic nanoseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock(Instant);

impl Default for MonotonicClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> Option<u64> {
        Some(self.0.elapsed().as_nanos() as u64)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTiming {
    pub step: usize,
    pub layer: usize,
    pub wall_time_ns: u64,
}

/// Provenance of a run. Timestamps and timings appear only here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub tool_version: String,
    pub seed: u64,
    pub strategy: String,
    pub tau: f64,
    pub clip: bool,
    pub config_hash: String,
    pub trace_sha256: String,
    pub latent_sha256: String,
    pub created_unix_ms: u128,
    pub block_timings: Vec<BlockTiming>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub output: RunOutput,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ConfigFile, CliError> {
    let mut cfg = ConfigFile::load(path)?;
    cfg.apply(overrides)?;
    Ok(cfg)
}

fn cfi_table(trace: &[TraceRecord]) -> String {
    let props = norm_proportions(trace);
    let mut out =
        String::from("step,layer,cfi,cfi_enhanced,cfi_enhanced_groupwise,residual_scale,prop_baseline,prop_enhanced\n");
    let mut samples = props.samples.iter();
    for r in trace {
        let (pb, pe) = if r.norm_h == 0.0 {
            ("nan".to_string(), "nan".to_string())
        } else {
            let p = samples.next().expect("one sample per defined record");
            (fmt_f64(p.prop_baseline), fmt_f64(p.prop_enhanced))
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{pb},{pe}",
            r.step,
            r.layer,
            fmt_f64(r.cfi),
            fmt_f64(r.cfi_enhanced),
            fmt_f64(r.cfi_enhanced_groupwise),
            fmt_f64(r.residual_scale)
        )
        .unwrap();
    }
    out
}

/// Runs one configuration and writes `trace.tsv`, `latent.txt`, `cfi.csv`,
/// final-step attention maps under `maps/`, and `manifest.json` into `dir`.
pub fn execute_run(cfg: &ConfigFile, dir: &Path) -> Result<RunArtifacts, CliError> {
    let spec = cfg.to_run_spec()?;
    let output = run_with(&spec, TraceOptions::default(), MonotonicClock::default())?;
    let trace_text = trace_to_string(&output.trace);
    let latent_text = latent_to_string(&output.latent);
    write_atomic(&dir.join("trace.tsv"), trace_text.as_bytes())?;
    write_atomic(&dir.join("latent.txt"), latent_text.as_bytes())?;
    write_atomic(&dir.join("cfi.csv"), cfi_table(&output.trace).as_bytes())?;
    for r in output.trace.iter().filter(|r| r.step == 1) {
        if let Some(snap) = &r.snapshot {
            let source = format!("attention map, step {}, layer {}, {}", r.step, r.layer, spec.enhance.strategy);
            export_map(&dir.join("maps"), &format!("attention_step{}_layer{}", r.step, r.layer), snap, &source)?;
        }
    }
    let manifest = Manifest {
        schema: SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        strategy: cfg.enhance.strategy.clone(),
        tau: cfg.enhance.tau,
        clip: cfg.enhance.clip,
        config_hash: cfg.hash(),
        trace_sha256: sha256_hex(trace_text.as_bytes()),
        latent_sha256: sha256_hex(latent_text.as_bytes()),
        created_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        block_timings: output
            .trace
            .iter()
            .map(|r| BlockTiming { step: r.step, layer: r.layer, wall_time_ns: r.wall_time_ns.unwrap_or(0) })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    info!("run {} -> {}", manifest.config_hash, dir.display());
    Ok(RunArtifacts { dir: dir.to_owned(), manifest, output })
}

pub fn cmd_run(config: &Path, overrides: &Overrides) -> Result<RunArtifacts, CliError> {
    let cfg = load_config(config, overrides)?;
    let dir = cfg.output.dir.clone();
    execute_run(&cfg, &dir)
}

/// `name` or `name:tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyArm {
    pub strategy: Strategy,
    pub tau: Option<f64>,
}

impl StrategyArm {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (name, tau) = match s.split_once(':') {
            Some((n, t)) => {
                let tau = t
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::Usage(format!("strategy `{s}`: `{t}` is not a finite tau")))?;
                (n, Some(tau))
            }
            None => (s, None),
        };
        let strategy = name.parse().map_err(|e: eav_core::Error| CliError::Usage(e.to_string()))?;
        Ok(Self { strategy, tau })
    }

    pub fn label(&self) -> String {
        match self.tau {
            Some(t) => format!("{}_tau{t}", self.strategy),
            None => self.strategy.to_string(),
        }
    }
}

/// Default temperature for the direct temperature-scaling arm of
/// `compare` when none is given: at `tau = 1` it reduces to baseline.
pub const COMPARE_TEMP_TAU: f64 = 1.1;

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub labels: Vec<String>,
    pub traces: Vec<Vec<TraceRecord>>,
    /// One row per (variant, step, layer).
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub step: usize,
    pub layer: usize,
    pub cross_run: DiffMap,
    pub within_layer: DiffMap,
}

fn run_members(cfgs: &[ConfigFile]) -> Result<Vec<RunOutput>, CliError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = cfgs
            .iter()
            .map(|cfg| {
                s.spawn(move || -> Result<RunOutput, CliError> {
                    let spec = cfg.to_run_spec()?;
                    Ok(run_with(&spec, TraceOptions::default(), eav_core::pipeline::NoClock)?)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    })
}

fn diff_csv_rows(out: &mut String, variant: &str, kind: &str, d: &DiffMap) {
    let n = d.values.dims()[0];
    for (k, v) in d.values.data().iter().enumerate() {
        writeln!(out, "{variant},{},{},{kind},{},{},{}", d.step, d.layer, k / n, k % n, fmt_f64(*v)).unwrap();
    }
}

/// One run per strategy with the same seed; diff maps against the first.
pub fn cmd_compare(config: &Path, overrides: &Overrides, strategies: &[String]) -> Result<CompareResult, CliError> {
    if strategies.len() < 2 {
        return Err(CliError::Usage(format!("compare needs at least 2 strategies, got {}", strategies.len())));
    }
    let base_cfg = load_config(config, overrides)?;
    let arms = strategies.iter().map(|s| StrategyArm::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let cfgs: Vec<ConfigFile> = arms
        .iter()
        .map(|arm| {
            let mut c = base_cfg.clone();
            c.enhance.strategy = arm.strategy.to_string();
            c.enhance.tau = match (arm.tau, arm.strategy) {
                (Some(t), _) => t,
                (None, Strategy::TempAttentionScaling) => COMPARE_TEMP_TAU,
                (None, _) => base_cfg.enhance.tau,
            };
            c
        })
        .collect();
    let mut labels: Vec<String> = arms.iter().map(StrategyArm::label).collect();
    for (i, l) in labels.clone().iter().enumerate() {
        if labels[..i].contains(l) {
            labels[i] = format!("{l}_{i}");
        }
    }
    let outputs = run_members(&cfgs)?;
    let dir = base_cfg.output.dir.clone();

    let mut summary = Vec::new();
    let mut diff_csv = String::from("variant,step,layer,kind,row,col,value\n");
    let mut traj = String::from("strategy,layer,step,cfi,cfi_enhanced,residual_scale\n");
    for (label, out) in labels.iter().zip(&outputs) {
        write_atomic(&dir.join(label).join("trace.tsv"), trace_to_string(&out.trace).as_bytes())?;
        write_atomic(&dir.join(label).join("latent.txt"), latent_to_string(&out.latent).as_bytes())?;
        let mut by_layer: Vec<&TraceRecord> = out.trace.iter().collect();
        by_layer.sort_by_key(|r| (r.layer, std::cmp::Reverse(r.step)));
        for r in by_layer {
            writeln!(
                traj,
                "{label},{},{},{},{},{}",
                r.layer,
                r.step,
                fmt_f64(r.cfi),
                fmt_f64(r.cfi_enhanced),
                fmt_f64(r.residual_scale)
            )
            .unwrap();
        }
    }
    let base = &outputs[0].trace;
    for (label, out) in labels.iter().zip(&outputs).skip(1) {
        let cross = diff_maps(base, &out.trace)?;
        for (c, r) in cross.into_iter().zip(&out.trace) {
            let w = within_layer_diff(r)?;
            diff_csv_rows(&mut diff_csv, label, "cross_run", &c);
            diff_csv_rows(&mut diff_csv, label, "within_layer", &w);
            if c.step == 1 {
                let maps = dir.join("maps");
                export_map(
                    &maps,
                    &format!("{label}_step1_layer{}_cross_run", c.layer),
                    &c.values,
                    &format!("{label} - {}", labels[0]),
                )?;
                export_map(
                    &maps,
                    &format!("{label}_step1_layer{}_within_layer", c.layer),
                    &w.values,
                    &format!("{label} used - default-scale map"),
                )?;
            }
            summary.push(SummaryRow {
                variant: label.clone(),
                step: c.step,
                layer: c.layer,
                cross_run: c,
                within_layer: w,
            });
        }
    }
    let mut table = String::from(
        "variant,step,layer,cross_max_abs_diagonal,cross_mean_off_diagonal,cross_max_abs,\
         within_max_abs_diagonal,within_mean_off_diagonal,within_max_abs\n",
    );
    for row in &summary {
        let (c, w) = (&row.cross_run, &row.within_layer);
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            row.variant,
            row.step,
            row.layer,
            fmt_f64(c.max_abs_diagonal),
            fmt_f64(c.mean_off_diagonal),
            fmt_f64(c.max_abs),
            fmt_f64(w.max_abs_diagonal),
            fmt_f64(w.mean_off_diagonal),
            fmt_f64(w.max_abs)
        )
        .unwrap();
    }
    write_atomic(&dir.join("summary.csv"), table.as_bytes())?;
    write_atomic(&dir.join("diff_maps.csv"), diff_csv.as_bytes())?;
    write_atomic(&dir.join("trajectories.csv"), traj.as_bytes())?;
    Ok(CompareResult { labels, traces: outputs.into_iter().map(|o| o.trace).collect(), summary })
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub taus: Vec<f64>,
    pub traces: Vec<Vec<TraceRecord>>,
}

/// One run per tau with the config's seed; writes `sweep.csv` and
/// `sweep/tau_<i>.csv`.
pub fn cmd_sweep(config: &Path, overrides: &Overrides, taus: &[f64]) -> Result<SweepResult, CliError> {
    if taus.is_empty() {
        return Err(CliError::Usage("sweep needs at least one tau".into()));
    }
    if let Some(t) = taus.iter().find(|t| !t.is_finite()) {
        return Err(CliError::Usage(format!("sweep tau must be finite, got {t}")));
    }
    let base = load_config(config, overrides)?;
    let cfgs: Vec<ConfigFile> = taus
        .iter()
        .map(|&tau| {
            let mut c = base.clone();
            c.enhance.tau = tau;
            c
        })
        .collect();
    let outputs = run_members(&cfgs)?;
    let dir = base.output.dir.clone();
    let mut all = String::from("tau,step,layer,cfi,cfi_enhanced,residual_scale\n");
    for (i, (tau, out)) in taus.iter().zip(&outputs).enumerate() {
        let mut one = String::from("step,layer,cfi,cfi_enhanced,residual_scale\n");
        for r in &out.trace {
            let row = format!(
                "{},{},{},{},{}",
                r.step,
                r.layer,
                fmt_f64(r.cfi),
                fmt_f64(r.cfi_enhanced),
                fmt_f64(r.residual_scale)
            );
            writeln!(one, "{row}").unwrap();
            writeln!(all, "{},{row}", fmt_f64(*tau)).unwrap();
        }
        write_atomic(&dir.join("sweep").join(format!("tau_{i}.csv")), one.as_bytes())?;
    }
    write_atomic(&dir.join("sweep.csv"), all.as_bytes())?;
    Ok(SweepResult { taus: taus.to_vec(), traces: outputs.into_iter().map(|o| o.trace).collect() })
}

pub fn bench_report_text(r: &OverheadReport, repetitions: usize) -> String {
    format!(
        "Inference time ({repetitions} repetitions, median)\n\
         {:<24} {:>12.6} s\n\
         {:<24} {:>12.6} s\n\
         overhead: {:.2}%\n",
        r.baseline_strategy.as_str(),
        r.baseline_median_s,
        r.enhanced_strategy.as_str(),
        r.enhanced_median_s,
        100.0 * r.overhead_fraction
    )
}

pub fn bench_report_csv(r: &OverheadReport, repetitions: usize) -> String {
    format!(
        "strategy,median_seconds,repetitions\n{},{},{repetitions}\n{},{},{repetitions}\noverhead_percent,{}\n",
        r.baseline_strategy,
        fmt_f64(r.baseline_median_s),
        r.enhanced_strategy,
        fmt_f64(r.enhanced_median_s),
        fmt_f64(100.0 * r.overhead_fraction)
    )
}

/// Baseline vs the config's strategy; writes `bench.txt` and `bench.csv`.
pub fn cmd_bench(config: &Path, overrides: &Overrides, repetitions: usize) -> Result<OverheadReport, CliError> {
    if repetitions < 3 {
        return Err(CliError::Usage(format!("bench needs at least 3 repetitions, got {repetitions}")));
    }
    let cfg = load_config(config, overrides)?;
    let spec: RunSpec = cfg.to_run_spec()?;
    let report = overhead_bench(&spec, repetitions, &MonotonicClock::default())?;
    let dir = cfg.output.dir.clone();
    write_atomic(&dir.join("bench.txt"), bench_report_text(&report, repetitions).as_bytes())?;
    write_atomic(&dir.join("bench.csv"), bench_report_csv(&report, repetitions).as_bytes())?;
    Ok(report)
}
