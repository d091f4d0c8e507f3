// SPDX-License-Identifier: Apache-2.0

//! On-disk formats.
//!
//! Trace file (`trace.tsv`): a `# eav-trace v1` line, a `# fields:` line,
//! then one tab-separated record per block evaluation with the fields
//!
//! ```text
//! step layer layout frames cfi cfi_enhanced cfi_enhanced_groupwise
//! residual_scale norm_o_attn norm_h snapshot reference_snapshot
//! ```
//!
//! Floats use 17 significant digits (`{:.16e}`), which round-trips `f64`
//! exactly. Snapshots are the `F*F` row-major entries joined by commas, or
//! `-` when absent. Wall times are not part of the trace.
//!
//! Latent dump (`latent.txt`): `# eav-latent v1`, a `shape` line with the
//! five extents, then one value per line in row-major order.
//!
//! Map exports: CSV with a header of column (frame) indices and one line
//! per row; an 8-bit binary PGM (`P5`) scaled linearly from the map's
//! `[min, max]` to `[0, 255]`; and a `.meta.json` sidecar with `min`,
//! `max` and the extents.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use eav_core::analysis::TraceRecord;
use eav_core::attention::VideoLatent;
use eav_core::pipeline::Layout;
use eav_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const TRACE_HEADER: &str = "# eav-trace v1";
pub const TRACE_FIELDS: [&str; 12] = [
    "step",
    "layer",
    "layout",
    "frames",
    "cfi",
    "cfi_enhanced",
    "cfi_enhanced_groupwise",
    "residual_scale",
    "norm_o_attn",
    "norm_h",
    "snapshot",
    "reference_snapshot",
];
pub const LATENT_HEADER: &str = "# eav-latent v1";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
    f.write_all(bytes).map_err(CliError::io(&tmp))?;
    f.sync_all().map_err(CliError::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

fn fmt_snapshot(s: Option<&Tensor>) -> String {
    match s {
        None => "-".into(),
        Some(t) => t.data().iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(","),
    }
}

pub fn trace_to_string(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "{TRACE_HEADER}").unwrap();
    writeln!(out, "# fields: {}", TRACE_FIELDS.join("\t")).unwrap();
    for r in trace {
        let fields = [
            r.step.to_string(),
            r.layer.to_string(),
            r.layout.to_string(),
            r.frames.to_string(),
            fmt_f64(r.cfi),
            fmt_f64(r.cfi_enhanced),
            fmt_f64(r.cfi_enhanced_groupwise),
            fmt_f64(r.residual_scale),
            fmt_f64(r.norm_o_attn),
            fmt_f64(r.norm_h),
            fmt_snapshot(r.snapshot.as_ref()),
            fmt_snapshot(r.reference_snapshot.as_ref()),
        ];
        writeln!(out, "{}", fields.join("\t")).unwrap();
    }
    out
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    let bad = |line: usize, message: String| CliError::Format {
        path: path.to_owned(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        _ => return Err(bad(1, format!("expected `{TRACE_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != TRACE_FIELDS.len() {
            return Err(bad(n, format!("expected {} fields, got {}", TRACE_FIELDS.len(), f.len())));
        }
        let int = |k: usize| f[k].parse::<usize>().map_err(|e| bad(n, format!("{}: {e}", TRACE_FIELDS[k])));
        let float = |k: usize| f[k].parse::<f64>().map_err(|e| bad(n, format!("{}: {e}", TRACE_FIELDS[k])));
        let frames = int(3)?;
        let snap = |k: usize| -> Result<Option<Tensor>, CliError> {
            if f[k] == "-" {
                return Ok(None);
            }
            let vals = f[k]
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(n, format!("{}: {e}", TRACE_FIELDS[k])))?;
            Tensor::new([frames, frames], vals).map(Some).map_err(|e| bad(n, e.to_string()))
        };
        let layout: Layout = f[2].parse().map_err(|e: eav_core::Error| bad(n, e.to_string()))?;
        out.push(TraceRecord {
            step: int(0)?,
            layer: int(1)?,
            layout,
            frames,
            cfi: float(4)?,
            cfi_enhanced: float(5)?,
            cfi_enhanced_groupwise: float(6)?,
            residual_scale: float(7)?,
            norm_o_attn: float(8)?,
            norm_h: float(9)?,
            snapshot: snap(10)?,
            reference_snapshot: snap(11)?,
            wall_time_ns: None,
            captured: None,
        });
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_trace(&text, path)
}

pub fn latent_to_string(latent: &VideoLatent) -> String {
    let mut out = String::new();
    writeln!(out, "{LATENT_HEADER}").unwrap();
    let dims = latent.dims().as_array().map(|d| d.to_string());
    writeln!(out, "shape {}", dims.join(" ")).unwrap();
    for &v in latent.tensor().data() {
        writeln!(out, "{}", fmt_f64(v)).unwrap();
    }
    out
}

pub fn parse_latent(text: &str, path: &Path) -> Result<VideoLatent, CliError> {
    let bad = |message: String| CliError::Format { path: path.to_owned(), message };
    let mut lines = text.lines();
    if lines.next() != Some(LATENT_HEADER) {
        return Err(bad(format!("expected `{LATENT_HEADER}`")));
    }
    let dims = lines
        .next()
        .and_then(|l| l.strip_prefix("shape "))
        .ok_or_else(|| bad("missing shape line".into()))?
        .split(' ')
        .map(|d| d.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("shape: {e}")))?;
    let data =
        lines.map(|l| l.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| bad(format!("value: {e}")))?;
    Tensor::new(dims, data).and_then(VideoLatent::new).map_err(|e| bad(e.to_string()))
}

pub fn map_to_csv(map: &Tensor) -> String {
    let cols = map.dims()[1];
    let mut out = String::new();
    writeln!(out, "{}", (0..cols).map(|c| c.to_string()).collect::<Vec<_>>().join(",")).unwrap();
    for row in map.data().chunks(cols.max(1)) {
        writeln!(out, "{}", row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",")).unwrap();
    }
    out
}

pub fn parse_map_csv(text: &str) -> Result<Tensor, String> {
    let mut lines = text.lines();
    let cols = lines.next().ok_or("empty map csv")?.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines {
        let vals = line.split(',').map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>();
        let vals = vals.map_err(|e| format!("row {rows}: {e}"))?;
        if vals.len() != cols {
            return Err(format!("row {rows} has {} values, header has {cols}", vals.len()));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new([rows, cols], data).map_err(|e| e.to_string())
}

/// Binary 8-bit graymap of a 2D map and its value range. A constant map
/// renders black.
pub fn map_to_pgm(map: &Tensor) -> (Vec<u8>, f64, f64) {
    let (rows, cols) = (map.dims()[0], map.dims()[1]);
    let min = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 }));
    (out, min, max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub source: String,
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
}

/// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.meta.json` under `dir`.
pub fn export_map(dir: &Path, stem: &str, map: &Tensor, source: &str) -> Result<(), CliError> {
    write_atomic(&dir.join(format!("{stem}.csv")), map_to_csv(map).as_bytes())?;
    let (pgm, min, max) = map_to_pgm(map);
    write_atomic(&dir.join(format!("{stem}.pgm")), &pgm)?;
    let meta = MapMeta { source: source.into(), rows: map.dims()[0], cols: map.dims()[1], min, max };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join(format!("{stem}.meta.json")), json.as_bytes())
}
