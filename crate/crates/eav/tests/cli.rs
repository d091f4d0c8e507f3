// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eav::commands::{cmd_compare, cmd_run, cmd_sweep, Manifest};
use eav::config::{ConfigFile, Overrides};
use eav::formats::{parse_map_csv, read_trace};
use eav::CliError;
use eav_core::enhance::cfi_enhanced;
use eav_core::pipeline::{run, RunSpec};
use tempfile::TempDir;

fn eav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eav")).args(args).output().unwrap()
}

fn toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.toml");
    fs::write(&path, ConfigFile::toy_default().to_toml()).unwrap();
    path
}

fn out(dir: &Path, name: &str) -> Overrides {
    Overrides { out: Some(dir.join(name)), ..Overrides::default() }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = eav(&["run", "--config", "/nonexistent/eav.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/eav.toml"), "{}", stderr(&o));
}

#[test]
fn malformed_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("unknown.toml", "schema = \"eav/1\"\nseeed = 3\n", "seeed"),
        ("schema.toml", "schema = \"eav/9\"\n", "eav/9"),
        ("strategy.toml", "schema = \"eav/1\"\n[enhance]\nstrategy = \"sharpen\"\n", "sharpen"),
        ("layers.toml", "schema = \"eav/1\"\n[enhance]\nlayers = [7]\n", "7"),
    ];
    for (name, text, needle) in cases {
        let path = tmp.path().join(name);
        fs::write(&path, text).unwrap();
        let o = eav(&["run", "--config", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{name}: {}", stderr(&o));
    }
}

#[test]
fn bad_flags_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(eav(&["run", "--config", cfg, "--strategy", "nope"]).status.code(), Some(2));
    assert_eq!(eav(&["run", "--config", cfg, "--layers", "0,x"]).status.code(), Some(2));
    assert_eq!(eav(&["bench", "--config", cfg, "--repetitions", "2"]).status.code(), Some(2));
    assert_eq!(eav(&["frobnicate"]).status.code(), Some(2));
    let o = eav(&["compare", "--config", cfg, "--strategies", "baseline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 2"));
}

#[test]
fn run_writes_all_artifacts_and_manifest_hashes_match() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let art = cmd_run(&cfg, &out(tmp.path(), "r")).unwrap();
    let dir = tmp.path().join("r");
    for f in ["trace.tsv", "latent.txt", "cfi.csv", "manifest.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    for layer in 0..4 {
        for ext in ["csv", "pgm", "meta.json"] {
            assert!(dir.join(format!("maps/attention_step1_layer{layer}.{ext}")).is_file());
        }
        let csv = fs::read_to_string(dir.join(format!("maps/attention_step1_layer{layer}.csv"))).unwrap();
        let map = parse_map_csv(&csv).unwrap();
        let rec = art.output.trace.iter().find(|r| r.step == 1 && r.layer == layer).unwrap();
        assert_eq!(&map, rec.snapshot.as_ref().unwrap());
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest, art.manifest);
    assert_eq!(manifest.block_timings.len(), 40);
    let trace_bytes = fs::read(dir.join("trace.tsv")).unwrap();
    use sha2::Digest;
    assert_eq!(manifest.trace_sha256, hex::encode(sha2::Sha256::digest(&trace_bytes)));
    assert!(!fs::read_dir(&dir).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn same_config_gives_same_hash_and_trace_different_out_dir_ignored() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let a = cmd_run(&cfg, &out(tmp.path(), "a")).unwrap();
    let b = cmd_run(&cfg, &out(tmp.path(), "b")).unwrap();
    assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
    assert_eq!(a.manifest.trace_sha256, b.manifest.trace_sha256);
    assert_eq!(a.manifest.latent_sha256, b.manifest.latent_sha256);
    let c = cmd_run(&cfg, &Overrides { seed: Some(1), ..out(tmp.path(), "c") }).unwrap();
    assert_ne!(a.manifest.config_hash, c.manifest.config_hash);
    assert_ne!(a.manifest.latent_sha256, c.manifest.latent_sha256);
}

#[test]
fn tau_override_reaches_manifest_and_trace() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let dir = tmp.path().join("t");
    let o = eav(&["run", "--config", cfg.to_str().unwrap(), "--tau", "4.0", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.tau, 4.0);
    let trace = read_trace(&dir.join("trace.tsv")).unwrap();
    assert_eq!(trace.len(), 40);
    for r in &trace {
        assert_eq!(r.cfi_enhanced, cfi_enhanced(r.cfi, 8, 4.0, true));
        assert_eq!(r.residual_scale, r.cfi_enhanced);
    }
}

#[test]
fn trace_file_matches_in_process_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    cmd_run(&cfg, &out(tmp.path(), "p")).unwrap();
    let from_file = read_trace(&tmp.path().join("p/trace.tsv")).unwrap();
    let direct = run(&RunSpec::toy_default()).unwrap().trace;
    assert_eq!(from_file.len(), direct.len());
    for (a, b) in from_file.iter().zip(&direct) {
        assert_eq!((a.step, a.layer, a.cfi, a.cfi_enhanced), (b.step, b.layer, b.cfi, b.cfi_enhanced));
        assert_eq!((a.norm_o_attn, a.norm_h), (b.norm_o_attn, b.norm_h));
        assert_eq!(a.snapshot, b.snapshot);
        assert_eq!(a.wall_time_ns, None);
    }
}

#[test]
fn compare_baseline_against_itself_has_zero_diffs() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let res = cmd_compare(&cfg, &out(tmp.path(), "c"), &["baseline".into(), "baseline".into()]).unwrap();
    assert_eq!(res.labels, ["baseline", "baseline_1"]);
    assert_eq!(res.summary.len(), 40);
    for row in &res.summary {
        assert_eq!(row.cross_run.max_abs, 0.0);
        assert_eq!(row.within_layer.max_abs, 0.0);
    }
}

#[test]
fn compare_all_strategies_writes_summary_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let strategies: Vec<String> =
        ["baseline", "enhance_block", "temp_attention_scaling", "cfi_attention_scaling"].map(String::from).into();
    let res = cmd_compare(&cfg, &out(tmp.path(), "c"), &strategies).unwrap();
    let dir = tmp.path().join("c");
    assert_eq!(res.summary.len(), 4 * 10 * 3);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 120);
    let diffs = fs::read_to_string(dir.join("diff_maps.csv")).unwrap();
    assert_eq!(diffs.lines().count(), 1 + 120 * 2 * 64);
    for label in &res.labels {
        assert!(dir.join(label).join("trace.tsv").is_file());
    }
    assert!(dir.join("maps/cfi_attention_scaling_step1_layer0_within_layer.pgm").is_file());
    assert_eq!(res.labels, strategies);
    for row in &res.summary {
        assert!(row.cross_run.max_row_sum() < 1e-9);
        match row.variant.as_str() {
            "enhance_block" => assert_eq!(row.within_layer.max_abs, 0.0),
            _ => assert!(row.within_layer.max_abs > 0.0, "{}", row.variant),
        }
    }
    // the first block of every run sees the same input
    let first = res.summary.iter().find(|r| r.variant == "enhance_block").unwrap();
    assert_eq!((first.step, first.layer, first.cross_run.max_abs), (10, 0, 0.0));
}

#[test]
fn sweep_at_minus_frames_is_baseline_everywhere() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let res = cmd_sweep(&cfg, &out(tmp.path(), "s"), &[-8.0]).unwrap();
    let base = cmd_run(&cfg, &Overrides { strategy: Some("baseline".into()), ..out(tmp.path(), "b") }).unwrap();
    for (r, b) in res.traces[0].iter().zip(&base.output.trace) {
        assert_eq!(r.residual_scale, 1.0);
        assert_eq!(r.cfi_enhanced, 1.0);
        assert_eq!((r.cfi, r.norm_o_attn, r.norm_h), (b.cfi, b.norm_o_attn, b.norm_h));
    }
    let o = eav(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--taus",
        "-8",
        "--out",
        tmp.path().join("cli").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn sweep_rows(path: &Path) -> Vec<(f64, usize, usize, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn sweep_cfi_enhanced_is_nondecreasing_in_tau() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let taus = [-2.0, 0.0, 0.5, 1.0, 2.0, 4.0, 8.0];
    // baseline keeps the trajectory fixed, so every record is comparable
    let o = Overrides { strategy: Some("baseline".into()), ..out(tmp.path(), "b") };
    cmd_sweep(&cfg, &o, &taus).unwrap();
    let rows = sweep_rows(&tmp.path().join("b/sweep.csv"));
    assert_eq!(rows.len(), taus.len() * 40);
    for k in 0..40 {
        let series: Vec<_> = rows.iter().skip(k).step_by(40).collect();
        assert!(series.iter().all(|r| (r.1, r.2) == (series[0].1, series[0].2)));
        assert!(series.windows(2).all(|w| w[0].0 < w[1].0 && w[0].3 <= w[1].3));
    }
    // with enhancement on, the first block precedes any divergence
    cmd_sweep(&cfg, &out(tmp.path(), "e"), &taus).unwrap();
    let rows = sweep_rows(&tmp.path().join("e/sweep.csv"));
    let first: Vec<f64> = rows.iter().step_by(40).map(|r| r.3).collect();
    assert!(first.windows(2).all(|w| w[0] <= w[1]));
    assert!(first.last().unwrap() > &1.0);
}

#[test]
fn sweep_rejects_empty_and_non_finite() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    assert!(matches!(cmd_sweep(&cfg, &out(tmp.path(), "x"), &[]), Err(CliError::Usage(_))));
    assert!(matches!(cmd_sweep(&cfg, &out(tmp.path(), "x"), &[1.0, f64::NAN]), Err(CliError::Usage(_))));
}

#[test]
fn bench_cli_prints_two_strategies_and_overhead() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let dir = tmp.path().join("bench");
    let o = eav(&["bench", "--config", cfg.to_str().unwrap(), "--repetitions", "3", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("baseline ")));
    assert!(text.lines().any(|l| l.starts_with("enhance_block ")));
    assert_eq!(text.lines().filter(|l| l.starts_with("overhead:")).count(), 1);
    let csv = fs::read_to_string(dir.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("baseline,") && lines[2].starts_with("enhance_block,"));
    assert!(lines[3].starts_with("overhead_percent,"));
}
