// SPDX-License-Identifier: Apache-2.0

//! TOML run configuration.
//!
//! ```toml
//! schema = "eav/1"        # required
//! seed = 0                # default 0
//!
//! [latent]                # defaults: 1, 8, 16, 4, 4
//! batch = 1
//! frames = 8
//! channels = 16
//! height = 4
//! width = 4
//!
//! [model]
//! depth = 4               # default 4
//! d_k = 8                 # default 8
//! heads = 2               # default 2
//! layout = "temporal"     # "temporal" (default) or "full_3d"
//! qk_gain = 1.0           # default 1.0
//!
//! [sampler]
//! steps = 10              # default 10
//! alpha_bar_start = 1.0   # default 1.0
//! alpha_bar_end = 0.01    # default 0.01
//! # alphas = [...]        # explicit per-step alphas; overrides the linear schedule
//!
//! [enhance]
//! strategy = "enhance_block"  # default enhance_block
//! tau = 1.0                   # default 1.0
//! clip = true                 # default true
//! layers = "all"              # "all" (default), "none", or a list of indices
//!
//! [output]
//! dir = "out"             # default "out"
//! ```
//!
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use eav_core::attention::LatentDims;
use eav_core::enhance::{EnhanceConfig, LayerMask, Strategy};
use eav_core::pipeline::{Layout, NoiseSchedule, RunSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA: &str = "eav/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub latent: LatentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub enhance: EnhanceSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self { batch: 1, frames: 8, channels: 16, height: 4, width: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub d_k: usize,
    pub heads: usize,
    pub layout: String,
    pub qk_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { depth: 4, d_k: 8, heads: 2, layout: "temporal".into(), qk_gain: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub alpha_bar_start: f64,
    pub alpha_bar_end: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { steps: 10, alpha_bar_start: 1.0, alpha_bar_end: 0.01, alphas: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Layers {
    Named(String),
    List(Vec<usize>),
}

impl Layers {
    pub fn to_mask(&self) -> Result<LayerMask, CliError> {
        match self {
            Layers::Named(s) if s == "all" => Ok(LayerMask::All),
            Layers::Named(s) if s == "none" => Ok(LayerMask::none()),
            Layers::Named(s) => {
                Err(CliError::Config(format!("enhance.layers: expected \"all\", \"none\" or a list, got \"{s}\"")))
            }
            Layers::List(v) => Ok(LayerMask::Only(v.iter().copied().collect())),
        }
    }

    /// Parses the `--layers` flag: `all`, `none`, or comma-separated indices.
    pub fn parse_flag(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "all" | "none" => Ok(Layers::Named(s.trim().into())),
            list => list
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Usage(format!("--layers: `{p}` is not a layer index")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Layers::List),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceSection {
    pub strategy: String,
    pub tau: f64,
    pub clip: bool,
    pub layers: Layers,
}

impl Default for EnhanceSection {
    fn default() -> Self {
        Self { strategy: "enhance_block".into(), tau: 1.0, clip: true, layers: Layers::Named("all".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub strategy: Option<String>,
    pub layers: Option<String>,
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn toy_default() -> Self {
        Self {
            schema: SCHEMA.into(),
            seed: 0,
            latent: LatentSection::default(),
            model: ModelSection::default(),
            sampler: SamplerSection::default(),
            enhance: EnhanceSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema != SCHEMA {
            return Err(CliError::Config(format!("schema: expected \"{SCHEMA}\", got \"{}\"", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(tau) = o.tau {
            if !tau.is_finite() {
                return Err(CliError::Usage(format!("--tau must be finite, got {tau}")));
            }
            self.enhance.tau = tau;
        }
        if let Some(s) = &o.strategy {
            self.enhance.strategy = s.clone();
        }
        if let Some(l) = &o.layers {
            self.enhance.layers = Layers::parse_flag(l)?;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of everything except the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputSection { dir: PathBuf::new() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_run_spec(&self) -> Result<RunSpec, CliError> {
        let layout: Layout =
            self.model.layout.parse().map_err(|e: eav_core::Error| CliError::Config(format!("model.layout: {e}")))?;
        let strategy: Strategy = self
            .enhance
            .strategy
            .parse()
            .map_err(|e: eav_core::Error| CliError::Config(format!("enhance.strategy: {e}")))?;
        let schedule = match &self.sampler.alphas {
            Some(alphas) => {
                if alphas.len() != self.sampler.steps {
                    return Err(CliError::Config(format!(
                        "sampler.alphas has {} entries but sampler.steps is {}",
                        alphas.len(),
                        self.sampler.steps
                    )));
                }
                NoiseSchedule::from_alphas(alphas.clone())
            }
            None => NoiseSchedule::linear_alpha_bar(
                self.sampler.steps,
                self.sampler.alpha_bar_start,
                self.sampler.alpha_bar_end,
            ),
        }
        .map_err(|e| CliError::Config(format!("sampler: {e}")))?;
        let l = &self.latent;
        let spec = RunSpec {
            seed: self.seed,
            dims: LatentDims {
                batch: l.batch,
                frames: l.frames,
                channels: l.channels,
                height: l.height,
                width: l.width,
            },
            steps: self.sampler.steps,
            depth: self.model.depth,
            d_k: self.model.d_k,
            heads: self.model.heads,
            qk_gain: self.model.qk_gain,
            layout,
            schedule,
            enhance: EnhanceConfig {
                strategy,
                tau: self.enhance.tau,
                clip_enabled: self.enhance.clip,
                layer_mask: self.enhance.layers.to_mask()?,
            },
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_toy_defaults() {
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n").unwrap();
        assert_eq!(cfg, ConfigFile::toy_default());
        assert_eq!(cfg.to_run_spec().unwrap(), RunSpec::toy_default());
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = ConfigFile::parse("schema = \"eav/1\"\n[enhance]\ntau = 2.0\ntemperature = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("temperature"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        assert!(ConfigFile::parse("schema = \"eav/1\"\nextra = 1\n").is_err());
    }

    #[test]
    fn schema_is_required_and_checked() {
        assert!(ConfigFile::parse("seed = 3\n").is_err());
        assert!(ConfigFile::parse("schema = \"eav/2\"\n").is_err());
    }

    #[test]
    fn layers_forms() {
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n[enhance]\nlayers = [0, 2]\n").unwrap();
        assert_eq!(cfg.to_run_spec().unwrap().enhance.layer_mask, LayerMask::Only([0, 2].into()));
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n[enhance]\nlayers = \"none\"\n").unwrap();
        assert_eq!(cfg.to_run_spec().unwrap().enhance.layer_mask, LayerMask::none());
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n[enhance]\nlayers = \"some\"\n").unwrap();
        assert!(cfg.to_run_spec().is_err());
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n[enhance]\nlayers = [9]\n").unwrap();
        assert!(cfg.to_run_spec().is_err());
        assert_eq!(Layers::parse_flag("1, 3").unwrap(), Layers::List(vec![1, 3]));
        assert!(Layers::parse_flag("1,x").is_err());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let mut cfg = ConfigFile::toy_default();
        let before = cfg.hash();
        cfg.apply(&Overrides { out: Some("elsewhere".into()), ..Default::default() }).unwrap();
        assert_eq!(cfg.hash(), before);
        cfg.apply(&Overrides { tau: Some(4.0), seed: Some(9), ..Default::default() }).unwrap();
        assert_ne!(cfg.hash(), before);
        assert_eq!(cfg.to_run_spec().unwrap().enhance.tau, 4.0);
        assert!(cfg.apply(&Overrides { tau: Some(f64::INFINITY), ..Default::default() }).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ConfigFile::toy_default();
        cfg.enhance.layers = Layers::List(vec![1]);
        cfg.sampler.alphas = Some(vec![0.9; 10]);
        assert_eq!(ConfigFile::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn bad_strategy_and_alphas() {
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n[enhance]\nstrategy = \"freeu\"\n").unwrap();
        assert!(matches!(cfg.to_run_spec(), Err(CliError::Config(_))));
        let cfg = ConfigFile::parse("schema = \"eav/1\"\n[sampler]\nsteps = 2\nalphas = [0.5]\n").unwrap();
        assert!(cfg.to_run_spec().is_err());
    }
}
