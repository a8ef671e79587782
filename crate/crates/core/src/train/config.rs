use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fisher_gate::GateConfig;
use crate::toolbox::{ModuleKind, ToolboxDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Backbone fixed, no toolbox; only the head trains.
    Frozen,
    /// Every backbone parameter trains alongside the head; no toolbox.
    FullTuning,
    /// Full toolbox with Fisher-guided top-k gating.
    FisherGate,
    /// Full toolbox, every module trainable throughout.
    AllModules,
    WithoutSpatial,
    WithoutSemantic,
    WithoutFrequency,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Frozen,
        Mode::FullTuning,
        Mode::FisherGate,
        Mode::AllModules,
        Mode::WithoutSpatial,
        Mode::WithoutSemantic,
        Mode::WithoutFrequency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::FullTuning => "full-tuning",
            Mode::FisherGate => "fisher-gate",
            Mode::AllModules => "all-modules",
            Mode::WithoutSpatial => "without-spatial",
            Mode::WithoutSemantic => "without-semantic",
            Mode::WithoutFrequency => "without-frequency",
        }
    }

    /// Module kinds attached in this mode; empty means no toolbox.
    pub fn kinds(self) -> Vec<ModuleKind> {
        let all = ModuleKind::ALL.to_vec();
        let without = |k: ModuleKind| all.iter().copied().filter(|x| *x != k).collect();
        match self {
            Mode::Frozen | Mode::FullTuning => Vec::new(),
            Mode::FisherGate | Mode::AllModules => all,
            Mode::WithoutSpatial => without(ModuleKind::Spatial),
            Mode::WithoutSemantic => without(ModuleKind::Semantic),
            Mode::WithoutFrequency => without(ModuleKind::Frequency),
        }
    }

    pub fn uses_toolbox(self) -> bool {
        !self.kinds().is_empty()
    }

    pub fn is_gated(self) -> bool {
        matches!(
            self,
            Mode::FisherGate | Mode::WithoutSpatial | Mode::WithoutSemantic | Mode::WithoutFrequency
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Case-, dash- and underscore-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "frozen" => Mode::Frozen,
            "fulltuning" | "full" => Mode::FullTuning,
            "fishergate" | "gate" | "crossearthgate" => Mode::FisherGate,
            "allmodules" | "allmodulesnoselection" | "noselection" => Mode::AllModules,
            "withoutspatial" => Mode::WithoutSpatial,
            "withoutsemantic" => Mode::WithoutSemantic,
            "withoutfrequency" => Mode::WithoutFrequency,
            _ => return Err(Error::Config(format!("unknown mode '{s}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 2000,
            learning_rate: 1e-3,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: Mode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

fn default_lr() -> f64 {
    1e-5
}

fn default_wd() -> f64 {
    0.01
}

fn default_iterations() -> usize {
    30_000
}

fn default_batch() -> usize {
    1
}

/// Everything a run needs. Serialized back into the run directory with all
/// defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Dataset directory or manifest file, relative to the config file.
    pub dataset: PathBuf,
    #[serde(default = "default_iterations")]
    pub total_iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub toolbox: ToolboxDims,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = origin.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn eval_interval(&self) -> usize {
        self.gate.interval(self.total_iterations).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.total_iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_iterations and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        self.gate.validate(self.total_iterations)?;
        if self.mode.uses_toolbox() {
            self.toolbox.validate(self.backbone.dim)?;
        }
        if self.mode.is_gated() {
            let modules = self.mode.kinds().len() * self.backbone.depth;
            if self.gate.top_k > modules {
                log::warn!("top_k {} exceeds {modules} modules in mode {}; it will be clamped", self.gate.top_k, self.mode);
            }
        }
        Ok(())
    }
}
