use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::BlockConfig;
use crate::error::{Error, Result};
use crate::ssm::{BDiscretization, ScanBackend};

use super::layout::PositionMode;

/// How the global feature fed to the classifier is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// First register's output, dimension `d`.
    R1Only,
    /// Mean over register outputs, dimension `d`.
    MeanRegisters,
    /// Shared `d → d/r` linear on every register, concatenated to `n·d/r`.
    #[default]
    ReduceConcat,
    /// A single learned token read out as the class token, dimension `d`.
    ClassToken,
    /// Mean over image-token outputs, dimension `d`.
    GlobalPool,
}

impl PredictionMode {
    pub fn needs_registers(self) -> bool {
        !matches!(self, PredictionMode::GlobalPool)
    }
}

impl std::str::FromStr for PredictionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "r1_only" => Ok(PredictionMode::R1Only),
            "mean_registers" => Ok(PredictionMode::MeanRegisters),
            "reduce_concat" => Ok(PredictionMode::ReduceConcat),
            "class_token" => Ok(PredictionMode::ClassToken),
            "global_pool" => Ok(PredictionMode::GlobalPool),
            other => Err(format!("unknown prediction mode `{other}`")),
        }
    }
}

fn default_classes() -> usize {
    10
}

fn default_in_chans() -> usize {
    3
}

/// Model hyperparameters; the JSON form uses these field names, with the
/// state size under `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d: usize,
    pub n: usize,
    pub r: usize,
    pub patch: usize,
    pub img: usize,
    #[serde(rename = "N")]
    pub state_dim: usize,
    #[serde(default)]
    pub position_mode: PositionMode,
    #[serde(default)]
    pub prediction_mode: PredictionMode,
    #[serde(default)]
    pub b_discretization: BDiscretization,
    #[serde(default)]
    pub scan_backend: ScanBackend,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    #[serde(default)]
    pub tie_directions: bool,
}

impl ModelConfig {
    fn preset(depth: usize, d: usize, n: usize, r: usize) -> Self {
        Self {
            depth,
            d,
            n,
            r,
            patch: 16,
            img: 224,
            state_dim: 16,
            position_mode: PositionMode::Even,
            prediction_mode: PredictionMode::ReduceConcat,
            b_discretization: BDiscretization::Zoh,
            scan_backend: ScanBackend::Sequential,
            seed: 0,
            num_classes: 1000,
            in_chans: 3,
            tie_directions: false,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(24, 192, 12, 1)
    }

    pub fn small() -> Self {
        Self::preset(24, 384, 12, 2)
    }

    pub fn base() -> Self {
        Self::preset(24, 768, 12, 4)
    }

    pub fn large() -> Self {
        Self::preset(48, 1024, 16, 8)
    }

    /// The desk-scale model used for training runs: depth 4, d=64, n=4,
    /// r=1, 64×64 inputs with 16×16 patches, N=8, 8 classes.
    pub fn micro() -> Self {
        Self {
            img: 64,
            state_dim: 8,
            num_classes: 8,
            ..Self::preset(4, 64, 4, 1)
        }
    }

    /// Same backbone as `self` but a single class token in place of registers.
    pub fn vim_baseline(&self) -> Self {
        Self {
            n: 1,
            r: 1,
            prediction_mode: PredictionMode::ClassToken,
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> usize {
        self.img / self.patch
    }

    /// Number of image tokens `m = (img/patch)²`.
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_chans
    }

    /// Length of the feature vector entering the classifier.
    pub fn head_dim(&self) -> usize {
        match self.prediction_mode {
            PredictionMode::ReduceConcat => self.n * self.d / self.r,
            _ => self.d,
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            method: self.b_discretization,
            backend: self.scan_backend,
            tie_directions: self.tie_directions,
            ..BlockConfig::new(self.d, self.state_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("d", self.d),
            ("r", self.r),
            ("patch", self.patch),
            ("img", self.img),
            ("N", self.state_dim),
            ("num_classes", self.num_classes),
            ("in_chans", self.in_chans),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.img.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch size {}",
                self.img, self.patch
            )));
        }
        if !self.d.is_multiple_of(self.r) {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by reduce factor {}",
                self.d, self.r
            )));
        }
        if self.prediction_mode.needs_registers() && self.n == 0 {
            return Err(Error::Config(format!(
                "prediction mode {:?} needs at least one register",
                self.prediction_mode
            )));
        }
        if self.prediction_mode == PredictionMode::ClassToken && self.n != 1 {
            return Err(Error::Config(format!(
                "class_token mode uses exactly one token, got n={}",
                self.n
            )));
        }
        Ok(())
    }

    /// Exact parameter count of the model this config builds.
    pub fn param_count(&self) -> usize {
        let (d, n, m) = (self.d, self.n, self.image_tokens());
        let embed = self.patch_dim() * d + d + (m + n) * d + n * d;
        let blocks = self.depth * self.block_config().param_count();
        let head = match self.prediction_mode {
            PredictionMode::ReduceConcat => d * (d / self.r) + d / self.r,
            _ => 0,
        };
        let classifier = self.head_dim() * self.num_classes + self.num_classes;
        embed + blocks + d + head + classifier
    }
}
