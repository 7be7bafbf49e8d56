use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mambar_core::data::DatasetSpec;
use mambar_core::model::ModelConfig;
use mambar_core::ssm::ScanBackend;
use mambar_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs; written back verbatim as the `config` field of
/// `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub train_data: DatasetSpec,
    pub val_data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::micro(),
            train: TrainConfig {
                warmup_epochs: 2,
                stop_at_train_acc: Some(0.99),
                ..TrainConfig::default()
            },
            train_data: DatasetSpec::micro(0),
            val_data: DatasetSpec {
                per_class: 16,
                ..DatasetSpec::micro(1)
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest<A> {
    pub command: String,
    pub version: String,
    pub args: A,
    pub config: RunConfig,
}

/// Flags shared by the subcommands that build a model.
#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Common {
    /// Run config JSON, or a `manifest.json` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the model, training and data seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scan backend (`sequential` or `parallel`).
    #[arg(long)]
    pub backend: Option<ScanBackend>,
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let value = match value {
        serde_json::Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            map.remove("config").expect("checked above")
        }
        other => other,
    };
    serde_json::from_value(value).with_context(|| format!("invalid run config {}", path.display()))
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.train_data.seed = seed;
            cfg.val_data.seed = seed + 1;
        }
        if let Some(b) = self.backend {
            cfg.model.scan_backend = b;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        for (name, data) in [("train_data", &cfg.train_data), ("val_data", &cfg.val_data)] {
            if data.side != cfg.model.img
                || data.channels != cfg.model.in_chans
                || data.num_classes != cfg.model.num_classes
            {
                bail!(
                    "{name} ({}×{}×{}, {} classes) does not match the model input ({}×{}×{}, {} classes)",
                    data.side,
                    data.side,
                    data.channels,
                    data.num_classes,
                    cfg.model.img,
                    cfg.model.img,
                    cfg.model.in_chans,
                    cfg.model.num_classes
                );
            }
        }
        Ok(cfg)
    }
}

pub fn write_manifest<A: Serialize>(out: &Path, command: &str, args: A, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = Manifest {
        command: command.to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        args,
        config: config.clone(),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
