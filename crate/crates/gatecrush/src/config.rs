//! Run configuration (TOML). Unknown keys are rejected; the resolved
//! configuration is written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gatecrush_core::data::Normalization;
use gatecrush_core::gates::GateMode;
use gatecrush_core::pruner::{EfficiencyMode, PruneConfig, TrainConfig};

use crate::error::{io_err, Error, Result};
use crate::latency::TimingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelSection,
    pub data: DataSection,
    pub baseline: StageSection,
    pub prune: PruneSection,
    pub finetune: StageSection,
    pub latency: LatencySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `toy`, `vgg-small`, `vgg16` or `resnet<6n+2>`.
    pub arch: String,
    pub classes: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub dir: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Optional SHA-256 hex digests keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub eval_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub alpha: f64,
    pub efficiency: String,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub eval_batch: usize,
    pub min_open_gates: usize,
    /// Adds the open-start score bias to every scorer.
    pub gate_bias: bool,
    /// Scale of the sigmoid gate ablation; binary gates when absent.
    pub sigmoid_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub samples: usize,
    pub batch_size: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    /// Uses the batch of 100 instead of `batch_size`.
    pub paper_parity: bool,
    /// Input side used while timing; the model resolution when absent.
    pub resolution: Option<usize>,
    pub lpnet_epochs: usize,
    pub lpnet_hidden: usize,
    pub lpnet_batch_size: usize,
    pub lpnet_lr: f64,
    pub max_test_error: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            model: ModelSection::default(),
            data: DataSection::default(),
            baseline: StageSection::default(),
            prune: PruneSection::default(),
            finetune: StageSection {
                lr: 0.01,
                ..StageSection::default()
            },
            latency: LatencySection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "resnet8".into(),
            classes: 10,
            resolution: 32,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let n = Normalization::CIFAR10;
        DataSection {
            source: DataSource::Synthetic,
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            train_size: 10_000,
            test_size: 2_000,
            mean: n.mean,
            std: n.std,
            checksums: BTreeMap::new(),
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        StageSection {
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            augment: t.augment,
            eval_batch: t.eval_batch,
        }
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        let p = PruneConfig::default();
        PruneSection {
            alpha: p.alpha,
            efficiency: p.mode.as_str().into(),
            epochs: p.prune.epochs,
            lr: p.prune.lr,
            momentum: p.prune.momentum,
            weight_decay: p.prune.weight_decay,
            batch_size: p.prune.batch_size,
            augment: p.prune.augment,
            eval_batch: p.prune.eval_batch,
            min_open_gates: p.min_open_gates,
            gate_bias: true,
            sigmoid_k: None,
        }
    }
}

impl Default for LatencySection {
    fn default() -> Self {
        let t = TimingConfig::default();
        LatencySection {
            samples: 1000,
            batch_size: t.batch_size,
            warmup_runs: t.warmup_runs,
            timed_runs: t.timed_runs,
            paper_parity: false,
            resolution: None,
            lpnet_epochs: 300,
            lpnet_hidden: 64,
            lpnet_batch_size: 256,
            lpnet_lr: 1e-3,
            max_test_error: 0.02,
        }
    }
}

impl StageSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            augment: self.augment,
            eval_batch: self.eval_batch,
        }
    }
}

impl PruneSection {
    pub fn mode(&self) -> Result<EfficiencyMode> {
        Ok(self.efficiency.parse()?)
    }

    pub fn gate_mode(&self) -> GateMode {
        match self.sigmoid_k {
            Some(k) => GateMode::Sigmoid { k },
            None => GateMode::Binary,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.prune_config()?.validate()?;
        self.timing().validate()?;
        if self.data.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("data.std entries must be positive".into()));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if !(self.latency.max_test_error > 0.0) {
            return Err(Error::Config("latency.max_test_error must be positive".into()));
        }
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.data.mean,
            std: self.data.std,
        }
    }

    pub fn prune_config(&self) -> Result<PruneConfig> {
        let p = &self.prune;
        Ok(PruneConfig {
            alpha: p.alpha,
            mode: p.mode()?,
            prune: TrainConfig {
                epochs: p.epochs,
                lr: p.lr,
                momentum: p.momentum,
                weight_decay: p.weight_decay,
                batch_size: p.batch_size,
                augment: p.augment,
                eval_batch: p.eval_batch,
            },
            finetune: self.finetune.train_config(),
            min_open_gates: p.min_open_gates,
        })
    }

    pub fn timing(&self) -> TimingConfig {
        let l = &self.latency;
        TimingConfig {
            batch_size: if l.paper_parity { TimingConfig::PAPER_BATCH } else { l.batch_size },
            warmup_runs: l.warmup_runs,
            timed_runs: l.timed_runs,
        }
    }

    /// Writes the resolved configuration as `config.<command>.toml`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        let path = dir.join(format!("config.{command}.toml"));
        std::fs::write(&path, self.to_toml()).map_err(io_err(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[prune]\nalpha = 3.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.prune.alpha, 3.0);
        assert_eq!(cfg.model.arch, "resnet8");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        assert!(RunConfig::from_toml("[prune]\nalpah = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[prune]\nalpha = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[prune]\nefficiency = \"params\"\n").is_err());
        assert!(RunConfig::from_toml("[latency]\ntimed_runs = 2\n").is_err());
        assert!(RunConfig::from_toml("precision = \"f16\"\n").is_err());
    }

    #[test]
    fn paper_parity_batch() {
        let cfg = RunConfig::from_toml("[latency]\npaper_parity = true\n").unwrap();
        assert_eq!(cfg.timing().batch_size, 100);
    }
}
