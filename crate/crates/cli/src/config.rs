use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pow2prune::autodiff::{LayerSpec, Loss};
use pow2prune::costmodel::CostParams;
use pow2prune::metrics::Metric;
use pow2prune::pruning::PruneConfig;
use pow2prune::quantization::QuantConfig;
use pow2prune::train::OptimConfig;
use serde::{Deserialize, Serialize};

use crate::datasets::TaskSpec;

/// Environment variable that overrides `output_dir`.
pub const OUT_DIR_ENV: &str = "POW2PRUNE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneStage {
    /// `false` runs quantization straight after baseline training.
    pub enabled: bool,
    #[serde(flatten)]
    pub config: PruneConfig,
}

impl Default for PruneStage {
    fn default() -> Self {
        Self {
            enabled: true,
            // the library default suits large models; toy models need less
            config: PruneConfig {
                threshold: 1e-13,
                ..PruneConfig::default()
            },
        }
    }
}

/// Everything a run needs. Identical configs give identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub n_train: usize,
    pub n_eval: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
    pub metric: Metric,
    /// Baseline training.
    pub train: OptimConfig,
    /// Optimizer for pruning and quantization retraining.
    pub finetune: OptimConfig,
    pub prune: PruneStage,
    pub quant: QuantConfig,
    pub cost: CostParams,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            task: TaskSpec::ToyDisparity {
                length: 8,
                max_shift: 2,
                segments: 2,
            },
            n_train: 2048,
            n_eval: 256,
            layers: vec![
                LayerSpec::Dense { out: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 8 },
            ],
            loss: Loss::Mse,
            metric: Metric::ThresholdAccuracy(1.0),
            train: OptimConfig::default(),
            finetune: OptimConfig {
                epochs: 0,
                batch_size: 32,
                learning_rate: 0.005,
                momentum: 0.9,
            },
            prune: PruneStage::default(),
            quant: QuantConfig::default(),
            cost: CostParams::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        if self.prune.enabled {
            self.prune.config.validate()?;
        }
        self.quant.validate()?;
        self.cost.validate()?;
        if self.n_train == 0 || self.n_eval == 0 {
            anyhow::bail!("n_train and n_eval must be > 0");
        }
        Ok(())
    }

    /// Output directory: environment override, then config, then `fallback`.
    pub fn resolve_out_dir(&self, fallback: Option<&Path>) -> Option<PathBuf> {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| fallback.map(Path::to_path_buf))
            .or_else(|| self.output_dir.clone())
    }
}
