use std::fs;
use std::path::{Path, PathBuf};

use omniseg_core::data::SynthConfig;
use omniseg_core::registry::ClassEntry;
use omniseg_core::trainer::TrainConfig;
use omniseg_core::{BackboneConfig, Error, LossConfig, Registry, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus root: written by `synth`, read by `train` and `eval`.
    pub root: PathBuf,
    pub synth: SynthConfig,
    /// Patches per class per epoch after balancing.
    pub target_per_class: usize,
    pub split_ratio: (u32, u32, u32),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("corpus"),
            synth: SynthConfig::default(),
            target_per_class: 200,
            split_ratio: (6, 1, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub batch_size: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateConfig {
    pub stride: usize,
    pub threshold: f64,
    pub alpha: f32,
    pub batch_size: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            stride: 256,
            threshold: 0.5,
            alpha: 0.5,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub classes: Vec<ClassEntry>,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
    pub aggregate: AggregateConfig,
    pub seed: u64,
    /// Single-threaded execution so repeated runs are bit-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            classes: Registry::default_entries(),
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
            aggregate: AggregateConfig::default(),
            seed: 0,
            deterministic: false,
        }
    }
}

impl RunConfig {
    /// Reads and validates a JSON config. A relative `data.root` resolves
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if config.data.root.is_relative() {
            if let Some(dir) = path.parent() {
                config.data.root = dir.join(&config.data.root);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.registry()?;
        self.backbone.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.data.target_per_class == 0 {
            return Err(Error::Config("data.target_per_class must be positive".into()));
        }
        let (a, b, c) = self.data.split_ratio;
        if a == 0 || b == 0 || c == 0 {
            return Err(Error::Config("data.split_ratio entries must be positive".into()));
        }
        if self.metrics.batch_size == 0 || self.aggregate.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.aggregate.stride == 0 {
            return Err(Error::Config("aggregate.stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.aggregate.threshold) {
            return Err(Error::Config("aggregate.threshold must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.aggregate.alpha) {
            return Err(Error::Config("aggregate.alpha must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<Registry> {
        Registry::new(&self.classes)
    }

    /// Applies command-line overrides. The seed also reseeds training and
    /// the generator so one flag controls the whole run.
    pub fn apply_overrides(&mut self, seed: Option<u64>, deterministic: bool) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if seed.is_some() || self.train.seed == 0 {
            self.train.seed = self.seed;
        }
        if seed.is_some() || self.data.synth.seed == 0 {
            self.data.synth.seed = self.seed;
        }
        self.deterministic |= deterministic;
    }
}
