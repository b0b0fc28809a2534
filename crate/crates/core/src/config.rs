//! Run configuration: one TOML file with sections per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Catalog, GenConfig};
use crate::evaluation::default_grid;
use crate::model::{BlockKind, HeadKind, ModelConfig, ModelError};
use crate::training::{profile_epochs, AdamConfig, TrainSettings};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelProfile {
    Test,
    Full,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleProfile {
    JapanLike,
    TaiwanLike,
    Test,
}

impl ScheduleProfile {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleProfile::JapanLike => "japan-like",
            ScheduleProfile::TaiwanLike => "taiwan-like",
            ScheduleProfile::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Model section: a size profile plus optional overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub profile: ModelProfile,
    pub head: HeadKind,
    pub block: BlockKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mixtures: Option<usize>,
    /// Input window in samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_samples: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            profile: ModelProfile::Test,
            head: HeadKind::Discrete,
            block: BlockKind::Transformer,
            d_model: None,
            n_heads: None,
            ffn_hidden: None,
            n_blocks: None,
            n_mixtures: None,
            window_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub profile: ScheduleProfile,
    /// Epochs per phase; only the `test` profile accepts an override.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<[usize; 3]>,
    pub adam: AdamConfig,
    pub draws_per_event: usize,
    pub pre_p_margin: f64,
    pub post_s_margin: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSettings::default();
        Self {
            profile: ScheduleProfile::Test,
            epochs: None,
            adam: s.adam,
            draws_per_event: s.draws_per_event,
            pre_p_margin: s.pre_p_margin,
            post_s_margin: s.post_s_margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub cadence: f64,
    pub split: SplitName,
    /// Fixed cutoffs per level; swept on the validation split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<f64>>,
    pub grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            cadence: crate::evaluation::DEFAULT_CADENCE,
            split: SplitName::Test,
            tau: None,
            grid: default_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, model initialization and training.
    pub seed: u64,
    /// Every output lands under this directory.
    pub out: PathBuf,
    /// Dataset to read; defaults to `<out>/dataset`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Chronological (train, val, test) fractions.
    pub split: (f64, f64, f64),
    /// Generator settings; its `seed` is replaced by the top-level seed.
    pub generate: GenConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            split: (0.6, 0.1, 0.3),
            generate: GenConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.generate.clone()
        }
    }

    pub fn epochs(&self) -> Result<[usize; 3], ConfigError> {
        if self.train.epochs.is_some() && self.train.profile != ScheduleProfile::Test {
            return Err(ConfigError::Invalid(
                "train.epochs can only be set with the test schedule".into(),
            ));
        }
        profile_epochs(self.train.profile.name(), self.train.epochs).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn train_settings(&self) -> Result<TrainSettings, ConfigError> {
        Ok(TrainSettings {
            seed: self.seed,
            epochs: self.epochs()?,
            adam: self.train.adam,
            draws_per_event: self.train.draws_per_event,
            pre_p_margin: self.train.pre_p_margin,
            post_s_margin: self.train.post_s_margin,
        })
    }

    /// Model configuration sized for the stations and levels of `catalog`.
    pub fn model_config(&self, catalog: &Catalog) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let (n, c) = (catalog.n_stations(), catalog.thresholds.len());
        let mut cfg = match m.profile {
            ModelProfile::Test => ModelConfig::test_profile(n, c, m.head),
            ModelProfile::Full => ModelConfig::full_profile(n, c, m.head),
            ModelProfile::Tiny => ModelConfig::tiny(n, c, m.head),
        };
        cfg.block_kind = m.block;
        if let Some(v) = m.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = m.n_heads {
            cfg.n_heads = v;
        }
        if let Some(v) = m.ffn_hidden {
            cfg.ffn_hidden = v;
        }
        if let Some(v) = m.n_blocks {
            cfg.n_blocks = v;
        }
        if let Some(v) = m.n_mixtures {
            cfg.n_mixtures = v;
        }
        if let Some(v) = m.window_samples {
            cfg.window_samples = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without a dataset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gen_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && ((a + b + c) - 1.0).abs() <= 1e-9) {
            return Err(ConfigError::Invalid(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.split
            )));
        }
        self.train_settings()?;
        if self.train.draws_per_event == 0 {
            return Err(ConfigError::Invalid("train.draws_per_event must be at least 1".into()));
        }
        let adam = &self.train.adam;
        if !(adam.lr >= 0.0 && (0.0..1.0).contains(&adam.beta1) && (0.0..1.0).contains(&adam.beta2) && adam.eps > 0.0) {
            return Err(ConfigError::Invalid("train.adam has out-of-range values".into()));
        }
        let e = &self.eval;
        if !(e.cadence.is_finite() && e.cadence > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "eval.cadence {} must be positive",
                e.cadence
            )));
        }
        let in_unit = |t: &f64| *t > 0.0 && *t < 1.0;
        if e.grid.is_empty() || !e.grid.iter().all(in_unit) {
            return Err(ConfigError::Invalid(
                "eval.grid must be a non-empty subset of (0, 1)".into(),
            ));
        }
        if let Some(tau) = &e.tau {
            if !tau.iter().all(|t| (0.0..=1.0).contains(t)) {
                return Err(ConfigError::Invalid("eval.tau values must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}
