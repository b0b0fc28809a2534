//! Three-phase training with parameter-group freezing, Adam updates and
//! resumable checkpoints.

mod adam;
mod checkpoint;
mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, RngState,
    CHECKPOINT_VERSION,
};
pub use run::{boundary_checkpoint_path, event_targets, sample_window_range, EpochLog, TrainReport, Trainer};

use crate::datagen::DataError;
use crate::model::{AlphaMode, ModelError, ParamGroup};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("unknown schedule profile {0:?} (expected japan-like, taiwan-like or test)")]
    UnknownProfile(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite loss in phase {phase}, epoch {epoch}")]
    NonFiniteLoss { phase: u8, epoch: usize },
    #[error("checkpoint {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint configuration does not match: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub index: u8,
    pub epochs: usize,
    pub trainable: Vec<ParamGroup>,
    pub frozen: Vec<ParamGroup>,
    pub alpha: AlphaSetting,
}

/// Serializable mirror of [`AlphaMode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSetting {
    Pinned,
    Learned,
}

impl From<AlphaSetting> for AlphaMode {
    fn from(a: AlphaSetting) -> Self {
        match a {
            AlphaSetting::Pinned => AlphaMode::Pinned,
            AlphaSetting::Learned => AlphaMode::Learned,
        }
    }
}

impl PhaseSpec {
    fn new(index: u8, epochs: usize, trainable: &[ParamGroup], alpha: AlphaSetting) -> Self {
        Self {
            index,
            epochs,
            trainable: trainable.to_vec(),
            frozen: ParamGroup::ALL
                .iter()
                .copied()
                .filter(|g| !trainable.contains(g))
                .collect(),
            alpha,
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }
}

/// Epoch counts for a named profile. `test_epochs` applies to the `test`
/// profile only and defaults to (5, 2, 2).
pub fn profile_epochs(profile: &str, test_epochs: Option<[usize; 3]>) -> Result<[usize; 3]> {
    match profile {
        "japan-like" => Ok([100, 40, 40]),
        "taiwan-like" => Ok([50, 20, 20]),
        "test" => Ok(test_epochs.unwrap_or([5, 2, 2])),
        other => Err(TrainError::UnknownProfile(other.to_string())),
    }
}

/// Phase 1 trains everything except the early locality table and the fusion
/// weights (pinned at 0.5); phase 2 trains only the early locality table;
/// phase 3 trains everything with learned fusion weights.
pub fn schedule_from_epochs(epochs: [usize; 3]) -> Vec<PhaseSpec> {
    use ParamGroup::*;
    vec![
        PhaseSpec::new(
            1,
            epochs[0],
            &[Conv, Blending, LateLocality, Head],
            AlphaSetting::Pinned,
        ),
        PhaseSpec::new(2, epochs[1], &[EarlyLocality], AlphaSetting::Pinned),
        PhaseSpec::new(3, epochs[2], &ParamGroup::ALL, AlphaSetting::Learned),
    ]
}

pub fn build_schedule(profile: &str, test_epochs: Option<[usize; 3]>) -> Result<Vec<PhaseSpec>> {
    Ok(schedule_from_epochs(profile_epochs(profile, test_epochs)?))
}

/// Position in a schedule: the next epoch to run, both zero-based.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub phase: usize,
    pub epoch: usize,
}

/// Everything besides the model configuration that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub seed: u64,
    pub epochs: [usize; 3],
    pub adam: AdamConfig,
    /// Windows drawn per event per epoch.
    pub draws_per_event: usize,
    /// Seconds before the first P arrival where window sampling starts.
    pub pre_p_margin: f64,
    /// Seconds after the last S arrival where window sampling stops.
    pub post_s_margin: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: [5, 2, 2],
            adam: AdamConfig::default(),
            draws_per_event: 4,
            pre_p_margin: 2.0,
            post_s_margin: 5.0,
        }
    }
}
