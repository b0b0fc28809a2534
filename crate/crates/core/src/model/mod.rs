//! Model configuration, parameter storage and the assembled forward pass.

mod config;
mod params;

use numcore::{Graph, NumError, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{BlockKind, ConvLayer, ConvStackSpec, HeadKind, ModelConfig, StageShape};
pub(crate) use params::Init;
pub use params::{Bound, ParamGroup, ParamStore};

use crate::blending::{feature_blending, init_blending};
use crate::datagen::StationBatch;
use crate::encoder::{
    add_early_locality, compress_amplitudes, conv_module_forward, fuse, init_encoder, positional_encoding_batch,
};
use crate::heads::{
    add_late_locality, discrete_loss, exceedance_levels, head_raw, init_heads, mdn_head, mdn_nll, repair_probs,
    GmmParams, GmmVars,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("conv stack layer {index} ({layer}) cannot run: {detail}")]
    StackTooShort {
        index: usize,
        layer: String,
        detail: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("station id {id} out of range for {n_stations} stations")]
    UnknownStation { id: usize, n_stations: usize },
    #[error("parameter {0} is missing")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// How the waveform/geography fusion weight is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// The constant 0.5; the fusion logits are not read.
    Pinned,
    /// `sigmoid` of the per-station logits.
    Learned,
}

#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    /// `[N, C]` sigmoid probabilities.
    Discrete {
        probs: Var,
    },
    Continuous(GmmVars),
}

/// Per-station supervision for one event.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `[N, C]` cumulative level indicators.
    Discrete(Tensor),
    /// log10 PGA per station.
    Continuous(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenseModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SenseModel {
    /// Freshly initialized model; deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: &mut rng,
            store: &mut params,
        };
        init_encoder(&config, &mut init)?;
        init_blending(&config, &mut init);
        init_heads(&config, &mut init);
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes against the
    /// configuration.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            let found = params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if found.shape() != t.shape() {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| reference.params.get(n).is_none()) {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config: reference.config,
            params,
        })
    }

    fn check_batch(&self, batch: &StationBatch) -> Result<(), ModelError> {
        let shape = batch.waveforms.shape();
        let n = batch.n_stations();
        if shape != [n, 3, self.config.window_samples] || batch.coords.len() != n || n == 0 {
            return Err(ModelError::Input(format!(
                "batch waveforms {shape:?} with {} coordinates do not match [N, 3, {}]",
                batch.coords.len(),
                self.config.window_samples
            )));
        }
        Ok(())
    }

    /// Builds the full forward pass into `g` using bound parameters `p`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &StationBatch,
        alpha: AlphaMode,
    ) -> Result<HeadOutput, ModelError> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let ids = &batch.station_ids;
        let x = g.constant(compress_amplitudes(&batch.waveforms, cfg.amplitude_floor));
        let w = conv_module_forward(g, p, cfg, x)?;
        let geo = g.constant(positional_encoding_batch(cfg, &batch.coords));
        let h0 = fuse(g, p, w, geo, ids, alpha)?;
        let h1 = add_early_locality(g, p, h0, ids)?;
        let h2 = feature_blending(g, p, cfg, h1)?;
        let h3 = add_late_locality(g, p, h2, ids)?;
        let raw = head_raw(g, p, cfg, h3)?;
        Ok(match cfg.head_kind {
            HeadKind::Discrete => HeadOutput::Discrete { probs: g.sigmoid(raw) },
            HeadKind::Continuous => HeadOutput::Continuous(mdn_head(g, raw, cfg.n_mixtures)?),
        })
    }

    /// Loss of one forward pass against `targets`.
    pub fn loss(&self, g: &mut Graph, out: &HeadOutput, targets: &Targets) -> Result<Var, ModelError> {
        match (out, targets) {
            (HeadOutput::Discrete { probs }, Targets::Discrete(t)) => discrete_loss(g, *probs, t),
            (HeadOutput::Continuous(gmm), Targets::Continuous(y)) => mdn_nll(g, gmm, y),
            _ => Err(ModelError::Input("targets do not match the configured head".into())),
        }
    }

    /// Frozen-parameter inference: per-station probability that each level
    /// is reached. Discrete outputs are min-prefix repaired; continuous
    /// outputs are exceedance probabilities at `thresholds` (%g).
    pub fn level_probabilities(&self, batch: &StationBatch, thresholds: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        if thresholds.len() != self.config.n_levels {
            return Err(ModelError::Input(format!(
                "{} thresholds for a model with {} levels",
                thresholds.len(),
                self.config.n_levels
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let out = self.forward(&mut g, &p, batch, AlphaMode::Learned)?;
        let n = batch.n_stations();
        Ok(match out {
            HeadOutput::Discrete { probs } => {
                let v = g.value(probs);
                let c = self.config.n_levels;
                (0..n)
                    .map(|s| {
                        repair_probs(&v.data()[s * c..(s + 1) * c])
                            .into_iter()
                            .map(f64::from)
                            .collect()
                    })
                    .collect()
            }
            HeadOutput::Continuous(gmm) => {
                let cont: Vec<f64> = thresholds.iter().map(|t| t.log10()).collect();
                (0..n)
                    .map(|s| {
                        let params =
                            GmmParams::from_rows(g.value(gmm.log_weights), g.value(gmm.means), g.value(gmm.stds), s);
                        exceedance_levels(&params, &cont)
                    })
                    .collect()
            }
        })
    }

    /// Raw sigmoid outputs of a discrete model, for decoding with
    /// [`crate::heads::decode_discrete`].
    pub fn discrete_probs(&self, batch: &StationBatch) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        match self.forward(&mut g, &p, batch, AlphaMode::Learned)? {
            HeadOutput::Discrete { probs } => Ok(g.value(probs).clone()),
            HeadOutput::Continuous(_) => Err(ModelError::Input("model has a mixture head".into())),
        }
    }

    /// Mixture parameters of a continuous model for every station.
    pub fn mixtures(&self, batch: &StationBatch) -> Result<Vec<GmmParams>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        match self.forward(&mut g, &p, batch, AlphaMode::Learned)? {
            HeadOutput::Continuous(gmm) => Ok((0..batch.n_stations())
                .map(|s| GmmParams::from_rows(g.value(gmm.log_weights), g.value(gmm.means), g.value(gmm.stds), s))
                .collect()),
            HeadOutput::Discrete { .. } => Err(ModelError::Input("model has a discrete head".into())),
        }
    }
}
