use std::path::{Path, PathBuf};
use std::time::Instant;

use numcore::{Graph, NumError, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    save_checkpoint, schedule_from_epochs, Adam, Checkpoint, Cursor, PhaseSpec, Result, RngState, TrainError,
    TrainSettings,
};
use crate::datagen::{window_at, Catalog, EventRecord};
use crate::heads::{discrete_targets, intensity_labels};
use crate::model::{HeadKind, ModelError, ParamGroup, SenseModel, Targets};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub phase: u8,
    /// One-based epoch within the phase.
    pub epoch: usize,
    pub loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Supervision for every station of `event`.
pub fn event_targets(head: HeadKind, thresholds: &[f64], event: &EventRecord) -> Result<Targets, ModelError> {
    Ok(match head {
        HeadKind::Discrete => {
            let mut data = Vec::with_capacity(event.labels.len() * thresholds.len());
            for l in &event.labels {
                data.extend(discrete_targets(l.max_pga, thresholds)?);
            }
            Targets::Discrete(Tensor::new(vec![event.labels.len(), thresholds.len()], data)?)
        }
        HeadKind::Continuous => Targets::Continuous(
            event
                .labels
                .iter()
                .map(|l| intensity_labels(l.max_pga, thresholds).y_cont as f32)
                .collect(),
        ),
    })
}

/// Interval `t_now` is drawn from: a margin before the first P arrival to a
/// margin after the last S arrival, clipped to the record.
pub fn sample_window_range(catalog: &Catalog, event: &EventRecord, settings: &TrainSettings) -> (f64, f64) {
    let duration = catalog.duration();
    let lo = event
        .first_p_arrival()
        .map_or(0.0, |p| (p - settings.pre_p_margin).max(0.0));
    let hi = event
        .last_s_arrival()
        .map_or(duration, |s| (s + settings.post_s_margin).min(duration));
    (lo.min(hi), hi)
}

pub struct Trainer {
    pub model: SenseModel,
    pub adam: Adam,
    pub settings: TrainSettings,
    pub cursor: Cursor,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: SenseModel, settings: TrainSettings) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(1);
        Self {
            model,
            adam: Adam::new(settings.adam),
            settings,
            cursor: Cursor::default(),
            rng,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Ok(Self {
            rng: ckpt.rng.restore()?,
            model: ckpt.model,
            adam: ckpt.adam,
            settings: ckpt.settings,
            cursor: ckpt.cursor,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            settings: self.settings.clone(),
            cursor: self.cursor,
            rng: RngState::capture(&self.rng),
            adam: self.adam.clone(),
        }
    }

    pub fn schedule(&self) -> Vec<PhaseSpec> {
        schedule_from_epochs(self.settings.epochs)
    }

    /// One optimizer step on one window; returns the loss.
    pub fn step(&mut self, catalog: &Catalog, event: &EventRecord, t_now: f64, phase: &PhaseSpec) -> Result<f64> {
        let cfg = &self.model.config;
        let window = cfg.window_samples as f64 / catalog.sample_rate;
        let batch = window_at(catalog, event, t_now, window)?;
        let targets = event_targets(cfg.head_kind, &catalog.thresholds, event)?;
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g, |grp| phase.is_trainable(grp));
        let out = self.model.forward(&mut g, &bound, &batch, phase.alpha.into())?;
        let loss_var = self.model.loss(&mut g, &out, &targets)?;
        let loss = g
            .scalar(loss_var)
            .unwrap_or_else(|| f64::from(g.value(loss_var).data()[0]));
        let non_finite = || TrainError::NonFiniteLoss {
            phase: phase.index,
            epoch: self.cursor.epoch + 1,
        };
        if !loss.is_finite() {
            return Err(non_finite());
        }
        match g.backward(loss_var) {
            Ok(()) => {}
            Err(NumError::NonFinite(_)) => return Err(non_finite()),
            Err(e) => return Err(ModelError::from(e).into()),
        }
        let grads: Vec<(String, Tensor)> = bound
            .iter()
            .filter(|(name, _)| phase.is_trainable(ParamGroup::of(name)))
            .filter_map(|(name, v)| g.grad(v).map(|t| (name.to_string(), t)))
            .collect::<Vec<_>>();
        let mut grads = grads;
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(loss)
    }

    /// Runs the remaining epochs of `phase` from the cursor.
    pub fn train_phase(
        &mut self,
        data: &Catalog,
        phase: &PhaseSpec,
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if data.events.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let mut logs = Vec::new();
        while self.cursor.epoch < phase.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..data.events.len()).collect();
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for &i in &order {
                let event = &data.events[i];
                let (lo, hi) = sample_window_range(data, event, &self.settings);
                for _ in 0..self.settings.draws_per_event {
                    let t_now = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
                    total += self.step(data, event, t_now, phase)?;
                    steps += 1;
                }
            }
            self.cursor.epoch += 1;
            let log = EpochLog {
                phase: phase.index,
                epoch: self.cursor.epoch,
                loss: total / steps.max(1) as f64,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Runs every remaining phase, writing a checkpoint at each phase
    /// boundary and the epoch log when `out_dir` is given.
    pub fn run_schedule(
        &mut self,
        data: &Catalog,
        out_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        let schedule = self.schedule();
        let mut report = TrainReport::default();
        while self.cursor.phase < schedule.len() {
            let phase = &schedule[self.cursor.phase];
            let logs = self.train_phase(data, phase, &mut |log: &EpochLog| {
                on_epoch(log);
            })?;
            report.epochs.extend(logs);
            self.cursor = Cursor {
                phase: self.cursor.phase + 1,
                epoch: 0,
            };
            if let Some(dir) = out_dir {
                let path = boundary_checkpoint_path(dir, phase.index);
                save_checkpoint(&self.checkpoint(), &path)?;
                report.checkpoints.push(path);
            }
        }
        Ok(report)
    }
}

pub fn boundary_checkpoint_path(dir: &Path, phase: u8) -> PathBuf {
    dir.join(format!("phase{phase}.ckpt"))
}
