//! Late locality embeddings and the two prediction heads: an ordinal
//! classifier over intensity levels and a Gaussian mixture density head
//! over log10 PGA.

use numcore::{Graph, Tensor, Var};

use crate::encoder::add_locality;
use crate::model::{Bound, HeadKind, Init, ModelConfig, ModelError};

pub const BCE_EPS: f64 = 1e-7;
pub const SIGMA_FLOOR: f32 = 1e-2;
/// Smallest PGA (%g) represented in the continuous target space.
pub const PGA_FLOOR: f64 = 1e-3;
pub const DISCRETE_HIDDEN: [usize; 5] = [500, 150, 100, 50, 30];
pub const CONTINUOUS_HIDDEN: [usize; 6] = [500, 150, 100, 50, 30, 10];

/// `0.5 * ln(2 pi)`.
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

pub(crate) fn init_heads(cfg: &ModelConfig, init: &mut Init<'_>) {
    init.constant("late_locality".into(), &[cfg.n_stations, cfg.d_model], 0.0);
    let (hidden, out): (&[usize], usize) = match cfg.head_kind {
        HeadKind::Discrete => (&DISCRETE_HIDDEN, cfg.n_levels),
        HeadKind::Continuous => (&CONTINUOUS_HIDDEN, 3 * cfg.n_mixtures),
    };
    let mut fan_in = cfg.d_model;
    for (i, &width) in hidden.iter().enumerate() {
        init.linear(&format!("head.{i}"), fan_in, width, 6.0);
        fan_in = width;
    }
    let last = format!("head.{}", hidden.len());
    init.linear(&last, fan_in, out, 3.0);
    if cfg.head_kind == HeadKind::Continuous {
        // Start the mixture with unit spreads rather than at the floor.
        let k = cfg.n_mixtures;
        let bias = Tensor::from_fn(&[out], |i| if i >= 2 * k { 1.0 } else { 0.0 });
        init.store.insert(format!("{last}.b"), bias);
    }
}

pub fn add_late_locality(g: &mut Graph, p: &Bound, h2: Var, ids: &[usize]) -> Result<Var, ModelError> {
    add_locality(g, p.get("late_locality")?, h2, ids)
}

/// Runs the prediction FFNN and returns its raw last-layer output.
pub fn head_raw(g: &mut Graph, p: &Bound, cfg: &ModelConfig, h3: Var) -> Result<Var, ModelError> {
    let depth = match cfg.head_kind {
        HeadKind::Discrete => DISCRETE_HIDDEN.len(),
        HeadKind::Continuous => CONTINUOUS_HIDDEN.len(),
    };
    let mut x = h3;
    for i in 0..=depth {
        x = g.linear(x, p.get(&format!("head.{i}.w"))?, p.get(&format!("head.{i}.b"))?)?;
        if i < depth {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Cumulative binary targets: entry `c` is 1 iff `max_pga >= thresholds[c]`.
pub fn discrete_targets(max_pga: f64, thresholds: &[f64]) -> Result<Vec<f32>, ModelError> {
    if !thresholds.windows(2).all(|w| w[0] < w[1]) {
        return Err(ModelError::Input(format!(
            "thresholds must be strictly ascending: {thresholds:?}"
        )));
    }
    Ok(thresholds
        .iter()
        .map(|&t| if max_pga >= t { 1.0 } else { 0.0 })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityLabels {
    /// Index of the highest threshold not above max_pga.
    pub y_level: Option<usize>,
    /// log10 of max_pga, floored at [`PGA_FLOOR`].
    pub y_cont: f64,
}

pub fn intensity_labels(max_pga: f64, thresholds: &[f64]) -> IntensityLabels {
    IntensityLabels {
        y_level: thresholds.iter().rposition(|&t| max_pga >= t),
        y_cont: max_pga.max(PGA_FLOOR).log10(),
    }
}

/// Mean binary cross-entropy over stations and levels.
pub fn discrete_loss(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var, ModelError> {
    if g.shape(probs) != targets.shape() {
        return Err(ModelError::Input(format!(
            "probs {:?} and targets {:?} differ in shape",
            g.shape(probs),
            targets.shape()
        )));
    }
    let t = g.constant(targets.clone());
    Ok(g.bce(probs, t, BCE_EPS)?)
}

/// Min-prefix repair: `p_c <- min(p_1..p_c)`, making probabilities
/// non-increasing across levels.
pub fn repair_probs(probs: &[f32]) -> Vec<f32> {
    let mut running = f32::INFINITY;
    probs
        .iter()
        .map(|&p| {
            running = running.min(p);
            running
        })
        .collect()
}

/// Alarmed levels at one instant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlarmSet {
    pub alarmed: Vec<bool>,
}

impl AlarmSet {
    /// Level `c` is alarmed iff some level at or above `c` clears its cutoff,
    /// so the set is always downward closed.
    pub fn from_probs(probs: &[f64], tau: &[f64]) -> Self {
        let mut alarmed = vec![false; probs.len()];
        let mut any = false;
        for c in (0..probs.len()).rev() {
            any |= probs[c] > tau[c];
            alarmed[c] = any;
        }
        Self { alarmed }
    }

    /// Highest alarmed level, if any.
    pub fn reported(&self) -> Option<usize> {
        self.alarmed.iter().rposition(|&a| a)
    }

    pub fn is_downward_closed(&self) -> bool {
        self.alarmed.windows(2).all(|w| w[0] || !w[1])
    }
}

pub fn decode_discrete(probs: &[f32], tau: &[f64]) -> AlarmSet {
    let repaired: Vec<f64> = repair_probs(probs).iter().map(|&p| f64::from(p)).collect();
    AlarmSet::from_probs(&repaired, tau)
}

/// Mixture parameters as graph variables, each `[N, K]`.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    pub log_weights: Var,
    pub means: Var,
    pub stds: Var,
}

/// Splits a raw `[N, 3K]` output into log-softmax weights, identity means
/// and `relu + SIGMA_FLOOR` spreads.
pub fn mdn_head(g: &mut Graph, raw: Var, k: usize) -> Result<GmmVars, ModelError> {
    let shape = g.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != 3 * k {
        return Err(ModelError::Input(format!(
            "mixture head expects [N, {}], got {shape:?}",
            3 * k
        )));
    }
    let w = g.narrow(raw, 0, k)?;
    let log_weights = g.log_softmax(w)?;
    let means = g.narrow(raw, k, k)?;
    let s = g.narrow(raw, 2 * k, k)?;
    let s = g.relu(s);
    let stds = g.add_scalar(s, SIGMA_FLOOR);
    Ok(GmmVars {
        log_weights,
        means,
        stds,
    })
}

/// Mean over stations of `-log sum_k a_k N(y | mu_k, sigma_k)`.
pub fn mdn_nll(g: &mut Graph, gmm: &GmmVars, y: &[f32]) -> Result<Var, ModelError> {
    if !y.iter().all(|v| v.is_finite()) {
        return Err(ModelError::Input("non-finite regression target".into()));
    }
    let shape = g.shape(gmm.means).to_vec();
    if shape[0] != y.len() {
        return Err(ModelError::Input(format!(
            "{} targets for {} stations",
            y.len(),
            shape[0]
        )));
    }
    let k = shape[1];
    let targets = Tensor::from_fn(&shape, |i| y[i / k]);
    let targets = g.constant(targets);
    let diff = g.sub(targets, gmm.means)?;
    let z = g.div(diff, gmm.stds)?;
    let z2 = g.square(z);
    let quad = g.scale(z2, -0.5);
    let log_std = g.log(gmm.stds);
    let log_density = g.sub(quad, log_std)?;
    let joint = g.add(log_density, gmm.log_weights)?;
    let lse = g.logsumexp(joint)?;
    let neg = g.scale(lse, -1.0);
    let per_station = g.add_scalar(neg, HALF_LN_TAU as f32);
    Ok(g.mean(per_station))
}

/// Mixture for one station in plain floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GmmParams {
    /// Reads row `station` out of evaluated mixture tensors.
    pub fn from_rows(log_weights: &Tensor, means: &Tensor, stds: &Tensor, station: usize) -> Self {
        let k = means.shape()[1];
        let row = |t: &Tensor| -> Vec<f64> {
            t.data()[station * k..(station + 1) * k]
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        };
        let lw = row(log_weights);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        Self {
            weights: e.iter().map(|v| v / total).collect(),
            means: row(means),
            stds: row(stds),
        }
    }

    pub fn density(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((a, m), s)| {
                let z = (y - m) / s;
                a * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    }
}

/// Standard normal upper tail.
pub fn normal_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Probability mass of the mixture above `u`.
pub fn exceedance_prob(params: &GmmParams, u: f64) -> f64 {
    let p: f64 = params
        .weights
        .iter()
        .zip(&params.means)
        .zip(&params.stds)
        .map(|((a, m), s)| a * normal_tail((u - m) / s))
        .sum();
    p.clamp(0.0, 1.0)
}

/// Exceedance probability at each threshold (given in log10 %g).
pub fn exceedance_levels(params: &GmmParams, thresholds_cont: &[f64]) -> Vec<f64> {
    thresholds_cont.iter().map(|&u| exceedance_prob(params, u)).collect()
}

pub fn decide_alarms_cont(params: &GmmParams, thresholds_cont: &[f64], tau: &[f64]) -> AlarmSet {
    AlarmSet::from_probs(&exceedance_levels(params, thresholds_cont), tau)
}
