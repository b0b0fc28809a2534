use std::collections::BTreeMap;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates applied to this parameter.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update from `grads`, clipped jointly to `clip_norm`.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<f64, ModelError> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        let c = self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        for (name, grad) in grads {
            let current = params.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let n = current.len();
            let slot = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            slot.step += 1;
            let t = slot.step as i32;
            let bias1 = 1.0 - c.beta1.powi(t);
            let bias2 = 1.0 - c.beta2.powi(t);
            let updated: Vec<f32> = current
                .data()
                .iter()
                .zip(grad.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                .map(|((&p, &g), (m, v))| {
                    let g = f64::from(g) * clip;
                    let m_new = c.beta1 * f64::from(*m) + (1.0 - c.beta1) * g;
                    let v_new = c.beta2 * f64::from(*v) + (1.0 - c.beta2) * g * g;
                    *m = m_new as f32;
                    *v = v_new as f32;
                    let m_hat = m_new / bias1;
                    let v_hat = v_new / bias2;
                    (f64::from(p) - c.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32
                })
                .collect();
            params.set(name, Tensor::new(current.shape().to_vec(), updated)?)?;
        }
        Ok(norm)
    }
}
