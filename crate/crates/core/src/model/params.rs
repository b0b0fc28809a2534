use std::collections::{BTreeMap, HashMap};

use numcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Parameter groups used by the training schedule to freeze and unfreeze.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Conv,
    Fusion,
    EarlyLocality,
    Blending,
    LateLocality,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Conv,
        ParamGroup::Fusion,
        ParamGroup::EarlyLocality,
        ParamGroup::Blending,
        ParamGroup::LateLocality,
        ParamGroup::Head,
    ];

    /// Group of a parameter name, decided by its first dotted component.
    pub fn try_of(name: &str) -> Option<ParamGroup> {
        Some(match name.split('.').next().unwrap_or_default() {
            "conv" => ParamGroup::Conv,
            "fusion" => ParamGroup::Fusion,
            "early_locality" => ParamGroup::EarlyLocality,
            "blend" => ParamGroup::Blending,
            "late_locality" => ParamGroup::LateLocality,
            "head" => ParamGroup::Head,
            _ => return None,
        })
    }

    pub fn of(name: &str) -> ParamGroup {
        Self::try_of(name).unwrap_or_else(|| panic!("parameter {name} has an unknown prefix"))
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        ParamGroup::of(&name);
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor in `g`; groups for which `trainable` is false
    /// enter as constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(ParamGroup::of(name)) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another variable of the same graph.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<(), ModelError> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        *slot = var;
        Ok(())
    }
}

/// Weight initializers used when building a fresh model.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub store: &'a mut ParamStore,
}

impl Init<'_> {
    /// Uniform in `(-bound, bound)` with `bound = sqrt(gain / fan_in)`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) {
        let bound = (gain / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32);
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    /// `x @ w + b` weights for a `[fan_in] -> [fan_out]` map.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.uniform(format!("{prefix}.w"), &[fan_in, fan_out], fan_in, gain);
        self.constant(format!("{prefix}.b"), &[fan_out], 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.constant(format!("{prefix}.g"), &[d], 1.0);
        self.constant(format!("{prefix}.b"), &[d], 0.0);
    }
}
