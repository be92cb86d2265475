use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::hash::derive_seed;
use crate::{Error, Result};

/// Optimizer / freezing group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Trainable text-encoder tables (toy provider only).
    TextEncoder,
    /// Trainable visual-encoder tables (toy provider only).
    VisualEncoder,
    /// Everything downstream of the encoders.
    Head,
}

impl ParamGroup {
    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::TextEncoder | ParamGroup::VisualEncoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Ones,
}

impl Init {
    pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
}

impl ParamSpec {
    /// `out × in` weight matrix with Xavier init.
    pub fn weight(name: impl Into<String>, out: usize, inp: usize, group: ParamGroup) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: vec![out, inp],
            init: Init::Xavier {
                fan_in: inp,
                fan_out: out,
            },
            group,
        }
    }

    pub fn bias(name: impl Into<String>, len: usize, group: ParamGroup) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: vec![len],
            init: Init::Zeros,
            group,
        }
    }

    pub fn gain(name: impl Into<String>, len: usize, group: ParamGroup) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: vec![len],
            init: Init::Ones,
            group,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

/// Named parameters with gradient accumulators.
///
/// Iteration order is by name, which keeps every consumer deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    frozen: BTreeSet<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, grad, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|e| &e.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self.get_mut(name)?;
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("{name}: {:?} vs {:?}", entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|e| &e.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.frozen.iter().copied()
    }

    /// Adds `grad` into the named accumulator; frozen groups are left at zero.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let frozen = self.frozen.clone();
        let entry = self.get_mut(name)?;
        if frozen.contains(&entry.group) {
            return Ok(());
        }
        if entry.grad.shape() != grad.shape() {
            return Err(Error::dim(
                "accumulate",
                format!("{name}: {:?} vs {:?}", entry.grad.shape(), grad.shape()),
            ));
        }
        entry.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Adds every parameter of `other` that is not already present.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, entry) in other.entries {
            self.insert(name, entry.value, entry.group)?;
        }
        Ok(())
    }
}

/// Draws every parameter from its spec. Each parameter gets its own RNG
/// stream derived from `(seed, name)`, so adding a parameter never shifts the
/// values of the others.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier { fan_in, fan_out } => {
                let bound = Init::xavier_bound(fan_in, fan_out);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.name));
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        store.insert(
            spec.name.clone(),
            Tensor::new(spec.shape.clone(), data)?,
            spec.group,
        )?;
    }
    Ok(store)
}
