//! Named parameter collections and their initialization.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the zero-mean Gaussian used for conv weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Gaussian `N(0, INIT_STD)`.
    Weight,
    /// Zeros.
    Bias,
    /// Ones (normalization scale).
    Scale,
    /// Zeros (normalization offset).
    Offset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        ParamDef {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map of parameter name to tensor for one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl NetParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Initialize every entry of `layout`, rounding to `f32` precision.
    pub fn init(layout: &[ParamDef], rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = NetParams::new();
        for def in layout {
            let t = match def.kind {
                ParamKind::Weight => Tensor::from_fn(&def.shape, |_| normal.sample(rng)),
                ParamKind::Bias | ParamKind::Offset => Tensor::zeros(&def.shape),
                ParamKind::Scale => Tensor::full(&def.shape, 1.0),
            };
            params.insert(def.name.clone(), t)?;
        }
        params.round_to_f32();
        Ok(params)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::InvalidArgument(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Check that names and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &[ParamDef]) -> Result<()> {
        if self.entries.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for def in layout {
            let t = self
                .get(&def.name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {}", def.name)))?;
            if t.shape() != def.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    def.name,
                    t.shape(),
                    def.shape
                )));
            }
        }
        Ok(())
    }

    /// Round every value to the nearest `f32`, so that values survive the
    /// 32-bit checkpoint format unchanged.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Hash of the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in &self.entries {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Flattened copy of all values, in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Record every tensor on `tape` as a leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape, trainable: bool) -> Bound<'p> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Bound { params: self, vars }
    }
}

/// Tape handles for a [`NetParams`].
pub struct Bound<'p> {
    params: &'p NetParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Gradients for every parameter, in entry order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.get(v)).collect()
    }
}
