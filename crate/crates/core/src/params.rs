//! Named parameter storage and its per-forward-pass tape binding.
//!
//! A [`ParamSet`] owns model weights in a fixed insertion order — the order
//! every consumer (gradients, the optimizer, checkpoints) iterates in, which
//! keeps runs deterministic. A [`BoundParams`] registers every weight as a
//! tracked leaf on one tape and resolves names to tape ids.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{ConvGruParams, ConvParams, LinearParams};
use crate::tensor::{GradientMap, Tape, Tensor, TensorId};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a named parameter. The tensor is marked gradient-tracked.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter_mut())
    }

    pub fn value_at(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn name_at(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// One tape's view of a [`ParamSet`]: every parameter registered as a
/// tracked leaf, addressable by name.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    ids: Vec<TensorId>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(tape: &mut Tape, set: &'a ParamSet) -> Self {
        let ids = set.values.iter().map(|t| tape.leaf(t)).collect();
        BoundParams { set, ids }
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.set
            .index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Stride-1 convolution params for `<prefix>.kernel` / `<prefix>.bias`,
    /// padded so the given dilation preserves spatial size.
    pub fn conv_same(&self, prefix: &str, dilation: usize) -> Result<ConvParams> {
        let kernel_name = format!("{prefix}.kernel");
        let k = self
            .set
            .get(&kernel_name)
            .ok_or_else(|| Error::UnknownParameter(kernel_name.clone()))?
            .shape()[2];
        Ok(ConvParams::same(
            self.id(&kernel_name)?,
            self.id(&format!("{prefix}.bias"))?,
            k,
            dilation,
        ))
    }

    pub fn linear(&self, prefix: &str) -> Result<LinearParams> {
        Ok(LinearParams {
            weight: self.id(&format!("{prefix}.weight"))?,
            bias: self.id(&format!("{prefix}.bias"))?,
        })
    }

    pub fn gru(&self, prefix: &str) -> Result<ConvGruParams> {
        Ok(ConvGruParams {
            reset: self.conv_same(&format!("{prefix}.reset"), 1)?,
            update: self.conv_same(&format!("{prefix}.update"), 1)?,
            candidate: self.conv_same(&format!("{prefix}.candidate"), 1)?,
        })
    }

    /// Gradients in parameter order. Every bound parameter is a tracked
    /// leaf, so `backward` covers each one (zeros when untouched).
    pub fn gather(&self, grads: &GradientMap) -> Result<Vec<Tensor>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                grads
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingGradient(self.set.names[i].clone()))
            })
            .collect()
    }
}
