//! Parameter storage shared by networks, flows, and the transition.
//!
//! A `ParameterStore` owns tensors in registration order; everything else
//! refers to them by `SlotId`. Registration order is the canonical order
//! for flattening, gradient records, SGD updates, and checkpoints.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable handle to one parameter tensor inside a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub(crate) usize);

impl SlotId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<S: Scalar = f64> {
    slots: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore { slots: Vec::new() }
    }

    pub fn register(&mut self, tensor: Tensor<S>) -> SlotId {
        let id = SlotId(self.slots.len());
        self.slots.push(tensor);
        id
    }

    pub fn get(&self, id: SlotId) -> &Tensor<S> {
        &self.slots[id.0]
    }

    pub fn set(&mut self, id: SlotId, tensor: Tensor<S>) -> Result<()> {
        if self.slots[id.0].shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                left: self.slots[id.0].shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        self.slots[id.0] = tensor;
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Tensor<S>] {
        &self.slots
    }

    /// Total number of scalar parameters across all slots.
    pub fn num_params(&self) -> usize {
        self.slots.iter().map(Tensor::len).sum()
    }

    /// Concatenate all parameters in registration order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.slots {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector in registration order.
    pub fn unflatten(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in &mut self.slots {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// In-place update `p -= lr * g` over every slot.
    pub fn apply_scaled(&mut self, grads: &GradientRecord<S>, lr: S) -> Result<()> {
        if grads.grads.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "gradient record has {} slots, store has {}",
                grads.grads.len(),
                self.slots.len()
            )));
        }
        for (t, g) in self.slots.iter_mut().zip(&grads.grads) {
            if t.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply gradient",
                    left: t.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for (p, &dg) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * dg;
            }
        }
        Ok(())
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for t in &self.slots {
            t.validate_finite(context)?;
        }
        Ok(())
    }

    /// Add independent U(-scale, scale) noise to every parameter. Turns
    /// an identity-initialized module into a generic random one for
    /// oracle checks and round-trip stress tests.
    pub fn perturb<R: rand::Rng>(&mut self, rng: &mut R, scale: f64) {
        for t in &mut self.slots {
            for v in t.data_mut() {
                *v += S::from_f64_lossy(rng.random_range(-scale..scale));
            }
        }
    }
}

/// Per-slot gradients mirroring a store's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord<S: Scalar = f64> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> GradientRecord<S> {
    /// All-zero gradients shaped like the given store.
    pub fn zeros_like(store: &ParameterStore<S>) -> Self {
        GradientRecord {
            grads: store
                .slots
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: SlotId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: SlotId) -> &mut Tensor<S> {
        &mut self.grads[id.0]
    }

    pub fn num_slots(&self) -> usize {
        self.grads.len()
    }

    /// Concatenated gradients in slot order, matching `ParameterStore::flatten`.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for t in &self.grads {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Elementwise accumulate another record into this one.
    pub fn accumulate(&mut self, other: &GradientRecord<S>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::invalid(
                "gradient records have different slot counts",
            ));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a = a.add(b)?;
        }
        Ok(())
    }

    /// Multiply every gradient by a scalar (batch averaging, clipping).
    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> S {
        let mut acc = S::zero();
        for g in &self.grads {
            for &v in g.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}
