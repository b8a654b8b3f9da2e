//! Affine coupling units and their composition into an invertible stack.
//!
//! One unit splits coordinates by a binary mask: masked coordinates pass
//! through verbatim, free coordinates are scaled by exp(s) and shifted,
//! where s and the shift are functions of the masked part only. That
//! dependency structure makes the Jacobian triangular, so the log-det is
//! just the sum of s over free coordinates, and the inverse is exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskStyle};
use crate::params::ParameterStore;
use crate::resnet::ResidualNet;
use crate::scalar::Scalar;
use crate::tape::{NodeId, StoreLeaves, Tape};
use crate::tensor::Tensor;

/// Smooth bound applied to scale networks: s = BOUND * tanh(raw / BOUND).
pub const SCALE_BOUND: f64 = 5.0;

/// Hard error threshold on |s|; exp(50) is near the f64 overflow cliff.
pub const SCALE_ABS_LIMIT: f64 = 50.0;

/// Function family for a unit's scale or translate map.
///
/// `Residual` is the trained family; `Bounded` wraps it with the smooth
/// scale bound; `Constant` emits a fixed value on every coordinate and
/// exists so tests can pin exact hand-computed outputs.
#[derive(Debug, Clone)]
pub enum CouplingNet {
    Residual(ResidualNet),
    Bounded { net: ResidualNet, limit: f64 },
    Constant { dim: usize, value: f64 },
}

impl CouplingNet {
    pub fn dim(&self) -> usize {
        match self {
            CouplingNet::Residual(net) => net.dim(),
            CouplingNet::Bounded { net, .. } => net.dim(),
            CouplingNet::Constant { dim, .. } => *dim,
        }
    }

    pub fn eval<S: Scalar>(&self, store: &ParameterStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            CouplingNet::Residual(net) => net.forward(store, x),
            CouplingNet::Bounded { net, limit } => {
                let raw = net.forward(store, x)?;
                let inv = S::from_f64_lossy(1.0 / limit);
                let lim = S::from_f64_lossy(*limit);
                Ok(raw.affine(inv, S::zero()).tanh().affine(lim, S::zero()))
            }
            CouplingNet::Constant { dim, value } => {
                Ok(Tensor::full(vec![*dim], S::from_f64_lossy(*value)))
            }
        }
    }

    pub fn eval_taped<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        leaves: &StoreLeaves,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            CouplingNet::Residual(net) => net.forward_taped(tape, leaves, x),
            CouplingNet::Bounded { net, limit } => {
                let raw = net.forward_taped(tape, leaves, x)?;
                let inv = S::from_f64_lossy(1.0 / limit);
                let lim = S::from_f64_lossy(*limit);
                let squashed = tape.affine_const(raw, inv, S::zero());
                let t = tape.tanh(squashed);
                Ok(tape.affine_const(t, lim, S::zero()))
            }
            CouplingNet::Constant { dim, value } => {
                Ok(tape.leaf(Tensor::full(vec![*dim], S::from_f64_lossy(*value))))
            }
        }
    }
}

/// One affine coupling transform.
#[derive(Debug, Clone)]
pub struct MappingUnit {
    mask: BinaryMask,
    scale: CouplingNet,
    translate: CouplingNet,
}

/// Reject scales that would push exp() toward overflow. Masked
/// coordinates never use their scale value, so only free ones count.
fn check_scale<S: Scalar>(s: &Tensor<S>, mask: &BinaryMask) -> Result<()> {
    let mut worst = 0.0f64;
    for (&bit, &v) in mask.bits().iter().zip(s.data()) {
        if bit {
            continue;
        }
        let v = v.to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::non_finite("coupling scale"));
        }
        worst = worst.max(v.abs());
    }
    if worst > SCALE_ABS_LIMIT {
        return Err(Error::ScaleOverflow {
            unit: 0,
            max_abs: worst,
        });
    }
    Ok(())
}

impl MappingUnit {
    pub fn new(mask: BinaryMask, scale: CouplingNet, translate: CouplingNet) -> Result<Self> {
        if scale.dim() != mask.dim() || translate.dim() != mask.dim() {
            return Err(Error::invalid(format!(
                "unit dimensions disagree: mask {}, scale {}, translate {}",
                mask.dim(),
                scale.dim(),
                translate.dim()
            )));
        }
        Ok(MappingUnit {
            mask,
            scale,
            translate,
        })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn scale_net(&self) -> &CouplingNet {
        &self.scale
    }

    pub fn translate_net(&self) -> &CouplingNet {
        &self.translate
    }

    fn masked_input<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        let data = self
            .mask
            .bits()
            .iter()
            .zip(x.data())
            .map(|(&m, &v)| if m { v } else { S::zero() })
            .collect();
        Tensor::from_vec(data)
    }

    /// Forward transform and its log-det contribution.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, S)> {
        if x.len() != self.mask.dim() {
            return Err(Error::ShapeMismatch {
                op: "unit forward",
                left: vec![self.mask.dim()],
                right: x.shape().to_vec(),
            });
        }
        let masked = self.masked_input(x);
        let s = self.scale.eval(store, &masked)?;
        let t = self.translate.eval(store, &masked)?;
        check_scale(&s, &self.mask)?;

        let mut out = x.clone();
        let mut log_det = S::zero();
        for i in 0..x.len() {
            if self.mask.bits()[i] {
                // Pass-through coordinate: copied above, nothing to add.
                log_det += S::zero();
            } else {
                out[i] = x[i] * s[i].exp() + t[i];
                log_det += s[i];
            }
        }
        out.validate_finite("unit forward output")?;
        Ok((out, log_det))
    }

    /// Exact inverse of `forward`.
    pub fn inverse<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        y: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if y.len() != self.mask.dim() {
            return Err(Error::ShapeMismatch {
                op: "unit inverse",
                left: vec![self.mask.dim()],
                right: y.shape().to_vec(),
            });
        }
        // The masked part of y equals the masked part of x, so the nets
        // see the same inputs as in the forward pass.
        let masked = self.masked_input(y);
        let s = self.scale.eval(store, &masked)?;
        let t = self.translate.eval(store, &masked)?;
        check_scale(&s, &self.mask)?;

        let mut out = y.clone();
        for i in 0..y.len() {
            if !self.mask.bits()[i] {
                out[i] = (y[i] - t[i]) * (-s[i]).exp();
            }
        }
        out.validate_finite("unit inverse output")?;
        Ok(out)
    }

    /// Tape-recorded forward; returns (output node, log-det scalar node).
    pub fn forward_taped<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        leaves: &StoreLeaves,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let bits = self.mask.bits();
        let masked = tape.keep(bits, x)?;
        let s = self.scale.eval_taped(tape, leaves, masked)?;
        let t = self.translate.eval_taped(tape, leaves, masked)?;
        check_scale(tape.value(s), &self.mask)?;

        let es = tape.exp(s);
        let scaled = tape.mul(x, es)?;
        let shifted = tape.add(scaled, t)?;
        let y = tape.select(bits, x, shifted)?;

        let free_bits: Vec<bool> = bits.iter().map(|&b| !b).collect();
        let s_free = tape.keep(&free_bits, s)?;
        let log_det = tape.sum(s_free);
        Ok((y, log_det))
    }
}

/// Composition of mapping units applied in order, sharing one store.
#[derive(Debug, Clone)]
pub struct FlowStack<S: Scalar = f64> {
    dim: usize,
    units: Vec<MappingUnit>,
    store: ParameterStore<S>,
}

/// Architecture of a default stack. `with_dim` fills in the standard
/// configuration: 10 units, 2 residual blocks, width 32, half masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub dim: usize,
    pub n_units: usize,
    pub blocks: usize,
    pub width: usize,
    pub mask_style: MaskStyle,
}

impl StackShape {
    pub fn with_dim(dim: usize) -> Self {
        StackShape {
            dim,
            n_units: 10,
            blocks: 2,
            width: 32,
            mask_style: MaskStyle::Half,
        }
    }
}

impl<S: Scalar> FlowStack<S> {
    /// Assemble a stack from explicit units. Masks must be non-degenerate
    /// and consecutive units must use complementary masks, so every
    /// coordinate gets transformed somewhere in the stack.
    pub fn from_units(
        dim: usize,
        units: Vec<MappingUnit>,
        store: ParameterStore<S>,
    ) -> Result<Self> {
        for (i, unit) in units.iter().enumerate() {
            if unit.mask().dim() != dim {
                return Err(Error::invalid(format!(
                    "unit {i} has dimension {}, stack has {dim}",
                    unit.mask().dim()
                )));
            }
            if unit.mask().is_degenerate() {
                return Err(Error::invalid(format!(
                    "unit {i} has a degenerate mask (all or nothing passes through)"
                )));
            }
            if i > 0 && units[i - 1].mask().complement() != *unit.mask() {
                return Err(Error::invalid(format!(
                    "unit {i} mask must complement unit {} mask",
                    i - 1
                )));
            }
        }
        Ok(FlowStack { dim, units, store })
    }

    /// Standard stack: alternating masks, bounded-scale residual nets,
    /// identity at initialization (final layers start at zero).
    pub fn make_default<R: Rng>(shape: &StackShape, rng: &mut R) -> Result<Self> {
        if shape.dim < 2 {
            return Err(Error::invalid(format!(
                "stack dimension must be at least 2, got {}",
                shape.dim
            )));
        }
        if shape.n_units == 0 {
            return Err(Error::invalid("stack needs at least one unit"));
        }
        let base = BinaryMask::styled(shape.mask_style, shape.dim)?;
        let mut store = ParameterStore::new();
        let mut units = Vec::with_capacity(shape.n_units);
        for i in 0..shape.n_units {
            let mask = if i % 2 == 0 {
                base.clone()
            } else {
                base.complement()
            };
            let scale_net =
                ResidualNet::register(&mut store, shape.dim, shape.width, shape.blocks, rng);
            let translate_net =
                ResidualNet::register(&mut store, shape.dim, shape.width, shape.blocks, rng);
            units.push(MappingUnit::new(
                mask,
                CouplingNet::Bounded {
                    net: scale_net,
                    limit: SCALE_BOUND,
                },
                CouplingNet::Residual(translate_net),
            )?);
        }
        FlowStack::from_units(shape.dim, units, store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn units(&self) -> &[MappingUnit] {
        &self.units
    }

    pub fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    /// Apply all units in declared order; log-dets add up.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, S)> {
        x.validate_finite("stack forward input")?;
        let mut y = x.clone();
        let mut log_det = S::zero();
        for (i, unit) in self.units.iter().enumerate() {
            let (next, ld) = unit.forward(&self.store, &y).map_err(|e| e.in_unit(i))?;
            y = next;
            log_det += ld;
        }
        Ok((y, log_det))
    }

    /// Apply unit inverses in reverse order.
    pub fn inverse(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        z.validate_finite("stack inverse input")?;
        let mut x = z.clone();
        for (i, unit) in self.units.iter().enumerate().rev() {
            x = unit.inverse(&self.store, &x).map_err(|e| e.in_unit(i))?;
        }
        Ok(x)
    }

    /// Tape-recorded forward; returns (output node, total log-det node).
    pub fn forward_taped(
        &self,
        tape: &mut Tape<S>,
        leaves: &StoreLeaves,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut y = x;
        let mut log_det = tape.leaf(Tensor::scalar(S::zero()));
        for (i, unit) in self.units.iter().enumerate() {
            let (next, ld) = unit
                .forward_taped(tape, leaves, y)
                .map_err(|e| e.in_unit(i))?;
            y = next;
            log_det = tape.add(log_det, ld)?;
        }
        Ok((y, log_det))
    }
}
