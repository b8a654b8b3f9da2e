//! Residual feedforward networks used as the scale and translate
//! functions inside coupling units.
//!
//! Layout: R blocks of `x + W2 relu(W1 x + b1) + b2` (W1: width-by-dim,
//! W2: dim-by-width), then one final dim-by-dim linear layer. The final
//! layer starts at zero, so a freshly initialized net is identically zero
//! and the coupling unit around it starts as the identity map.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParameterStore, SlotId};
use crate::scalar::Scalar;
use crate::tape::{NodeId, StoreLeaves, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockSlots {
    w1: SlotId,
    b1: SlotId,
    w2: SlotId,
    b2: SlotId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualNet {
    dim: usize,
    width: usize,
    blocks: Vec<BlockSlots>,
    final_w: SlotId,
    final_b: SlotId,
}

/// Uniform init on +-1/sqrt(fan_in); fan-in is the column count.
fn uniform_weights<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<S> {
    let scale = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64_lossy(rng.random_range(-scale..=scale)))
        .collect();
    Tensor::from_shape_vec(vec![rows, cols], data).expect("sized to match")
}

impl ResidualNet {
    /// Register a net with random hidden weights and a zero final layer.
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParameterStore<S>,
        dim: usize,
        width: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| BlockSlots {
                w1: store.register(uniform_weights(rng, width, dim)),
                b1: store.register(Tensor::zeros(vec![width])),
                w2: store.register(uniform_weights(rng, dim, width)),
                b2: store.register(Tensor::zeros(vec![dim])),
            })
            .collect();
        ResidualNet {
            dim,
            width,
            blocks,
            final_w: store.register(Tensor::zeros(vec![dim, dim])),
            final_b: store.register(Tensor::zeros(vec![dim])),
        }
    }

    /// Register a net with every parameter zero (test scaffolding).
    pub fn register_zero<S: Scalar>(
        store: &mut ParameterStore<S>,
        dim: usize,
        width: usize,
        n_blocks: usize,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| BlockSlots {
                w1: store.register(Tensor::zeros(vec![width, dim])),
                b1: store.register(Tensor::zeros(vec![width])),
                w2: store.register(Tensor::zeros(vec![dim, width])),
                b2: store.register(Tensor::zeros(vec![dim])),
            })
            .collect();
        ResidualNet {
            dim,
            width,
            blocks,
            final_w: store.register(Tensor::zeros(vec![dim, dim])),
            final_b: store.register(Tensor::zeros(vec![dim])),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for block in &self.blocks {
            let pre = store.get(block.w1).matvec(&h)?.add(store.get(block.b1))?;
            let hidden = pre.relu();
            let update = store
                .get(block.w2)
                .matvec(&hidden)?
                .add(store.get(block.b2))?;
            h = h.add(&update)?;
        }
        store
            .get(self.final_w)
            .matvec(&h)?
            .add(store.get(self.final_b))
    }

    /// Tape-recorded twin of `forward`; performs the same arithmetic in
    /// the same order so values agree bit-for-bit.
    pub fn forward_taped<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        leaves: &StoreLeaves,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for block in &self.blocks {
            let mv1 = tape.matvec(leaves.node(block.w1), h)?;
            let pre = tape.add(mv1, leaves.node(block.b1))?;
            let hidden = tape.relu(pre);
            let mv2 = tape.matvec(leaves.node(block.w2), hidden)?;
            let update = tape.add(mv2, leaves.node(block.b2))?;
            h = tape.add(h, update)?;
        }
        let mv = tape.matvec(leaves.node(self.final_w), h)?;
        tape.add(mv, leaves.node(self.final_b))
    }
}
