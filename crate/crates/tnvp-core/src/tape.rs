//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Values are computed eagerly as ops are recorded, so a `NodeId` always
//! has a concrete tensor behind it. `backward` sweeps the tape once in
//! reverse and accumulates adjoints per node; accumulation order is the
//! fixed reverse creation order, which keeps gradients bit-deterministic
//! across runs.
//!
//! The op set is exactly what the flow and the latent transition need;
//! there is no broadcasting and no implicit reshapes.

use crate::error::{Error, Result};
use crate::params::{GradientRecord, ParameterStore, SlotId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value on the tape. Only the owning tape can mint these,
/// so an op's inputs always precede it in creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Elementwise `mul * x + add` with scalar constants. The additive
    /// term only affects the eagerly computed value, not the adjoint.
    AffineConst {
        input: NodeId,
        mul: S,
    },
    MatVec {
        matrix: NodeId,
        vector: NodeId,
    },
    /// Per-coordinate choice: `out[i] = mask[i] ? on_true[i] : on_false[i]`.
    Select {
        mask: Vec<bool>,
        on_true: NodeId,
        on_false: NodeId,
    },
    /// `out[i] = mask[i] ? input[i] : 0`.
    Keep {
        mask: Vec<bool>,
        input: NodeId,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record an input value (parameter or data). Gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).neg();
        self.push(Op::Neg(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).exp();
        self.push(Op::Exp(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).tanh();
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).relu();
        self.push(Op::Relu(a), value)
    }

    pub fn affine_const(&mut self, a: NodeId, mul: S, add: S) -> NodeId {
        let value = self.value(a).affine(mul, add);
        self.push(Op::AffineConst { input: a, mul }, value)
    }

    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        let value = self.value(matrix).matvec(self.value(vector))?;
        Ok(self.push(Op::MatVec { matrix, vector }, value))
    }

    /// Per-coordinate selection. Where the mask bit is set the output is a
    /// verbatim copy of `on_true`, so pass-through coordinates stay
    /// bit-identical (no `x + 0 * u` detour that could flip signed zeros).
    pub fn select(&mut self, mask: &[bool], on_true: NodeId, on_false: NodeId) -> Result<NodeId> {
        let t = self.value(on_true);
        let f = self.value(on_false);
        if t.shape() != f.shape() || t.len() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "select",
                left: t.shape().to_vec(),
                right: f.shape().to_vec(),
            });
        }
        let data = mask
            .iter()
            .zip(t.data().iter().zip(f.data()))
            .map(|(&m, (&a, &b))| if m { a } else { b })
            .collect();
        let value = Tensor::from_shape_vec(t.shape().to_vec(), data)?;
        Ok(self.push(
            Op::Select {
                mask: mask.to_vec(),
                on_true,
                on_false,
            },
            value,
        ))
    }

    /// Zero out coordinates whose mask bit is unset.
    pub fn keep(&mut self, mask: &[bool], input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.len() != mask.len() {
            return Err(Error::invalid(format!(
                "mask has {} bits, tensor has {} elements",
                mask.len(),
                x.len()
            )));
        }
        let data = mask
            .iter()
            .zip(x.data())
            .map(|(&m, &v)| if m { v } else { S::zero() })
            .collect();
        let value = Tensor::from_shape_vec(x.shape().to_vec(), data)?;
        Ok(self.push(
            Op::Keep {
                mask: mask.to_vec(),
                input,
            },
            value,
        ))
    }

    /// Reduce to a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Reverse sweep from a scalar output. Returns the adjoint of every
    /// node; callers pick out the leaves they care about.
    pub fn backward(&self, output: NodeId) -> Result<Backprop<S>> {
        if self.value(output).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Tensor<S>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[output.0].data_mut()[0] = S::one();

        for i in (0..=output.0).rev() {
            let g = grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut grads[a.0], S::one(), g.data());
                    axpy(&mut grads[b.0], S::one(), g.data());
                }
                Op::Sub(a, b) => {
                    axpy(&mut grads[a.0], S::one(), g.data());
                    axpy(&mut grads[b.0], -S::one(), g.data());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    mul_acc(&mut grads[a.0], g.data(), bv.data());
                    mul_acc(&mut grads[b.0], g.data(), av.data());
                }
                Op::Neg(a) => {
                    axpy(&mut grads[a.0], -S::one(), g.data());
                }
                Op::Exp(a) => {
                    // d exp(x) = exp(x) dx; reuse the stored output.
                    let y = self.nodes[i].value.clone();
                    mul_acc(&mut grads[a.0], g.data(), y.data());
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.clone();
                    let dst = &mut grads[a.0];
                    for ((d, &gv), &yv) in dst.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * (S::one() - yv * yv);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).clone();
                    let dst = &mut grads[a.0];
                    for ((d, &gv), &xv) in dst.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if xv > S::zero() {
                            *d += gv;
                        }
                    }
                }
                Op::AffineConst { input, mul } => {
                    axpy(&mut grads[input.0], *mul, g.data());
                }
                Op::MatVec { matrix, vector } => {
                    let mshape = self.value(*matrix).shape().to_vec();
                    let (m, n) = (mshape[0], mshape[1]);
                    let mval = self.value(*matrix).clone();
                    let vval = self.value(*vector).clone();
                    {
                        let dm = grads[matrix.0].data_mut();
                        for i_row in 0..m {
                            let gi = g.data()[i_row];
                            for j in 0..n {
                                dm[i_row * n + j] += gi * vval.data()[j];
                            }
                        }
                    }
                    {
                        let dv = grads[vector.0].data_mut();
                        for i_row in 0..m {
                            let gi = g.data()[i_row];
                            let row = &mval.data()[i_row * n..(i_row + 1) * n];
                            for (d, &mij) in dv.iter_mut().zip(row) {
                                *d += gi * mij;
                            }
                        }
                    }
                }
                Op::Select {
                    mask,
                    on_true,
                    on_false,
                } => {
                    let mask = mask.clone();
                    {
                        let dt = grads[on_true.0].data_mut();
                        for ((d, &gv), &m) in dt.iter_mut().zip(g.data()).zip(&mask) {
                            if m {
                                *d += gv;
                            }
                        }
                    }
                    {
                        let df = grads[on_false.0].data_mut();
                        for ((d, &gv), &m) in df.iter_mut().zip(g.data()).zip(&mask) {
                            if !m {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Keep { mask, input } => {
                    let mask = mask.clone();
                    let dst = grads[input.0].data_mut();
                    for ((d, &gv), &m) in dst.iter_mut().zip(g.data()).zip(&mask) {
                        if m {
                            *d += gv;
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    for d in grads[a.0].data_mut() {
                        *d += gv;
                    }
                }
            }
        }
        Ok(Backprop { grads })
    }
}

/// `dst += coeff * src`, elementwise.
fn axpy<S: Scalar>(dst: &mut Tensor<S>, coeff: S, src: &[S]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += coeff * s;
    }
}

/// `dst += a * b`, elementwise.
fn mul_acc<S: Scalar>(dst: &mut Tensor<S>, a: &[S], b: &[S]) {
    for ((d, &x), &y) in dst.data_mut().iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

/// Adjoints for every node of a tape, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Backprop<S: Scalar = f64> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Backprop<S> {
    pub fn grad(&self, id: NodeId) -> &Tensor<S> {
        &self.grads[id.0]
    }
}

/// One tape leaf per slot of a parameter store, in slot order.
///
/// Registering a store's slots once per tape means every use of a
/// parameter shares the same node, so its adjoint accumulates across a
/// whole mini-batch in one backward sweep.
#[derive(Debug)]
pub struct StoreLeaves {
    nodes: Vec<NodeId>,
}

impl StoreLeaves {
    pub fn register<S: Scalar>(tape: &mut Tape<S>, store: &ParameterStore<S>) -> Self {
        StoreLeaves {
            nodes: store.slots().iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    pub fn node(&self, id: SlotId) -> NodeId {
        self.nodes[id.index()]
    }

    /// Collect this store's slot adjoints out of a finished backward pass.
    pub fn extract<S: Scalar>(
        &self,
        back: &Backprop<S>,
        store: &ParameterStore<S>,
    ) -> GradientRecord<S> {
        let mut record = GradientRecord::zeros_like(store);
        for (i, leaf) in self.nodes.iter().enumerate() {
            *record.get_mut(SlotId(i)) = back.grad(*leaf).clone();
        }
        record
    }
}

/// Run a taped computation over one parameter store and return the scalar
/// value plus gradients for every slot.
///
/// The builder receives the registered leaves and must return the scalar
/// output node.
pub fn eval_with_gradients<S: Scalar>(
    store: &ParameterStore<S>,
    build: impl FnOnce(&mut Tape<S>, &StoreLeaves) -> Result<NodeId>,
) -> Result<(S, GradientRecord<S>)> {
    let mut tape = Tape::new();
    let leaves = StoreLeaves::register(&mut tape, store);
    let output = build(&mut tape, &leaves)?;
    let value = tape.value(output).item();
    let back = tape.backward(output)?;
    Ok((value, leaves.extract(&back, store)))
}
