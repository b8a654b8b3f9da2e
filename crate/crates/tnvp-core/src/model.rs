//! The sequence model: two flow stacks wrapped around an affine
//! latent-to-latent transition with unit Gaussian innovation noise.
//!
//! The previous stage's observation is encoded by F1, the current one by
//! F2. Conditioned on the previous stage, the current latent is Gaussian
//! with mean `W z_prev + b` and identity covariance, so the conditional
//! density of the observation is that Gaussian evaluated at `F2(x_t)`
//! times F2's volume correction. F1's own log-det never enters: the
//! previous observation is conditioned on, not modeled.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coupling::{FlowStack, StackShape};
use crate::error::{Error, Result};
use crate::params::{GradientRecord, ParameterStore, SlotId};
use crate::scalar::Scalar;
use crate::tape::{NodeId, StoreLeaves, Tape};
use crate::tensor::Tensor;

/// ln(2*pi), the normalizing constant of the unit Gaussian.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Shape of the latent transition's weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionStructure {
    Full,
    Diagonal,
}

impl TransitionStructure {
    pub fn code(self) -> u32 {
        match self {
            TransitionStructure::Full => 0,
            TransitionStructure::Diagonal => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(TransitionStructure::Full),
            1 => Ok(TransitionStructure::Diagonal),
            other => Err(Error::invalid(format!(
                "unknown transition structure code {other}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransitionStructure::Full => "full",
            TransitionStructure::Diagonal => "diagonal",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(TransitionStructure::Full),
            "diagonal" => Ok(TransitionStructure::Diagonal),
            other => Err(Error::invalid(format!(
                "unknown transition structure {other:?} (expected \"full\" or \"diagonal\")"
            ))),
        }
    }
}

/// Affine map between consecutive latents: `z -> W z + b`.
///
/// Initialized to the identity map (W = I, b = 0): the natural prior for
/// short-term stage changes is "no change".
#[derive(Debug, Clone)]
pub struct TemporalTransition<S: Scalar = f64> {
    dim: usize,
    structure: TransitionStructure,
    weight: SlotId,
    bias: SlotId,
    store: ParameterStore<S>,
}

impl<S: Scalar> TemporalTransition<S> {
    pub fn new(dim: usize, structure: TransitionStructure) -> Self {
        let mut store = ParameterStore::new();
        let weight = match structure {
            TransitionStructure::Full => {
                let mut eye = Tensor::zeros(vec![dim, dim]);
                for i in 0..dim {
                    eye[i * dim + i] = S::one();
                }
                store.register(eye)
            }
            TransitionStructure::Diagonal => store.register(Tensor::full(vec![dim], S::one())),
        };
        let bias = store.register(Tensor::zeros(vec![dim]));
        TemporalTransition {
            dim,
            structure,
            weight,
            bias,
            store,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn structure(&self) -> TransitionStructure {
        self.structure
    }

    pub fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    /// The weight as a dense matrix (diagonal structure is expanded).
    pub fn weight_matrix(&self) -> Tensor<S> {
        match self.structure {
            TransitionStructure::Full => self.store.get(self.weight).clone(),
            TransitionStructure::Diagonal => {
                let diag = self.store.get(self.weight);
                let mut m = Tensor::zeros(vec![self.dim, self.dim]);
                for i in 0..self.dim {
                    m[i * self.dim + i] = diag[i];
                }
                m
            }
        }
    }

    pub fn bias(&self) -> &Tensor<S> {
        self.store.get(self.bias)
    }

    pub fn apply(&self, z_prev: &Tensor<S>) -> Result<Tensor<S>> {
        if z_prev.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "transition apply",
                left: vec![self.dim],
                right: z_prev.shape().to_vec(),
            });
        }
        match self.structure {
            TransitionStructure::Full => self
                .store
                .get(self.weight)
                .matvec(z_prev)?
                .add(self.store.get(self.bias)),
            TransitionStructure::Diagonal => self
                .store
                .get(self.weight)
                .mul(z_prev)?
                .add(self.store.get(self.bias)),
        }
    }

    pub fn apply_taped(
        &self,
        tape: &mut Tape<S>,
        leaves: &StoreLeaves,
        z_prev: NodeId,
    ) -> Result<NodeId> {
        let w = leaves.node(self.weight);
        let b = leaves.node(self.bias);
        let wz = match self.structure {
            TransitionStructure::Full => tape.matvec(w, z_prev)?,
            TransitionStructure::Diagonal => tape.mul(w, z_prev)?,
        };
        tape.add(wz, b)
    }
}

/// Log-density of the standard normal at `v`: -(D/2) ln(2pi) - ||v||^2/2.
pub fn standard_normal_logpdf<S: Scalar>(v: &Tensor<S>) -> S {
    let ssq = v.dot(v).expect("same tensor");
    let add = S::from_f64_lossy(-0.5 * v.len() as f64 * LN_2PI);
    S::from_f64_lossy(-0.5) * ssq + add
}

/// Tape twin of [`standard_normal_logpdf`]; same arithmetic, same order.
pub fn standard_normal_logpdf_taped<S: Scalar>(tape: &mut Tape<S>, v: NodeId) -> Result<NodeId> {
    let d = tape.value(v).len();
    let sq = tape.mul(v, v)?;
    let ssq = tape.sum(sq);
    let add = S::from_f64_lossy(-0.5 * d as f64 * LN_2PI);
    Ok(tape.affine_const(ssq, S::from_f64_lossy(-0.5), add))
}

/// Noise policy for synthesis: the conditional mode, or a seeded draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Zero,
    Seeded(u64),
}

/// One synthesis step with its intermediate latents exposed.
#[derive(Debug, Clone)]
pub struct SynthesisStep<S: Scalar = f64> {
    /// Encoded previous observation, `F1(x_prev)`.
    pub latent_prev: Tensor<S>,
    /// Latent the output decodes from: `W latent_prev + b` plus noise.
    pub latent_target: Tensor<S>,
    /// The synthesized next-stage observation, `F2^-1(latent_target)`.
    pub x_next: Tensor<S>,
}

/// Tape leaves for all three parameter groups of a model.
#[derive(Debug)]
pub struct ModelLeaves {
    pub f1: StoreLeaves,
    pub f2: StoreLeaves,
    pub transition: StoreLeaves,
}

/// Gradients for all three parameter groups, in model order.
#[derive(Debug)]
pub struct ModelGradients<S: Scalar = f64> {
    pub f1: GradientRecord<S>,
    pub f2: GradientRecord<S>,
    pub transition: GradientRecord<S>,
}

impl<S: Scalar> ModelGradients<S> {
    pub fn global_norm(&self) -> S {
        let mut acc = S::zero();
        for record in [&self.f1, &self.f2, &self.transition] {
            let n = record.global_norm();
            acc += n * n;
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        self.f1.scale(factor);
        self.f2.scale(factor);
        self.transition.scale(factor);
    }
}

/// Two flow stacks around one affine latent transition.
#[derive(Debug, Clone)]
pub struct TNVPModel<S: Scalar = f64> {
    f1: FlowStack<S>,
    f2: FlowStack<S>,
    transition: TemporalTransition<S>,
}

/// Architecture of a default model: both stacks share one shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub stack: StackShape,
    pub w_structure: TransitionStructure,
}

impl ModelShape {
    pub fn with_dim(dim: usize) -> Self {
        ModelShape {
            stack: StackShape::with_dim(dim),
            w_structure: TransitionStructure::Full,
        }
    }
}

impl<S: Scalar> TNVPModel<S> {
    pub fn new(
        f1: FlowStack<S>,
        f2: FlowStack<S>,
        transition: TemporalTransition<S>,
    ) -> Result<Self> {
        if f1.dim() != f2.dim() || f1.dim() != transition.dim() {
            return Err(Error::invalid(format!(
                "model parts disagree on dimension: F1 {}, F2 {}, transition {}",
                f1.dim(),
                f2.dim(),
                transition.dim()
            )));
        }
        Ok(TNVPModel { f1, f2, transition })
    }

    /// Default model: fresh identity stacks (independent parameters, one
    /// RNG consumed in F1-then-F2 order) and an identity transition.
    pub fn make_default<R: Rng>(shape: &ModelShape, rng: &mut R) -> Result<Self> {
        let f1 = FlowStack::make_default(&shape.stack, rng)?;
        let f2 = FlowStack::make_default(&shape.stack, rng)?;
        let transition = TemporalTransition::new(shape.stack.dim, shape.w_structure);
        TNVPModel::new(f1, f2, transition)
    }

    pub fn dim(&self) -> usize {
        self.f1.dim()
    }

    pub fn f1(&self) -> &FlowStack<S> {
        &self.f1
    }

    pub fn f2(&self) -> &FlowStack<S> {
        &self.f2
    }

    pub fn transition(&self) -> &TemporalTransition<S> {
        &self.transition
    }

    pub fn f1_mut(&mut self) -> &mut FlowStack<S> {
        &mut self.f1
    }

    pub fn f2_mut(&mut self) -> &mut FlowStack<S> {
        &mut self.f2
    }

    pub fn transition_mut(&mut self) -> &mut TemporalTransition<S> {
        &mut self.transition
    }

    pub fn num_params(&self) -> usize {
        self.f1.store().num_params()
            + self.f2.store().num_params()
            + self.transition.store().num_params()
    }

    /// All parameters as one vector, in fixed group order F1, F2,
    /// transition. This order is the serialization and checksum order.
    pub fn flatten_params(&self) -> Vec<S> {
        let mut out = self.f1.store().flatten();
        out.extend(self.f2.store().flatten());
        out.extend(self.transition.store().flatten());
        out
    }

    pub fn unflatten_params(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat vector has {} values, model holds {}",
                flat.len(),
                self.num_params()
            )));
        }
        let n1 = self.f1.store().num_params();
        let n2 = self.f2.store().num_params();
        self.f1.store_mut().unflatten(&flat[..n1])?;
        self.f2.store_mut().unflatten(&flat[n1..n1 + n2])?;
        self.transition.store_mut().unflatten(&flat[n1 + n2..])
    }

    /// Gaussian log-density of the current latent given the previous one.
    pub fn conditional_latent_logpdf(&self, z_t: &Tensor<S>, z_prev: &Tensor<S>) -> Result<S> {
        let mean = self.transition.apply(z_prev)?;
        let resid = z_t.sub(&mean)?;
        Ok(standard_normal_logpdf(&resid))
    }

    /// Joint log-density of (z_prev, z_t): unit-Gaussian marginal on the
    /// previous latent times the conditional on the current one.
    pub fn joint_latent_logpdf(&self, z_t: &Tensor<S>, z_prev: &Tensor<S>) -> Result<S> {
        Ok(standard_normal_logpdf(z_prev) + self.conditional_latent_logpdf(z_t, z_prev)?)
    }

    /// Exact conditional log-likelihood of the observation pair.
    pub fn conditional_loglik(&self, x_t: &Tensor<S>, x_prev: &Tensor<S>) -> Result<S> {
        let (z_prev, _) = self.f1.forward(x_prev)?;
        let (z_t, log_det) = self.f2.forward(x_t)?;
        Ok(self.conditional_latent_logpdf(&z_t, &z_prev)? + log_det)
    }

    /// Register all three parameter groups on a tape.
    pub fn register_leaves(&self, tape: &mut Tape<S>) -> ModelLeaves {
        ModelLeaves {
            f1: StoreLeaves::register(tape, self.f1.store()),
            f2: StoreLeaves::register(tape, self.f2.store()),
            transition: StoreLeaves::register(tape, self.transition.store()),
        }
    }

    /// Tape twin of [`Self::conditional_loglik`] over already-taped
    /// observation nodes; performs identical arithmetic.
    pub fn conditional_loglik_taped(
        &self,
        tape: &mut Tape<S>,
        leaves: &ModelLeaves,
        x_t: NodeId,
        x_prev: NodeId,
    ) -> Result<NodeId> {
        let (z_prev, _) = self.f1.forward_taped(tape, &leaves.f1, x_prev)?;
        let (z_t, log_det) = self.f2.forward_taped(tape, &leaves.f2, x_t)?;
        let mean = self
            .transition
            .apply_taped(tape, &leaves.transition, z_prev)?;
        let resid = tape.sub(z_t, mean)?;
        let logpdf = standard_normal_logpdf_taped(tape, resid)?;
        tape.add(logpdf, log_det)
    }

    /// Collect per-group gradients out of a finished backward pass.
    pub fn extract_gradients(
        &self,
        leaves: &ModelLeaves,
        back: &crate::tape::Backprop<S>,
    ) -> ModelGradients<S> {
        ModelGradients {
            f1: leaves.f1.extract(back, self.f1.store()),
            f2: leaves.f2.extract(back, self.f2.store()),
            transition: leaves.transition.extract(back, self.transition.store()),
        }
    }

    /// One generation step with an explicit noise source. `None` uses the
    /// conditional mode (zero innovation).
    pub fn synthesize_step<R: Rng>(
        &self,
        x_prev: &Tensor<S>,
        rng: Option<&mut R>,
    ) -> Result<SynthesisStep<S>> {
        let (latent_prev, _) = self.f1.forward(x_prev)?;
        let mut latent_target = self.transition.apply(&latent_prev)?;
        if let Some(rng) = rng {
            for v in latent_target.data_mut() {
                let draw: f64 = rng.sample(StandardNormal);
                *v += S::from_f64_lossy(draw);
            }
        }
        let x_next = self.f2.inverse(&latent_target)?;
        Ok(SynthesisStep {
            latent_prev,
            latent_target,
            x_next,
        })
    }

    /// Generate the next-stage observation under a noise policy.
    pub fn synthesize_next(&self, x_prev: &Tensor<S>, noise: Noise) -> Result<Tensor<S>> {
        let step = match noise {
            Noise::Zero => self.synthesize_step::<ChaCha8Rng>(x_prev, None)?,
            Noise::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.synthesize_step(x_prev, Some(&mut rng))?
            }
        };
        Ok(step.x_next)
    }
}

/// Run a chain of models, each consuming the previous stage's output.
/// With seeded noise, one generator is drawn from sequentially across
/// stages, so the whole chain is a pure function of the seed.
pub fn synthesize_chain<S: Scalar>(
    models: &[&TNVPModel<S>],
    x0: &Tensor<S>,
    noise: Noise,
) -> Result<Vec<Tensor<S>>> {
    for (i, m) in models.iter().enumerate() {
        if m.dim() != x0.len() {
            return Err(Error::invalid(format!(
                "chain stage {i} has dimension {}, input has {}",
                m.dim(),
                x0.len()
            )));
        }
    }
    let mut rng = match noise {
        Noise::Zero => None,
        Noise::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut outputs = Vec::with_capacity(models.len());
    let mut current = x0.clone();
    for model in models {
        let step = model.synthesize_step(&current, rng.as_mut())?;
        current = step.x_next.clone();
        outputs.push(step.x_next);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{CouplingNet, MappingUnit};
    use crate::mask::BinaryMask;

    fn identity_model(dim: usize) -> TNVPModel {
        let f1 = FlowStack::from_units(dim, vec![], ParameterStore::new()).unwrap();
        let f2 = FlowStack::from_units(dim, vec![], ParameterStore::new()).unwrap();
        TNVPModel::new(
            f1,
            f2,
            TemporalTransition::new(dim, TransitionStructure::Full),
        )
        .unwrap()
    }

    fn scaling_model(dim: usize, s: f64, t: f64) -> TNVPModel {
        let unit = MappingUnit::new(
            BinaryMask::half(dim).unwrap(),
            CouplingNet::Constant { dim, value: s },
            CouplingNet::Constant { dim, value: t },
        )
        .unwrap();
        let f1 = FlowStack::from_units(dim, vec![], ParameterStore::new()).unwrap();
        let f2 = FlowStack::from_units(dim, vec![unit], ParameterStore::new()).unwrap();
        let mut model = TNVPModel::new(
            f1,
            f2,
            TemporalTransition::new(dim, TransitionStructure::Full),
        )
        .unwrap();
        // Zero transition: conditional reduces to a standard normal.
        let zeros = vec![0.0; model.transition.store().num_params()];
        model.transition.store_mut().unflatten(&zeros).unwrap();
        model
    }

    #[test]
    fn transition_identity_and_zero_cases() {
        let t: TemporalTransition = TemporalTransition::new(2, TransitionStructure::Full);
        let z = Tensor::from_vec(vec![1.5, -2.0]);
        assert_eq!(t.apply(&z).unwrap().data(), z.data());

        let mut t = t;
        t.store_mut()
            .unflatten(&[0.0, 0.0, 0.0, 0.0, 3.0, -1.0])
            .unwrap();
        assert_eq!(t.apply(&z).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn transition_matches_hand_matvec() {
        // W = [[1,2],[3,4]], b = [1,1], z = [1,1] -> [4, 8].
        let mut t: TemporalTransition = TemporalTransition::new(2, TransitionStructure::Full);
        t.store_mut()
            .unflatten(&[1.0, 2.0, 3.0, 4.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(
            t.apply(&Tensor::from_vec(vec![1.0, 1.0])).unwrap().data(),
            &[4.0, 8.0]
        );
    }

    #[test]
    fn diagonal_structure_scales_coordinatewise() {
        let mut t: TemporalTransition = TemporalTransition::new(3, TransitionStructure::Diagonal);
        t.store_mut()
            .unflatten(&[2.0, 3.0, 4.0, 0.1, 0.2, 0.3])
            .unwrap();
        let out = t.apply(&Tensor::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[2.1, 3.2, 4.3]);
        let m = t.weight_matrix();
        assert_eq!(m.shape(), &[3, 3]);
        assert_eq!(m.data(), &[2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn transition_is_exactly_affine() {
        let mut t: TemporalTransition = TemporalTransition::new(2, TransitionStructure::Full);
        t.store_mut()
            .unflatten(&[0.3, -1.2, 0.8, 0.5, 2.0, -0.7])
            .unwrap();
        let z1 = Tensor::from_vec(vec![0.4, -1.1]);
        let z2 = Tensor::from_vec(vec![-2.3, 0.9]);
        // G(z1) - G(z2) = W (z1 - z2): bias cancels exactly.
        let lhs = t.apply(&z1).unwrap().sub(&t.apply(&z2).unwrap()).unwrap();
        let rhs = t.weight_matrix().matvec(&z1.sub(&z2).unwrap()).unwrap();
        let err = lhs.sub(&rhs).unwrap().max_abs();
        assert!(err < 1e-15);
    }

    #[test]
    fn standard_normal_logpdf_frozen_values() {
        // Origin in 2D: -ln(2 pi).
        let v0: Tensor<f64> = Tensor::from_vec(vec![0.0, 0.0]);
        assert!((standard_normal_logpdf(&v0) - (-1.8378770664093453)).abs() < 1e-15);
        // One coordinate at 1: -(ln(2 pi) + 1) / 2.
        let v1: Tensor<f64> = Tensor::from_vec(vec![1.0]);
        assert!((standard_normal_logpdf(&v1) - (-1.4189385332046727)).abs() < 1e-15);
    }

    #[test]
    fn logpdf_factorizes_over_coordinates() {
        let v = Tensor::from_vec(vec![0.3, -1.7, 2.2]);
        let joint = standard_normal_logpdf(&v);
        let summed: f64 = v
            .data()
            .iter()
            .map(|&c| standard_normal_logpdf(&Tensor::from_vec(vec![c])))
            .sum();
        assert!((joint - summed).abs() < 1e-12);
    }

    #[test]
    fn conditional_latent_logpdf_frozen_values() {
        let mut model = identity_model(2);
        let zeros = vec![0.0; model.transition.store().num_params()];
        model.transition.store_mut().unflatten(&zeros).unwrap();
        let z0 = Tensor::from_vec(vec![0.0, 0.0]);
        let any = Tensor::from_vec(vec![3.0, -4.0]);
        let lp = model.conditional_latent_logpdf(&z0, &any).unwrap();
        assert!((lp - (-1.8378770664093453)).abs() < 1e-15);

        // Identity transition, equal latents: zero residual.
        let model = identity_model(2);
        let z = Tensor::from_vec(vec![1.2, -0.4]);
        let lp = model.conditional_latent_logpdf(&z, &z).unwrap();
        assert!((lp - (-1.8378770664093453)).abs() < 1e-15);
    }

    #[test]
    fn joint_latent_logpdf_frozen_origin() {
        let mut model = identity_model(2);
        let zeros = vec![0.0; model.transition.store().num_params()];
        model.transition.store_mut().unflatten(&zeros).unwrap();
        let z0 = Tensor::from_vec(vec![0.0, 0.0]);
        let lp = model.joint_latent_logpdf(&z0, &z0).unwrap();
        assert!((lp - (-3.6757541328186907)).abs() < 1e-15);
    }

    #[test]
    fn joint_equals_marginal_plus_conditional_exactly() {
        let mut model = identity_model(3);
        model
            .transition
            .store_mut()
            .unflatten(&[
                0.5, -0.2, 0.1, 0.3, 0.9, -0.4, 0.0, 0.2, 1.1, 0.05, -0.3, 0.7,
            ])
            .unwrap();
        let z_t = Tensor::from_vec(vec![0.6, -1.0, 0.2]);
        let z_prev = Tensor::from_vec(vec![-0.3, 0.8, 1.5]);
        let joint = model.joint_latent_logpdf(&z_t, &z_prev).unwrap();
        let split = standard_normal_logpdf(&z_prev)
            + model.conditional_latent_logpdf(&z_t, &z_prev).unwrap();
        assert_eq!(joint, split);
    }

    #[test]
    fn conditional_loglik_identity_model_at_origin() {
        let mut model = identity_model(2);
        let zeros = vec![0.0; model.transition.store().num_params()];
        model.transition.store_mut().unflatten(&zeros).unwrap();
        let x0 = Tensor::from_vec(vec![0.0, 0.0]);
        let any = Tensor::from_vec(vec![5.0, -7.0]);
        let ll = model.conditional_loglik(&x0, &any).unwrap();
        assert!((ll - (-1.8378770664093453)).abs() < 1e-15);
    }

    #[test]
    fn log_det_shifts_loglik_additively() {
        // A scaling unit with constant s = c maps x to the same latent as
        // the identity model sees at the pre-scaled point; the log-liks
        // then differ by exactly c (the volume term).
        let c = 0.25;
        let scaled = scaling_model(2, c, 0.0);
        let plain = scaling_model(2, 0.0, 0.0);
        let x_prev = Tensor::from_vec(vec![0.1, 0.2]);
        let x = Tensor::from_vec(vec![0.5, 0.8]);
        // Half mask passes coordinate 0; coordinate 1 is scaled by e^c.
        let same_latent = Tensor::from_vec(vec![0.5, 0.8 * c.exp()]);
        let ll_scaled = scaled.conditional_loglik(&x, &x_prev).unwrap();
        let ll_plain = plain.conditional_loglik(&same_latent, &x_prev).unwrap();
        assert!((ll_scaled - ll_plain - c).abs() < 1e-12);
    }

    #[test]
    fn taped_loglik_matches_pure_bitwise() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shape = ModelShape {
            stack: StackShape {
                n_units: 2,
                blocks: 1,
                width: 6,
                ..StackShape::with_dim(3)
            },
            ..ModelShape::with_dim(3)
        };
        let mut model: TNVPModel = TNVPModel::make_default(&shape, &mut rng).unwrap();
        let flat: Vec<f64> = (0..model.num_params())
            .map(|i| 0.3 * ((((i + 3) * 2654435761) % 1000) as f64 / 500.0 - 1.0))
            .collect();
        model.unflatten_params(&flat).unwrap();

        let x_t = Tensor::from_vec(vec![0.4, -0.9, 1.2]);
        let x_prev = Tensor::from_vec(vec![-0.2, 0.6, 0.1]);
        let pure = model.conditional_loglik(&x_t, &x_prev).unwrap();

        let mut tape = Tape::new();
        let leaves = model.register_leaves(&mut tape);
        let xt_node = tape.leaf(x_t);
        let xp_node = tape.leaf(x_prev);
        let ll = model
            .conditional_loglik_taped(&mut tape, &leaves, xt_node, xp_node)
            .unwrap();
        assert_eq!(tape.value(ll).item(), pure);
    }

    #[test]
    fn synthesis_identity_pipeline_returns_input() {
        let model = identity_model(2);
        let x = Tensor::from_vec(vec![0.7, -1.9]);
        let out = model.synthesize_next(&x, Noise::Zero).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn zero_noise_latent_residual_is_exactly_zero() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = ModelShape {
            stack: StackShape {
                n_units: 2,
                blocks: 1,
                width: 4,
                ..StackShape::with_dim(2)
            },
            ..ModelShape::with_dim(2)
        };
        let model: TNVPModel = TNVPModel::make_default(&shape, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![0.3, 0.9]);
        let step = model.synthesize_step::<ChaCha8Rng>(&x, None).unwrap();
        let mean = model.transition.apply(&step.latent_prev).unwrap();
        assert_eq!(step.latent_target.data(), mean.data());
    }

    #[test]
    fn seeded_synthesis_round_trips_through_the_flow() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let shape = ModelShape {
            stack: StackShape {
                n_units: 3,
                blocks: 1,
                width: 6,
                ..StackShape::with_dim(2)
            },
            ..ModelShape::with_dim(2)
        };
        let mut model: TNVPModel = TNVPModel::make_default(&shape, &mut rng).unwrap();
        let flat: Vec<f64> = (0..model.num_params())
            .map(|i| 0.25 * ((((i + 11) * 48271) % 997) as f64 / 498.5 - 1.0))
            .collect();
        model.unflatten_params(&flat).unwrap();

        let x_prev = Tensor::from_vec(vec![0.4, -0.6]);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(123);
        let step = model
            .synthesize_step(&x_prev, Some(&mut noise_rng))
            .unwrap();
        // Encoding the synthesized sample must recover the target latent.
        let (z, _) = model.f2().forward(&step.x_next).unwrap();
        let err = z.sub(&step.latent_target).unwrap().max_abs();
        assert!(err < 1e-8, "latent mismatch {err}");
    }

    #[test]
    fn chains_are_deterministic_and_respect_length() {
        let model = identity_model(2);
        let x0 = Tensor::from_vec(vec![1.0, 2.0]);
        let chain = [&model, &model, &model];
        let a = synthesize_chain(&chain, &x0, Noise::Seeded(7)).unwrap();
        let b = synthesize_chain(&chain, &x0, Noise::Seeded(7)).unwrap();
        assert_eq!(a.len(), 3);
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.data(), v.data());
        }
        // Identity model with zero noise: every stage equals the input.
        let quiet = synthesize_chain(&chain, &x0, Noise::Zero).unwrap();
        for stage in &quiet {
            assert_eq!(stage.data(), x0.data());
        }
        // Single-model chain agrees with the single-step API.
        let one = synthesize_chain(&[&model], &x0, Noise::Seeded(5)).unwrap();
        let direct = model.synthesize_next(&x0, Noise::Seeded(5)).unwrap();
        assert_eq!(one[0].data(), direct.data());
    }

    #[test]
    fn flatten_unflatten_round_trips_across_groups() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = ModelShape {
            stack: StackShape {
                n_units: 2,
                blocks: 1,
                width: 4,
                ..StackShape::with_dim(2)
            },
            ..ModelShape::with_dim(2)
        };
        let mut model: TNVPModel = TNVPModel::make_default(&shape, &mut rng).unwrap();
        let flat: Vec<f64> = (0..model.num_params()).map(|i| i as f64 * 0.01).collect();
        model.unflatten_params(&flat).unwrap();
        assert_eq!(model.flatten_params(), flat);
        assert!(model.unflatten_params(&flat[1..]).is_err());
    }

    #[test]
    fn model_rejects_mismatched_dimensions() {
        let f1: FlowStack = FlowStack::from_units(2, vec![], ParameterStore::new()).unwrap();
        let f2: FlowStack = FlowStack::from_units(3, vec![], ParameterStore::new()).unwrap();
        let t = TemporalTransition::new(2, TransitionStructure::Full);
        assert!(TNVPModel::new(f1, f2, t).is_err());
    }

    #[test]
    fn structure_codes_round_trip() {
        for s in [TransitionStructure::Full, TransitionStructure::Diagonal] {
            assert_eq!(TransitionStructure::from_code(s.code()).unwrap(), s);
            assert_eq!(TransitionStructure::from_name(s.name()).unwrap(), s);
        }
        assert!(TransitionStructure::from_code(9).is_err());
        assert!(TransitionStructure::from_name("banded").is_err());
    }
}
