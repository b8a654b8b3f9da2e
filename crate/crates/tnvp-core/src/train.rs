//! Exact maximum-likelihood training by plain mini-batch SGD.
//!
//! Two phases mirror the model's two roles: first each flow stack can be
//! pretrained standalone as a density model under the unit Gaussian
//! prior; then the full conditional objective trains both stacks and the
//! transition jointly. Everything is deterministic given (seed, config,
//! data): batches come from a seeded without-replacement shuffle and
//! gradient accumulation order is fixed.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coupling::FlowStack;
use crate::data::StageSequenceDataset;
use crate::error::{Error, Result};
use crate::model::{standard_normal_logpdf_taped, TNVPModel};
use crate::params::{GradientRecord, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{StoreLeaves, Tape};
use crate::tensor::Tensor;

/// Which training phases a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhasePlan {
    PretrainOnly,
    JointOnly,
    Both,
}

impl PhasePlan {
    pub fn runs_pretrain(self) -> bool {
        matches!(self, PhasePlan::PretrainOnly | PhasePlan::Both)
    }

    pub fn runs_joint(self) -> bool {
        matches!(self, PhasePlan::JointOnly | PhasePlan::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps for the standalone-flow phase.
    pub pretrain_steps: usize,
    /// Steps for the joint conditional phase.
    pub joint_steps: usize,
    pub seed: u64,
    pub phases: PhasePlan,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Keep both stacks fixed during the joint phase (ablation switch).
    pub freeze_flows_in_joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            pretrain_steps: 0,
            joint_steps: 0,
            seed: 0,
            phases: PhasePlan::Both,
            clip_norm: Some(5.0),
            freeze_flows_in_joint: false,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed: such a run is a parameter-
    /// preserving no-op by construction, which tests rely on.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::invalid(format!(
                    "clip norm must be finite and positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// What one training phase did.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-batch negative log-likelihood, one entry per step.
    pub objective_trace: Vec<f64>,
    /// Wall-clock seconds for the phase (not part of determinism).
    pub wall_secs: f64,
    /// FNV-1a checksum over the final parameters' f64 bit patterns.
    pub final_checksum: u64,
    pub seed: u64,
}

impl TrainReport {
    /// Plot-ready trace: one `step<TAB>objective` line per step.
    pub fn write_trace(&self, mut out: impl Write) -> Result<()> {
        for (step, value) in self.objective_trace.iter().enumerate() {
            writeln!(out, "{step}\t{value:.17e}")?;
        }
        Ok(())
    }
}

/// FNV-1a over little-endian f64 bytes; stable across runs and platforms.
pub fn parameter_checksum<S: Scalar>(values: &[S]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for v in values {
        for byte in v.to_f64_lossy().to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Without-replacement batch order: a seeded shuffle per epoch, cut into
/// consecutive batches (the last one of an epoch may be short).
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut sampler = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.reshuffle();
        sampler
    }

    fn reshuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// One SGD update: `p -= lr * g`, with optional global-norm clipping.
pub fn sgd_step<S: Scalar>(
    params: &mut ParameterStore<S>,
    grads: &GradientRecord<S>,
    learning_rate: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    let lr = S::from_f64_lossy(learning_rate);
    if let Some(clip) = clip_norm {
        let norm = grads.global_norm().to_f64_lossy();
        if norm > clip {
            let mut scaled = grads.clone();
            scaled.scale(S::from_f64_lossy(clip / norm));
            return params.apply_scaled(&scaled, lr);
        }
    }
    params.apply_scaled(grads, lr)
}

fn ensure_finite_objective(value: f64, phase: &str, step: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::non_finite(format!(
            "{phase} objective at step {step}"
        )));
    }
    Ok(())
}

/// Maximize the standalone flow likelihood of unpaired samples under the
/// unit Gaussian prior. The objective reported per step is the batch mean
/// negative log-likelihood.
pub fn pretrain_stack<S: Scalar>(
    stack: &mut FlowStack<S>,
    data: &[Tensor<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, x) in data.iter().enumerate() {
        if x.len() != stack.dim() {
            return Err(Error::invalid(format!(
                "sample {i} has dimension {}, stack has {}",
                x.len(),
                stack.dim()
            )));
        }
    }

    let start = Instant::now();
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut trace = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let batch = sampler.next_batch(cfg.batch_size);

        let mut tape = Tape::new();
        let leaves = StoreLeaves::register(&mut tape, stack.store());
        let mut total = tape.leaf(Tensor::scalar(S::zero()));
        for &idx in &batch {
            let x = tape.leaf(data[idx].clone());
            let (z, log_det) = stack.forward_taped(&mut tape, &leaves, x)?;
            let logpdf = standard_normal_logpdf_taped(&mut tape, z)?;
            let loglik = tape.add(logpdf, log_det)?;
            total = tape.add(total, loglik)?;
        }
        let loss = tape.affine_const(
            total,
            S::from_f64_lossy(-1.0 / batch.len() as f64),
            S::zero(),
        );

        let objective = tape.value(loss).item().to_f64_lossy();
        ensure_finite_objective(objective, "pretraining", step)?;
        trace.push(objective);

        let back = tape.backward(loss)?;
        let grads = leaves.extract(&back, stack.store());
        sgd_step(stack.store_mut(), &grads, cfg.learning_rate, cfg.clip_norm)?;
    }

    Ok(TrainReport {
        objective_trace: trace,
        wall_secs: start.elapsed().as_secs_f64(),
        final_checksum: parameter_checksum(&stack.store().flatten()),
        seed: cfg.seed,
    })
}

/// Minimize the mean conditional negative log-likelihood over stage
/// pairs, updating both stacks and the transition jointly (stacks can be
/// frozen via the config flag).
pub fn train_temporal<S: Scalar>(
    model: &mut TNVPModel<S>,
    data: &StageSequenceDataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match model dimension {}",
            data.dim(),
            model.dim()
        )));
    }

    let start = Instant::now();
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut trace = Vec::with_capacity(cfg.joint_steps);
    for step in 0..cfg.joint_steps {
        let batch = sampler.next_batch(cfg.batch_size);

        let mut tape = Tape::new();
        let leaves = model.register_leaves(&mut tape);
        let mut total = tape.leaf(Tensor::scalar(S::zero()));
        for &idx in &batch {
            let pair = &data.pairs()[idx];
            let x_t = tape.leaf(pair.x_t.clone());
            let x_prev = tape.leaf(pair.x_prev.clone());
            let loglik = model.conditional_loglik_taped(&mut tape, &leaves, x_t, x_prev)?;
            total = tape.add(total, loglik)?;
        }
        let loss = tape.affine_const(
            total,
            S::from_f64_lossy(-1.0 / batch.len() as f64),
            S::zero(),
        );

        let objective = tape.value(loss).item().to_f64_lossy();
        ensure_finite_objective(objective, "joint training", step)?;
        trace.push(objective);

        let back = tape.backward(loss)?;
        let mut grads = model.extract_gradients(&leaves, &back);
        if let Some(clip) = cfg.clip_norm {
            let norm = grads.global_norm().to_f64_lossy();
            if norm > clip {
                grads.scale(S::from_f64_lossy(clip / norm));
            }
        }
        let lr = cfg.learning_rate;
        if !cfg.freeze_flows_in_joint {
            sgd_step(model.f1_mut().store_mut(), &grads.f1, lr, None)?;
            sgd_step(model.f2_mut().store_mut(), &grads.f2, lr, None)?;
        }
        sgd_step(
            model.transition_mut().store_mut(),
            &grads.transition,
            lr,
            None,
        )?;
    }

    Ok(TrainReport {
        objective_trace: trace,
        wall_secs: start.elapsed().as_secs_f64(),
        final_checksum: parameter_checksum(&model.flatten_params()),
        seed: cfg.seed,
    })
}

/// Mean conditional negative log-likelihood over a dataset (evaluation,
/// no updates).
pub fn mean_conditional_nll<S: Scalar>(
    model: &TNVPModel<S>,
    data: &StageSequenceDataset<S>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for pair in data.pairs() {
        total -= model
            .conditional_loglik(&pair.x_t, &pair.x_prev)?
            .to_f64_lossy();
    }
    Ok(total / data.len() as f64)
}
