//! Built-in oracle suite: fast end-to-end checks of the exactness claims
//! (invertibility, log-det, gradients, densities) runnable from the CLI.
//!
//! Every check is deterministic (fixed internal seeds) and compares the
//! library against an independent numerical oracle, never against itself.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coupling::{FlowStack, StackShape};
use crate::error::Result;
use crate::gradcheck::{
    compare_gradients, finite_diff_gradient, log_abs_det_lu, mvn_logpdf, numerical_jacobian,
};
use crate::model::{ModelShape, TNVPModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a single named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

/// Deliberate defects for proving the suite can fail. All flags off in
/// normal operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection {
    /// Flip the translation sign inside inversion, computing
    /// `(y + t) exp(-s)` instead of `(y - t) exp(-s)`. The round-trip
    /// check must catch this.
    pub flip_inverse_translation: bool,
}

/// Run the full suite. Pass `FaultInjection::default()` for an honest run.
pub fn run_selfcheck(fault: FaultInjection) -> Vec<CheckResult> {
    vec![
        check("round-trip", || round_trip(fault)),
        check("log-det-vs-jacobian", log_det_vs_jacobian),
        check(
            "gradient-vs-finite-difference",
            gradient_vs_finite_difference,
        ),
        check("latent-density-oracle", latent_density_oracle),
        check("density-integration", density_integration),
    ]
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok((passed, detail)) => (passed, detail),
        Err(e) => (false, format!("errored: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn random_stack(dim: usize, n_units: usize, rng: &mut ChaCha8Rng) -> Result<FlowStack> {
    let shape = StackShape {
        n_units,
        blocks: 1,
        width: 8,
        ..StackShape::with_dim(dim)
    };
    let mut stack = FlowStack::make_default(&shape, rng)?;
    stack.store_mut().perturb(rng, 0.4);
    Ok(stack)
}

fn random_vector(dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_vec((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// Inversion with the translation sign flipped; only reachable through
/// the fault hook.
fn faulty_stack_inverse(stack: &FlowStack, y: &Tensor) -> Result<Tensor> {
    let mut cur = y.clone();
    for unit in stack.units().iter().rev() {
        let bits = unit.mask().bits();
        let masked = cur.mul(&unit.mask().multiplier())?;
        let s = unit.scale_net().eval(stack.store(), &masked)?;
        let t = unit.translate_net().eval(stack.store(), &masked)?;
        let mut out = cur.clone();
        for i in 0..out.len() {
            if !bits[i] {
                out[i] = (cur[i] + t[i]) * (-s[i]).exp();
            }
        }
        cur = out;
    }
    Ok(cur)
}

fn round_trip(fault: FaultInjection) -> Result<(bool, String)> {
    let tolerance = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &dim in &[2usize, 5, 8] {
        for &n_units in &[1usize, 4] {
            let stack = random_stack(dim, n_units, &mut rng)?;
            for _ in 0..20 {
                let x = random_vector(dim, &mut rng);
                let (y, _) = stack.forward(&x)?;
                let back = if fault.flip_inverse_translation {
                    faulty_stack_inverse(&stack, &y)?
                } else {
                    stack.inverse(&y)?
                };
                worst = worst.max(back.sub(&x)?.max_abs().to_f64_lossy());

                let z = random_vector(dim, &mut rng);
                let x_from_z = stack.inverse(&z)?;
                let (z_again, _) = stack.forward(&x_from_z)?;
                worst = worst.max(z_again.sub(&z)?.max_abs().to_f64_lossy());
                cases += 2;
            }
        }
    }
    Ok((
        worst < tolerance,
        format!("max round-trip error {worst:.3e} over {cases} cases (tolerance {tolerance:.0e})"),
    ))
}

fn log_det_vs_jacobian() -> Result<(bool, String)> {
    let tolerance = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed_round in 0..4 {
        let dim = [2, 3, 4, 6][seed_round];
        let stack = random_stack(dim, 3, &mut rng)?;
        for _ in 0..3 {
            let x = random_vector(dim, &mut rng);
            let (_, analytic) = stack.forward(&x)?;
            let jac = numerical_jacobian(|p| Ok(stack.forward(p)?.0), &x, 1e-5)?;
            let (numeric, _) = log_abs_det_lu(&jac)?;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
            cases += 1;
        }
    }
    Ok((
        worst < tolerance,
        format!(
            "max relative log-det error {worst:.3e} over {cases} cases (tolerance {tolerance:.0e})"
        ),
    ))
}

fn perturbed_model(dim: usize, rng: &mut ChaCha8Rng) -> Result<TNVPModel> {
    let shape = ModelShape {
        stack: StackShape {
            n_units: 2,
            blocks: 1,
            width: 8,
            ..StackShape::with_dim(dim)
        },
        ..ModelShape::with_dim(dim)
    };
    let mut model = TNVPModel::make_default(&shape, rng)?;
    model.f1_mut().store_mut().perturb(rng, 0.3);
    model.f2_mut().store_mut().perturb(rng, 0.3);
    model.transition_mut().store_mut().perturb(rng, 0.3);
    Ok(model)
}

fn gradient_vs_finite_difference() -> Result<(bool, String)> {
    let tolerance = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..2 {
        let model = perturbed_model(4, &mut rng)?;
        let x_t = random_vector(4, &mut rng);
        let x_prev = random_vector(4, &mut rng);

        let mut tape = crate::tape::Tape::new();
        let leaves = model.register_leaves(&mut tape);
        let xt_node = tape.leaf(x_t.clone());
        let xp_node = tape.leaf(x_prev.clone());
        let loglik = model.conditional_loglik_taped(&mut tape, &leaves, xt_node, xp_node)?;
        let nll = tape.affine_const(loglik, -1.0, 0.0);
        let back = tape.backward(nll)?;
        let grads = model.extract_gradients(&leaves, &back);
        let analytic: Vec<f64> = grads
            .f1
            .flatten()
            .into_iter()
            .chain(grads.f2.flatten())
            .chain(grads.transition.flatten())
            .collect();

        let theta = model.flatten_params();
        let numeric = finite_diff_gradient(
            |p| {
                let mut probe = model.clone();
                probe.unflatten_params(p)?;
                Ok(-probe.conditional_loglik(&x_t, &x_prev)?)
            },
            &theta,
            1e-5,
        )?;
        let cmp = compare_gradients(&analytic, &numeric, 1e-6)?;
        worst = worst.max(cmp.max_rel_err);
        compared += cmp.compared;
    }
    Ok((
        worst < tolerance,
        format!("max relative gradient error {worst:.3e} over {compared} entries (tolerance {tolerance:.0e})"),
    ))
}

fn latent_density_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_cond: f64 = 0.0;
    let mut worst_joint: f64 = 0.0;
    for &dim in &[2usize, 3, 5] {
        let model = perturbed_model(dim, &mut rng)?;
        let w = model.transition().weight_matrix();
        let b = model.transition().bias().clone();
        for _ in 0..5 {
            let z_prev = random_vector(dim, &mut rng);
            let z_t = random_vector(dim, &mut rng);

            let mean = w.matvec(&z_prev)?.add(&b)?;
            let mut eye = Tensor::zeros(vec![dim, dim]);
            for i in 0..dim {
                eye[i * dim + i] = 1.0;
            }
            let oracle_cond = mvn_logpdf(&z_t, &mean, &eye)?;
            let cond = model.conditional_latent_logpdf(&z_t, &z_prev)?;
            worst_cond = worst_cond.max((cond - oracle_cond).abs());

            // Joint Gaussian over the stacked vector [z_t; z_prev]:
            // mean [b; 0], covariance [[W W^T + I, W], [W^T, I]].
            let two = 2 * dim;
            let mut cov = Tensor::zeros(vec![two, two]);
            for i in 0..dim {
                for j in 0..dim {
                    let mut wwt = 0.0;
                    for k in 0..dim {
                        wwt += w[i * dim + k] * w[j * dim + k];
                    }
                    cov[i * two + j] = wwt + if i == j { 1.0 } else { 0.0 };
                    cov[i * two + (dim + j)] = w[i * dim + j];
                    cov[(dim + i) * two + j] = w[j * dim + i];
                    cov[(dim + i) * two + (dim + j)] = if i == j { 1.0 } else { 0.0 };
                }
            }
            let mut stacked = Vec::with_capacity(two);
            stacked.extend_from_slice(z_t.data());
            stacked.extend_from_slice(z_prev.data());
            let mut joint_mean = b.data().to_vec();
            joint_mean.extend(std::iter::repeat_n(0.0, dim));
            let oracle_joint = mvn_logpdf(
                &Tensor::from_vec(stacked),
                &Tensor::from_vec(joint_mean),
                &cov,
            )?;
            let joint = model.joint_latent_logpdf(&z_t, &z_prev)?;
            worst_joint = worst_joint.max((joint - oracle_joint).abs());
        }
    }
    let passed = worst_cond < 1e-12 && worst_joint < 1e-10;
    Ok((
        passed,
        format!(
            "max |error|: conditional {worst_cond:.3e} (tolerance 1e-12), joint {worst_joint:.3e} (tolerance 1e-10)"
        ),
    ))
}

/// Integrate the conditional density over a wide grid; exact densities
/// must integrate to 1.
pub fn integrate_conditional_density(
    model: &TNVPModel,
    x_prev: &Tensor,
    grid_per_axis: usize,
    half_width_stds: f64,
    sample_seed: u64,
) -> Result<f64> {
    if model.dim() != 2 {
        return Err(crate::error::Error::invalid(
            "density integration is implemented for dimension 2",
        ));
    }
    // Locate the conditional distribution empirically: push seeded
    // samples forward and span the grid around their mean.
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let n_samples = 2000;
    let mut sums = [0.0f64; 2];
    let mut sq_sums = [0.0f64; 2];
    for _ in 0..n_samples {
        let step = model.synthesize_step(x_prev, Some(&mut rng))?;
        for i in 0..2 {
            sums[i] += step.x_next[i];
            sq_sums[i] += step.x_next[i] * step.x_next[i];
        }
    }
    let mut lo = [0.0f64; 2];
    let mut step_size = [0.0f64; 2];
    for i in 0..2 {
        let mean = sums[i] / n_samples as f64;
        let var = (sq_sums[i] / n_samples as f64 - mean * mean).max(1e-12);
        let half = half_width_stds * var.sqrt();
        lo[i] = mean - half;
        step_size[i] = 2.0 * half / grid_per_axis as f64;
    }

    let mut integral = 0.0;
    let cell = step_size[0] * step_size[1];
    for gx in 0..grid_per_axis {
        let x0 = lo[0] + (gx as f64 + 0.5) * step_size[0];
        for gy in 0..grid_per_axis {
            let x1 = lo[1] + (gy as f64 + 0.5) * step_size[1];
            let x_t = Tensor::from_vec(vec![x0, x1]);
            integral += model.conditional_loglik(&x_t, x_prev)?.exp() * cell;
        }
    }
    Ok(integral)
}

fn density_integration() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let model = perturbed_model(2, &mut rng)?;
    let x_prev = Tensor::from_vec(vec![0.3, -0.7]);
    let integral = integrate_conditional_density(&model, &x_prev, 400, 7.0, 606)?;
    let err = (integral - 1.0).abs();
    Ok((
        err <= 0.01,
        format!("conditional density integrates to {integral:.6} on a 400x400 grid (tolerance 1 +/- 0.01)"),
    ))
}
