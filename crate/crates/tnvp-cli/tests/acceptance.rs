//! Release gate: one test per shipping criterion, each printing a single
//! PASS line with the measured figure (visible under --nocapture). A failed
//! criterion fails its test, so `cargo test` reports pass/fail per line.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tnvp_core::{
    compare_gradients, finite_diff_gradient, generate_drift_dataset, integrate_conditional_density,
    load_checkpoint, log_abs_det_lu, mean_conditional_nll, mvn_logpdf, numerical_jacobian,
    pretrain_stack, save_checkpoint, train_temporal, Checkpoint, DatasetKind, FlowStack, MaskStyle,
    ModelShape, Noise, PhasePlan, Provenance, StackShape, StagePair, StageSequenceDataset,
    TNVPModel, Tensor, TrainConfig, TransitionStructure,
};

fn random_vector(dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn standard_normal_vector(dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        (0..dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
    )
}

fn perturbed_stack(shape: &StackShape, scale: f64, rng: &mut ChaCha8Rng) -> FlowStack {
    let mut stack: FlowStack = FlowStack::make_default(shape, rng).unwrap();
    stack.store_mut().perturb(rng, scale);
    stack
}

fn perturbed_model(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> TNVPModel {
    let shape = ModelShape {
        stack: StackShape {
            dim,
            n_units: 2,
            blocks: 1,
            width: 8,
            mask_style: MaskStyle::Half,
        },
        w_structure: TransitionStructure::Full,
    };
    let mut model: TNVPModel = TNVPModel::make_default(&shape, rng).unwrap();
    model.f1_mut().store_mut().perturb(rng, scale);
    model.f2_mut().store_mut().perturb(rng, scale);
    model.transition_mut().store_mut().perturb(rng, scale);
    model
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn identity_matrix(dim: usize) -> Tensor {
    let mut eye = Tensor::zeros(vec![dim, dim]);
    for i in 0..dim {
        eye[i * dim + i] = 1.0;
    }
    eye
}

fn tnvp_binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tnvp"))
}

/// 1000 random inputs across D in {2, 8, 16, 64} and stack depths 1..=10:
/// both round-trip directions recover the input to 1e-8, all under 30 s.
#[test]
fn criterion_1_invertibility() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst_forward: f64 = 0.0;
    let mut worst_inverse: f64 = 0.0;
    let mut count = 0;
    for &dim in &[2usize, 8, 16, 64] {
        for n_units in 1..=10 {
            let shape = StackShape {
                dim,
                n_units,
                blocks: 2,
                width: 32,
                mask_style: if n_units % 2 == 0 {
                    MaskStyle::EvenOdd
                } else {
                    MaskStyle::Half
                },
            };
            // Random parameters scaled down with depth: scales and shifts
            // compound per unit, and letting outputs reach 1e15 would test
            // float range, not invertibility.
            let stack = perturbed_stack(&shape, 0.25 / n_units as f64, &mut rng);
            for _ in 0..25 {
                let x = random_vector(dim, &mut rng);
                let (y, _) = stack.forward(&x).unwrap();
                let x_back = stack.inverse(&y).unwrap();
                worst_forward = worst_forward.max(max_abs_diff(&x_back, &x));

                let z = random_vector(dim, &mut rng);
                let x_from_z = stack.inverse(&z).unwrap();
                let (z_back, _) = stack.forward(&x_from_z).unwrap();
                worst_inverse = worst_inverse.max(max_abs_diff(&z_back, &z));
                count += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(count, 1000);
    assert!(
        worst_forward < 1e-8 && worst_inverse < 1e-8,
        "round-trip errors {worst_forward:.3e} / {worst_inverse:.3e} exceed 1e-8"
    );
    assert!(secs < 30.0, "runtime {secs:.1}s exceeds 30s");
    println!(
        "criterion 1 PASS: 1000 inputs, max round-trip errors {worst_forward:.3e} (f->i) / {worst_inverse:.3e} (i->f), {secs:.1}s"
    );
}

/// Analytic log-det matches log|det| of the central-difference Jacobian to
/// 1e-5 relative over 112 cases; a single unit's pass-through rows carry no
/// dependence on the transformed coordinates.
#[test]
fn criterion_2_log_det_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst_rel: f64 = 0.0;
    let mut cases = 0;
    for dim in 2..=8 {
        for n_units in 1..=4 {
            let shape = StackShape {
                dim,
                n_units,
                blocks: 1,
                width: 8,
                mask_style: MaskStyle::Half,
            };
            let stack = perturbed_stack(&shape, 0.3, &mut rng);
            for _ in 0..4 {
                let x = random_vector(dim, &mut rng);
                let (_, analytic) = stack.forward(&x).unwrap();
                let jac = numerical_jacobian(|v| Ok(stack.forward(v)?.0), &x, 1e-5).unwrap();
                let (numeric, sign) = log_abs_det_lu(&jac).unwrap();
                assert!(
                    sign > 0.0,
                    "coupling Jacobian must have positive determinant"
                );
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
                worst_rel = worst_rel.max(rel);
                cases += 1;
            }
        }
    }
    assert!(cases >= 100);
    assert!(
        worst_rel < 1e-5,
        "worst relative log-det error {worst_rel:.3e}"
    );

    // Triangularity: for one unit, d(passed-through)/d(transformed) == 0.
    let mut worst_block: f64 = 0.0;
    for style in [MaskStyle::Half, MaskStyle::EvenOdd] {
        let shape = StackShape {
            dim: 4,
            n_units: 1,
            blocks: 1,
            width: 8,
            mask_style: style,
        };
        let stack = perturbed_stack(&shape, 0.3, &mut rng);
        let x = random_vector(4, &mut rng);
        let jac = numerical_jacobian(|v| Ok(stack.forward(v)?.0), &x, 1e-5).unwrap();
        let bits = stack.units()[0].mask().bits().to_vec();
        for (i, &row_masked) in bits.iter().enumerate() {
            for (j, &col_masked) in bits.iter().enumerate() {
                if row_masked && !col_masked {
                    worst_block = worst_block.max(jac[i * 4 + j].abs());
                }
            }
        }
    }
    assert!(
        worst_block < 1e-6,
        "masked-to-free Jacobian block max {worst_block:.3e}"
    );
    println!(
        "criterion 2 PASS: {cases} cases, worst relative log-det error {worst_rel:.3e}, triangular block max {worst_block:.3e}"
    );
}

/// Reverse-mode gradients of the conditional NLL match central finite
/// differences (step 1e-5) to 1e-4 relative for every parameter of all
/// three groups, across 50 seeded D=4 models.
#[test]
fn criterion_3_gradient_exactness() {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let model = perturbed_model(4, 0.3, &mut rng);
        let x_t = random_vector(4, &mut rng);
        let x_prev = random_vector(4, &mut rng);

        let mut tape = tnvp_core::Tape::new();
        let leaves = model.register_leaves(&mut tape);
        let xt_node = tape.leaf(x_t.clone());
        let xp_node = tape.leaf(x_prev.clone());
        let loglik = model
            .conditional_loglik_taped(&mut tape, &leaves, xt_node, xp_node)
            .unwrap();
        let nll = tape.affine_const(loglik, -1.0, 0.0);
        let back = tape.backward(nll).unwrap();
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
        )
        .unwrap();
        let cmp = compare_gradients(&analytic, &numeric, 1e-6).unwrap();
        worst = worst.max(cmp.max_rel_err);
        compared += cmp.compared;
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst:.3e}");
    println!(
        "criterion 3 PASS: 50 seeds, {compared} parameter gradients, worst relative error {worst:.3e}"
    );
}

/// A trained D=2 model's conditional density integrates to 1 +- 0.01 on a
/// 400x400 grid spanning 7 pushed-forward standard deviations.
#[test]
fn criterion_4_density_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let data: StageSequenceDataset =
        generate_drift_dataset(DatasetKind::MixtureMorph, 2, 3, 128, 41).unwrap();
    let mut model: TNVPModel = TNVPModel::make_default(
        &ModelShape {
            stack: StackShape {
                dim: 2,
                n_units: 4,
                blocks: 1,
                width: 8,
                mask_style: MaskStyle::Half,
            },
            w_structure: TransitionStructure::Full,
        },
        &mut rng,
    )
    .unwrap();

    let flow_cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 5e-3,
        pretrain_steps: 120,
        joint_steps: 0,
        seed: 42,
        phases: PhasePlan::PretrainOnly,
        ..TrainConfig::default()
    };
    let prev: Vec<Tensor> = data.pairs().iter().map(|p| p.x_prev.clone()).collect();
    let curr: Vec<Tensor> = data.pairs().iter().map(|p| p.x_t.clone()).collect();
    pretrain_stack(model.f1_mut(), &prev, &flow_cfg).unwrap();
    pretrain_stack(model.f2_mut(), &curr, &flow_cfg).unwrap();
    let joint_cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 5e-3,
        joint_steps: 150,
        seed: 43,
        phases: PhasePlan::JointOnly,
        ..TrainConfig::default()
    };
    train_temporal(&mut model, &data, &joint_cfg).unwrap();

    let x_prev = Tensor::from_vec(vec![0.5, -0.3]);
    let integral = integrate_conditional_density(&model, &x_prev, 400, 7.0, 4444).unwrap();
    assert!(
        (integral - 1.0).abs() <= 0.01,
        "density integral {integral:.6} deviates from 1 by more than 0.01"
    );
    println!("criterion 4 PASS: trained-model density integral {integral:.6} on a 400x400 grid over 7 stds");
}

/// Conditional and joint latent log-densities match brute-force Gaussian
/// evaluations (independent LU-based implementation) within 1e-10.
#[test]
fn criterion_5_latent_density_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut worst_cond: f64 = 0.0;
    let mut worst_joint: f64 = 0.0;
    for &dim in &[2usize, 3, 5] {
        let model = perturbed_model(dim, 0.3, &mut rng);
        let w = model.transition().weight_matrix();
        let b = model.transition().bias().clone();
        let eye = identity_matrix(dim);
        for _ in 0..10 {
            let z_prev = random_vector(dim, &mut rng);
            let z_t = random_vector(dim, &mut rng);

            let mean = w.matvec(&z_prev).unwrap().add(&b).unwrap();
            let oracle_cond = mvn_logpdf(&z_t, &mean, &eye).unwrap();
            let got_cond = model.conditional_latent_logpdf(&z_t, &z_prev).unwrap();
            worst_cond = worst_cond.max((got_cond - oracle_cond).abs());

            // Joint covariance of [z_t; z_prev]: [[WW^T + I, W], [W^T, I]].
            let two = 2 * dim;
            let mut cov = Tensor::zeros(vec![two, two]);
            let mut joint_mean = Tensor::zeros(vec![two]);
            for i in 0..dim {
                joint_mean[i] = b[i];
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
            let oracle_joint = mvn_logpdf(&Tensor::from_vec(stacked), &joint_mean, &cov).unwrap();
            let got_joint = model.joint_latent_logpdf(&z_t, &z_prev).unwrap();
            worst_joint = worst_joint.max((got_joint - oracle_joint).abs());
        }
    }
    assert!(worst_cond < 1e-10, "conditional mismatch {worst_cond:.3e}");
    assert!(worst_joint < 1e-10, "joint mismatch {worst_joint:.3e}");
    println!(
        "criterion 5 PASS: 30 cases, conditional mismatch {worst_cond:.3e}, joint mismatch {worst_joint:.3e}"
    );
}

/// Training recovers structure: a known linear transition to Frobenius
/// error < 0.1 with flows pinned to identity, and genuine pairing beats
/// shuffled pairing on held-out mixture data. Each run under 2 minutes.
#[test]
fn criterion_6_learning_signal() {
    // Linear transition: x_t = A x_prev + noise, flows left at identity.
    let start_linear = Instant::now();
    let dim = 2;
    let a = [[0.8, 0.3], [-0.2, 0.9]];
    let mut rng = ChaCha8Rng::seed_from_u64(6006);
    let mut pairs = Vec::new();
    for _ in 0..6000 {
        let x_prev = standard_normal_vector(dim, &mut rng);
        let noise = standard_normal_vector(dim, &mut rng);
        let x_t = Tensor::from_vec(
            (0..dim)
                .map(|i| (0..dim).map(|j| a[i][j] * x_prev[j]).sum::<f64>() + noise[i])
                .collect(),
        );
        pairs.push(StagePair {
            x_prev,
            x_t,
            stage_index: 1,
        });
    }
    let linear_data = StageSequenceDataset::new(dim, 2, pairs, Provenance::Memory).unwrap();

    let shape = ModelShape::with_dim(dim);
    let mut model: TNVPModel =
        TNVPModel::make_default(&shape, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 0.05,
        joint_steps: 800,
        seed: 8,
        phases: PhasePlan::JointOnly,
        freeze_flows_in_joint: true,
        ..TrainConfig::default()
    };
    train_temporal(&mut model, &linear_data, &cfg).unwrap();
    let w = model.transition().weight_matrix();
    let mut frob = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            frob += (w[i * dim + j] - a[i][j]).powi(2);
        }
    }
    let frob = frob.sqrt();
    let linear_secs = start_linear.elapsed().as_secs_f64();
    assert!(frob < 0.1, "|W - A|_F = {frob:.4}");
    assert!(linear_secs < 120.0, "linear run took {linear_secs:.1}s");

    // Drifting mixture: held-out paired NLL must beat shuffled-pair NLL.
    let start_mixture = Instant::now();
    let data: StageSequenceDataset =
        generate_drift_dataset(DatasetKind::MixtureMorph, 2, 3, 200, 61).unwrap();
    let (train, held_out) = data.shuffle_split(0.8, 62).unwrap();
    let mut model: TNVPModel =
        TNVPModel::make_default(&ModelShape::with_dim(2), &mut ChaCha8Rng::seed_from_u64(63))
            .unwrap();
    let flow_cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 5e-3,
        pretrain_steps: 120,
        seed: 64,
        phases: PhasePlan::PretrainOnly,
        ..TrainConfig::default()
    };
    let prev: Vec<Tensor> = train.pairs().iter().map(|p| p.x_prev.clone()).collect();
    let curr: Vec<Tensor> = train.pairs().iter().map(|p| p.x_t.clone()).collect();
    pretrain_stack(model.f1_mut(), &prev, &flow_cfg).unwrap();
    pretrain_stack(model.f2_mut(), &curr, &flow_cfg).unwrap();
    let joint_cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 5e-3,
        joint_steps: 200,
        seed: 65,
        phases: PhasePlan::JointOnly,
        ..TrainConfig::default()
    };
    train_temporal(&mut model, &train, &joint_cfg).unwrap();

    let paired = mean_conditional_nll(&model, &held_out).unwrap();
    let shuffled = mean_conditional_nll(&model, &held_out.shuffled_pairs(66)).unwrap();
    let mixture_secs = start_mixture.elapsed().as_secs_f64();
    assert!(
        paired < shuffled,
        "paired NLL {paired:.4} not below shuffled NLL {shuffled:.4}"
    );
    assert!(mixture_secs < 120.0, "mixture run took {mixture_secs:.1}s");
    println!(
        "criterion 6 PASS: |W - A|_F = {frob:.4} ({linear_secs:.1}s); held-out paired NLL {paired:.4} < shuffled {shuffled:.4} ({mixture_secs:.1}s)"
    );
}

/// The default run configuration pins the reference settings: 10 mapping
/// units, 2 residual blocks of width 32, batch size 64.
#[test]
fn criterion_7_default_configuration() {
    let defaults = tnvp_cli::RunConfig::default();
    assert_eq!(defaults.model.n_units, 10);
    assert_eq!(defaults.model.blocks, 2);
    assert_eq!(defaults.model.width, 32);
    assert_eq!(defaults.train.batch_size, 64);
    let empty = tnvp_cli::RunConfig::from_json("{}").unwrap();
    assert_eq!(empty.model.n_units, 10);
    assert_eq!(empty.model.blocks, 2);
    assert_eq!(empty.model.width, 32);
    assert_eq!(empty.train.batch_size, 64);
    println!("criterion 7 PASS: defaults are n_units=10, blocks=2, width=32, batch_size=64");
}

/// Same config and seed give byte-identical checkpoints through the real
/// binary, and a save/load round trip changes no evaluation bit.
#[test]
fn criterion_8_determinism_and_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let config_body = |out: &Path| {
        format!(
            r#"{{
                "model": {{"dim": 2, "n_units": 2, "blocks": 1, "width": 8}},
                "train": {{"batch_size": 32, "pretrain_steps": 15, "joint_steps": 15, "seed": 99}},
                "data": {{"kind": "mixture-morph", "n_per_stage": 50, "stages": 3, "seed": 98}},
                "output": {{"directory": {out:?}}}
            }}"#
        )
    };
    let mut checkpoints = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let config = dir.path().join(format!("{sub}.json"));
        std::fs::write(&config, config_body(&out)).unwrap();
        let res = tnvp_binary()
            .args(["train", "--config", config.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        checkpoints.push(std::fs::read(out.join("model.ckpt")).unwrap());
    }
    assert_eq!(
        checkpoints[0], checkpoints[1],
        "identical seeds must produce byte-identical checkpoints"
    );

    let loaded = load_checkpoint(dir.path().join("a").join("model.ckpt")).unwrap();
    let x_prev = Tensor::from_vec(vec![0.4, -1.1]);
    let x_t = Tensor::from_vec(vec![0.9, 0.2]);
    let before_ll = loaded.model.conditional_loglik(&x_t, &x_prev).unwrap();
    let before_next = loaded
        .model
        .synthesize_next(&x_prev, Noise::Seeded(5))
        .unwrap();

    let resaved = dir.path().join("resaved.ckpt");
    save_checkpoint(
        &Checkpoint::new(loaded.model.clone(), loaded.shape, loaded.seed).unwrap(),
        &resaved,
    )
    .unwrap();
    let reloaded = load_checkpoint(&resaved).unwrap();
    let after_ll = reloaded.model.conditional_loglik(&x_t, &x_prev).unwrap();
    let after_next = reloaded
        .model
        .synthesize_next(&x_prev, Noise::Seeded(5))
        .unwrap();
    assert_eq!(before_ll.to_bits(), after_ll.to_bits());
    for (b, a) in before_next.data().iter().zip(after_next.data()) {
        assert_eq!(b.to_bits(), a.to_bits());
    }
    println!(
        "criterion 8 PASS: two seeded runs byte-identical ({} bytes); round-trip evaluations bit-exact",
        checkpoints[0].len()
    );
}

/// The built-in oracle suite finishes well under five minutes, exits 0, and
/// the inversion-fault canary makes it fail.
#[test]
fn criterion_9_selfcheck_runtime() {
    let start = Instant::now();
    let res = tnvp_binary().arg("selfcheck").output().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(res.status.code(), Some(0), "stdout: {stdout}");
    assert!(stdout.contains("all checks passed"));
    assert!(secs < 300.0, "selfcheck took {secs:.1}s");

    let faulty = tnvp_binary()
        .args(["selfcheck", "--inject-inversion-fault"])
        .output()
        .unwrap();
    assert_eq!(faulty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL round-trip"));
    println!("criterion 9 PASS: selfcheck exit 0 in {secs:.1}s; fault injection trips the round-trip check");
}
