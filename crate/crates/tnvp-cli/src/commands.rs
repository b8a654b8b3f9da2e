//! The four subcommands. Each returns the library `Result`; `main` maps
//! errors to exit codes and prints the one-line diagnostic.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tnvp_core::{
    generate_drift_dataset, load_checkpoint, load_dataset, mean_conditional_nll, pretrain_stack,
    run_selfcheck, save_checkpoint, save_dataset, synthesize_chain, train_temporal, CheckResult,
    Checkpoint, DatasetKind, Error, FaultInjection, Noise, Result, StageSequenceDataset, TNVPModel,
    Tensor, TrainReport,
};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "nll_trace.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HOLDOUT_FILE: &str = "holdout.csv";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const SYNTHESIS_FILE: &str = "synthesized.csv";

/// Build version string injected at compile time.
pub fn build_version() -> &'static str {
    env!("TNVP_BUILD_VERSION")
}

fn resolve_dataset(config: &RunConfig) -> Result<StageSequenceDataset> {
    let data = &config.data;
    if let Some(path) = &data.file {
        return load_dataset(path);
    }
    let kind = match &data.kind {
        Some(name) => DatasetKind::from_name(name)?,
        None => DatasetKind::GaussianDrift,
    };
    generate_drift_dataset(
        kind,
        config.model.dim,
        data.stages,
        data.n_per_stage,
        data.seed,
    )
}

/// Train per the config's two-phase schedule and write checkpoint, NLL
/// trace, held-out split, and run manifest into the output directory.
pub fn cmd_train(config_path: &Path) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    let shape = config.model.to_shape()?;
    let train_cfg = config.train.to_train_config()?;
    let plan = config.train.phase_plan()?;

    let mut dataset = resolve_dataset(&config)?;
    if dataset.dim() != config.model.dim {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match model dimension {}",
            dataset.dim(),
            config.model.dim
        )));
    }
    if config.data.standardize {
        dataset.standardize();
    }
    let (train_set, held_out) =
        dataset.shuffle_split(config.data.train_fraction, config.data.seed)?;

    let out_dir = &config.output.directory;
    fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut model = TNVPModel::make_default(&shape, &mut rng)?;

    let mut phases: Vec<(&str, TrainReport)> = Vec::new();
    if plan.runs_pretrain() {
        let pooled = train_set.pooled_observations();
        let f2_cfg = tnvp_core::TrainConfig {
            // Decorrelate the two stacks' batch orders.
            seed: train_cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
            ..train_cfg.clone()
        };
        phases.push((
            "pretrain-f1",
            pretrain_stack(model.f1_mut(), &pooled, &train_cfg)?,
        ));
        phases.push((
            "pretrain-f2",
            pretrain_stack(model.f2_mut(), &pooled, &f2_cfg)?,
        ));
    }
    if plan.runs_joint() {
        phases.push(("joint", train_temporal(&mut model, &train_set, &train_cfg)?));
    }

    let trace_path = out_dir.join(TRACE_FILE);
    {
        let mut trace = fs::File::create(&trace_path)?;
        let mut step = 0usize;
        for (_, report) in &phases {
            for value in &report.objective_trace {
                writeln!(trace, "{step}\t{value:.17e}")?;
                step += 1;
            }
        }
    }

    if !held_out.is_empty() {
        save_dataset(&held_out, &out_dir.join(HOLDOUT_FILE))?;
    }

    let checksum = tnvp_core::parameter_checksum(&model.flatten_params());
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(
        &Checkpoint::new(model, shape, train_cfg.seed)?,
        &checkpoint_path,
    )?;

    let manifest = serde_json::json!({
        "version": build_version(),
        "seed": train_cfg.seed,
        "config": config,
        "parameter_checksum": format!("{checksum:016x}"),
        "phases": phases.iter().map(|(name, r)| serde_json::json!({
            "name": name,
            "steps": r.objective_trace.len(),
            "wall_secs": r.wall_secs,
            "final_objective": r.objective_trace.last(),
        })).collect::<Vec<_>>(),
        "outputs": {
            "checkpoint": CHECKPOINT_FILE,
            "trace": TRACE_FILE,
            "holdout": if held_out.is_empty() { None } else { Some(HOLDOUT_FILE) },
        },
    });
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest is valid json") + "\n",
    )?;

    let last = phases
        .last()
        .and_then(|(_, r)| r.objective_trace.last().copied());
    match last {
        Some(objective) => println!(
            "wrote {} (final objective {objective:.6})",
            checkpoint_path.display()
        ),
        None => println!(
            "wrote {} (no training steps ran)",
            checkpoint_path.display()
        ),
    }
    Ok(())
}

/// Mean paired NLL against the shuffled-pair control; printed and written
/// as NDJSON metrics.
pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset_path: &Path,
    output_dir: &Path,
    shuffle_seed: u64,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint_path)?;
    let dataset: StageSequenceDataset = load_dataset(dataset_path)?;
    let paired = mean_conditional_nll(&ck.model, &dataset)?;
    let shuffled = mean_conditional_nll(&ck.model, &dataset.shuffled_pairs(shuffle_seed))?;

    fs::create_dir_all(output_dir)?;
    let mut metrics = fs::File::create(output_dir.join(METRICS_FILE))?;
    for (name, value) in [("paired_nll", paired), ("shuffled_nll", shuffled)] {
        writeln!(
            metrics,
            "{}",
            serde_json::json!({"metric": name, "value": value})
        )?;
    }
    println!("paired_nll {paired:.6}");
    println!("shuffled_nll {shuffled:.6}");
    Ok(())
}

/// Where synthesis starts from: a literal vector or every x_prev in a
/// dataset file.
pub enum SynthesisInput {
    Vector(Tensor),
    Dataset(PathBuf),
}

pub fn parse_vector(text: &str) -> Result<Tensor> {
    let values: Result<Vec<f64>> = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("input vector entry {part:?}: {e}")))
        })
        .collect();
    let values = values?;
    if values.is_empty() {
        return Err(Error::invalid("input vector is empty"));
    }
    Ok(Tensor::from_vec(values))
}

pub fn parse_noise(text: &str) -> Result<Noise> {
    if text == "zero" {
        return Ok(Noise::Zero);
    }
    if let Some(seed) = text.strip_prefix("seed:") {
        let seed = seed
            .parse::<u64>()
            .map_err(|e| Error::invalid(format!("noise seed {seed:?}: {e}")))?;
        return Ok(Noise::Seeded(seed));
    }
    Err(Error::invalid(format!(
        "unknown noise policy {text:?} (expected \"zero\" or \"seed:N\")"
    )))
}

/// Run each input through `stages` synthesis steps and write one CSV row
/// per (input, stage). One checkpoint is reused across stages; giving
/// exactly `stages` checkpoints assigns one model per step.
pub fn cmd_synthesize(
    checkpoint_paths: &[PathBuf],
    input: SynthesisInput,
    noise: Noise,
    stages: usize,
    output_dir: &Path,
) -> Result<()> {
    if stages == 0 {
        return Err(Error::invalid("stages must be at least 1"));
    }
    if checkpoint_paths.is_empty() {
        return Err(Error::invalid("at least one checkpoint is required"));
    }
    if checkpoint_paths.len() != 1 && checkpoint_paths.len() != stages {
        return Err(Error::invalid(format!(
            "{} checkpoints cannot cover {stages} stages (give 1, or one per stage)",
            checkpoint_paths.len()
        )));
    }
    let models: Vec<TNVPModel> = checkpoint_paths
        .iter()
        .map(|p| Ok(load_checkpoint(p)?.model))
        .collect::<Result<_>>()?;
    let dim = models[0].dim();
    if models.iter().any(|m| m.dim() != dim) {
        return Err(Error::invalid("checkpoints have different dimensions"));
    }
    let chain: Vec<&TNVPModel> = if models.len() == 1 {
        std::iter::repeat_n(&models[0], stages).collect()
    } else {
        models.iter().collect()
    };

    let starts: Vec<Tensor> = match input {
        SynthesisInput::Vector(v) => vec![v],
        SynthesisInput::Dataset(path) => {
            let ds: StageSequenceDataset = load_dataset(&path)?;
            ds.pairs().iter().map(|p| p.x_prev.clone()).collect()
        }
    };

    fs::create_dir_all(output_dir)?;
    let out_path = output_dir.join(SYNTHESIS_FILE);
    let mut out = fs::File::create(&out_path)?;
    write!(out, "input_index,stage")?;
    for d in 0..dim {
        write!(out, ",x_{d}")?;
    }
    writeln!(out)?;
    let mut rows = 0usize;
    for (index, x0) in starts.iter().enumerate() {
        // Each input gets its own noise stream so rows are independent
        // of how many inputs precede them.
        let input_noise = match noise {
            Noise::Zero => Noise::Zero,
            Noise::Seeded(seed) => Noise::Seeded(seed.wrapping_add(index as u64)),
        };
        let outputs = synthesize_chain(&chain, x0, input_noise)?;
        for (step, x) in outputs.iter().enumerate() {
            write!(out, "{index},{}", step + 1)?;
            for &v in x.data() {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
            rows += 1;
        }
    }
    println!("wrote {rows} rows to {}", out_path.display());
    Ok(())
}

/// Run the oracle suite, print one line per check, and report whether
/// everything passed.
pub fn cmd_selfcheck(fault: FaultInjection) -> Vec<CheckResult> {
    let results = run_selfcheck(fault);
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{status} {} ({:.2}s): {}", r.name, r.secs, r.detail);
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        println!("all checks passed");
    } else {
        println!("failed checks: {}", failed.join(", "));
    }
    results
}
