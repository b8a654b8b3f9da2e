//! Run configuration: one strict JSON document describing model, training,
//! data, and output. Unknown keys are rejected; missing keys take the
//! documented defaults, so `{}` is a complete valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tnvp_core::{
    Error, MaskStyle, ModelShape, PhasePlan, Result, StackShape, TrainConfig, TransitionStructure,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub n_units: usize,
    pub blocks: usize,
    pub width: usize,
    /// "half" or "even-odd".
    pub mask_style: String,
    /// "full" or "diagonal".
    pub w_structure: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dim: 2,
            n_units: 10,
            blocks: 2,
            width: 32,
            mask_style: MaskStyle::Half.name().to_string(),
            w_structure: TransitionStructure::Full.name().to_string(),
        }
    }
}

impl ModelSection {
    pub fn to_shape(&self) -> Result<ModelShape> {
        Ok(ModelShape {
            stack: StackShape {
                dim: self.dim,
                n_units: self.n_units,
                blocks: self.blocks,
                width: self.width,
                mask_style: MaskStyle::from_name(&self.mask_style)?,
            },
            w_structure: TransitionStructure::from_name(&self.w_structure)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_steps: usize,
    pub joint_steps: usize,
    pub seed: u64,
    /// "pretrain-only", "joint-only", or "both".
    pub phases: String,
    /// Global-norm gradient clip; null disables clipping.
    pub clip_norm: Option<f64>,
    pub freeze_flows_in_joint: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 64,
            learning_rate: 1e-3,
            pretrain_steps: 200,
            joint_steps: 200,
            seed: 0,
            phases: "both".to_string(),
            clip_norm: Some(5.0),
            freeze_flows_in_joint: false,
        }
    }
}

impl TrainSection {
    pub fn phase_plan(&self) -> Result<PhasePlan> {
        match self.phases.as_str() {
            "pretrain-only" => Ok(PhasePlan::PretrainOnly),
            "joint-only" => Ok(PhasePlan::JointOnly),
            "both" => Ok(PhasePlan::Both),
            other => Err(Error::invalid(format!(
                "unknown phase plan {other:?} (expected \"pretrain-only\", \"joint-only\", or \"both\")"
            ))),
        }
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            pretrain_steps: self.pretrain_steps,
            joint_steps: self.joint_steps,
            seed: self.seed,
            phases: self.phase_plan()?,
            clip_norm: self.clip_norm,
            freeze_flows_in_joint: self.freeze_flows_in_joint,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Generator kind; mutually exclusive with `file`.
    pub kind: Option<String>,
    pub stages: usize,
    pub n_per_stage: usize,
    pub seed: u64,
    /// Load pairs from a CSV instead of generating them.
    pub file: Option<PathBuf>,
    /// Fraction of pairs kept for training; the rest is held out.
    pub train_fraction: f64,
    /// Standardize pooled observations before training.
    pub standardize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: None,
            stages: 3,
            n_per_stage: 256,
            seed: 0,
            file: None,
            train_fraction: 0.9,
            standardize: false,
        }
    }
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if self.kind.is_some() && self.file.is_some() {
            return Err(Error::invalid(
                "data section sets both a generator kind and a file; pick one",
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.to_shape()?;
        self.train.to_train_config()?;
        self.data.validate()?;
        Ok(())
    }
}
