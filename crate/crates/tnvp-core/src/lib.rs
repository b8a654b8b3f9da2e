//! Invertible coupling flows with exact densities, plus a linear-Gaussian
//! transition between flow latents for modeling ordered stage sequences.

pub mod checkpoint;
pub mod coupling;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod params;
pub mod resnet;
pub mod scalar;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use coupling::{CouplingNet, FlowStack, MappingUnit, StackShape};
pub use data::{
    generate_drift_dataset, load_dataset, save_dataset, DatasetKind, Provenance, StagePair,
    StageSequenceDataset,
};
pub use error::{Error, Result};
pub use gradcheck::{
    compare_gradients, finite_diff_gradient, log_abs_det_lu, mvn_logpdf, numerical_jacobian,
    GradCompare,
};
pub use mask::{BinaryMask, MaskStyle};
pub use model::{
    standard_normal_logpdf, synthesize_chain, ModelShape, Noise, TNVPModel, TemporalTransition,
    TransitionStructure,
};
pub use params::{GradientRecord, ParameterStore, SlotId};
pub use resnet::ResidualNet;
pub use scalar::Scalar;
pub use selfcheck::{
    all_passed, integrate_conditional_density, run_selfcheck, CheckResult, FaultInjection,
};
pub use tape::{Backprop, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{
    mean_conditional_nll, parameter_checksum, pretrain_stack, sgd_step, train_temporal, PhasePlan,
    TrainConfig, TrainReport,
};
