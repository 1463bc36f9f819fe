//! Multi-task pre-training: configuration, parameter groups, the training
//! step, the driver loop and checkpoints.

mod checkpoint;
mod config;
mod gradcheck;
mod step;
mod trainer;

pub use checkpoint::{
    load_checkpoint, load_into, read_container, save_checkpoint, Checkpoint, CheckpointManifest,
};
pub use config::{FinetuneConfig, RunConfig, TrainConfig};
pub use gradcheck::{gradcheck_fixture, pretrain_gradcheck, PretrainGradCheck};
pub use step::{
    batch_indices, batch_objective, build_param_groups, draw_plans, param_group, pretrain_step,
    step_rng, Optimizer, SamplePlan, StepTrace, FUSION, UNIMODAL,
};
pub use trainer::{Corpus, StepMetrics, Trainer};
