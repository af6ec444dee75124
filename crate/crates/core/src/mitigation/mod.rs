//! The training lifecycle and the mitigation methods built on it.

pub mod embeddings;
pub mod losses;
pub mod methods;
pub mod params;
mod trainer;

pub use losses::{LossRecord, LossTerms};
pub use methods::{build_hooks, build_method};
pub use trainer::{
    base_trainer_run, evaluate_checkpoint, evaluate_split, lr_at, model_step, MethodState, RunOptions, RunOutcome, TrainContext, TrainerHooks,
};
