//! Optimizers, schedules and the three optimization phases: prior
//! training, latent inversion and finetuning.

mod config;
mod fit;
mod log;
mod objective;
mod optim;
mod prior;

pub use config::{FitConfig, InversionConfig, TrainConfig};
pub use fit::{
    finetune, finetune_with, identity_distance, init_latent, invert_latent, invert_latent_with,
    FittedModel, InitContext, InitStrategy, DEFAULT_NOISE_STD,
};
pub use log::{log_header, moving_average, write_log, StepRecord};
pub use objective::{
    patch_objective, ray_objective, ObjectiveWeights, PatchTarget, RayTargets, StepGradients,
    RAY_CHUNK,
};
pub use optim::{
    adam_step, clip_gradients, lr_at_step, AdamHyper, AdamState, Schedule, SparseAdam,
};
pub use prior::{mix_seed, train_prior, train_prior_with, PriorModel};
