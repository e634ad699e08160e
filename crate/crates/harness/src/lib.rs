//! Config-driven experiment orchestration for the prediction ensemble:
//! scenario generation, concurrent expert/router training, zero-shot
//! cross-distribution evaluation, and the OOD-ratio and horizon ablation
//! sweeps, all emitted as auditable CSV artifacts in one run directory.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate_horizon, cmd_ablate_ood, cmd_eval, cmd_generate, cmd_report, cmd_train, EvalRow,
    RunPaths,
};
pub use config::ExperimentConfig;
