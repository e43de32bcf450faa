//! Experiment driver: configuration, seeded sweeps and the diagnostic suite.

pub mod config;
mod suite;
mod sweep;

pub use config::{
    DataConfig, DiagnosticsConfig, ExperimentConfig, FeaturesConfig, Library, OutputConfig,
    Regularization, SweepConfig,
};
pub use suite::*;
pub use sweep::{
    generate_training_set, ground_truth, noise_seed, probe_initial_condition,
    run_instability_sweep, run_instability_sweep_with, training_initial_condition,
    training_trajectory, CellRecord, SweepResult, MEAN_HEADER, RAW_HEADER, TIMING_HEADER,
};
