//! Declarative experiment configuration and the commands that produce every
//! artifact.
//!
//! A run is addressed by its validated config. The master seeds split into
//! per-purpose streams (see [`crate::rng`]): `data_seed` drives features,
//! clusters and populations; each entry of `seeds` drives one speaker's
//! initialization, training sequences and evaluation sequences.

mod commands;
mod config;
mod gradsuite;
mod manifest;
mod pipeline;

pub use commands::{paths, run_command, Command, RunOptions, LOCK_FILE};
pub use config::{
    validate_config, EvaluationConfig, ExperimentConfig, FeatureSource, FeaturesConfig, GradcheckConfig, LevelConfig,
    PopulationConfig,
};
pub use gradsuite::{gradcheck_verdict, run_gradcheck_suite, GRADCHECK_TOLERANCE};
pub use manifest::{sha256_file, CommandRecord, Manifest, MANIFEST_FILE};
pub use pipeline::{
    build_features, build_populations, evaluate_clusters, evaluate_reward_curve, evaluate_usage, train_seed,
    ClusterEval, Features, Populations, World,
};
