//! Experiment harness: data generation and ingestion, single trials, and
//! parameter sweeps.

pub mod experiment;
pub mod movielens;
pub mod synthetic;
pub mod trial;

pub use experiment::{run_experiment, EvalUnit, ExperimentConfig, ResultRow};
pub use movielens::{load_movielens, split_cold_items, train_cu_prior, RatingsTable};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use trial::{run_trial, AllocationPlan, TrialResult, UpdateRule};
