//! Experiment orchestration, synthetic corpora and report rendering.

pub mod experiment;
pub mod report;
pub mod synthetic;

pub use experiment::{
    run_experiment, Arm, ExperimentConfig, FractionRecord, RunRecord, SplitStrategy,
};
pub use report::{arm_deltas, format_delta, ApScale, ApTable};
pub use synthetic::{generate_synthetic, SynthParams, SyntheticCorpus};
