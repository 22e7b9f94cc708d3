//! Experiment orchestration: dataset generation, both training stages,
//! evaluation, the ablation grid and multi-seed aggregation, with every
//! stage's artifacts stamped by the digests that produced them.

mod config;
mod multirun;
mod run;

pub use config::{Ablation, AblationGrid, ExperimentConfig};
pub use multirun::{aggregate, multirun, Aggregate, AggregateRow, SeedFailure, AGGREGATE_SCHEMA_VERSION, METRICS};
pub use run::{
    read_report, run_experiment, run_seed, seed_dir, AblationOutcome, ExperimentSpec, SeedOutcome, StageEvent,
    StageName, StageRecord, StageStatus, CHECKPOINT_FILE, STAGE_RECORD, TRAIN_LOG_FILE,
};
