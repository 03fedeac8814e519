//! The active training loop: train, validate, mine hard samples, generate, extend.

mod partition;
mod report;
mod run;

pub use partition::partition_dataset;
pub use report::{events_csv, lineage_csv, metrics_csv, mining_csv, write_reports, EVENTS_HEADER, LINEAGE_HEADER, METRICS_HEADER};
pub use run::{
    adversarial_probability, mean_pairwise_distance, prepare_data, pretrain_denoiser, run_experiment, split_pool, Arm,
    EventRow, ExperimentData, GeneratedRecord, LineageRow, MetricsRow, RunOptions, TrainState,
};

use crate::config::Config;
