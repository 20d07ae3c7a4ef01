//! Configuration, the sampling loop, metrics, comparison and sweep drivers,
//! and output files.

mod commands;
mod config;
mod metrics;
mod output;
mod run;

pub use commands::{
    all_step_date, compare, compare_variants, sample, sweep, train, verify, write_compare, write_sweep, CompareReport,
    CompareRow, SweepParam, SweepReport, SweepRow, COMPARE_HEADER,
};

pub use config::{load_config, ExperimentConfig, HSpec, ModelSpec, SamplerKind, ScheduleSpec, WeightedHSpec};
pub use metrics::{
    compute_metrics, config_hash, gaussian_frechet, mean_and_se, moments, paired_t_test, MetricsReport, PairedTest,
};
pub use output::{csv_string, fmt9, round9, round_json, to_rounded_json, write_csv, write_json, write_jsonl, Cell};
pub use run::{run_experiment, EmbeddingMethod, Experiment, PhaseTimes, StepRecord, TrajectoryRecord};
