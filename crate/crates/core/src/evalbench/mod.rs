//! Experiment harness: sampling comparisons, τ-schedule ablations, rollout
//! metrics and wall-clock speedup.

pub mod coverage;
pub mod metrics;
pub mod pipeline;
pub mod speed;
pub mod studies;

pub use coverage::{timescale_coverage, unfiltered_chains, CoverageReport};
pub use metrics::{
    config_hash, dominant_frequency, log_histogram, median, relative_errors, rollout_rmse, spearman, Rmse,
    SpectrumPeak, REL_ERROR_FLOOR,
};
pub use pipeline::{
    compare_sampling, compare_tau_strategies, evaluate, generate_dataset, range_for, reference_trajectory,
    run_experiment, train_and_evaluate, ExperimentConfig, ExperimentResult, MetricsReport, RangeSpec, RolloutSpec,
    SamplingMethod, SweepRow, TauComparison,
};
pub use speed::{measure_speedup, time_median, SpeedConfig, Speedup};
pub use studies::{sampling_study, tau_study, SamplingStudy, TauStudy};
