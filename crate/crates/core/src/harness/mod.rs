//! Experiment orchestration: configs, runs, sweeps, metrics and figures.

mod ablate;
mod config;
mod inference;
mod metrics;
mod plot;
mod run;

pub use ablate::{ablate, child_config, exceeds_by_sd, parse_values, AblationReport, ChildRun};
pub use config::{parse_value, set_path, Assertion, BaselineConfig, CmpOp, DatasetConfig, EvalConfig, ExperimentConfig, CONFIG_VERSION};
pub use inference::{inference_comparison, InferenceReport, MethodResult};
pub use metrics::{decile_means, mean, mmd2, mode_fractions, std_dev, std_err, welch_lower_bound, Bandwidth, ModeFractions, Z95};
pub use plot::{line_plot, plot_emit, plot_inference, read_columns, Series};
pub use run::{
    build_state_reward, evaluate_checkpoint, first_step_at_or_below, initial_model, metrics_header, run_experiment, summarize, EvalResult,
    Evaluator, MetricRecord, RunOutcome,
};
