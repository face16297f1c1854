//! Configuration-driven experiments: run grids, λ sweeps, reports and the
//! gradient-check suite.

mod config;
mod decompose;
mod gradcheck;
mod report;
mod run;
mod sweep;

pub use config::{ExperimentConfig, TrainingConfig, DEFAULT_LAMBDAS};
pub use decompose::{decompose_predictions, EnsembleDecomposition};
pub use gradcheck::{
    gradcheck_op, gradcheck_suite, GradcheckCase, GRADCHECK_EPS, GRADCHECK_OPS, GRADCHECK_TOL,
};
pub use report::{
    mean_std, read_finals_csv, read_predictions_csv, read_runs_csv, summarize, write_reports,
    FinalRow, Prediction, PredictionRow, ReportWriter, RunReport, RunRow, Summary, SummaryGroup,
    RUNS_COLUMNS,
};
pub use run::{execute_run, plan_runs, run_experiment, select_lambda, RunSpec};
pub use sweep::{lambda_sweep, render_svg, SweepPoint, SweepReport};
