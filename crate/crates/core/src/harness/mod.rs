//! Experiment registry, configuration, table emission and rate fitting.

mod config;
mod oracles;
mod rate;
mod run;

pub use config::{
    AcceptanceSection, ConvergenceSection, DriftMatrix, ExperimentConfig, ExperimentId, ProblemSection, SplittingSection, SweepSection,
};
pub use oracles::{run_oracle_suite, OracleCheck};
pub use rate::{fit_rate, RateFit};
pub use run::{
    rate_l1_criterion, rate_linf_criterion, run_experiment, run_table, table_csv, AcceptanceReport, CellOutcome, CriterionResult,
    RunOptions, TableRun, FLOAT_FORMAT,
};
