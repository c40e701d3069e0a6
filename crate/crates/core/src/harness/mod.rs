//! Configuration, experiment orchestration and CSV output.

mod compare;
pub mod config;
mod experiment;
mod sweep;

pub use compare::{
    fairness_experiment, schedule_experiment, FairnessRow, ScheduleOutcome, SchedulePair,
    TrajectoryPoint,
};
pub use config::{parse_config, parse_config_str, ConfigError, ConfigIssue, ExperimentConfig};
pub use experiment::{
    execute_run, measure_deviation, prepare_run, run_experiment, seed_dir, simulate_seed,
    write_run, HarnessError, PreparedRun, RunOutcome, RunSummary,
};
pub use sweep::{
    mean_se, run_sweep, SweepAxis, SweepFinal, SweepOutcome, SweepPointSummary, SweepRow,
    SweepSpec, SweepValue,
};

#[cfg(test)]
mod tests;
