//! Paired comparisons: cooperating vs isolated groups, and fixed vs ramped
//! sync time. Both sides of a pair share the seed, hence data and streams.

use std::fs;

use rayon::prelude::*;

use super::config::{ExperimentConfig, RampConfig, SyncMode};
use super::experiment::{io_err, prepare_run, HarnessError, PreparedRun};
use crate::delay::SyncSchedule;
use crate::engine::{run_simulation, SimulationOptions, SimulationResult};
use crate::model::ModelVector;
use crate::objective::group_loss;

fn simulate(prepared: &PreparedRun) -> Result<SimulationResult, HarnessError> {
    run_simulation(
        &prepared.federation,
        &prepared.hyper,
        prepared.seed,
        SimulationOptions::default(),
    )
    .map_err(|source| HarnessError::Engine {
        seed: prepared.seed,
        source,
    })
}

fn accuracy(prepared: &PreparedRun, x: &ModelVector) -> f64 {
    prepared
        .federation
        .objective()
        .accuracy(&prepared.holdout, x)
        .unwrap_or(f64::NAN)
}

fn f(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessRow {
    pub seed: u64,
    pub group: usize,
    pub clients: usize,
    /// Holdout accuracy of the group's last local model when it trains alone.
    pub isolated_accuracy: f64,
    /// Holdout accuracy of the group's last local model in the joint run.
    pub hfl_accuracy: f64,
    pub isolated_loss: f64,
    pub hfl_loss: f64,
}

/// Runs the joint federation and every group on its own for each seed.
///
/// An isolated group is the single-group federation with the same data,
/// delays, stream keys, sync schedule and time budget. Writes
/// `fairness.csv` into the output directory.
pub fn fairness_experiment(config: &ExperimentConfig) -> Result<Vec<FairnessRow>, HarnessError> {
    config.validate()?;
    let per_seed: Vec<Result<Vec<FairnessRow>, HarnessError>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let prepared = prepare_run(config, seed)?;
            let joint = simulate(&prepared)?;
            let last = joint.rounds.last().expect("at least one round");
            let mut rows = Vec::new();
            for g in 0..prepared.federation.topology().num_groups() {
                let mut alone = prepared.clone();
                alone.federation = prepared
                    .federation
                    .isolate(g)
                    .map_err(|source| HarnessError::Engine { seed, source })?;
                let iso = simulate(&alone)?;
                let iso_model = &iso.rounds.last().expect("at least one round").group_models[0];
                let clients = &prepared.federation.clients()[g];
                let objective = prepared.federation.objective();
                rows.push(FairnessRow {
                    seed,
                    group: g,
                    clients: clients.len(),
                    isolated_accuracy: accuracy(&prepared, iso_model),
                    hfl_accuracy: accuracy(&prepared, &last.group_models[g]),
                    isolated_loss: group_loss(objective, clients, iso_model)?,
                    hfl_loss: group_loss(objective, clients, &last.group_models[g])?,
                });
            }
            Ok(rows)
        })
        .collect();
    let rows: Vec<FairnessRow> = per_seed
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = csv::Writer::from_path(dir.join("fairness.csv"))?;
    w.write_record([
        "seed",
        "group",
        "clients",
        "isolated_acc",
        "hfl_acc",
        "isolated_loss",
        "hfl_loss",
    ])?;
    for r in &rows {
        w.write_record([
            r.seed.to_string(),
            (r.group + 1).to_string(),
            r.clients.to_string(),
            f(r.isolated_accuracy),
            f(r.hfl_accuracy),
            f(r.isolated_loss),
            f(r.hfl_loss),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(rows)
}

/// One round of one side of a schedule comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub seed: u64,
    pub ramp: bool,
    pub u: u64,
    pub sync_time: f64,
    pub wall_clock: f64,
    /// `f(x^{u+1})`.
    pub loss: f64,
    /// Holdout accuracy of `x^{u+1}`.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulePair {
    pub seed: u64,
    pub fixed_final_accuracy: f64,
    pub ramp_final_accuracy: f64,
    pub fixed_final_loss: f64,
    pub ramp_final_loss: f64,
    pub fixed_rounds: u64,
    pub ramp_rounds: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOutcome {
    pub trajectories: Vec<TrajectoryPoint>,
    pub pairs: Vec<SchedulePair>,
}

fn trajectory(
    prepared: &PreparedRun,
    result: &SimulationResult,
    ramp: bool,
) -> Vec<TrajectoryPoint> {
    result
        .rounds
        .iter()
        .enumerate()
        .map(|(i, r)| TrajectoryPoint {
            seed: prepared.seed,
            ramp,
            u: r.u,
            sync_time: r.sync_time,
            wall_clock: r.wall_clock,
            loss: result.global_loss[i + 1],
            accuracy: accuracy(prepared, &result.global_models[i + 1]),
        })
        .collect()
}

/// Compares the config's fixed sync time with `ramp` on paired seeds. The
/// ramp must end at the fixed value. Writes `schedule.csv` (both
/// trajectories) and `schedule_summary.csv` (final metrics per seed).
pub fn schedule_experiment(
    config: &ExperimentConfig,
    ramp: RampConfig,
) -> Result<ScheduleOutcome, HarnessError> {
    config.validate()?;
    if config.sync.mode != SyncMode::Fixed {
        return Err(HarnessError::Experiment(
            "the schedule comparison needs a fixed sync time in the config".into(),
        ));
    }
    let fixed_s = config.sync.s.expect("validated");
    if ramp.end != fixed_s {
        return Err(HarnessError::Experiment(format!(
            "ramp end {} must equal the fixed sync time {fixed_s}",
            ramp.end
        )));
    }
    let ramp_schedule = SyncSchedule::ramp(ramp.start, ramp.end, ramp.step)
        .map_err(|e| HarnessError::Experiment(e.to_string()))?;

    let per_seed: Vec<Result<(Vec<TrajectoryPoint>, SchedulePair), HarnessError>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let fixed = prepare_run(config, seed)?;
            let mut ramped = fixed.clone();
            ramped.hyper.schedule = ramp_schedule;
            let a = simulate(&fixed)?;
            let b = simulate(&ramped)?;
            let mut points = trajectory(&fixed, &a, false);
            points.extend(trajectory(&ramped, &b, true));
            let pair = SchedulePair {
                seed,
                fixed_final_accuracy: accuracy(&fixed, a.final_model()),
                ramp_final_accuracy: accuracy(&ramped, b.final_model()),
                fixed_final_loss: *a.global_loss.last().expect("non-empty"),
                ramp_final_loss: *b.global_loss.last().expect("non-empty"),
                fixed_rounds: a.rounds_completed(),
                ramp_rounds: b.rounds_completed(),
            };
            Ok((points, pair))
        })
        .collect();
    let mut outcome = ScheduleOutcome {
        trajectories: Vec::new(),
        pairs: Vec::new(),
    };
    for r in per_seed {
        let (points, pair) = r?;
        outcome.trajectories.extend(points);
        outcome.pairs.push(pair);
    }

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = csv::Writer::from_path(dir.join("schedule.csv"))?;
    w.write_record([
        "seed",
        "schedule",
        "u",
        "sync_time",
        "wall_clock",
        "f_global",
        "acc",
    ])?;
    for p in &outcome.trajectories {
        w.write_record([
            p.seed.to_string(),
            if p.ramp { "ramp" } else { "fixed" }.to_string(),
            p.u.to_string(),
            f(p.sync_time),
            f(p.wall_clock),
            f(p.loss),
            f(p.accuracy),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = csv::Writer::from_path(dir.join("schedule_summary.csv"))?;
    w.write_record([
        "seed",
        "fixed_final_acc",
        "ramp_final_acc",
        "acc_diff",
        "fixed_final_loss",
        "ramp_final_loss",
        "fixed_rounds",
        "ramp_rounds",
    ])?;
    for p in &outcome.pairs {
        w.write_record([
            p.seed.to_string(),
            f(p.fixed_final_accuracy),
            f(p.ramp_final_accuracy),
            f(p.ramp_final_accuracy - p.fixed_final_accuracy),
            f(p.fixed_final_loss),
            f(p.ramp_final_loss),
            p.fixed_rounds.to_string(),
            p.ramp_rounds.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(outcome)
}
