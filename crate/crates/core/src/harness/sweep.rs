use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::config::{DelayParams, ExperimentConfig, RampConfig, SyncMode};
use super::experiment::{io_err, simulate_seed, HarnessError};

/// The quantity a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Fixed sync time `S`.
    SyncTime,
    /// Shift of the global delay.
    GlobalShift,
    /// Client count per group.
    Association,
    /// Fixed or ramped sync schedule.
    Schedule,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" | "sync" => Ok(Self::SyncTime),
            "cg" | "global_shift" => Ok(Self::GlobalShift),
            "association" => Ok(Self::Association),
            "schedule" => Ok(Self::Schedule),
            other => Err(format!(
                "unknown sweep axis {other:?}; expected s, cg, association or schedule"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepValue {
    SyncTime(f64),
    GlobalShift(f64),
    /// Written `5/25`.
    Association(Vec<usize>),
    /// Written `fixed:5` or `ramp:1:5:1`.
    Fixed(f64),
    Ramp(RampConfig),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SyncTime(v) | Self::GlobalShift(v) => write!(f, "{v}"),
            Self::Association(sizes) => {
                let parts: Vec<String> = sizes.iter().map(|n| n.to_string()).collect();
                write!(f, "{}", parts.join("/"))
            }
            Self::Fixed(s) => write!(f, "fixed:{s}"),
            Self::Ramp(r) => write!(f, "ramp:{}:{}:{}", r.start, r.end, r.step),
        }
    }
}

fn number(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| format!("{s:?} is not a number"))
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, text: &str) -> Result<Self, String> {
        let text = text.trim();
        match axis {
            SweepAxis::SyncTime => number(text).map(Self::SyncTime),
            SweepAxis::GlobalShift => number(text).map(Self::GlobalShift),
            SweepAxis::Association => text
                .split('/')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| format!("{p:?} is not a client count"))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Self::Association),
            SweepAxis::Schedule => {
                let parts: Vec<&str> = text.split(':').collect();
                match parts.as_slice() {
                    ["fixed", s] => number(s).map(Self::Fixed),
                    ["ramp", a, b, c] => Ok(Self::Ramp(RampConfig {
                        start: number(a)?,
                        end: number(b)?,
                        step: number(c)?,
                    })),
                    _ => Err(format!(
                        "{text:?} is neither fixed:S nor ramp:START:END:STEP"
                    )),
                }
            }
        }
    }

    /// `config` with this value substituted.
    pub fn apply(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = config.clone();
        match self {
            Self::SyncTime(s) | Self::Fixed(s) => {
                c.sync.mode = SyncMode::Fixed;
                c.sync.s = Some(*s);
            }
            Self::Ramp(r) => {
                c.sync.mode = SyncMode::Ramp;
                c.sync.ramp = Some(*r);
            }
            Self::GlobalShift(shift) => {
                c.delay.global = DelayParams {
                    shift: *shift,
                    rate: c.delay.global.rate,
                };
            }
            Self::Association(sizes) => c.topology.groups = sizes.clone(),
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Parses a comma-separated value list; seeds come from the config.
    pub fn parse(axis: &str, values: &str, seeds: Vec<u64>) -> Result<Self, String> {
        let axis: SweepAxis = axis.parse()?;
        let values = values
            .split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| SweepValue::parse(axis, v))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = Self {
            axis,
            values,
            seeds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.values.is_empty() {
            return Err("a sweep needs at least one value".into());
        }
        if self.seeds.is_empty() {
            return Err("a sweep needs at least one seed".into());
        }
        Ok(())
    }
}

/// Final metrics of one (point, seed) run, or its failure.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: String,
    pub seed: u64,
    pub outcome: Result<SweepFinal, String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepFinal {
    pub rounds: u64,
    pub wall_clock: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Mean and standard error over the successful seeds of one point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPointSummary {
    pub point: String,
    pub ok: usize,
    pub failed: usize,
    pub mean_loss: f64,
    pub se_loss: f64,
    pub mean_accuracy: f64,
    pub se_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepPointSummary>,
    /// Where `sweep.csv` and `sweep_summary.csv` were written.
    pub dir: PathBuf,
}

/// Sample mean and standard error (0 for a single value, NaN for none).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Runs every (value, seed) pair in parallel. Failed points are recorded and
/// the sweep continues. Writes `sweep.csv` and `sweep_summary.csv` into the
/// config's output directory.
pub fn run_sweep(
    config: &ExperimentConfig,
    sweep: &SweepSpec,
) -> Result<SweepOutcome, HarnessError> {
    config.validate()?;
    sweep.validate().map_err(HarnessError::Experiment)?;
    let jobs: Vec<(String, ExperimentConfig, u64)> = sweep
        .values
        .iter()
        .flat_map(|v| {
            let c = v.apply(config);
            sweep
                .seeds
                .iter()
                .map(move |&seed| (v.to_string(), c.clone(), seed))
        })
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|(point, c, seed)| {
            let outcome = simulate_seed(c, *seed)
                .map(|o| SweepFinal {
                    rounds: o.summary.rounds,
                    wall_clock: o.summary.wall_clock,
                    final_loss: o.summary.final_loss,
                    final_accuracy: o.summary.final_accuracy,
                })
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("sweep point {point}, seed {seed} failed: {e}");
            }
            SweepRow {
                point: point.clone(),
                seed: *seed,
                outcome,
            }
        })
        .collect();

    let summary = sweep
        .values
        .iter()
        .map(|v| {
            let point = v.to_string();
            let finals: Vec<SweepFinal> = rows
                .iter()
                .filter(|r| r.point == point)
                .filter_map(|r| r.outcome.as_ref().ok().copied())
                .collect();
            let failed = rows
                .iter()
                .filter(|r| r.point == point && r.outcome.is_err())
                .count();
            let (mean_loss, se_loss) =
                mean_se(&finals.iter().map(|f| f.final_loss).collect::<Vec<_>>());
            let (mean_accuracy, se_accuracy) =
                mean_se(&finals.iter().map(|f| f.final_accuracy).collect::<Vec<_>>());
            SweepPointSummary {
                point,
                ok: finals.len(),
                failed,
                mean_loss,
                se_loss,
                mean_accuracy,
                se_accuracy,
            }
        })
        .collect();

    let outcome = SweepOutcome {
        rows,
        summary,
        dir: config.output_dir.clone(),
    };
    write_sweep(&outcome)?;
    Ok(outcome)
}

fn f(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

fn write_sweep(outcome: &SweepOutcome) -> Result<(), HarnessError> {
    let dir: &Path = &outcome.dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record([
        "point",
        "seed",
        "status",
        "rounds",
        "wall_clock",
        "final_loss",
        "final_acc",
        "error",
    ])?;
    for r in &outcome.rows {
        match &r.outcome {
            Ok(v) => w.write_record([
                r.point.clone(),
                r.seed.to_string(),
                "ok".into(),
                v.rounds.to_string(),
                f(v.wall_clock),
                f(v.final_loss),
                f(v.final_accuracy),
                String::new(),
            ])?,
            Err(e) => w.write_record([
                r.point.clone(),
                r.seed.to_string(),
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ])?,
        }
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = csv::Writer::from_path(dir.join("sweep_summary.csv"))?;
    w.write_record([
        "point",
        "ok",
        "failed",
        "mean_loss",
        "se_loss",
        "mean_acc",
        "se_acc",
    ])?;
    for s in &outcome.summary {
        w.write_record([
            s.point.clone(),
            s.ok.to_string(),
            s.failed.to_string(),
            f(s.mean_loss),
            f(s.se_loss),
            f(s.mean_accuracy),
            f(s.se_accuracy),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_values() {
        let s = SweepSpec::parse("s", "0, 5,20", vec![1]).unwrap();
        assert_eq!(
            s.values,
            vec![
                SweepValue::SyncTime(0.0),
                SweepValue::SyncTime(5.0),
                SweepValue::SyncTime(20.0)
            ]
        );
        let a = SweepSpec::parse("association", "5/25,15/15", vec![1]).unwrap();
        assert_eq!(a.values[0], SweepValue::Association(vec![5, 25]));
        assert_eq!(a.values[1].to_string(), "15/15");
        let sch = SweepSpec::parse("schedule", "fixed:5,ramp:1:5:1", vec![1]).unwrap();
        assert_eq!(sch.values[0], SweepValue::Fixed(5.0));
        assert_eq!(sch.values[1].to_string(), "ramp:1:5:1");
        assert!(SweepSpec::parse("bogus", "1", vec![1]).is_err());
        assert!(SweepSpec::parse("s", "", vec![1]).is_err());
        assert!(SweepSpec::parse("s", "1", vec![]).is_err());
        assert!(SweepSpec::parse("schedule", "ramp:1:5", vec![1]).is_err());
    }

    #[test]
    fn mean_se_examples() {
        assert_eq!(mean_se(&[2.0]), (2.0, 0.0));
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(mean_se(&[]).0.is_nan());
    }
}
