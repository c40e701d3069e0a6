use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use super::config::{DataSource, ExperimentConfig, ObjectiveKindConfig};
use crate::bounds::{
    kappa, lemma1_deviation_bound, theorem1_group_bound, theorem2_global_bound, BoundParams,
    BoundReport, BoundsError,
};
use crate::engine::{
    initial_model, run_simulation, EngineError, Federation, HyperParams, SimulationOptions,
    SimulationResult,
};
use crate::model::ModelVector;
use crate::objective::{
    estimate_constants, generate_pool, group_loss, load_csv, partition, split_holdout,
    ObjectiveError, Provenance, Sample, SmoothnessConstants, SyntheticKind, SyntheticSpec,
};
use crate::rng::{Purpose, RngStream, StreamKey};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error("data: {0}")]
    Data(#[from] ObjectiveError),
    #[error("objective: {0}")]
    Objective(String),
    #[error("seed {seed}: {source}")]
    Engine {
        seed: u64,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error("{0}")]
    Experiment(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to simulate one seed of a configuration.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub seed: u64,
    pub federation: Federation,
    pub hyper: HyperParams,
    /// Held-out samples for accuracy.
    pub holdout: Vec<Sample>,
    pub constants: SmoothnessConstants,
}

fn synthetic_spec(config: &ExperimentConfig) -> SyntheticSpec {
    let d = &config.data;
    let dim = d.dim.expect("validated");
    let mut spec = match config.objective.kind {
        ObjectiveKindConfig::Logistic => SyntheticSpec::logistic(dim, d.samples_per_client),
        ObjectiveKindConfig::Quadratic => {
            SyntheticSpec::quadratic(dim, d.classes.unwrap_or(10), d.samples_per_client)
        }
    };
    if let Some(s) = d.spread {
        spec.spread = s;
    }
    if let Some(n) = d.noise {
        spec.noise = n;
    }
    spec.intercept = spec.kind == SyntheticKind::Logistic && d.intercept;
    spec
}

/// Builds data, topology, objective and bound constants for `seed`.
pub fn prepare_run(config: &ExperimentConfig, seed: u64) -> Result<PreparedRun, HarnessError> {
    config.validate()?;
    let root = RngStream::new(seed);
    let mut data_rng = root.substream(StreamKey::new(Purpose::Data));
    let sizes = &config.topology.groups;
    let total_clients: usize = sizes.iter().sum();
    let tf = config.data.test_fraction;

    let pool = match config.data.source {
        DataSource::Synthetic => {
            let spec = synthetic_spec(config);
            let train = total_clients * spec.samples_per_client;
            let n = ((train as f64) / (1.0 - tf)).round() as usize;
            generate_pool(&spec, n, &mut data_rng)?
        }
        DataSource::Csv => load_csv(config.data.path.as_deref().expect("validated"))?,
    };
    let (train, holdout) = split_holdout(pool, tf, &mut data_rng);
    let mut part_rng = root.substream(StreamKey::new(Purpose::Partition));
    let assignment = partition(&train, sizes, config.partition_mode(), &mut part_rng)?;
    let clients = assignment.apply(&train)?;

    let dim = clients[0][0].feature_dim();
    let objective = config.objective(dim).map_err(HarnessError::Objective)?;
    let federation = Federation::new(config.topology(), objective, clients)
        .map_err(|source| HarnessError::Engine { seed, source })?;
    let hyper = HyperParams {
        alpha: config.training.alpha,
        schedule: config.schedule(),
        total_time: config.training.total_time,
        clip: config.training.clip,
        batch: config.batch(),
        init: config.init(),
    };

    let center = initial_model(hyper.init, dim, &root);
    let b = &config.bounds;
    let mut constants = estimate_constants(
        federation.objective(),
        federation.clients(),
        &center,
        &hyper.batch,
        hyper.clip,
        &config.probe(seed),
    )?;
    if let Some(l) = b.l {
        constants.l = l;
        constants.l_provenance = Provenance::UserSupplied;
    }
    if let Some(g) = b.g {
        constants.g = g;
        constants.g_provenance = Provenance::UserSupplied;
    }
    if let Some(s) = b.sigma {
        constants.sigma = s;
        constants.sigma_provenance = Provenance::UserSupplied;
    }

    Ok(PreparedRun {
        seed,
        federation,
        hyper,
        holdout,
        constants,
    })
}

/// `‖x^{u+1} − x_i^{u,t_i^u}‖²` for every group.
pub fn measure_deviation(global_next: &ModelVector, group_models: &[ModelVector]) -> Vec<f64> {
    group_models
        .iter()
        .map(|m| global_next.squared_distance(m))
        .collect()
}

/// Everything a finished run produced, plus the rendered CSV tables.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub prepared: PreparedRun,
    pub result: SimulationResult,
    pub theorem2: BoundReport,
    pub theorem1: Vec<BoundReport>,
    pub summary: RunSummary,
    pub rounds_csv: String,
    pub bounds_csv: String,
    pub summary_csv: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub rounds: u64,
    pub wall_clock: f64,
    /// `f(x^{U+1})`.
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    /// `(1/U) Σ_{u=1}^U ‖∇f(x^u)‖²`.
    pub avg_grad_norm_sq: f64,
    /// Holdout accuracy of `x^{U+1}`; NaN for non-classifiers.
    pub final_accuracy: f64,
    /// Holdout accuracy of each group's last local model `x_i^{U,t}`.
    pub group_accuracy: Vec<f64>,
}

fn accuracy(prepared: &PreparedRun, x: &ModelVector) -> f64 {
    prepared
        .federation
        .objective()
        .accuracy(&prepared.holdout, x)
        .unwrap_or(f64::NAN)
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn render(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Experiment(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn per_group(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_g{i}"))
}

fn bound_params(prepared: &PreparedRun) -> BoundParams {
    BoundParams {
        alpha: prepared.hyper.alpha,
        l: prepared.constants.l,
        g: prepared.constants.g,
        sigma: prepared.constants.sigma,
    }
}

/// Simulates a prepared run and renders its tables.
pub fn execute_run(
    config: &ExperimentConfig,
    prepared: PreparedRun,
) -> Result<RunOutcome, HarnessError> {
    let seed = prepared.seed;
    let fed = &prepared.federation;
    let result = run_simulation(fed, &prepared.hyper, seed, SimulationOptions::default())
        .map_err(|source| HarnessError::Engine { seed, source })?;
    let sizes = fed.topology().group_sizes();
    let n = sizes.len();
    let objective = fed.objective();
    let params = bound_params(&prepared);

    let mut header = vec!["u".to_string(), "wall_clock".to_string()];
    header.extend(per_group("t", n));
    header.extend(["f_global".to_string(), "grad_norm_sq".to_string()]);
    for prefix in ["loss", "acc", "dev", "lemma1"] {
        header.extend(per_group(prefix, n));
    }
    let mut rows = Vec::with_capacity(result.rounds.len());
    for (idx, round) in result.rounds.iter().enumerate() {
        let mut row = vec![round.u.to_string(), fmt(round.wall_clock)];
        row.extend(round.iterations.iter().map(|t| t.to_string()));
        row.push(fmt(result.global_loss[idx]));
        row.push(fmt(result.grad_norm_sq[idx]));
        for (g, model) in round.group_models.iter().enumerate() {
            row.push(fmt(group_loss(objective, &fed.clients()[g], model)?));
        }
        for model in &round.group_models {
            row.push(fmt(accuracy(&prepared, model)));
        }
        let dev = measure_deviation(&result.global_models[idx + 1], &round.group_models);
        row.extend(dev.into_iter().map(fmt));
        for &t in &round.iterations {
            let b = lemma1_deviation_bound(t, &sizes, params.alpha, params.g)
                .map_or(f64::NAN, |b| b.total);
            row.push(fmt(b));
        }
        rows.push(row);
    }
    let rounds_csv = render(header, rows)?;

    let f_first = result.global_loss[0];
    let f_last = *result.global_loss.last().expect("non-empty");
    let gap = f_first - config.bounds.loss_lower_bound.unwrap_or(f_last);
    let history = result.iteration_history();
    let theorem2 = theorem2_global_bound(params, &sizes, &history, gap)?;
    let k = kappa(&sizes)?;
    let last = result.rounds.last().expect("at least one round");
    let mut theorem1 = Vec::with_capacity(n);
    for (g, &size) in sizes.iter().enumerate() {
        let clients = &fed.clients()[g];
        let start = group_loss(objective, clients, &result.global_models[0])?;
        let end = group_loss(objective, clients, &last.group_models[g])?;
        let group_gap = start - config.bounds.loss_lower_bound.unwrap_or(end);
        theorem1.push(theorem1_group_bound(
            params,
            size,
            k,
            &history.group(g),
            group_gap,
        )?);
    }

    let c = &prepared.constants;
    let mut header: Vec<String> = [
        "seed",
        "rounds",
        "alpha",
        "l",
        "l_source",
        "g",
        "g_source",
        "sigma",
        "sigma_source",
        "kappa",
        "loss_gap",
        "alpha_exceeds_inverse_l",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(per_group("n", n));
    header.extend(per_group("sum_t", n));
    header.extend((1..=5).map(|i| format!("t2_term{i}")));
    header.push("t2_total".into());
    let mut row = vec![
        seed.to_string(),
        result.rounds_completed().to_string(),
        fmt(params.alpha),
        fmt(c.l),
        c.l_provenance.as_str().into(),
        fmt(c.g),
        c.g_provenance.as_str().into(),
        fmt(c.sigma),
        c.sigma_provenance.as_str().into(),
        fmt(k),
        fmt(gap),
        theorem2.alpha_exceeds_inverse_l.to_string(),
    ];
    row.extend(sizes.iter().map(|s| s.to_string()));
    row.extend((0..n).map(|g| history.group(g).iter().sum::<u64>().to_string()));
    row.extend(theorem2.term_values().into_iter().map(fmt));
    row.push(fmt(theorem2.total));
    let bounds_csv = render(header, vec![row])?;

    let rounds = result.rounds_completed();
    let avg_grad_norm_sq =
        result.grad_norm_sq[..rounds as usize].iter().sum::<f64>() / rounds as f64;
    let summary = RunSummary {
        rounds,
        wall_clock: result.wall_clock(),
        final_loss: f_last,
        final_grad_norm_sq: *result.grad_norm_sq.last().expect("non-empty"),
        avg_grad_norm_sq,
        final_accuracy: accuracy(&prepared, result.final_model()),
        group_accuracy: last
            .group_models
            .iter()
            .map(|m| accuracy(&prepared, m))
            .collect(),
    };
    let mut header: Vec<String> = [
        "seed",
        "rounds",
        "wall_clock",
        "final_loss",
        "final_grad_norm_sq",
        "avg_grad_norm_sq",
        "final_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(per_group("acc", n));
    header.extend((1..=5).map(|i| format!("t2_term{i}")));
    header.extend(["t2_total".to_string(), "t2_holds".to_string()]);
    header.extend(per_group("t1_total", n));
    let mut row = vec![
        seed.to_string(),
        rounds.to_string(),
        fmt(summary.wall_clock),
        fmt(summary.final_loss),
        fmt(summary.final_grad_norm_sq),
        fmt(summary.avg_grad_norm_sq),
        fmt(summary.final_accuracy),
    ];
    row.extend(summary.group_accuracy.iter().map(|&a| fmt(a)));
    row.extend(theorem2.term_values().into_iter().map(fmt));
    row.push(fmt(theorem2.total));
    row.push((summary.avg_grad_norm_sq <= theorem2.total).to_string());
    row.extend(theorem1.iter().map(|r| fmt(r.total)));
    let summary_csv = render(header, vec![row])?;

    Ok(RunOutcome {
        seed,
        prepared,
        result,
        theorem2,
        theorem1,
        summary,
        rounds_csv,
        bounds_csv,
        summary_csv,
    })
}

/// Prepares and simulates one seed without touching the filesystem.
pub fn simulate_seed(config: &ExperimentConfig, seed: u64) -> Result<RunOutcome, HarnessError> {
    let prepared = prepare_run(config, seed)?;
    execute_run(config, prepared)
}

/// Writes the three tables of `outcome` into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, body) in [
        ("rounds.csv", &outcome.rounds_csv),
        ("bounds.csv", &outcome.bounds_csv),
        ("summary.csv", &outcome.summary_csv),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    let failed = dir.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).map_err(io_err(&failed))?;
    }
    Ok(())
}

/// Directory of one seed's run below `root`.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Runs every seed of `config`, writing `<output_dir>/seed_<n>/`.
///
/// Seeds run in parallel. A failing seed leaves a `FAILED` file holding the
/// error in its directory; the first failure is returned after all seeds
/// finished.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunOutcome>, HarnessError> {
    config.validate()?;
    let results: Vec<Result<RunOutcome, HarnessError>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(&config.output_dir, seed);
            let outcome = simulate_seed(config, seed).and_then(|o| write_run(&dir, &o).map(|_| o));
            if let Err(e) = &outcome {
                log::error!("seed {seed} failed: {e}");
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let path = dir.join("FAILED");
                fs::write(&path, format!("{e}\n")).map_err(io_err(&path))?;
            }
            outcome
        })
        .collect();
    results.into_iter().collect()
}
