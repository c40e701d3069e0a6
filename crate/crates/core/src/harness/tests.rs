use super::config::RampConfig;
use super::*;
use crate::engine::{run_simulation, Event, SimulationOptions};
use crate::model::ModelVector;
use crate::objective::global_gradient;

fn config(extra: &str, dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [1, 2]
output_dir = "{}"

[topology]
groups = [3, 4]

[[delay.group]]
shift = 1.0
rate = 2.0
[[delay.group]]
shift = 0.5
rate = 1.0

[delay.global]
shift = 2.0
rate = 1.0

[sync]
s = 3.0

[training]
alpha = 0.1
total_time = 40.0
batch_size = 4

[objective]
kind = "logistic"
regularization = 0.01

[data]
dim = 4
samples_per_client = 20
{extra}
"#,
        dir.display()
    );
    parse_config_str(&text).unwrap()
}

fn quadratic_config(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [5]
output_dir = "{}"

[topology]
groups = [4]

[[delay.group]]
shift = 1.0

[delay.global]
shift = 1.0

[sync]
s = 0.0

[training]
alpha = 0.3
total_time = 12.0
init = "zeros"

[objective]
kind = "quadratic"
hessian = [2.0, 0.5, 1.0]

[data]
dim = 3
classes = 4
samples_per_client = 10
"#,
        dir.display()
    );
    parse_config_str(&text).unwrap()
}

#[test]
fn rounds_csv_has_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("", dir.path());
    let outcomes = run_experiment(&c).unwrap();
    assert_eq!(outcomes.len(), 2);
    for o in &outcomes {
        let text =
            std::fs::read_to_string(seed_dir(dir.path(), o.seed).join("rounds.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "u,wall_clock,t_g1,t_g2,f_global,grad_norm_sq,loss_g1,loss_g2,acc_g1,acc_g2,dev_g1,dev_g2,lemma1_g1,lemma1_g2"
        );
        assert_eq!(lines.count() as u64, o.result.rounds_completed());
        let bounds =
            std::fs::read_to_string(seed_dir(dir.path(), o.seed).join("bounds.csv")).unwrap();
        let header = bounds.lines().next().unwrap();
        for name in [
            "t2_term1", "t2_term2", "t2_term3", "t2_term4", "t2_term5", "t2_total",
        ] {
            assert!(header.contains(name));
        }
        assert_eq!(bounds.lines().count(), 2);
        assert!(seed_dir(dir.path(), o.seed).join("summary.csv").exists());
    }
}

#[test]
fn identical_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&config("", a.path())).unwrap();
    run_experiment(&config("", b.path())).unwrap();
    for name in ["rounds.csv", "bounds.csv", "summary.csv"] {
        let x = std::fs::read(seed_dir(a.path(), 1).join(name)).unwrap();
        let y = std::fs::read(seed_dir(b.path(), 1).join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn gradient_descent_oracle() {
    // One group, S = 0, full batch: every round is one GD step on f, so
    // f(x^u) follows x^{u+1} = x^u − α ∇f(x^u) computed from scratch.
    let dir = tempfile::tempdir().unwrap();
    let c = quadratic_config(dir.path());
    let o = simulate_seed(&c, 5).unwrap();
    assert_eq!(o.result.rounds_completed(), 6);
    let fed = &o.prepared.federation;
    // With H diagonal and targets z_s, ∇f(x) = H (x − z̄) where z̄ is the
    // client-weighted target mean; the loss differs from ½(x−z̄)ᵀH(x−z̄) by a
    // constant.
    let clients: Vec<_> = fed.clients().iter().flatten().collect();
    let mut zbar = [0.0; 3];
    for cl in &clients {
        for s in cl.samples() {
            for j in 0..3 {
                zbar[j] += s.features[j] / (cl.len() * clients.len()) as f64;
            }
        }
    }
    let h = [2.0, 0.5, 1.0];
    let mut x = [0.0; 3];
    let offset =
        o.result.global_loss[0] - (0..3).map(|j| 0.5 * h[j] * zbar[j] * zbar[j]).sum::<f64>();
    for u in 0..=6 {
        let model_loss = offset
            + (0..3)
                .map(|j| 0.5 * h[j] * (x[j] - zbar[j]).powi(2))
                .sum::<f64>();
        assert!(
            (o.result.global_loss[u] - model_loss).abs() <= 1e-10,
            "round {u}"
        );
        for j in 0..3 {
            x[j] -= 0.3 * h[j] * (x[j] - zbar[j]);
        }
    }
    let text = &o.rounds_csv;
    let f_col: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    for (u, v) in f_col.iter().enumerate() {
        assert_eq!(*v, o.result.global_loss[u]);
    }
    let g = global_gradient(fed.objective(), fed.clients(), &o.result.global_models[0]).unwrap();
    assert_eq!(o.result.grad_norm_sq[0], g.norm_sq());
}

#[test]
fn deviation_examples() {
    let x = ModelVector::new(vec![1.0, 2.0]);
    assert_eq!(
        measure_deviation(&x, &[x.clone(), ModelVector::new(vec![1.0, 0.0])]),
        vec![0.0, 4.0]
    );
}

#[test]
fn deviation_matches_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("", dir.path());
    let p = prepare_run(&c, 3).unwrap();
    let r = run_simulation(
        &p.federation,
        &p.hyper,
        3,
        SimulationOptions {
            record_events: true,
        },
    )
    .unwrap();
    let mut last = vec![ModelVector::zeros(0); 2];
    for e in &r.events {
        match e {
            Event::LocalIteration { group, model, .. } => last[*group] = model.clone(),
            Event::GlobalUpdate { round, model, .. } => {
                let direct = measure_deviation(model, &last);
                assert_eq!(direct, r.rounds[(*round - 1) as usize].deviation);
            }
            _ => {}
        }
    }
}

#[test]
fn single_point_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("", dir.path());
    let spec = SweepSpec::parse("s", "3", c.seeds.clone()).unwrap();
    let sweep = run_sweep(&c, &spec).unwrap();
    let runs = run_experiment(&c).unwrap();
    for (row, run) in sweep.rows.iter().zip(&runs) {
        let fin = row.outcome.as_ref().unwrap();
        assert_eq!(row.seed, run.seed);
        assert_eq!(fin.final_loss, run.summary.final_loss);
        assert_eq!(fin.final_accuracy, run.summary.final_accuracy);
        assert_eq!(fin.rounds, run.summary.rounds);
    }
    let losses: Vec<f64> = runs.iter().map(|r| r.summary.final_loss).collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((sweep.summary[0].mean_loss - mean).abs() <= 1e-12);
    assert!(dir.path().join("sweep.csv").exists());
    assert!(dir.path().join("sweep_summary.csv").exists());
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("", dir.path());
    // three groups do not match the two delay entries
    let spec = SweepSpec::parse("association", "3/4,1/1/1", vec![1]).unwrap();
    let out = run_sweep(&c, &spec).unwrap();
    assert!(out.rows[0].outcome.is_ok());
    assert!(out.rows[1].outcome.is_err());
    assert_eq!(out.summary[1].failed, 1);
}

#[test]
fn sweep_axes_change_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("", dir.path());
    let cg = SweepValue::GlobalShift(9.0).apply(&c);
    assert_eq!(cg.delay.global.shift, 9.0);
    let assoc = SweepValue::Association(vec![5, 25]).apply(&c);
    assert_eq!(assoc.topology.groups, vec![5, 25]);
    let ramp = SweepValue::Ramp(RampConfig {
        start: 1.0,
        end: 3.0,
        step: 1.0,
    })
    .apply(&c);
    assert_eq!(ramp.schedule().sync_time_for_round(2), 2.0);
}

#[test]
fn fairness_single_group_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config("", dir.path());
    c.topology.groups = vec![5];
    c.delay.group.truncate(1);
    let rows = fairness_experiment(&c).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.isolated_accuracy, r.hfl_accuracy);
        assert_eq!(r.isolated_loss, r.hfl_loss);
    }
    assert!(dir.path().join("fairness.csv").exists());
}

#[test]
fn schedule_pairs_and_degenerate_ramp() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("", dir.path());
    let out = schedule_experiment(
        &c,
        RampConfig {
            start: 3.0,
            end: 3.0,
            step: 0.0,
        },
    )
    .unwrap();
    for p in &out.pairs {
        assert_eq!(p.fixed_final_accuracy, p.ramp_final_accuracy);
        assert_eq!(p.fixed_final_loss, p.ramp_final_loss);
    }
    let fixed: Vec<_> = out.trajectories.iter().filter(|t| !t.ramp).collect();
    let ramp: Vec<_> = out.trajectories.iter().filter(|t| t.ramp).collect();
    assert_eq!(fixed.len(), ramp.len());

    let ramped = schedule_experiment(
        &c,
        RampConfig {
            start: 1.0,
            end: 3.0,
            step: 1.0,
        },
    )
    .unwrap();
    assert_eq!(ramped.pairs.len(), 2);
    let first = ramped
        .trajectories
        .iter()
        .find(|t| t.ramp && t.u == 1)
        .unwrap();
    assert_eq!(first.sync_time, 1.0);
    assert!(schedule_experiment(
        &c,
        RampConfig {
            start: 1.0,
            end: 5.0,
            step: 1.0
        }
    )
    .is_err());
}

#[test]
fn failed_run_is_marked() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config("", dir.path());
    c.training.alpha = 1e200;
    c.training.init_scale = 1e200;
    assert!(run_experiment(&c).is_err());
    assert!(seed_dir(dir.path(), 1).join("FAILED").exists());
}

#[test]
fn quadratic_accuracy_is_nan() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate_seed(&quadratic_config(dir.path()), 5).unwrap();
    assert!(o.summary.final_accuracy.is_nan());
    assert!(o.rounds_csv.lines().nth(1).unwrap().contains("NaN"));
}

#[test]
fn user_constants_override_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("\n[bounds]\nl = 3.0\ng = 2.0\nsigma = 0.5\n", dir.path());
    let p = prepare_run(&c, 1).unwrap();
    assert_eq!(
        (p.constants.l, p.constants.g, p.constants.sigma),
        (3.0, 2.0, 0.5)
    );
}
