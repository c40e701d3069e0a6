//! The individual update rules of one global round.

use rand::Rng;

use super::{EngineError, Event, Federation, Topology};
use crate::delay::{count_local_iterations, ShiftedExponential};
use crate::model::ModelVector;
use crate::objective::{clip_gradient, ClientDataset, MinibatchSpec, Objective};
use crate::rng::{Purpose, RngStream, StreamKey};

/// One client's SGD step together with the gradient it used.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientStep {
    pub model: ModelVector,
    pub gradient: ModelVector,
}

/// `x − α·g̃(x)` for one client, where `g̃` is the (optionally clipped)
/// minibatch gradient evaluated at the LPS model `x`.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd_step<R: Rng + ?Sized>(
    objective: &Objective,
    x_lps: &ModelVector,
    client: &ClientDataset,
    alpha: f64,
    batch: &MinibatchSpec,
    clip: Option<f64>,
    rng: &mut R,
) -> Result<ClientStep, EngineError> {
    let mut gradient = objective.stochastic_gradient(client, x_lps, batch, rng)?;
    if let Some(level) = clip {
        gradient = clip_gradient(&gradient, level)?;
    }
    let mut model = x_lps.clone();
    model.axpy(-alpha, &gradient);
    if !model.is_finite() {
        return Err(EngineError::NonFiniteStep);
    }
    Ok(ClientStep { model, gradient })
}

/// Unweighted mean of the client models of one group.
pub fn local_aggregate(models: &[ModelVector]) -> Result<ModelVector, EngineError> {
    let first = models.first().ok_or(EngineError::EmptyAggregation)?;
    let dim = first.dim();
    let mut acc = ModelVector::zeros(dim);
    for m in models {
        if m.dim() != dim {
            return Err(EngineError::DimensionMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
        acc.axpy(1.0, m);
    }
    acc.scale(1.0 / models.len() as f64);
    Ok(acc)
}

/// Bias-corrected upload `(x_final − x_init) / t`.
pub fn make_upload(
    x_init: &ModelVector,
    x_final: &ModelVector,
    iterations: u64,
) -> Result<ModelVector, EngineError> {
    if iterations == 0 {
        return Err(EngineError::ZeroIterations);
    }
    if x_init.dim() != x_final.dim() {
        return Err(EngineError::DimensionMismatch {
            expected: x_init.dim(),
            got: x_final.dim(),
        });
    }
    let mut diff = x_final.sub(x_init);
    diff.scale(1.0 / iterations as f64);
    Ok(diff)
}

/// `x + Σ_i (|N_i| / Σ_j |N_j|) · upload_i`; one upload per group is required.
pub fn global_aggregate(
    x: &ModelVector,
    uploads: &[ModelVector],
    topology: &Topology,
) -> Result<ModelVector, EngineError> {
    if uploads.len() != topology.num_groups() {
        return Err(EngineError::MissingUpload {
            expected: topology.num_groups(),
            got: uploads.len(),
        });
    }
    let total = topology.total_clients() as f64;
    let mut next = x.clone();
    for (upload, group) in uploads.iter().zip(topology.groups()) {
        if upload.dim() != x.dim() {
            return Err(EngineError::DimensionMismatch {
                expected: x.dim(),
                got: upload.dim(),
            });
        }
        next.axpy(group.num_clients as f64 / total, upload);
    }
    Ok(next)
}

/// Result of one group's local phase in one global round.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRound {
    pub final_model: ModelVector,
    pub iterations: u64,
    pub elapsed: f64,
    pub delays: Vec<f64>,
    /// Sum of every stochastic gradient applied by every client this round.
    pub gradient_sum: ModelVector,
    pub max_gradient_norm: f64,
}

/// Per-run settings that a group round reads.
pub(crate) struct RoundContext<'a> {
    pub federation: &'a Federation,
    pub alpha: f64,
    pub batch: MinibatchSpec,
    pub clip: Option<f64>,
    pub root: RngStream,
}

/// Runs group `group` from `x_start` until its local delays cross `sync_time`.
///
/// Delays come from the `(LocalDelay, group key, round)` stream and each
/// client's minibatches from `(Minibatch, group key, client, round)`, so the
/// realized samples do not depend on the sync time.
pub(crate) fn run_group_round(
    ctx: &RoundContext<'_>,
    group: usize,
    round: u64,
    x_start: &ModelVector,
    sync_time: f64,
    mut events: Option<&mut Vec<Event>>,
) -> Result<GroupRound, EngineError> {
    let fed = ctx.federation;
    let key = fed.group_key(group);
    let delay: ShiftedExponential = fed.topology().groups()[group].delay;
    let mut delay_rng = ctx
        .root
        .substream(StreamKey::new(Purpose::LocalDelay).group(key).round(round));
    let count = count_local_iterations(|| delay.sample(&mut delay_rng), sync_time);

    let clients = &fed.clients()[group];
    let mut batch_rngs: Vec<_> = (0..clients.len())
        .map(|k| {
            ctx.root.substream(
                StreamKey::new(Purpose::Minibatch)
                    .group(key)
                    .client(k as u64)
                    .round(round),
            )
        })
        .collect();

    let mut x = x_start.clone();
    let mut gradient_sum = ModelVector::zeros(x.dim());
    let mut elapsed = 0.0;
    let mut max_gradient_norm = 0.0_f64;
    for (l, tau) in count.samples.iter().enumerate() {
        let mut models = Vec::with_capacity(clients.len());
        let mut gradients = Vec::with_capacity(clients.len());
        for (client, rng) in clients.iter().zip(batch_rngs.iter_mut()) {
            let step = local_sgd_step(
                fed.objective(),
                &x,
                client,
                ctx.alpha,
                &ctx.batch,
                ctx.clip,
                rng,
            )
            .map_err(|e| e.at(round, group, l as u64 + 1))?;
            gradient_sum.axpy(1.0, &step.gradient);
            max_gradient_norm = max_gradient_norm.max(step.gradient.norm());
            models.push(step.model);
            gradients.push(step.gradient);
        }
        x = local_aggregate(&models)?;
        if !x.is_finite() {
            return Err(EngineError::NonFinite {
                round,
                group,
                iteration: l as u64 + 1,
            });
        }
        elapsed += tau;
        if let Some(log) = events.as_deref_mut() {
            log.push(Event::LocalIteration {
                round,
                group,
                iteration: l as u64 + 1,
                delay: *tau,
                elapsed,
                gradients,
                model: x.clone(),
            });
        }
    }
    Ok(GroupRound {
        final_model: x,
        iterations: count.iterations,
        elapsed: count.elapsed,
        delays: count.samples,
        gradient_sum,
        max_gradient_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::ShiftedExponential;
    use crate::engine::GroupSpec;

    fn topo(sizes: &[usize]) -> Topology {
        let d = ShiftedExponential::deterministic(1.0).unwrap();
        Topology::new(
            sizes
                .iter()
                .map(|&n| GroupSpec {
                    num_clients: n,
                    delay: d,
                })
                .collect(),
            d,
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> ModelVector {
        ModelVector::new(x.to_vec())
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(local_aggregate(&[v(&[1.0, 1.0])]).unwrap(), v(&[1.0, 1.0]));
        assert_eq!(
            local_aggregate(&[v(&[0.0, 2.0]), v(&[2.0, 0.0])]).unwrap(),
            v(&[1.0, 1.0])
        );
        assert!(matches!(
            local_aggregate(&[]),
            Err(EngineError::EmptyAggregation)
        ));
        assert!(matches!(
            local_aggregate(&[v(&[0.0]), v(&[0.0, 1.0])]),
            Err(EngineError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let models = vec![v(&[0.1, 0.7]), v(&[1e-3, 5.0]), v(&[-2.2, 0.3])];
        let mut rev = models.clone();
        rev.reverse();
        let a = local_aggregate(&models).unwrap();
        let b = local_aggregate(&rev).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-15);
    }

    #[test]
    fn upload_examples() {
        let up = make_upload(&v(&[0.0, 0.0]), &v(&[-0.3, 0.6]), 3).unwrap();
        assert!(up.max_abs_diff(&v(&[-0.1, 0.2])) < 1e-15);
        assert_eq!(make_upload(&v(&[1.0]), &v(&[3.0]), 1).unwrap(), v(&[2.0]));
        assert!(matches!(
            make_upload(&v(&[1.0]), &v(&[3.0]), 0),
            Err(EngineError::ZeroIterations)
        ));
    }

    #[test]
    fn global_aggregate_examples() {
        let x = v(&[1.0, -1.0]);
        let (u1, u2) = (v(&[0.5, 0.0]), v(&[0.0, 2.0]));
        let equal = global_aggregate(&x, &[u1.clone(), u2.clone()], &topo(&[4, 4])).unwrap();
        assert_eq!(equal, v(&[1.25, 0.0]));
        assert_eq!(
            global_aggregate(&x, std::slice::from_ref(&u1), &topo(&[7])).unwrap(),
            v(&[1.5, -1.0])
        );
        let weighted = global_aggregate(
            &ModelVector::zeros(2),
            &[v(&[3.0, 0.0]), v(&[0.0, 3.0])],
            &topo(&[10, 20]),
        )
        .unwrap();
        assert!(weighted.max_abs_diff(&v(&[1.0, 2.0])) < 1e-15);
        assert!(matches!(
            global_aggregate(&x, &[u1], &topo(&[1, 1])),
            Err(EngineError::MissingUpload {
                expected: 2,
                got: 1
            })
        ));
    }
}
