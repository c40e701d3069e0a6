//! Delay-sensitive hierarchical FL: the global-round / local-iteration loop.
//!
//! Each global round `u`:
//!
//! 1. the global model `x^u` is broadcast to every local parameter server;
//! 2. each group runs local iterations (client SGD step, LPS averaging) until
//!    its accumulated local delay reaches the sync time `S`;
//! 3. each group uploads `(x_i^{u,t} − x^u) / t_i^u`;
//! 4. the global server forms the client-count-weighted sum of uploads;
//! 5. the wall clock advances by the slowest group's local time plus the
//!    global delay `τ_g^u`.
//!
//! The run stops after the first round whose cumulative clock reaches `T`;
//! that round's update is kept.

mod events;
mod step;

pub use events::Event;
pub use step::{
    global_aggregate, local_aggregate, local_sgd_step, make_upload, ClientStep, GroupRound,
};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::IterationHistory;
use crate::delay::{DelayError, ShiftedExponential, SyncSchedule};
use crate::model::ModelVector;
use crate::objective::{
    global_gradient, global_loss, ClientDataset, MinibatchSpec, Objective, ObjectiveError,
};
use crate::rng::{Purpose, RngStream, StreamKey};
use step::{run_group_round, RoundContext};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error("SGD step produced a non-finite model")]
    NonFiniteStep,
    #[error("non-finite model in round {round}, group {group}, local iteration {iteration}")]
    NonFinite {
        round: u64,
        group: usize,
        iteration: u64,
    },
    #[error("round {round}, group {group}, local iteration {iteration}: {source}")]
    Step {
        round: u64,
        group: usize,
        iteration: u64,
        #[source]
        source: Box<EngineError>,
    },
    #[error("non-finite global model after round {0}")]
    NonFiniteGlobal(u64),
    #[error("cannot aggregate an empty set of models")]
    EmptyAggregation,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("upload requires at least one local iteration")]
    ZeroIterations,
    #[error("expected one upload per group ({expected}), got {got}")]
    MissingUpload { expected: usize, got: usize },
}

impl EngineError {
    fn at(self, round: u64, group: usize, iteration: u64) -> Self {
        match self {
            Self::NonFiniteStep => Self::NonFinite {
                round,
                group,
                iteration,
            },
            other => Self::Step {
                round,
                group,
                iteration,
                source: Box::new(other),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub num_clients: usize,
    pub delay: ShiftedExponential,
}

/// Groups (client counts and local delays) plus the global delay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    groups: Vec<GroupSpec>,
    global_delay: ShiftedExponential,
}

impl Topology {
    pub fn new(
        groups: Vec<GroupSpec>,
        global_delay: ShiftedExponential,
    ) -> Result<Self, EngineError> {
        if groups.is_empty() {
            return Err(EngineError::InvalidConfig(
                "topology needs at least one group".into(),
            ));
        }
        if let Some(i) = groups.iter().position(|g| g.num_clients == 0) {
            return Err(EngineError::InvalidConfig(format!(
                "group {i} has no clients"
            )));
        }
        Ok(Self {
            groups,
            global_delay,
        })
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn global_delay(&self) -> ShiftedExponential {
        self.global_delay
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.num_clients).collect()
    }

    pub fn total_clients(&self) -> usize {
        self.groups.iter().map(|g| g.num_clients).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Gaussian { scale: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Self::Gaussian { scale: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub schedule: SyncSchedule,
    /// Total system time `T`.
    pub total_time: f64,
    /// Clip every stochastic gradient to this norm.
    pub clip: Option<f64>,
    pub batch: MinibatchSpec,
    pub init: Init,
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.total_time.is_finite() && self.total_time > 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "total time must be finite and > 0, got {}",
                self.total_time
            )));
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(EngineError::InvalidConfig(format!(
                    "clipping level must be > 0, got {c}"
                )));
            }
        }
        if let Init::Gaussian { scale } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(EngineError::InvalidConfig(format!(
                    "init scale must be >= 0, got {scale}"
                )));
            }
        }
        self.schedule.validate()?;
        Ok(())
    }
}

/// Everything a run needs besides hyperparameters: topology, objective and
/// client datasets (group-major).
#[derive(Clone, Debug)]
pub struct Federation {
    topology: Topology,
    objective: Objective,
    clients: Vec<Vec<ClientDataset>>,
    group_keys: Vec<u64>,
    dim: usize,
}

impl Federation {
    pub fn new(
        topology: Topology,
        objective: Objective,
        clients: Vec<Vec<ClientDataset>>,
    ) -> Result<Self, EngineError> {
        if clients.len() != topology.num_groups() {
            return Err(EngineError::InvalidConfig(format!(
                "topology has {} groups but {} client lists were given",
                topology.num_groups(),
                clients.len()
            )));
        }
        for (i, (group, spec)) in clients.iter().zip(topology.groups()).enumerate() {
            if group.len() != spec.num_clients {
                return Err(EngineError::InvalidConfig(format!(
                    "group {i} declares {} clients but has {} datasets",
                    spec.num_clients,
                    group.len()
                )));
            }
        }
        let dim = clients[0][0].feature_dim();
        for data in clients.iter().flatten() {
            objective.check_dataset(data, dim)?;
        }
        let group_keys = (0..clients.len() as u64).collect();
        Ok(Self {
            topology,
            objective,
            clients,
            group_keys,
            dim,
        })
    }

    /// Overrides the keys that select each group's random streams.
    pub fn with_group_keys(mut self, keys: Vec<u64>) -> Result<Self, EngineError> {
        if keys.len() != self.clients.len() {
            return Err(EngineError::InvalidConfig(
                "one stream key per group is required".into(),
            ));
        }
        self.group_keys = keys;
        Ok(self)
    }

    /// A federation consisting of group `group` alone. It keeps the group's
    /// stream key so it sees the same delays and minibatches as in the full run.
    pub fn isolate(&self, group: usize) -> Result<Self, EngineError> {
        let spec = *self
            .topology
            .groups()
            .get(group)
            .ok_or_else(|| EngineError::InvalidConfig(format!("no group {group}")))?;
        let topology = Topology::new(vec![spec], self.topology.global_delay())?;
        Self::new(
            topology,
            self.objective.clone(),
            vec![self.clients[group].clone()],
        )?
        .with_group_keys(vec![self.group_keys[group]])
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn clients(&self) -> &[Vec<ClientDataset>] {
        &self.clients
    }

    pub fn group_key(&self, group: usize) -> u64 {
        self.group_keys[group]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn smoothness(&self) -> f64 {
        self.objective.smoothness(self.clients.iter().flatten()).0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimulationOptions {
    /// Keep the full per-iteration event log in the result.
    pub record_events: bool,
}

/// Telemetry of one global round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub u: u64,
    pub sync_time: f64,
    /// `t_i^u` per group.
    pub iterations: Vec<u64>,
    /// Sum of the local delays per group.
    pub local_elapsed: Vec<f64>,
    /// `max_i` local elapsed.
    pub syncing_period: f64,
    pub global_delay: f64,
    /// Cumulative wall clock after this round.
    pub wall_clock: f64,
    /// `‖x^{u+1} − x_i^{u,t_i^u}‖²` per group.
    pub deviation: Vec<f64>,
    /// `x_i^{u,t_i^u}` per group.
    pub group_models: Vec<ModelVector>,
    pub uploads: Vec<ModelVector>,
    /// Sum of every stochastic gradient applied in the group this round.
    pub gradient_sums: Vec<ModelVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    pub rounds: Vec<RoundRecord>,
    /// `x^1, …, x^{U+1}`.
    pub global_models: Vec<ModelVector>,
    /// `f(x^u)` for `u = 1..=U+1`.
    pub global_loss: Vec<f64>,
    /// `‖∇f(x^u)‖²` for `u = 1..=U+1`.
    pub grad_norm_sq: Vec<f64>,
    pub smoothness: f64,
    pub alpha_exceeds_inverse_l: bool,
    /// Largest stochastic-gradient norm applied during the run.
    pub max_grad_norm: f64,
    pub events: Vec<Event>,
}

impl SimulationResult {
    /// Number of completed global rounds `U`.
    pub fn rounds_completed(&self) -> u64 {
        self.rounds.len() as u64
    }

    pub fn final_model(&self) -> &ModelVector {
        self.global_models
            .last()
            .expect("at least the initial model")
    }

    pub fn wall_clock(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.wall_clock)
    }

    pub fn iteration_history(&self) -> IterationHistory {
        IterationHistory::new(self.rounds.iter().map(|r| r.iterations.clone()).collect())
            .expect("engine records t >= 1 for every group")
    }
}

/// Draws the initial global model from the `(Init)` stream.
pub fn initial_model(init: Init, dim: usize, root: &RngStream) -> ModelVector {
    match init {
        Init::Zeros => ModelVector::zeros(dim),
        Init::Gaussian { scale } => {
            let mut rng = root.substream(StreamKey::new(Purpose::Init));
            ModelVector::new(
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect(),
            )
        }
    }
}

/// Runs the algorithm to completion. Fully deterministic given `seed`.
pub fn run_simulation(
    federation: &Federation,
    hyper: &HyperParams,
    seed: u64,
    options: SimulationOptions,
) -> Result<SimulationResult, EngineError> {
    hyper.validate()?;
    let smoothness = federation.smoothness();
    let alpha_exceeds_inverse_l = hyper.alpha * smoothness > 1.0;
    if alpha_exceeds_inverse_l {
        log::warn!(
            "learning rate {} exceeds 1/L = {}; the bounds' premise does not hold",
            hyper.alpha,
            1.0 / smoothness
        );
    }

    let root = RngStream::new(seed);
    let ctx = RoundContext {
        federation,
        alpha: hyper.alpha,
        batch: hyper.batch,
        clip: hyper.clip,
        root,
    };
    let topology = federation.topology();
    let objective = federation.objective();
    let groups = federation.clients();

    let mut x = initial_model(hyper.init, federation.dim(), &root);
    let mut events = Vec::new();
    let mut global_models = vec![x.clone()];
    let mut global_losses = vec![global_loss(objective, groups, &x)?];
    let mut grad_norms = vec![global_gradient(objective, groups, &x)?.norm_sq()];
    let mut rounds = Vec::new();
    let mut max_grad_norm = 0.0_f64;
    let mut clock = 0.0;
    let mut u = 0_u64;

    loop {
        u += 1;
        let sync_time = hyper.schedule.sync_time_for_round(u);
        if options.record_events {
            events.push(Event::Broadcast {
                round: u,
                model: x.clone(),
            });
        }

        let mut group_rounds = Vec::with_capacity(topology.num_groups());
        for group in 0..topology.num_groups() {
            let log = options.record_events.then_some(&mut events);
            let gr = run_group_round(&ctx, group, u, &x, sync_time, log)?;
            group_rounds.push(gr);
        }

        let mut uploads = Vec::with_capacity(group_rounds.len());
        for (group, gr) in group_rounds.iter().enumerate() {
            let upload = make_upload(&x, &gr.final_model, gr.iterations)?;
            if options.record_events {
                events.push(Event::Upload {
                    round: u,
                    group,
                    iterations: gr.iterations,
                    upload: upload.clone(),
                });
            }
            uploads.push(upload);
        }
        let next = global_aggregate(&x, &uploads, topology)?;
        if !next.is_finite() {
            return Err(EngineError::NonFiniteGlobal(u));
        }

        let mut global_rng = root.substream(StreamKey::new(Purpose::GlobalDelay).round(u));
        let global_delay = topology.global_delay().sample(&mut global_rng);
        let syncing_period = group_rounds
            .iter()
            .map(|g| g.elapsed)
            .fold(f64::NEG_INFINITY, f64::max);
        clock += syncing_period + global_delay;

        if options.record_events {
            events.push(Event::GlobalUpdate {
                round: u,
                syncing_period,
                global_delay,
                wall_clock: clock,
                model: next.clone(),
            });
        }

        for gr in &group_rounds {
            max_grad_norm = max_grad_norm.max(gr.max_gradient_norm);
        }

        rounds.push(RoundRecord {
            u,
            sync_time,
            iterations: group_rounds.iter().map(|g| g.iterations).collect(),
            local_elapsed: group_rounds.iter().map(|g| g.elapsed).collect(),
            syncing_period,
            global_delay,
            wall_clock: clock,
            deviation: group_rounds
                .iter()
                .map(|g| next.squared_distance(&g.final_model))
                .collect(),
            group_models: group_rounds.iter().map(|g| g.final_model.clone()).collect(),
            uploads,
            gradient_sums: group_rounds.into_iter().map(|g| g.gradient_sum).collect(),
        });

        global_losses.push(global_loss(objective, groups, &next)?);
        grad_norms.push(global_gradient(objective, groups, &next)?.norm_sq());
        global_models.push(next.clone());
        x = next;

        if clock >= hyper.total_time {
            break;
        }
    }

    Ok(SimulationResult {
        rounds,
        global_models,
        global_loss: global_losses,
        grad_norm_sq: grad_norms,
        smoothness,
        alpha_exceeds_inverse_l,
        max_grad_norm,
        events,
    })
}
