use serde::{Deserialize, Serialize};

use crate::model::ModelVector;

/// Append-only record of what the engine did, in execution order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// `x^u` sent to every LPS.
    Broadcast { round: u64, model: ModelVector },
    /// One local iteration of one group: every client stepped, LPS averaged.
    LocalIteration {
        round: u64,
        group: usize,
        iteration: u64,
        delay: f64,
        /// Local time elapsed in this round, including this iteration.
        elapsed: f64,
        /// The stochastic gradient each client applied, client order.
        gradients: Vec<ModelVector>,
        /// LPS model after averaging.
        model: ModelVector,
    },
    Upload {
        round: u64,
        group: usize,
        iterations: u64,
        upload: ModelVector,
    },
    GlobalUpdate {
        round: u64,
        syncing_period: f64,
        global_delay: f64,
        wall_clock: f64,
        model: ModelVector,
    },
}

impl Event {
    pub fn round(&self) -> u64 {
        match self {
            Self::Broadcast { round, .. }
            | Self::LocalIteration { round, .. }
            | Self::Upload { round, .. }
            | Self::GlobalUpdate { round, .. } => *round,
        }
    }
}
