//! Simulator and bound evaluators for delay-sensitive hierarchical federated
//! learning.

pub mod bounds;
pub mod delay;
pub mod engine;
pub mod harness;
pub mod model;
pub mod objective;
pub mod rng;

pub use bounds::{BoundParams, BoundReport, BoundsError, IterationHistory};
pub use delay::{DelayError, ShiftedExponential, SyncSchedule};
pub use engine::{
    run_simulation, EngineError, Event, Federation, GroupSpec, HyperParams, Init, RoundRecord,
    SimulationOptions, SimulationResult, Topology,
};
pub use harness::{parse_config, ExperimentConfig, HarnessError};
pub use model::{DenseMatrix, ModelVector};
pub use objective::{ClientDataset, MinibatchSpec, Objective, ObjectiveError, Sample};
pub use rng::{Purpose, RngStream, StreamKey};
