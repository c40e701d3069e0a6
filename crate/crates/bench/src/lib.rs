//! Fixtures shared by the benchmarks.

use hfl_core::delay::ShiftedExponential;
use hfl_core::engine::{Federation, GroupSpec, HyperParams, Init, Topology};
use hfl_core::objective::{generate_synthetic, MinibatchSpec, Objective, SyntheticSpec};
use hfl_core::{Purpose, RngStream, StreamKey, SyncSchedule};

/// A logistic federation with the given group sizes and feature dimension.
pub fn logistic_federation(sizes: &[usize], dim: usize, samples_per_client: usize) -> Federation {
    let delay = ShiftedExponential::new(1.0, 2.0).unwrap();
    let topology = Topology::new(
        sizes
            .iter()
            .map(|&n| GroupSpec {
                num_clients: n,
                delay,
            })
            .collect(),
        ShiftedExponential::new(5.0, 1.0).unwrap(),
    )
    .unwrap();
    let mut rng = RngStream::new(0).substream(StreamKey::new(Purpose::Data));
    let clients = generate_synthetic(
        &SyntheticSpec::logistic(dim, samples_per_client),
        sizes,
        &mut rng,
    )
    .unwrap();
    Federation::new(topology, Objective::logistic(0.01).unwrap(), clients).unwrap()
}

pub fn hyper(sync_time: f64, total_time: f64, batch: usize) -> HyperParams {
    HyperParams {
        alpha: 0.05,
        schedule: SyncSchedule::fixed(sync_time).unwrap(),
        total_time,
        clip: None,
        batch: MinibatchSpec::samples(batch),
        init: Init::default(),
    }
}
