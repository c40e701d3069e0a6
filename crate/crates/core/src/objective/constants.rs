use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clip_gradient, ClientDataset, MinibatchSpec, Objective, ObjectiveError};
use crate::model::ModelVector;
use crate::rng::{Purpose, RngStream, StreamKey};

/// Where a constant came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Holds exactly: a closed-form value, or a bound enforced by clipping.
    Exact,
    /// Observed on probes or an analytic upper bound.
    Estimated,
    UserSupplied,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Estimated => "estimated",
            Self::UserSupplied => "user-supplied",
        }
    }
}

/// The `L`, `G`, `σ` constants the bounds are evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub l: f64,
    pub g: f64,
    pub sigma: f64,
    pub l_provenance: Provenance,
    pub g_provenance: Provenance,
    pub sigma_provenance: Provenance,
}

/// Where and how hard to probe for `G` and `σ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    /// Probe points drawn as `center + N(0, radius² I)`.
    pub points: usize,
    /// Minibatch draws per client and probe point.
    pub batches: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            points: 8,
            batches: 32,
            radius: 1.0,
            seed: 0,
        }
    }
}

/// Estimates the smoothness, gradient-bound and variance constants.
///
/// `G` is the clipping level when clipping is on, otherwise the largest
/// observed stochastic-gradient norm. `σ` is the largest per-client
/// root-mean-square deviation of the (possibly clipped) stochastic gradient
/// from the exact client gradient.
pub fn estimate_constants(
    obj: &Objective,
    groups: &[Vec<ClientDataset>],
    center: &ModelVector,
    batch: &MinibatchSpec,
    clip: Option<f64>,
    probe: &ProbeSpec,
) -> Result<SmoothnessConstants, ObjectiveError> {
    if probe.points == 0 || probe.batches == 0 {
        return Err(ObjectiveError::NoProbes);
    }
    let (l, l_provenance) = obj.smoothness(groups.iter().flatten());
    let root = RngStream::new(probe.seed);
    let mut point_rng = root.substream(StreamKey::new(Purpose::Probe));

    let mut max_norm = 0.0_f64;
    let mut max_sigma = 0.0_f64;
    for p in 0..probe.points {
        let x = ModelVector::new(
            center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut point_rng);
                    c + probe.radius * z
                })
                .collect(),
        );
        for (gi, clients) in groups.iter().enumerate() {
            for (ki, data) in clients.iter().enumerate() {
                let exact = obj.full_gradient(data, &x)?;
                let mut rng = root.substream(
                    StreamKey::new(Purpose::Probe)
                        .group(gi as u64 + 1)
                        .client(ki as u64)
                        .round(p as u64),
                );
                let mut dev_sq = 0.0;
                for _ in 0..probe.batches {
                    let mut g = obj.stochastic_gradient(data, &x, batch, &mut rng)?;
                    if let Some(level) = clip {
                        g = clip_gradient(&g, level)?;
                    }
                    max_norm = max_norm.max(g.norm());
                    dev_sq += g.squared_distance(&exact);
                }
                max_sigma = max_sigma.max((dev_sq / probe.batches as f64).sqrt());
            }
        }
    }

    let (g, g_provenance) = match clip {
        Some(level) => (level, Provenance::Exact),
        None => (max_norm, Provenance::Estimated),
    };
    Ok(SmoothnessConstants {
        l,
        g,
        sigma: max_sigma,
        l_provenance,
        g_provenance,
        sigma_provenance: Provenance::Estimated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseMatrix;
    use crate::objective::{generate_synthetic, SyntheticSpec};

    fn groups() -> Vec<Vec<ClientDataset>> {
        let mut rng = RngStream::new(1).substream(StreamKey::new(Purpose::Data));
        generate_synthetic(&SyntheticSpec::quadratic(2, 3, 20), &[2, 2], &mut rng).unwrap()
    }

    #[test]
    fn zero_probes_rejected() {
        let obj = Objective::quadratic(DenseMatrix::identity(2), 0.0).unwrap();
        let probe = ProbeSpec {
            points: 0,
            ..ProbeSpec::default()
        };
        let r = estimate_constants(
            &obj,
            &groups(),
            &ModelVector::zeros(2),
            &MinibatchSpec::samples(1),
            None,
            &probe,
        );
        assert_eq!(r, Err(ObjectiveError::NoProbes));
    }

    #[test]
    fn quadratic_l_is_exact() {
        let obj = Objective::quadratic(DenseMatrix::diagonal(&[2.0, 0.5]), 0.0).unwrap();
        let c = estimate_constants(
            &obj,
            &groups(),
            &ModelVector::zeros(2),
            &MinibatchSpec::samples(1),
            None,
            &ProbeSpec::default(),
        )
        .unwrap();
        assert!((c.l - 2.0).abs() < 1e-8);
        assert_eq!(c.l_provenance, Provenance::Exact);
        assert!(c.g > 0.0 && c.sigma > 0.0);
        assert_eq!(c.g_provenance, Provenance::Estimated);
    }

    #[test]
    fn clipping_defines_g() {
        let obj = Objective::quadratic(DenseMatrix::identity(2), 0.0).unwrap();
        let c = estimate_constants(
            &obj,
            &groups(),
            &ModelVector::zeros(2),
            &MinibatchSpec::samples(1),
            Some(5.0),
            &ProbeSpec::default(),
        )
        .unwrap();
        assert_eq!(c.g, 5.0);
        assert_eq!(c.g_provenance, Provenance::Exact);
    }

    #[test]
    fn full_batch_has_zero_sigma() {
        let obj = Objective::quadratic(DenseMatrix::identity(2), 0.0).unwrap();
        let c = estimate_constants(
            &obj,
            &groups(),
            &ModelVector::zeros(2),
            &MinibatchSpec::full(),
            None,
            &ProbeSpec::default(),
        )
        .unwrap();
        assert_eq!(c.sigma, 0.0);
    }
}
