//! Client losses, exact and stochastic gradients, and the constants the
//! convergence bounds need.
//!
//! Each client `k` of group `i` owns a [`ClientDataset`] and a loss
//! `F_{i,k}(x)` that is the mean per-sample loss over that dataset plus an
//! optional `reg/2 · ‖x‖²` term. A group loss is the plain mean over its
//! clients; the global loss weights each group by its client count.

mod constants;
mod data;

pub use constants::{estimate_constants, ProbeSpec, Provenance, SmoothnessConstants};
pub use data::{
    generate_pool, generate_synthetic, load_csv, partition, split_holdout, Assignment,
    ClientDataset, ClientId, PartitionMode, Sample, SyntheticKind, SyntheticSpec,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DenseMatrix, ModelVector};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("group {0} has no clients")]
    EmptyGroup(usize),
    #[error("logistic labels must be 0 or 1, got {0}")]
    InvalidLabel(u32),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("clipping level must be finite and > 0, got {0}")]
    InvalidClip(f64),
    #[error("batch size must be >= 1")]
    EmptyBatch,
    #[error("regularization must be finite and >= 0, got {0}")]
    InvalidRegularization(f64),
    #[error("quadratic Hessian must be symmetric")]
    AsymmetricHessian,
    #[error("label skew must lie in [0, 1], got {0}")]
    InvalidSkew(f64),
    #[error("probe spec needs at least one probe point and one batch")]
    NoProbes,
    #[error("client {client} of group {group} received no samples")]
    EmptyClient { group: usize, client: usize },
    #[error("invalid synthetic data spec: {0}")]
    InvalidSpec(String),
    #[error("csv import: {0}")]
    Csv(String),
}

/// The per-sample loss family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// `½ (x − z)ᵀ H (x − z)` where `z` is the sample's feature vector.
    Quadratic { hessian: DenseMatrix },
    /// Binary logistic regression, `log(1 + e^{aᵀx}) − y·aᵀx` with `y ∈ {0, 1}`.
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    kind: ObjectiveKind,
    regularization: f64,
}

/// Minibatch size; sampling is uniform with replacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSize {
    /// Deterministic full pass: the stochastic gradient equals the full gradient.
    Full,
    Samples(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchSpec {
    pub size: BatchSize,
}

impl MinibatchSpec {
    pub fn full() -> Self {
        Self {
            size: BatchSize::Full,
        }
    }

    pub fn samples(n: usize) -> Self {
        Self {
            size: BatchSize::Samples(n),
        }
    }
}

impl Objective {
    pub fn quadratic(hessian: DenseMatrix, regularization: f64) -> Result<Self, ObjectiveError> {
        if !hessian.is_symmetric(1e-12) {
            return Err(ObjectiveError::AsymmetricHessian);
        }
        Self::with_kind(ObjectiveKind::Quadratic { hessian }, regularization)
    }

    pub fn logistic(regularization: f64) -> Result<Self, ObjectiveError> {
        Self::with_kind(ObjectiveKind::Logistic, regularization)
    }

    fn with_kind(kind: ObjectiveKind, regularization: f64) -> Result<Self, ObjectiveError> {
        if !(regularization.is_finite() && regularization >= 0.0) {
            return Err(ObjectiveError::InvalidRegularization(regularization));
        }
        Ok(Self {
            kind,
            regularization,
        })
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.kind, ObjectiveKind::Logistic)
    }

    /// Checks that `data` can be evaluated by this objective at dimension `dim`.
    pub fn check_dataset(&self, data: &ClientDataset, dim: usize) -> Result<(), ObjectiveError> {
        if data.feature_dim() != dim {
            return Err(ObjectiveError::DimensionMismatch {
                expected: dim,
                got: data.feature_dim(),
            });
        }
        match &self.kind {
            ObjectiveKind::Quadratic { hessian } if hessian.dim() != dim => {
                Err(ObjectiveError::DimensionMismatch {
                    expected: hessian.dim(),
                    got: dim,
                })
            }
            ObjectiveKind::Logistic => match data.samples().iter().find(|s| s.label > 1) {
                Some(s) => Err(ObjectiveError::InvalidLabel(s.label)),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    fn check_point(&self, data: &ClientDataset, x: &ModelVector) -> Result<(), ObjectiveError> {
        if data.feature_dim() != x.dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: data.feature_dim(),
                got: x.dim(),
            });
        }
        if let ObjectiveKind::Quadratic { hessian } = &self.kind {
            if hessian.dim() != x.dim() {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: hessian.dim(),
                    got: x.dim(),
                });
            }
        }
        Ok(())
    }

    fn sample_loss(&self, sample: &Sample, x: &ModelVector) -> f64 {
        let reg = 0.5 * self.regularization * x.norm_sq();
        match &self.kind {
            ObjectiveKind::Quadratic { hessian } => {
                let diff: Vec<f64> = x.iter().zip(&sample.features).map(|(a, b)| a - b).collect();
                let hd = hessian.mul_vec(&diff);
                0.5 * diff.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>() + reg
            }
            ObjectiveKind::Logistic => {
                let z = dot(&sample.features, x.as_slice());
                softplus(z) - f64::from(sample.label) * z + reg
            }
        }
    }

    /// Adds `weight · ∇ℓ(sample; x)` into `out`.
    fn accumulate_sample_gradient(
        &self,
        sample: &Sample,
        x: &ModelVector,
        weight: f64,
        out: &mut [f64],
    ) {
        match &self.kind {
            ObjectiveKind::Quadratic { hessian } => {
                let diff: Vec<f64> = x.iter().zip(&sample.features).map(|(a, b)| a - b).collect();
                for (o, h) in out.iter_mut().zip(hessian.mul_vec(&diff)) {
                    *o += weight * h;
                }
            }
            ObjectiveKind::Logistic => {
                let z = dot(&sample.features, x.as_slice());
                let residual = sigmoid(z) - f64::from(sample.label);
                for (o, a) in out.iter_mut().zip(&sample.features) {
                    *o += weight * residual * a;
                }
            }
        }
        for (o, xi) in out.iter_mut().zip(x.iter()) {
            *o += weight * self.regularization * xi;
        }
    }

    /// Client empirical loss `F_{i,k}(x)`.
    pub fn loss(&self, data: &ClientDataset, x: &ModelVector) -> Result<f64, ObjectiveError> {
        self.check_point(data, x)?;
        let n = data.len() as f64;
        Ok(data
            .samples()
            .iter()
            .map(|s| self.sample_loss(s, x))
            .sum::<f64>()
            / n)
    }

    /// Exact gradient `∇F_{i,k}(x)`.
    pub fn full_gradient(
        &self,
        data: &ClientDataset,
        x: &ModelVector,
    ) -> Result<ModelVector, ObjectiveError> {
        self.check_point(data, x)?;
        let mut out = vec![0.0; x.dim()];
        let w = 1.0 / data.len() as f64;
        for s in data.samples() {
            self.accumulate_sample_gradient(s, x, w, &mut out);
        }
        Ok(ModelVector::new(out))
    }

    /// Unbiased minibatch gradient: the mean of `batch` per-sample gradients
    /// drawn uniformly with replacement. A full batch consumes no randomness.
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        data: &ClientDataset,
        x: &ModelVector,
        batch: &MinibatchSpec,
        rng: &mut R,
    ) -> Result<ModelVector, ObjectiveError> {
        match batch.size {
            BatchSize::Full => self.full_gradient(data, x),
            BatchSize::Samples(0) => Err(ObjectiveError::EmptyBatch),
            BatchSize::Samples(b) => {
                self.check_point(data, x)?;
                let mut out = vec![0.0; x.dim()];
                let w = 1.0 / b as f64;
                let samples = data.samples();
                for _ in 0..b {
                    let idx = rng.random_range(0..samples.len());
                    self.accumulate_sample_gradient(&samples[idx], x, w, &mut out);
                }
                Ok(ModelVector::new(out))
            }
        }
    }

    /// Classification accuracy of `x` on `samples`; `None` for non-classifiers
    /// or an empty sample set.
    pub fn accuracy(&self, samples: &[Sample], x: &ModelVector) -> Option<f64> {
        if !self.is_classifier() || samples.is_empty() {
            return None;
        }
        let correct = samples
            .iter()
            .filter(|s| {
                let predicted = u32::from(dot(&s.features, x.as_slice()) > 0.0);
                predicted == s.label
            })
            .count();
        Some(correct as f64 / samples.len() as f64)
    }

    /// A smoothness constant valid for every client loss.
    ///
    /// Quadratics report the exact `λ_max(H) + reg` (power iteration to 1e-8);
    /// logistic losses report the `¼·max‖a‖² + reg` upper bound.
    pub fn smoothness<'a, I>(&self, datasets: I) -> (f64, Provenance)
    where
        I: IntoIterator<Item = &'a ClientDataset>,
    {
        match &self.kind {
            ObjectiveKind::Quadratic { hessian } => (
                hessian.spectral_radius(1e-8, 100_000) + self.regularization,
                Provenance::Exact,
            ),
            ObjectiveKind::Logistic => {
                let max_norm_sq = datasets
                    .into_iter()
                    .flat_map(|d| d.samples())
                    .map(|s| s.features.iter().map(|a| a * a).sum::<f64>())
                    .fold(0.0, f64::max);
                (
                    0.25 * max_norm_sq + self.regularization,
                    Provenance::Estimated,
                )
            }
        }
    }
}

/// Group loss `f_i(x)`: unweighted mean of the group's client losses.
pub fn group_loss(
    obj: &Objective,
    clients: &[ClientDataset],
    x: &ModelVector,
) -> Result<f64, ObjectiveError> {
    if clients.is_empty() {
        return Err(ObjectiveError::EmptyGroup(0));
    }
    let mut total = 0.0;
    for c in clients {
        total += obj.loss(c, x)?;
    }
    Ok(total / clients.len() as f64)
}

pub fn group_gradient(
    obj: &Objective,
    clients: &[ClientDataset],
    x: &ModelVector,
) -> Result<ModelVector, ObjectiveError> {
    if clients.is_empty() {
        return Err(ObjectiveError::EmptyGroup(0));
    }
    let mut acc = ModelVector::zeros(x.dim());
    for c in clients {
        acc.axpy(1.0, &obj.full_gradient(c, x)?);
    }
    acc.scale(1.0 / clients.len() as f64);
    Ok(acc)
}

/// Global loss `f(x) = Σ_i |N_i| f_i(x) / Σ_i |N_i|`.
pub fn global_loss(
    obj: &Objective,
    groups: &[Vec<ClientDataset>],
    x: &ModelVector,
) -> Result<f64, ObjectiveError> {
    let total_clients = total_clients(groups)?;
    let mut acc = 0.0;
    for clients in groups {
        acc += clients.len() as f64 * group_loss(obj, clients, x)?;
    }
    Ok(acc / total_clients)
}

pub fn global_gradient(
    obj: &Objective,
    groups: &[Vec<ClientDataset>],
    x: &ModelVector,
) -> Result<ModelVector, ObjectiveError> {
    let total_clients = total_clients(groups)?;
    let mut acc = ModelVector::zeros(x.dim());
    for clients in groups {
        acc.axpy(
            clients.len() as f64 / total_clients,
            &group_gradient(obj, clients, x)?,
        );
    }
    Ok(acc)
}

fn total_clients(groups: &[Vec<ClientDataset>]) -> Result<f64, ObjectiveError> {
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(ObjectiveError::EmptyGroup(i));
    }
    if groups.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    Ok(groups.iter().map(Vec::len).sum::<usize>() as f64)
}

/// Rescales `g` onto the ball of radius `max_norm` if it lies outside it.
pub fn clip_gradient(g: &ModelVector, max_norm: f64) -> Result<ModelVector, ObjectiveError> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(ObjectiveError::InvalidClip(max_norm));
    }
    if !g.is_finite() {
        return Err(ObjectiveError::NonFinite("gradient"));
    }
    let norm = g.norm();
    if norm <= max_norm {
        Ok(g.clone())
    } else {
        Ok(g.scaled(max_norm / norm))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
