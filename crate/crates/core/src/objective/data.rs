//! Client datasets: synthetic generation, holdout splits, iid / label-skew
//! partitioning across groups, and CSV import.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ObjectiveError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientId {
    pub group: usize,
    pub client: usize,
}

/// The samples owned by one client. Never empty; all feature vectors share a dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    owner: ClientId,
    samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn new(owner: ClientId, samples: Vec<Sample>) -> Result<Self, ObjectiveError> {
        let Some(first) = samples.first() else {
            return Err(ObjectiveError::EmptyClient {
                group: owner.group,
                client: owner.client,
            });
        };
        let dim = first.features.len();
        if let Some(bad) = samples.iter().find(|s| s.features.len() != dim) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: dim,
                got: bad.features.len(),
            });
        }
        if samples
            .iter()
            .any(|s| s.features.iter().any(|v| !v.is_finite()))
        {
            return Err(ObjectiveError::NonFinite("features"));
        }
        Ok(Self { owner, samples })
    }

    pub fn owner(&self) -> ClientId {
        self.owner
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Gaussian clusters, one per class; samples are the centers of
    /// per-sample quadratic losses.
    Quadratic,
    /// Gaussian features with labels from a noisy random linear separator.
    Logistic,
}

/// Parameters of the synthetic data generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dim: usize,
    /// Number of labels; logistic data always has 2.
    pub classes: u32,
    pub samples_per_client: usize,
    /// Quadratic: standard deviation of the cluster centers.
    /// Logistic: overall feature scale (features are `N(0, scale²/d · I)`).
    pub spread: f64,
    /// Quadratic: within-cluster standard deviation.
    /// Logistic: standard deviation of the logit noise before thresholding.
    pub noise: f64,
    /// Logistic only: the last feature is the constant 1, so a model can
    /// carry a bias. The label rule itself has no offset.
    #[serde(default)]
    pub intercept: bool,
}

impl SyntheticSpec {
    pub fn logistic(dim: usize, samples_per_client: usize) -> Self {
        Self {
            kind: SyntheticKind::Logistic,
            dim,
            classes: 2,
            samples_per_client,
            spread: 1.0,
            noise: 0.1,
            intercept: true,
        }
    }

    pub fn quadratic(dim: usize, classes: u32, samples_per_client: usize) -> Self {
        Self {
            kind: SyntheticKind::Quadratic,
            dim,
            classes,
            samples_per_client,
            spread: 1.0,
            noise: 0.5,
            intercept: false,
        }
    }

    fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidSpec(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.samples_per_client == 0 {
            return bad("samples_per_client must be >= 1");
        }
        if !(self.spread.is_finite()
            && self.spread >= 0.0
            && self.noise.is_finite()
            && self.noise >= 0.0)
        {
            return bad("spread and noise must be finite and >= 0");
        }
        match self.kind {
            SyntheticKind::Logistic if self.classes != 2 => {
                bad("logistic data has exactly 2 classes")
            }
            SyntheticKind::Logistic if self.intercept && self.dim < 2 => {
                bad("an intercept needs dim >= 2")
            }
            SyntheticKind::Quadratic if self.classes == 0 => bad("classes must be >= 1"),
            _ => Ok(()),
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

/// Draws `n` samples from the distribution described by `spec`.
///
/// The generator's own parameters (cluster centers, separator) are drawn
/// first from the same `rng`, so a fixed stream gives a fixed population.
pub fn generate_pool<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sample>, ObjectiveError> {
    spec.validate()?;
    let d = spec.dim;
    let samples = match spec.kind {
        SyntheticKind::Quadratic => {
            let centers: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| gaussian_vec(rng, d, spec.spread))
                .collect();
            (0..n)
                .map(|_| {
                    let label = rng.random_range(0..spec.classes);
                    let offset = gaussian_vec(rng, d, spec.noise);
                    let features = centers[label as usize]
                        .iter()
                        .zip(offset)
                        .map(|(c, o)| c + o)
                        .collect();
                    Sample { features, label }
                })
                .collect()
        }
        SyntheticKind::Logistic => {
            let p = if spec.intercept { d - 1 } else { d };
            let separator = gaussian_vec(rng, p, 1.0);
            let scale = spec.spread / (p as f64).sqrt();
            (0..n)
                .map(|_| {
                    let mut features = gaussian_vec(rng, p, scale);
                    let logit: f64 = features
                        .iter()
                        .zip(&separator)
                        .map(|(a, w)| a * w)
                        .sum::<f64>()
                        + spec.noise * Distribution::<f64>::sample(&StandardNormal, rng);
                    if spec.intercept {
                        features.push(1.0);
                    }
                    Sample {
                        features,
                        label: u32::from(logit > 0.0),
                    }
                })
                .collect()
        }
    };
    Ok(samples)
}

/// Generates iid client datasets, `spec.samples_per_client` each, for the
/// given group sizes. Returned group-major.
pub fn generate_synthetic<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    group_sizes: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<ClientDataset>>, ObjectiveError> {
    let total: usize = group_sizes.iter().sum();
    let mut pool = generate_pool(spec, total * spec.samples_per_client, rng)?.into_iter();
    group_sizes
        .iter()
        .enumerate()
        .map(|(group, &size)| {
            (0..size)
                .map(|client| {
                    let samples: Vec<Sample> =
                        pool.by_ref().take(spec.samples_per_client).collect();
                    ClientDataset::new(ClientId { group, client }, samples)
                })
                .collect()
        })
        .collect()
}

/// Splits off a uniformly chosen `fraction` of the samples as a holdout set.
/// Returns `(train, holdout)`.
pub fn split_holdout<R: Rng + ?Sized>(
    mut samples: Vec<Sample>,
    fraction: f64,
    rng: &mut R,
) -> (Vec<Sample>, Vec<Sample>) {
    samples.shuffle(rng);
    let n_holdout = ((samples.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let holdout = samples.split_off(samples.len() - n_holdout);
    (samples, holdout)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PartitionMode {
    Iid,
    /// Each sample goes to its label's home group with probability `skew`,
    /// otherwise to a group drawn proportionally to client counts.
    /// Home groups own contiguous blocks of the sorted label set, so `1.0`
    /// gives fully disjoint label sets per group.
    LabelSkew(f64),
}

impl PartitionMode {
    fn skew(self) -> f64 {
        match self {
            Self::Iid => 0.0,
            Self::LabelSkew(s) => s,
        }
    }
}

/// Owner of each sample, index-aligned with the partitioned slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub owners: Vec<ClientId>,
    group_sizes: Vec<usize>,
}

impl Assignment {
    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Materializes client datasets, group-major. Every client must have
    /// received at least one sample.
    pub fn apply(&self, samples: &[Sample]) -> Result<Vec<Vec<ClientDataset>>, ObjectiveError> {
        let mut buckets: Vec<Vec<Vec<Sample>>> = self
            .group_sizes
            .iter()
            .map(|&n| vec![Vec::new(); n])
            .collect();
        for (owner, sample) in self.owners.iter().zip(samples) {
            buckets[owner.group][owner.client].push(sample.clone());
        }
        buckets
            .into_iter()
            .enumerate()
            .map(|(group, clients)| {
                clients
                    .into_iter()
                    .enumerate()
                    .map(|(client, s)| ClientDataset::new(ClientId { group, client }, s))
                    .collect()
            })
            .collect()
    }
}

/// Assigns every sample to a `(group, client)` pair.
pub fn partition<R: Rng + ?Sized>(
    samples: &[Sample],
    group_sizes: &[usize],
    mode: PartitionMode,
    rng: &mut R,
) -> Result<Assignment, ObjectiveError> {
    let skew = mode.skew();
    if !(0.0..=1.0).contains(&skew) {
        return Err(ObjectiveError::InvalidSkew(skew));
    }
    if let Some(g) = group_sizes.iter().position(|&n| n == 0) {
        return Err(ObjectiveError::EmptyGroup(g));
    }
    let num_groups = group_sizes.len();
    let total_clients: usize = group_sizes.iter().sum();

    let labels: Vec<u32> = {
        let mut l: Vec<u32> = samples.iter().map(|s| s.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let home: BTreeMap<u32, usize> = labels
        .iter()
        .enumerate()
        .map(|(j, &label)| (label, j * num_groups / labels.len()))
        .collect();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);

    let mut per_group: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for &idx in &order {
        let group = if rng.random::<f64>() < skew {
            home[&samples[idx].label]
        } else {
            let mut pick = rng.random_range(0..total_clients);
            group_sizes
                .iter()
                .position(|&n| {
                    if pick < n {
                        true
                    } else {
                        pick -= n;
                        false
                    }
                })
                .expect("pick < total_clients")
        };
        per_group[group].push(idx);
    }

    let mut owners = vec![
        ClientId {
            group: 0,
            client: 0
        };
        samples.len()
    ];
    for (group, indices) in per_group.iter().enumerate() {
        for (pos, &idx) in indices.iter().enumerate() {
            owners[idx] = ClientId {
                group,
                client: pos % group_sizes[group],
            };
        }
        if indices.len() < group_sizes[group] {
            return Err(ObjectiveError::EmptyClient {
                group,
                client: indices.len(),
            });
        }
    }
    Ok(Assignment {
        owners,
        group_sizes: group_sizes.to_vec(),
    })
}

/// Reads samples from a CSV file with header `feature_0,…,feature_{p-1},label`.
pub fn load_csv(path: &Path) -> Result<Vec<Sample>, ObjectiveError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| ObjectiveError::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| ObjectiveError::Csv(e.to_string()))?
        .clone();
    let p = headers
        .len()
        .checked_sub(1)
        .filter(|&p| p > 0)
        .ok_or_else(|| {
            ObjectiveError::Csv("expected at least one feature column and a label column".into())
        })?;
    for (j, h) in headers.iter().take(p).enumerate() {
        if h.trim() != format!("feature_{j}") {
            return Err(ObjectiveError::Csv(format!(
                "column {j} must be named feature_{j}, found {h:?}"
            )));
        }
    }
    if headers[p].trim() != "label" {
        return Err(ObjectiveError::Csv(format!(
            "last column must be named label, found {:?}",
            &headers[p]
        )));
    }
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ObjectiveError::Csv(e.to_string()))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| ObjectiveError::Csv(format!("row {}: {e}", row + 1)))
        };
        let features = record
            .iter()
            .take(p)
            .map(parse)
            .collect::<Result<Vec<_>, _>>()?;
        let raw = parse(&record[p])?;
        if raw < 0.0 || raw.fract() != 0.0 || raw > f64::from(u32::MAX) {
            return Err(ObjectiveError::Csv(format!(
                "row {}: label must be a non-negative integer",
                row + 1
            )));
        }
        samples.push(Sample {
            features,
            label: raw as u32,
        });
    }
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    Ok(samples)
}
