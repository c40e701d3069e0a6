//! Experiment configuration file (TOML).
//!
//! ```toml
//! seeds = [1, 2, 3]
//! output_dir = "out"
//!
//! [topology]
//! groups = [10, 10]
//!
//! [[delay.group]]
//! shift = 1.0
//! rate = 2.0
//! [[delay.group]]
//! shift = 1.0
//! rate = 2.0
//! [delay.global]
//! shift = 5.0
//! rate = 2.0
//!
//! [sync]
//! s = 5.0
//!
//! [training]
//! alpha = 0.05
//! total_time = 200.0
//!
//! [objective]
//! kind = "logistic"
//! regularization = 0.01
//!
//! [data]
//! dim = 10
//! samples_per_client = 40
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{ShiftedExponential, SyncSchedule};
use crate::engine::{GroupSpec, Init, Topology};
use crate::model::DenseMatrix;
use crate::objective::{MinibatchSpec, Objective, PartitionMode, ProbeSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub delay: DelayConfig,
    #[serde(default)]
    pub sync: SyncConfig,
    pub training: TrainingConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Client count of each group.
    pub groups: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    /// One entry per group, or a single entry shared by all groups.
    pub group: Vec<DelayParams>,
    pub global: DelayParams,
}

/// Shifted exponential `shift + Exp(rate)`; no rate means the delay is
/// exactly `shift`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayParams {
    pub shift: f64,
    #[serde(default)]
    pub rate: Option<f64>,
}

impl DelayParams {
    pub fn to_distribution(self) -> Result<ShiftedExponential, crate::delay::DelayError> {
        match self.rate {
            Some(rate) => ShiftedExponential::new(self.shift, rate),
            None => ShiftedExponential::deterministic(self.shift),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    #[default]
    Fixed,
    Ramp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampConfig {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    #[serde(default)]
    pub mode: SyncMode,
    /// Fixed sync time `S`.
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default)]
    pub ramp: Option<RampConfig>,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            mode: SyncMode::Fixed,
            s: Some(0.0),
            ramp: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Gaussian,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    /// System time budget `T`.
    pub total_time: f64,
    #[serde(default)]
    pub clip: Option<f64>,
    /// Minibatch size per client step; absent means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKindConfig {
    Quadratic,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HessianConfig {
    Diagonal(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKindConfig,
    #[serde(default)]
    pub regularization: f64,
    /// Quadratic only; a list is a diagonal, a list of lists is the full
    /// matrix. Defaults to the identity.
    #[serde(default)]
    pub hessian: Option<HessianConfig>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Feature dimension of synthetic data (including the intercept).
    #[serde(default)]
    pub dim: Option<usize>,
    /// Synthetic quadratic data only; logistic data is binary.
    #[serde(default)]
    pub classes: Option<u32>,
    /// Training samples per client (synthetic); CSV data is split evenly.
    #[serde(default = "default_samples_per_client")]
    pub samples_per_client: usize,
    /// Label skew in `[0, 1]`; 0 is iid.
    #[serde(default)]
    pub skew: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub spread: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_samples_per_client() -> usize {
    50
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    /// Lower bound on `f`; when set the loss gap is `f(x^1) − this`
    /// instead of the measured `f(x^1) − f(x^{U+1})`.
    #[serde(default)]
    pub loss_lower_bound: Option<f64>,
    #[serde(default)]
    pub l: Option<f64>,
    #[serde(default)]
    pub g: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub probe: ProbeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_points")]
    pub points: usize,
    #[serde(default = "default_probe_batches")]
    pub batches: usize,
    #[serde(default = "default_probe_radius")]
    pub radius: f64,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_probe_points() -> usize {
    ProbeSpec::default().points
}

fn default_probe_batches() -> usize {
    ProbeSpec::default().batches
}

fn default_probe_radius() -> f64 {
    ProbeSpec::default().radius
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            points: default_probe_points(),
            batches: default_probe_batches(),
            radius: default_probe_radius(),
            seed: None,
        }
    }
}

/// One problem found in a configuration, with the dotted key it refers to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", list(.0))]
    Invalid(Vec<ConfigIssue>),
}

fn list(issues: &[ConfigIssue]) -> String {
    let mut s = String::from("invalid configuration:");
    for issue in issues {
        s.push_str("\n  ");
        s.push_str(&issue.to_string());
    }
    s
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            Self::Invalid(v) => v,
            Self::Io { .. } => &[],
        }
    }
}

fn issue(key: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

/// Parses and validates configuration text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let parent = e.path().to_string();
        let message = e.inner().message().to_string();
        ConfigError::Invalid(vec![issue(key_for(&parent, &message), message)])
    })?;
    config.validate()?;
    Ok(config)
}

/// For a missing field the reported path stops at the parent table and the
/// key is only named inside the message; fold it into the path.
fn key_for(parent: &str, message: &str) -> String {
    let named = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|prefix| message.strip_prefix(prefix))
        .and_then(|rest| rest.split('`').next());
    let parent = if parent == "." { "" } else { parent };
    let named = named.filter(|f| !(parent == *f || parent.ends_with(&format!(".{f}"))));
    match (named, parent.is_empty()) {
        (Some(field), true) => field.to_string(),
        (Some(field), false) => format!("{parent}.{field}"),
        (None, true) => "<root>".to_string(),
        (None, false) => parent.to_string(),
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn non_negative(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let groups = &self.topology.groups;
        if groups.is_empty() {
            issues.push(issue("topology.groups", "at least one group is required"));
        }
        for (i, &n) in groups.iter().enumerate() {
            if n == 0 {
                issues.push(issue(
                    format!("topology.groups[{i}]"),
                    "a group needs at least one client",
                ));
            }
        }

        let d = &self.delay;
        if d.group.is_empty() || (d.group.len() != 1 && d.group.len() != groups.len()) {
            issues.push(issue(
                "delay.group",
                format!(
                    "expected 1 or {} entries, got {}",
                    groups.len(),
                    d.group.len()
                ),
            ));
        }
        for (i, p) in d.group.iter().enumerate() {
            if let Err(e) = p.to_distribution() {
                issues.push(issue(format!("delay.group[{i}]"), e.to_string()));
            }
        }
        if let Err(e) = d.global.to_distribution() {
            issues.push(issue("delay.global", e.to_string()));
        }

        match self.sync.mode {
            SyncMode::Fixed => match self.sync.s {
                None => issues.push(issue("sync.s", "fixed mode needs a sync time")),
                Some(s) if !non_negative(s) => {
                    issues.push(issue("sync.s", format!("must be finite and >= 0, got {s}")))
                }
                Some(_) => {}
            },
            SyncMode::Ramp => match self.sync.ramp {
                None => issues.push(issue("sync.ramp", "ramp mode needs start, end and step")),
                Some(r) => {
                    if let Err(e) = SyncSchedule::ramp(r.start, r.end, r.step) {
                        issues.push(issue("sync.ramp", e.to_string()));
                    }
                }
            },
        }

        let t = &self.training;
        if !positive(t.alpha) {
            issues.push(issue(
                "training.alpha",
                format!("must be > 0, got {}", t.alpha),
            ));
        }
        if !positive(t.total_time) {
            issues.push(issue(
                "training.total_time",
                format!("must be finite and > 0, got {}", t.total_time),
            ));
        }
        if let Some(c) = t.clip {
            if !positive(c) {
                issues.push(issue("training.clip", format!("must be > 0, got {c}")));
            }
        }
        if t.batch_size == Some(0) {
            issues.push(issue("training.batch_size", "must be >= 1"));
        }
        if !non_negative(t.init_scale) {
            issues.push(issue(
                "training.init_scale",
                format!("must be >= 0, got {}", t.init_scale),
            ));
        }

        let o = &self.objective;
        if !non_negative(o.regularization) {
            issues.push(issue(
                "objective.regularization",
                format!("must be >= 0, got {}", o.regularization),
            ));
        }
        if o.kind == ObjectiveKindConfig::Logistic && o.hessian.is_some() {
            issues.push(issue(
                "objective.hessian",
                "only quadratic objectives take a Hessian",
            ));
        }
        if let Some(h) = &o.hessian {
            match self.hessian_matrix(h) {
                Err(m) => issues.push(issue("objective.hessian", m)),
                Ok(m) => {
                    if let (Some(dim), DataSource::Synthetic) = (self.data.dim, self.data.source) {
                        if m.dim() != dim {
                            issues.push(issue(
                                "objective.hessian",
                                format!("is {0}x{0} but data.dim is {dim}", m.dim()),
                            ));
                        }
                    }
                }
            }
        }

        let data = &self.data;
        match data.source {
            DataSource::Synthetic => {
                match data.dim {
                    None => issues.push(issue("data.dim", "synthetic data needs a dimension")),
                    Some(0) => issues.push(issue("data.dim", "must be >= 1")),
                    Some(1) if o.kind == ObjectiveKindConfig::Logistic && data.intercept => {
                        issues.push(issue("data.dim", "an intercept needs dim >= 2"))
                    }
                    _ => {}
                }
                if data.path.is_some() {
                    issues.push(issue("data.path", "only used with source = \"csv\""));
                }
            }
            DataSource::Csv => {
                if data.path.is_none() {
                    issues.push(issue("data.path", "csv data needs a path"));
                }
            }
        }
        match (o.kind, data.classes) {
            (ObjectiveKindConfig::Logistic, Some(c)) if c != 2 => {
                issues.push(issue("data.classes", "logistic data is binary"));
            }
            (_, Some(0)) => issues.push(issue("data.classes", "must be >= 1")),
            _ => {}
        }
        if data.samples_per_client == 0 {
            issues.push(issue("data.samples_per_client", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&data.skew) {
            issues.push(issue(
                "data.skew",
                format!("must lie in [0, 1], got {}", data.skew),
            ));
        }
        if !(data.test_fraction.is_finite() && (0.0..1.0).contains(&data.test_fraction)) {
            issues.push(issue(
                "data.test_fraction",
                format!("must lie in [0, 1), got {}", data.test_fraction),
            ));
        }
        for (key, v) in [("data.spread", data.spread), ("data.noise", data.noise)] {
            if let Some(v) = v {
                if !non_negative(v) {
                    issues.push(issue(key, format!("must be >= 0, got {v}")));
                }
            }
        }

        let b = &self.bounds;
        if let Some(v) = b.loss_lower_bound {
            if !v.is_finite() {
                issues.push(issue("bounds.loss_lower_bound", "must be finite"));
            }
        }
        if let Some(v) = b.l {
            if !positive(v) {
                issues.push(issue("bounds.l", format!("must be > 0, got {v}")));
            }
        }
        for (key, v) in [("bounds.g", b.g), ("bounds.sigma", b.sigma)] {
            if let Some(v) = v {
                if !non_negative(v) {
                    issues.push(issue(key, format!("must be >= 0, got {v}")));
                }
            }
        }
        if b.probe.points == 0 {
            issues.push(issue("bounds.probe.points", "must be >= 1"));
        }
        if b.probe.batches == 0 {
            issues.push(issue("bounds.probe.batches", "must be >= 1"));
        }
        if !non_negative(b.probe.radius) {
            issues.push(issue("bounds.probe.radius", "must be >= 0"));
        }

        if self.seeds.is_empty() {
            issues.push(issue("seeds", "at least one seed is required"));
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    fn hessian_matrix(&self, h: &HessianConfig) -> Result<DenseMatrix, String> {
        let m = match h {
            HessianConfig::Diagonal(d) if d.is_empty() => return Err("must not be empty".into()),
            HessianConfig::Diagonal(d) => DenseMatrix::diagonal(d),
            HessianConfig::Rows(rows) => {
                DenseMatrix::from_rows(rows).ok_or("rows must form a square matrix")?
            }
        };
        if !m.is_symmetric(1e-12) {
            return Err("must be symmetric".into());
        }
        Ok(m)
    }

    pub fn topology(&self) -> Topology {
        let shared = self.delay.group.len() == 1;
        let groups = self
            .topology
            .groups
            .iter()
            .enumerate()
            .map(|(i, &num_clients)| GroupSpec {
                num_clients,
                delay: self.delay.group[if shared { 0 } else { i }]
                    .to_distribution()
                    .expect("validated"),
            })
            .collect();
        Topology::new(
            groups,
            self.delay.global.to_distribution().expect("validated"),
        )
        .expect("validated")
    }

    pub fn schedule(&self) -> SyncSchedule {
        match self.sync.mode {
            SyncMode::Fixed => {
                SyncSchedule::fixed(self.sync.s.expect("validated")).expect("validated")
            }
            SyncMode::Ramp => {
                let r = self.sync.ramp.expect("validated");
                SyncSchedule::ramp(r.start, r.end, r.step).expect("validated")
            }
        }
    }

    pub fn init(&self) -> Init {
        match self.training.init {
            InitKind::Zeros => Init::Zeros,
            InitKind::Gaussian => Init::Gaussian {
                scale: self.training.init_scale,
            },
        }
    }

    pub fn batch(&self) -> MinibatchSpec {
        match self.training.batch_size {
            Some(n) => MinibatchSpec::samples(n),
            None => MinibatchSpec::full(),
        }
    }

    /// Builds the objective for feature dimension `dim`.
    pub fn objective(&self, dim: usize) -> Result<Objective, String> {
        let o = &self.objective;
        let built = match o.kind {
            ObjectiveKindConfig::Logistic => Objective::logistic(o.regularization),
            ObjectiveKindConfig::Quadratic => {
                let h = match &o.hessian {
                    Some(h) => self.hessian_matrix(h)?,
                    None => DenseMatrix::identity(dim),
                };
                if h.dim() != dim {
                    return Err(format!(
                        "Hessian is {0}x{0} but the data has dimension {dim}",
                        h.dim()
                    ));
                }
                Objective::quadratic(h, o.regularization)
            }
        };
        built.map_err(|e| e.to_string())
    }

    pub fn partition_mode(&self) -> PartitionMode {
        if self.data.skew == 0.0 {
            PartitionMode::Iid
        } else {
            PartitionMode::LabelSkew(self.data.skew)
        }
    }

    pub fn probe(&self, seed: u64) -> ProbeSpec {
        let p = self.bounds.probe;
        ProbeSpec {
            points: p.points,
            batches: p.batches,
            radius: p.radius,
            seed: p.seed.unwrap_or(seed),
        }
    }
}
