//! Closed-form deviation and convergence bounds, evaluated with per-term
//! breakdowns on a realized iteration history.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("at least one group size is required")]
    EmptySizes,
    #[error("group {0} has size zero")]
    ZeroGroupSize(usize),
    #[error("iteration history is empty")]
    EmptyHistory,
    #[error("round {round} has {got} entries, expected {expected}")]
    RaggedHistory {
        round: u64,
        expected: usize,
        got: usize,
    },
    #[error("t = 0 at round {round}, group {group}; every round runs at least one iteration")]
    ZeroIterations { round: u64, group: usize },
    #[error("history has {history} groups but {sizes} group sizes were given")]
    GroupCountMismatch { history: usize, sizes: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// `t_i^u` for rounds `u = 1..=U` and groups `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationHistory {
    rounds: Vec<Vec<u64>>,
}

impl IterationHistory {
    /// `rounds[u - 1][i]` is `t_i^u`.
    pub fn new(rounds: Vec<Vec<u64>>) -> Result<Self, BoundsError> {
        let groups = rounds.first().ok_or(BoundsError::EmptyHistory)?.len();
        if groups == 0 {
            return Err(BoundsError::EmptyHistory);
        }
        for (u, row) in rounds.iter().enumerate() {
            if row.len() != groups {
                return Err(BoundsError::RaggedHistory {
                    round: u as u64 + 1,
                    expected: groups,
                    got: row.len(),
                });
            }
            if let Some(group) = row.iter().position(|&t| t == 0) {
                return Err(BoundsError::ZeroIterations {
                    round: u as u64 + 1,
                    group,
                });
            }
        }
        Ok(Self { rounds })
    }

    /// Every group runs `t[i]` iterations in each of `rounds` rounds.
    pub fn constant(t: &[u64], rounds: u64) -> Result<Self, BoundsError> {
        Self::new(vec![t.to_vec(); rounds as usize])
    }

    pub fn num_rounds(&self) -> u64 {
        self.rounds.len() as u64
    }

    pub fn num_groups(&self) -> usize {
        self.rounds[0].len()
    }

    /// `t_i^u` with `u` counted from 1.
    pub fn get(&self, u: u64, group: usize) -> u64 {
        self.rounds[(u - 1) as usize][group]
    }

    pub fn group(&self, group: usize) -> Vec<u64> {
        self.rounds.iter().map(|r| r[group]).collect()
    }

    pub fn rounds(&self) -> &[Vec<u64>] {
        &self.rounds
    }
}

/// Step size and the smoothness, gradient-bound and variance constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub alpha: f64,
    pub l: f64,
    pub g: f64,
    pub sigma: f64,
}

impl BoundParams {
    fn validate(&self) -> Result<(), BoundsError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(BoundsError::InvalidParameter(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.l.is_finite() && self.l > 0.0) {
            return Err(BoundsError::InvalidParameter(format!(
                "L must be > 0, got {}",
                self.l
            )));
        }
        if !ok(self.g) || !ok(self.sigma) {
            return Err(BoundsError::InvalidParameter(format!(
                "G and sigma must be finite and >= 0, got {} and {}",
                self.g, self.sigma
            )));
        }
        Ok(())
    }

    pub fn alpha_exceeds_inverse_l(&self) -> bool {
        self.alpha * self.l > 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub params: BoundParams,
    pub group_sizes: Vec<usize>,
    pub history: Vec<Vec<u64>>,
    pub rounds: u64,
    pub loss_gap: f64,
    pub terms: Vec<BoundTerm>,
    pub total: f64,
    /// The bound assumes `α ≤ 1/L`; it is still evaluated when that fails.
    pub alpha_exceeds_inverse_l: bool,
}

impl BoundReport {
    fn new(
        name: &str,
        params: BoundParams,
        sizes: &[usize],
        history: Vec<Vec<u64>>,
        loss_gap: f64,
        terms: Vec<(&str, f64)>,
    ) -> Self {
        let total = terms.iter().map(|(_, v)| v).sum();
        Self {
            name: name.to_string(),
            params,
            group_sizes: sizes.to_vec(),
            rounds: history.len() as u64,
            history,
            loss_gap,
            terms: terms
                .into_iter()
                .map(|(n, value)| BoundTerm {
                    name: n.to_string(),
                    value,
                })
                .collect(),
            total,
            alpha_exceeds_inverse_l: params.alpha_exceeds_inverse_l(),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn term_values(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.value).collect()
    }
}

fn check_sizes(sizes: &[usize]) -> Result<(), BoundsError> {
    if sizes.is_empty() {
        return Err(BoundsError::EmptySizes);
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(BoundsError::ZeroGroupSize(i));
    }
    Ok(())
}

/// `Σ_j |N_j|²` and `(Σ_i |N_i|)²`.
fn size_moments(sizes: &[usize]) -> (f64, f64) {
    let sq: f64 = sizes.iter().map(|&n| (n as f64).powi(2)).sum();
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    (sq, total * total)
}

/// Group-size imbalance `|N_g| · Σ_j |N_j|² / (Σ_i |N_i|)²`; 1 for equal sizes.
pub fn kappa(sizes: &[usize]) -> Result<f64, BoundsError> {
    check_sizes(sizes)?;
    let (sq, total_sq) = size_moments(sizes);
    Ok(sizes.len() as f64 * sq / total_sq)
}

/// Deviation bound `2α²(t² + κ)G²`, split into the group's own term and the
/// term shared by all groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Bound {
    /// `2α²t²G²`.
    pub group_term: f64,
    /// `2α²κG²`.
    pub all_groups_term: f64,
    pub total: f64,
}

pub fn lemma1_deviation_bound(
    t: u64,
    sizes: &[usize],
    alpha: f64,
    g: f64,
) -> Result<Lemma1Bound, BoundsError> {
    if t == 0 {
        return Err(BoundsError::InvalidParameter("t must be >= 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0 && g.is_finite() && g > 0.0) {
        return Err(BoundsError::InvalidParameter(format!(
            "alpha and G must be > 0, got {alpha} and {g}"
        )));
    }
    let k = kappa(sizes)?;
    let scale = 2.0 * alpha * alpha * g * g;
    let group_term = scale * (t as f64).powi(2);
    let all_groups_term = scale * k;
    Ok(Lemma1Bound {
        group_term,
        all_groups_term,
        total: group_term + all_groups_term,
    })
}

/// `Σ_{l=0}^{t−1} l² = (t−1)t(2t−1)/6`.
pub fn sum_squares_below(t: u64) -> u128 {
    if t == 0 {
        return 0;
    }
    let t = t as u128;
    (t - 1) * t * (2 * t - 1) / 6
}

/// Per-group bound on the averaged squared gradient norm of `f_i` along the
/// group's local trajectory. `history` is `t_i^1..t_i^U` for this group.
pub fn theorem1_group_bound(
    params: BoundParams,
    group_size: usize,
    kappa: f64,
    history: &[u64],
    loss_gap: f64,
) -> Result<BoundReport, BoundsError> {
    params.validate()?;
    if group_size == 0 {
        return Err(BoundsError::ZeroGroupSize(0));
    }
    if history.is_empty() {
        return Err(BoundsError::EmptyHistory);
    }
    if let Some(u) = history.iter().position(|&t| t == 0) {
        return Err(BoundsError::ZeroIterations {
            round: u as u64 + 1,
            group: 0,
        });
    }
    let BoundParams { alpha, l, g, sigma } = params;
    let big_u = history.len();
    let t_sum: f64 = history.iter().map(|&t| t as f64).sum();
    let g2 = g * g;

    let term1 = 2.0 / (alpha * t_sum) * loss_gap;
    let term2 = alpha * l * sigma * sigma / group_size as f64;
    let term3 =
        (1.0 / (alpha * t_sum) + 2.0 * (l + 1.0) * kappa * alpha / t_sum) * (big_u - 1) as f64 * g2;
    let t_sq_before_last: f64 = history[..big_u - 1]
        .iter()
        .map(|&t| (t as f64).powi(2))
        .sum();
    let term4 = 2.0 * (l + 1.0) * alpha / t_sum * t_sq_before_last * g2;

    Ok(BoundReport::new(
        "theorem1",
        params,
        &[group_size],
        history.iter().map(|&t| vec![t]).collect(),
        loss_gap,
        vec![
            ("term1", term1),
            ("term2", term2),
            ("term3", term3),
            ("term4", term4),
        ],
    ))
}

/// Bound on `(1/U) Σ_u ‖∇f(x^u)‖²`, five terms. At `u = 1` the previous-round
/// count `t_i^0` is taken as 0.
pub fn theorem2_global_bound(
    params: BoundParams,
    sizes: &[usize],
    history: &IterationHistory,
    loss_gap: f64,
) -> Result<BoundReport, BoundsError> {
    params.validate()?;
    check_sizes(sizes)?;
    if history.num_groups() != sizes.len() {
        return Err(BoundsError::GroupCountMismatch {
            history: history.num_groups(),
            sizes: sizes.len(),
        });
    }
    let BoundParams { alpha, l, g, sigma } = params;
    let n_g = sizes.len() as f64;
    let (sq, total_sq) = size_moments(sizes);
    let big_u = history.num_rounds() as f64;
    let a2l2 = alpha * alpha * l * l;
    let g2 = g * g;
    let nsq: Vec<f64> = sizes.iter().map(|&n| (n as f64).powi(2)).collect();

    let term1 = 2.0 / alpha / big_u * loss_gap;
    let term2 = alpha * l * n_g * sq * sigma * sigma / total_sq;

    let mut prev_drift = 0.0;
    let mut local_drift = 0.0;
    let mut prev: Vec<u64> = vec![0; sizes.len()];
    for row in history.rounds() {
        prev_drift += prev
            .iter()
            .zip(&nsq)
            .map(|(&t, w)| w * (t as f64).powi(2))
            .sum::<f64>();
        local_drift += row
            .iter()
            .zip(&nsq)
            .map(|(&t, w)| w * sum_squares_below(t) as f64 / t as f64)
            .sum::<f64>();
        prev.clone_from(row);
    }
    let term3 = 12.0 * a2l2 * n_g / total_sq * prev_drift / big_u;
    let term4 = 12.0 * a2l2 * g2 * n_g * n_g / (total_sq * total_sq) * sq * sq;
    let term5 = 4.0 * a2l2 * g2 * n_g / total_sq * local_drift / big_u;

    Ok(BoundReport::new(
        "theorem2",
        params,
        sizes,
        history.rounds().to_vec(),
        loss_gap,
        vec![
            ("term1", term1),
            ("term2", term2),
            ("term3", term3),
            ("term4", term4),
            ("term5", term5),
        ],
    ))
}

/// Largest possible local iteration count `max(1, ⌈S/c⌉)` when every local
/// delay is at least `c`.
pub fn t_max(sync_time: f64, min_delay: f64) -> Result<u64, BoundsError> {
    if !(min_delay.is_finite() && min_delay > 0.0) {
        return Err(BoundsError::InvalidParameter(format!(
            "minimum delay must be > 0, got {min_delay}"
        )));
    }
    if !(sync_time.is_finite() && sync_time >= 0.0) {
        return Err(BoundsError::InvalidParameter(format!(
            "sync time must be >= 0, got {sync_time}"
        )));
    }
    Ok(((sync_time / min_delay).ceil() as u64).max(1))
}

/// `α = min(1/√U, 1/L)`.
pub fn corollary_rate(rounds: u64, l: f64) -> f64 {
    (1.0 / (rounds as f64).sqrt()).min(1.0 / l)
}

/// The global bound with every `t_i^u` replaced by `t_i^max`, at the step size
/// in `params`.
pub fn corollary_bound(
    params: BoundParams,
    sizes: &[usize],
    t_max: &[u64],
    rounds: u64,
    loss_gap: f64,
) -> Result<BoundReport, BoundsError> {
    if rounds == 0 {
        return Err(BoundsError::EmptyHistory);
    }
    let history = IterationHistory::constant(t_max, rounds)?;
    let mut report = theorem2_global_bound(params, sizes, &history, loss_gap)?;
    report.name = "corollary".into();
    Ok(report)
}

/// [`corollary_bound`] at `α = corollary_rate(U, L)`.
pub fn corollary_bound_at_rate(
    l: f64,
    g: f64,
    sigma: f64,
    sizes: &[usize],
    t_max: &[u64],
    rounds: u64,
    loss_gap: f64,
) -> Result<BoundReport, BoundsError> {
    let params = BoundParams {
        alpha: corollary_rate(rounds, l),
        l,
        g,
        sigma,
    };
    corollary_bound(params, sizes, t_max, rounds, loss_gap)
}
