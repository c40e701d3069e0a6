//! Per-iteration delays, sync schedules and the sync-time-gated iteration count.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DelayError {
    #[error("delay shift must be finite and >= 0, got {0}")]
    InvalidShift(f64),
    #[error("delay rate must be > 0, got {0}")]
    InvalidRate(f64),
    #[error("a delay with zero shift and infinite rate never advances the clock")]
    ZeroDelay,
    #[error("sync time must be finite and >= 0, got {0}")]
    InvalidSyncTime(f64),
    #[error("ramp must be non-decreasing (start {start}, end {end}, step {step})")]
    InvalidRamp { start: f64, end: f64, step: f64 },
}

/// `c + Exp(λ)`: a hard minimum delay `c` plus an exponential tail of rate `λ`.
///
/// An infinite rate is the deterministic limit (every sample equals `c`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftedExponential {
    shift: f64,
    rate: f64,
}

impl ShiftedExponential {
    pub fn new(shift: f64, rate: f64) -> Result<Self, DelayError> {
        if !(shift.is_finite() && shift >= 0.0) {
            return Err(DelayError::InvalidShift(shift));
        }
        if rate.is_nan() || rate <= 0.0 {
            return Err(DelayError::InvalidRate(rate));
        }
        if shift == 0.0 && rate.is_infinite() {
            return Err(DelayError::ZeroDelay);
        }
        Ok(Self { shift, rate })
    }

    /// Deterministic delay of exactly `c` per draw.
    pub fn deterministic(shift: f64) -> Result<Self, DelayError> {
        Self::new(shift, f64::INFINITY)
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mean(&self) -> f64 {
        self.shift + 1.0 / self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.rate.is_infinite() {
            return self.shift;
        }
        // rate validated in the constructor
        let tail = Exp::new(self.rate).expect("positive rate").sample(rng);
        self.shift + tail
    }
}

/// Sync time per global round: fixed, or a ramp that grows by `step` each
/// round until it reaches `end` and then holds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SyncSchedule {
    Fixed { s: f64 },
    Ramp { start: f64, end: f64, step: f64 },
}

impl SyncSchedule {
    pub fn fixed(s: f64) -> Result<Self, DelayError> {
        let schedule = Self::Fixed { s };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn ramp(start: f64, end: f64, step: f64) -> Result<Self, DelayError> {
        let schedule = Self::Ramp { start, end, step };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), DelayError> {
        let valid_s = |s: f64| s.is_finite() && s >= 0.0;
        match *self {
            Self::Fixed { s } if !valid_s(s) => Err(DelayError::InvalidSyncTime(s)),
            Self::Fixed { .. } => Ok(()),
            Self::Ramp { start, end, step } => {
                if !valid_s(start) {
                    return Err(DelayError::InvalidSyncTime(start));
                }
                if !valid_s(end) {
                    return Err(DelayError::InvalidSyncTime(end));
                }
                if !(step.is_finite() && step >= 0.0) || end < start {
                    return Err(DelayError::InvalidRamp { start, end, step });
                }
                Ok(())
            }
        }
    }

    /// Sync time for global round `u` (1-based).
    pub fn sync_time_for_round(&self, u: u64) -> f64 {
        debug_assert!(u >= 1, "rounds are 1-based");
        match *self {
            Self::Fixed { s } => s,
            Self::Ramp { start, end, step } => {
                (start + (u.saturating_sub(1)) as f64 * step).min(end)
            }
        }
    }
}

/// Outcome of one group's local phase.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCount {
    /// Number of local iterations `t ≥ 1`.
    pub iterations: u64,
    /// Sum of the consumed delays; `≥ S`.
    pub elapsed: f64,
    pub samples: Vec<f64>,
}

/// Draws delays from `next_delay` until their running sum reaches `sync_time`.
///
/// Returns the smallest `n ≥ 1` with `τ_1 + … + τ_n ≥ S`. A tie counts as
/// crossing, and the crossing iteration is completed, so `elapsed ≥ S`. For
/// `S = 0` this is a single iteration.
pub fn count_local_iterations<F>(mut next_delay: F, sync_time: f64) -> LocalCount
where
    F: FnMut() -> f64,
{
    let mut samples = Vec::new();
    let mut elapsed = 0.0;
    loop {
        let tau = next_delay();
        samples.push(tau);
        elapsed += tau;
        if elapsed >= sync_time {
            break;
        }
    }
    LocalCount {
        iterations: samples.len() as u64,
        elapsed,
        samples,
    }
}
