//! Policy families and the schedules they materialize into.
//!
//! A policy fixes, before the loop starts, how many filtered samples `n_t` are
//! kept at every iteration `t = 0..T-1`. Real-valued family formulas are
//! floored; any entry that floors to zero is clamped to one and the schedule is
//! flagged as [`Schedule::clamped`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("verbatim linear normalization needs a horizon of at least 2, got {0}")]
    VerbatimHorizon(usize),
    #[error("explicit schedule has {len} entries but the horizon is {horizon}")]
    ExplicitLength { len: usize, horizon: usize },
    #[error("explicit schedule must not be empty")]
    EmptyExplicit,
    #[error("every scheduled count must be at least 1 (entry {0} is 0)")]
    ZeroEntry(usize),
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    Parameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// Denominator used by the budget-matched linear scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearNormalization {
    /// `T(T-1)`, which overshoots the exponential budget by `(T+1)/(T-1)`.
    #[default]
    Verbatim,
    /// `T(T+1)`, which matches the exponential budget before flooring.
    Exact,
}

/// A policy family with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// `n_t = n0`.
    Constant { n0: usize },
    /// `n_t = floor(n0 (1+t)^alpha)`.
    Polynomial { n0: usize, alpha: f64 },
    /// `n_t = floor(n0 (1+u)^t)`.
    Exponential { n0: usize, u: f64 },
    /// A literal schedule; its length must equal the horizon.
    Explicit(Vec<usize>),
    /// `n_t = floor(n) B`.
    BatchConstant { n: f64, batch: usize },
    /// `n_t = floor(n (t+1)) B`.
    BatchLinear { n: f64, batch: usize },
    /// `n_t = floor(n (1+u)^t) B`.
    BatchExponential { n: f64, u: f64, batch: usize },
    /// Constant schedule spending the same budget as `Exponential { n0, u }`.
    MatchedConstant { n0: usize, u: f64 },
    /// Linear schedule spending (roughly) the budget of `Exponential { n0, u }`.
    MatchedLinear {
        n0: usize,
        u: f64,
        normalization: LinearNormalization,
    },
}

impl PolicySpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            PolicySpec::Constant { .. } => "constant",
            PolicySpec::Polynomial { .. } => "polynomial",
            PolicySpec::Exponential { .. } => "exponential",
            PolicySpec::Explicit(_) => "explicit",
            PolicySpec::BatchConstant { .. } => "batch_constant",
            PolicySpec::BatchLinear { .. } => "batch_linear",
            PolicySpec::BatchExponential { .. } => "batch_exponential",
            PolicySpec::MatchedConstant { .. } => "matched_constant",
            PolicySpec::MatchedLinear { .. } => "matched_linear",
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            PolicySpec::Constant { n0 } => check_n0(*n0),
            PolicySpec::Polynomial { n0, alpha } => {
                check_n0(*n0)?;
                check_positive("alpha", *alpha)
            }
            PolicySpec::Exponential { n0, u }
            | PolicySpec::MatchedConstant { n0, u }
            | PolicySpec::MatchedLinear { n0, u, .. } => {
                check_n0(*n0)?;
                check_positive("u", *u)
            }
            PolicySpec::Explicit(counts) => {
                if counts.is_empty() {
                    return Err(PolicyError::EmptyExplicit);
                }
                match counts.iter().position(|&c| c == 0) {
                    Some(i) => Err(PolicyError::ZeroEntry(i)),
                    None => Ok(()),
                }
            }
            PolicySpec::BatchConstant { n, batch } | PolicySpec::BatchLinear { n, batch } => {
                check_positive("n", *n)?;
                check_batch(*batch)
            }
            PolicySpec::BatchExponential { n, u, batch } => {
                check_positive("n", *n)?;
                check_positive("u", *u)?;
                check_batch(*batch)
            }
        }
    }
}

fn check_n0(n0: usize) -> Result<(), PolicyError> {
    if n0 == 0 {
        return Err(PolicyError::Parameter {
            name: "n0",
            value: 0.0,
            reason: "must be a positive integer",
        });
    }
    Ok(())
}

fn check_batch(batch: usize) -> Result<(), PolicyError> {
    if batch == 0 {
        return Err(PolicyError::Parameter {
            name: "B",
            value: 0.0,
            reason: "batch size must be a positive integer",
        });
    }
    Ok(())
}

fn check_positive(name: &'static str, value: f64) -> Result<(), PolicyError> {
    if !(value.is_finite() && value > 0.0) {
        return Err(PolicyError::Parameter {
            name,
            value,
            reason: "must be a finite positive number",
        });
    }
    Ok(())
}

/// A materialized policy: the count kept at each iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    counts: Vec<usize>,
    family: String,
    clamped: bool,
}

impl Schedule {
    /// Wraps literal counts; all entries must be positive.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self, PolicyError> {
        PolicySpec::Explicit(counts.clone()).validate()?;
        Ok(Schedule {
            counts,
            family: "explicit".to_string(),
            clamped: false,
        })
    }

    fn from_floored(raw: impl IntoIterator<Item = usize>, family: &str) -> Self {
        let mut clamped = false;
        let counts = raw
            .into_iter()
            .map(|c| {
                if c == 0 {
                    clamped = true;
                    1
                } else {
                    c
                }
            })
            .collect();
        Schedule {
            counts,
            family: family.to_string(),
            clamped,
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    /// True if flooring produced a zero that was raised to one.
    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub fn horizon(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, t: usize) -> Option<usize> {
        self.counts.get(t).copied()
    }

    pub fn max_count(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Sum of all scheduled counts.
    pub fn total_selected(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Non-decreasing with at least one strict increase.
    pub fn is_increasing(&self) -> bool {
        let mut strict = false;
        for w in self.counts.windows(2) {
            if w[1] < w[0] {
                return false;
            }
            strict |= w[1] > w[0];
        }
        strict
    }

    /// The first `horizon` entries as a schedule of their own.
    pub fn prefix(&self, horizon: usize) -> Schedule {
        Schedule {
            counts: self.counts[..horizon.min(self.counts.len())].to_vec(),
            family: self.family.clone(),
            clamped: self.clamped,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

/// Floors a non-negative real that should be integral when exact arithmetic
/// says so. Products like `10 * 1.1^2` land a few ulps below the integer.
fn floor_count(x: f64) -> usize {
    let nudged = x + 1e-9 * x.abs().max(1.0);
    if nudged <= 0.0 {
        0
    } else {
        nudged.floor() as usize
    }
}

/// Sum of `n0 (1+u)^k` for `k < horizon`, before flooring.
pub fn exponential_budget(n0: usize, u: f64, horizon: usize) -> f64 {
    let growth = 1.0 + u;
    (0..horizon).map(|k| n0 as f64 * growth.powi(k as i32)).sum()
}

pub fn materialize(spec: &PolicySpec, horizon: usize) -> Result<Schedule, PolicyError> {
    if horizon == 0 {
        return Err(PolicyError::ZeroHorizon);
    }
    spec.validate()?;
    let tag = spec.family_name();
    let schedule = match spec {
        PolicySpec::Constant { n0 } => Schedule::from_floored(vec![*n0; horizon], tag),
        PolicySpec::Polynomial { n0, alpha } => Schedule::from_floored(
            (0..horizon).map(|t| floor_count(*n0 as f64 * ((1 + t) as f64).powf(*alpha))),
            tag,
        ),
        PolicySpec::Exponential { n0, u } => Schedule::from_floored(
            (0..horizon).map(|t| floor_count(*n0 as f64 * (1.0 + u).powi(t as i32))),
            tag,
        ),
        PolicySpec::Explicit(counts) => {
            if counts.len() != horizon {
                return Err(PolicyError::ExplicitLength {
                    len: counts.len(),
                    horizon,
                });
            }
            Schedule::from_counts(counts.clone())?
        }
        PolicySpec::BatchConstant { n, batch } => {
            batch_schedule((0..horizon).map(|_| *n), *batch, tag)
        }
        PolicySpec::BatchLinear { n, batch } => {
            batch_schedule((0..horizon).map(|t| n * (t + 1) as f64), *batch, tag)
        }
        PolicySpec::BatchExponential { n, u, batch } => batch_schedule(
            (0..horizon).map(|t| n * (1.0 + u).powi(t as i32)),
            *batch,
            tag,
        ),
        PolicySpec::MatchedConstant { n0, u } => budget_matched_constant(*n0, *u, horizon)?,
        PolicySpec::MatchedLinear {
            n0,
            u,
            normalization,
        } => budget_matched_linear(*n0, *u, horizon, *normalization)?,
    };
    Ok(schedule)
}

// The coefficient is clamped before multiplying, so a clamped entry is one
// full batch rather than a single sample.
fn batch_schedule(coefficients: impl Iterator<Item = f64>, batch: usize, tag: &str) -> Schedule {
    let mut s = Schedule::from_floored(coefficients.map(floor_count), tag);
    for c in &mut s.counts {
        *c *= batch;
    }
    s
}

/// Constant schedule whose per-iteration count is the floored mean of the
/// exponential schedule `n0 (1+u)^k` over the horizon.
pub fn budget_matched_constant(n0: usize, u: f64, horizon: usize) -> Result<Schedule, PolicyError> {
    if horizon == 0 {
        return Err(PolicyError::ZeroHorizon);
    }
    PolicySpec::MatchedConstant { n0, u }.validate()?;
    let mean = exponential_budget(n0, u, horizon) / horizon as f64;
    Ok(Schedule::from_floored(
        vec![floor_count(mean); horizon],
        "matched_constant",
    ))
}

/// Linear schedule `floor(2(t+1)/D * S)` with `S` the exponential budget and
/// `D` chosen by `normalization`.
pub fn budget_matched_linear(
    n0: usize,
    u: f64,
    horizon: usize,
    normalization: LinearNormalization,
) -> Result<Schedule, PolicyError> {
    if horizon == 0 {
        return Err(PolicyError::ZeroHorizon);
    }
    if normalization == LinearNormalization::Verbatim && horizon < 2 {
        return Err(PolicyError::VerbatimHorizon(horizon));
    }
    PolicySpec::MatchedLinear {
        n0,
        u,
        normalization,
    }
    .validate()?;
    let total = exponential_budget(n0, u, horizon);
    let t = horizon as f64;
    let denominator = match normalization {
        LinearNormalization::Verbatim => t * (t - 1.0),
        LinearNormalization::Exact => t * (t + 1.0),
    };
    Ok(Schedule::from_floored(
        linear_weights(horizon, denominator).map(|w| floor_count(w * total)),
        "matched_linear",
    ))
}

fn linear_weights(horizon: usize, denominator: f64) -> impl Iterator<Item = f64> {
    (0..horizon).map(move |t| 2.0 * (t + 1) as f64 / denominator)
}

/// Pre-floor entries of the budget-matched linear scheme.
pub fn budget_matched_linear_raw(
    n0: usize,
    u: f64,
    horizon: usize,
    normalization: LinearNormalization,
) -> Vec<f64> {
    let total = exponential_budget(n0, u, horizon);
    let t = horizon as f64;
    let denominator = match normalization {
        LinearNormalization::Verbatim => t * (t - 1.0),
        LinearNormalization::Exact => t * (t + 1.0),
    };
    linear_weights(horizon, denominator).map(|w| w * total).collect()
}
