//! Closed forms for the Gaussian generator under MLE updates.
//!
//! With `rho = sigma2 / kappa2`, one filtered MLE step maps `theta` to
//! `N(theta / (1+rho), sigma2 / (n_t (1+rho)) I)`. Unrolling gives the exact
//! law of `theta^(T)`:
//!
//! ```text
//! mu_T      = theta0 / (1+rho)^T
//! sigma_T^2 = sigma2 * sum_t 1 / (n_t (1+rho)^(2(T-t)-1))
//! ```
//!
//! and the expected reward of the final model is
//! `(kappa2 / (sigma2 + kappa2 + sigma_T^2))^(d/2) exp(-|mu_T|^2 / (2 (sigma2 + kappa2 + sigma_T^2)))`.
//!
//! For a fixed budget `C = sum n_t`, Cauchy-Schwarz makes `sigma_T^2` smallest
//! when `n_t` is proportional to `(1+rho)^t`. The proof writes the optimum as
//! `(1+rho)^(t-T)`; for a fixed horizon that is the same proportionality.

use thiserror::Error;

use crate::engine::CostModel;
use crate::gaussian::{norm2, GaussianSetting};
use crate::policy::{PolicyError, Schedule};

pub const DEFAULT_T_STAR_CAP: usize = 200;
pub const BRUTE_FORCE_MAX_BUDGET: usize = 60;
pub const BRUTE_FORCE_MAX_HORIZON: usize = 4;
pub const GAUSS_HERMITE_NODES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("schedule must not be empty")]
    EmptySchedule,
    #[error("theta0 has dimension {got}, setting has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("budget below one sample per iteration (C = {budget}, T = {horizon})")]
    BudgetBelowHorizon { budget: usize, horizon: usize },
    #[error("brute force limited to C <= {BRUTE_FORCE_MAX_BUDGET} and T <= {BRUTE_FORCE_MAX_HORIZON}, got C = {budget}, T = {horizon}")]
    TooLarge { budget: usize, horizon: usize },
    #[error("quadrature mode supports d <= 2, got d = {0}")]
    QuadratureDimension(usize),
    #[error("expected draw count is infinite at iteration {0} (sigma_t^2 >= sigma2 + kappa2)")]
    UnboundedDraws(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Exact law `N(mu, sigma2_t I_d)` of the parameter after `horizon` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLaw {
    pub mu: Vec<f64>,
    pub sigma2_t: f64,
    pub horizon: usize,
}

impl MarginalLaw {
    /// The point mass at `theta0` before any update.
    pub fn initial(theta0: &[f64]) -> Self {
        MarginalLaw {
            mu: theta0.to_vec(),
            sigma2_t: 0.0,
            horizon: 0,
        }
    }

    /// One more update with `selected` samples:
    /// `sigma_{T+1}^2 = sigma_T^2 / (1+rho)^2 + sigma2 / (n_T (1+rho))`.
    pub fn advance(&self, selected: usize, setting: &GaussianSetting) -> Self {
        let shrink = 1.0 + setting.rho();
        MarginalLaw {
            mu: self.mu.iter().map(|m| m / shrink).collect(),
            sigma2_t: self.sigma2_t / (shrink * shrink)
                + setting.sigma2() / (selected as f64 * shrink),
            horizon: self.horizon + 1,
        }
    }
}

fn check_theta0(theta0: &[f64], setting: &GaussianSetting) -> Result<(), AnalyticError> {
    if theta0.len() != setting.dim() {
        return Err(AnalyticError::Dimension {
            expected: setting.dim(),
            got: theta0.len(),
        });
    }
    Ok(())
}

/// `sigma_T^2` for `counts`, evaluated as the direct sum.
pub fn final_variance(counts: &[usize], setting: &GaussianSetting) -> f64 {
    let shrink = 1.0 + setting.rho();
    let horizon = counts.len() as i32;
    setting.sigma2()
        * counts
            .iter()
            .enumerate()
            .map(|(t, &n)| 1.0 / (n as f64 * shrink.powi(2 * (horizon - t as i32) - 1)))
            .sum::<f64>()
}

pub fn marginal(
    theta0: &[f64],
    schedule: &Schedule,
    setting: &GaussianSetting,
) -> Result<MarginalLaw, AnalyticError> {
    if schedule.horizon() == 0 {
        return Err(AnalyticError::EmptySchedule);
    }
    check_theta0(theta0, setting)?;
    let horizon = schedule.horizon();
    let contraction = (1.0 + setting.rho()).powi(horizon as i32);
    Ok(MarginalLaw {
        mu: theta0.iter().map(|v| v / contraction).collect(),
        sigma2_t: final_variance(schedule.counts(), setting),
        horizon,
    })
}

/// `E[r(theta^(T))]` for `theta^(T) ~ law`.
pub fn expected_final_reward(law: &MarginalLaw, setting: &GaussianSetting) -> f64 {
    let spread = setting.sigma2() + setting.kappa2() + law.sigma2_t;
    (setting.kappa2() / spread).powf(0.5 * setting.dim() as f64)
        * (-norm2(&law.mu) / (2.0 * spread)).exp()
}

pub fn expected_gap(law: &MarginalLaw, setting: &GaussianSetting) -> f64 {
    setting.optimal_reward() - expected_final_reward(law, setting)
}

/// Limit of `sigma_T^2` under the constant policy `n_t = n0`:
/// `(sigma2 / n0) (1+rho) / ((1+rho)^2 - 1)`.
pub fn variance_floor(n0: usize, setting: &GaussianSetting) -> f64 {
    let shrink = 1.0 + setting.rho();
    setting.sigma2() / n0 as f64 * shrink / (shrink * shrink - 1.0)
}

/// Gap the constant policy `n0` approaches as `T` grows.
pub fn floor_gap(n0: usize, setting: &GaussianSetting) -> f64 {
    expected_gap(
        &MarginalLaw {
            mu: vec![0.0; setting.dim()],
            sigma2_t: variance_floor(n0, setting),
            horizon: usize::MAX,
        },
        setting,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalAllocation {
    /// Real-valued optimum `C (1+rho)^t / sum_k (1+rho)^k`.
    pub continuous: Vec<f64>,
    pub schedule: Schedule,
    pub sigma2_t: f64,
    /// Whether `|theta0| <= (1+rho)^T (d (sigma2 + kappa2))^(1/2)`, when a
    /// `theta0` was supplied. Outside this region the allocation is not
    /// guaranteed optimal.
    pub initial_condition_holds: Option<bool>,
}

pub fn optimal_schedule(
    budget: usize,
    horizon: usize,
    setting: &GaussianSetting,
    theta0: Option<&[f64]>,
) -> Result<OptimalAllocation, AnalyticError> {
    if horizon == 0 {
        return Err(AnalyticError::EmptySchedule);
    }
    if budget < horizon {
        return Err(AnalyticError::BudgetBelowHorizon { budget, horizon });
    }
    let shrink = 1.0 + setting.rho();
    let weights: Vec<f64> = (0..horizon).map(|t| shrink.powi(t as i32)).collect();
    let total: f64 = weights.iter().sum();
    let continuous: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
    let counts = apportion(&continuous, budget);
    let schedule = Schedule::from_counts(counts)?;

    let initial_condition_holds = match theta0 {
        Some(theta0) => {
            check_theta0(theta0, setting)?;
            let bound = shrink.powi(horizon as i32)
                * (setting.dim() as f64 * (setting.sigma2() + setting.kappa2())).sqrt();
            let holds = norm2(theta0).sqrt() <= bound;
            if !holds {
                log::warn!(
                    "|theta0| exceeds {bound:.6}; the proportional allocation may not be optimal"
                );
            }
            Some(holds)
        }
        None => None,
    };
    Ok(OptimalAllocation {
        sigma2_t: final_variance(schedule.counts(), setting),
        continuous,
        schedule,
        initial_condition_holds,
    })
}

/// Largest-remainder rounding of `quotas` to integers summing to `total`.
///
/// Entries that would round to zero are raised to one, taking the sample from
/// the currently largest entry; this needs `total >= quotas.len()`.
pub fn apportion(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    // Largest remainder first; ties go to the earlier entry.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    while let Some(zero) = counts.iter().position(|&c| c == 0) {
        let largest = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("non-empty");
        if counts[largest] <= 1 {
            break;
        }
        counts[largest] -= 1;
        counts[zero] = 1;
    }
    counts
}

/// Exhaustive search over all compositions of `budget` into `horizon`
/// positive parts for the one with the smallest `sigma_T^2`. Ties keep the
/// lexicographically first composition.
pub fn brute_force_optimal(
    budget: usize,
    horizon: usize,
    setting: &GaussianSetting,
) -> Result<(Schedule, f64), AnalyticError> {
    if horizon == 0 {
        return Err(AnalyticError::EmptySchedule);
    }
    if budget > BRUTE_FORCE_MAX_BUDGET || horizon > BRUTE_FORCE_MAX_HORIZON {
        return Err(AnalyticError::TooLarge { budget, horizon });
    }
    if budget < horizon {
        return Err(AnalyticError::BudgetBelowHorizon { budget, horizon });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut parts = Vec::with_capacity(horizon);
    search(budget, horizon, setting, &mut parts, &mut best);
    let (counts, value) = best.expect("at least one composition exists");
    Ok((Schedule::from_counts(counts)?, value))
}

fn search(
    remaining: usize,
    slots: usize,
    setting: &GaussianSetting,
    parts: &mut Vec<usize>,
    best: &mut Option<(Vec<usize>, f64)>,
) {
    if slots == 1 {
        parts.push(remaining);
        let value = final_variance(parts, setting);
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            *best = Some((parts.clone(), value));
        }
        parts.pop();
        return;
    }
    for first in 1..=remaining - (slots - 1) {
        parts.push(first);
        search(remaining - first, slots - 1, setting, parts, best);
        parts.pop();
    }
}

/// How `E[N_t]` is obtained from the marginal law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DrawExpectation {
    /// `n_t / E[r(theta^(t))]`, a ratio of expectations standing in for
    /// `n_t E[1 / r(theta^(t))]`.
    #[default]
    RatioOfExpectations,
    /// `n_t E[1 / r(theta^(t))]` by tensor Gauss-Hermite quadrature; `d <= 2`.
    GaussHermite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPoint {
    pub horizon: usize,
    pub selected: usize,
    pub mu_norm2: f64,
    pub sigma2_t: f64,
    pub expected_reward: f64,
    pub gap: f64,
    /// Expected draws spent at iteration `horizon - 1`.
    pub expected_drawn: f64,
    pub expected_cum_cost: f64,
}

/// Analytic curves for every prefix `T = 1..=len` of one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub points: Vec<EvaluationPoint>,
}

impl PolicyEvaluation {
    pub fn at(&self, horizon: usize) -> Option<&EvaluationPoint> {
        horizon
            .checked_sub(1)
            .and_then(|i| self.points.get(i))
    }
}

pub fn cost_curve(
    schedule: &Schedule,
    theta0: &[f64],
    setting: &GaussianSetting,
    cost: &CostModel,
) -> Result<PolicyEvaluation, AnalyticError> {
    cost_curve_with(
        schedule,
        theta0,
        setting,
        cost,
        DrawExpectation::RatioOfExpectations,
    )
}

pub fn cost_curve_with(
    schedule: &Schedule,
    theta0: &[f64],
    setting: &GaussianSetting,
    cost: &CostModel,
    draws: DrawExpectation,
) -> Result<PolicyEvaluation, AnalyticError> {
    if schedule.horizon() == 0 {
        return Err(AnalyticError::EmptySchedule);
    }
    check_theta0(theta0, setting)?;
    if draws == DrawExpectation::GaussHermite && setting.dim() > 2 {
        return Err(AnalyticError::QuadratureDimension(setting.dim()));
    }
    let rule = match draws {
        DrawExpectation::GaussHermite => Some(gauss_hermite(GAUSS_HERMITE_NODES)),
        DrawExpectation::RatioOfExpectations => None,
    };
    let optimal = setting.optimal_reward();
    let mut law = MarginalLaw::initial(theta0);
    let mut cum_cost = 0.0;
    let mut points = Vec::with_capacity(schedule.horizon());
    for (t, &selected) in schedule.counts().iter().enumerate() {
        let inverse_reward = match &rule {
            None => 1.0 / expected_final_reward(&law, setting),
            Some(rule) => {
                if law.sigma2_t >= setting.sigma2() + setting.kappa2() {
                    return Err(AnalyticError::UnboundedDraws(t));
                }
                let (mu, spread) = (law.mu.clone(), law.sigma2_t.sqrt());
                rule.expect(&mu, spread, |theta| 1.0 / setting.expected_reward(theta))
            }
        };
        let expected_drawn = selected as f64 * inverse_reward;
        cum_cost += cost.iteration_cost(expected_drawn, selected as f64);
        law = law.advance(selected, setting);
        let reward = expected_final_reward(&law, setting);
        points.push(EvaluationPoint {
            horizon: t + 1,
            selected,
            mu_norm2: norm2(&law.mu),
            sigma2_t: law.sigma2_t,
            expected_reward: reward,
            gap: optimal - reward,
            expected_drawn,
            expected_cum_cost: cum_cost,
        });
    }
    Ok(PolicyEvaluation { points })
}

/// Smallest evaluated `T <= DEFAULT_T_STAR_CAP` with gap at most `eps`.
pub fn t_star(eval: &PolicyEvaluation, eps: f64) -> Option<usize> {
    t_star_capped(eval, eps, DEFAULT_T_STAR_CAP)
}

pub fn t_star_capped(eval: &PolicyEvaluation, eps: f64, cap: usize) -> Option<usize> {
    assert!(eps > 0.0, "eps must be positive");
    eval.points
        .iter()
        .take_while(|p| p.horizon <= cap)
        .find(|p| p.gap <= eps)
        .map(|p| p.horizon)
}

/// Expected cumulative cost at `T*`, the cheapest way to reach gap `eps`.
pub fn cost_to_reach(eval: &PolicyEvaluation, eps: f64) -> Option<f64> {
    t_star(eval, eps).and_then(|t| eval.at(t).map(|p| p.expected_cum_cost))
}

/// Least-squares line through `(T, ln gap)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl RateFit {
    /// Per-iteration contraction factor of the gap, `exp(slope)`.
    pub fn rate(&self) -> f64 {
        self.slope.exp()
    }
}

/// Fits `ln gap` against `T` over the inclusive horizon range. `None` when
/// fewer than two points are available or a gap is not positive.
pub fn fit_log_gap(eval: &PolicyEvaluation, first: usize, last: usize) -> Option<RateFit> {
    let pts: Vec<(f64, f64)> = eval
        .points
        .iter()
        .filter(|p| (first..=last).contains(&p.horizon))
        .map(|p| (p.horizon as f64, p.gap))
        .collect();
    if pts.len() < 2 || pts.iter().any(|&(_, g)| !(g > 0.0)) {
        return None;
    }
    let n = pts.len() as f64;
    let ys: Vec<f64> = pts.iter().map(|&(_, g)| g.ln()).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&(x, _), &y) in pts.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Some(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Gauss-Hermite nodes and weights for `int exp(-x^2) f(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// `E[f(theta)]` for `theta ~ N(mu, spread^2 I)`, `mu.len() <= 2`.
    pub fn expect(&self, mu: &[f64], spread: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * spread;
        let norm = std::f64::consts::PI.sqrt();
        match mu.len() {
            1 => {
                self.nodes
                    .iter()
                    .zip(&self.weights)
                    .map(|(x, w)| w * f(&[mu[0] + scale * x]))
                    .sum::<f64>()
                    / norm
            }
            2 => {
                let mut sum = 0.0;
                for (xi, wi) in self.nodes.iter().zip(&self.weights) {
                    for (xj, wj) in self.nodes.iter().zip(&self.weights) {
                        sum += wi * wj * f(&[mu[0] + scale * xi, mu[1] + scale * xj]);
                    }
                }
                sum / (norm * norm)
            }
            d => panic!("tensor quadrature implemented for d <= 2, got {d}"),
        }
    }
}

/// Nodes by Newton iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> GaussHermite {
    const PI_M4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut derivative = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PI_M4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            derivative = (2.0 * n as f64).sqrt() * p2;
            let step = p1 / derivative;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (derivative * derivative);
        weights[n - 1 - i] = weights[i];
    }
    GaussHermite { nodes, weights }
}
