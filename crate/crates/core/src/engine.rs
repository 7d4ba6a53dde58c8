//! The iterative generate / filter / update loop and its Monte Carlo driver.
//!
//! At every iteration the engine draws samples from the current model one at
//! a time and keeps each with probability equal to its reward, stopping at
//! exactly `n_t` kept samples. The number of draws this took, `N_t`, is
//! counted rather than estimated and feeds the cost
//! `C = sum_t c_g N_t + c_t n_t`.
//!
//! Runs are deterministic given their seed. Monte Carlo seeds are derived
//! from a master seed as `master ^ splitmix64(i)` for run index `i`, and
//! aggregation always walks runs in index order, so serial and parallel
//! execution give bit-identical aggregates.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::gdmodel::{gd_update, GdError, GdUpdater, LossModel};
use crate::policy::Schedule;
use crate::stats::Moments;
use crate::{Batch, SimRng};

pub const DEFAULT_DRAWS_PER_SELECTED: usize = 1000;
pub const DEFAULT_EVAL_SAMPLES: usize = 10_000;
pub const DEFAULT_DIVERGENCE_CAP: f64 = 1e6;

// Evaluation draws come from a separate ChaCha stream so they never shift the
// training stream.
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cost coefficients must be non-negative, finite and not both zero (c_g = {c_g}, c_t = {c_t})")]
    Cost { c_g: f64, c_t: f64 },
    #[error("draw cap {cap} is below the largest scheduled count {needed}")]
    DrawCap { cap: usize, needed: usize },
    #[error("theta0 has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("theta0 must be finite")]
    NonFiniteTheta,
    #[error("the configured model has no closed-form MLE; use the gradient update")]
    NoMle,
    #[error(transparent)]
    Gd(#[from] GdError),
    #[error("divergence cap must be positive, got {0}")]
    DivergenceCap(f64),
    #[error("held-out evaluation needs at least one sample")]
    EvalSamples,
    #[error("Monte Carlo needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("only {completed} of {runs} runs completed; at least 2 are needed for standard errors")]
    TooFewCompleted { completed: usize, runs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    c_g: f64,
    c_t: f64,
}

impl CostModel {
    pub fn new(c_g: f64, c_t: f64) -> Result<Self, EngineError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(c_g) && ok(c_t)) || c_g + c_t <= 0.0 {
            return Err(EngineError::Cost { c_g, c_t });
        }
        Ok(CostModel { c_g, c_t })
    }

    /// Counts only the kept samples, the convention of the Gaussian toy runs.
    pub fn selected_only() -> Self {
        CostModel { c_g: 0.0, c_t: 1.0 }
    }

    pub fn c_g(&self) -> f64 {
        self.c_g
    }

    pub fn c_t(&self) -> f64 {
        self.c_t
    }

    pub fn iteration_cost(&self, drawn: f64, selected: f64) -> f64 {
        self.c_g * drawn + self.c_t * selected
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Mle,
    Gd(GdUpdater),
}

/// Per-iteration bound on draws spent to fill one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawCap {
    /// `multiplier * n_t` draws at iteration `t`.
    PerSelected(usize),
    Fixed(usize),
}

impl Default for DrawCap {
    fn default() -> Self {
        DrawCap::PerSelected(DEFAULT_DRAWS_PER_SELECTED)
    }
}

impl DrawCap {
    fn at(&self, selected: usize) -> usize {
        match *self {
            DrawCap::PerSelected(m) => m.saturating_mul(selected),
            DrawCap::Fixed(c) => c,
        }
    }
}

#[derive(Clone)]
pub struct RunConfig {
    pub model: Arc<dyn LossModel>,
    pub theta0: Vec<f64>,
    pub schedule: Schedule,
    pub cost: CostModel,
    pub seed: u64,
    pub draw_cap: DrawCap,
    pub update: UpdateRule,
    /// Draws for the held-out reward estimate when the model has no closed form.
    pub eval_samples: usize,
    /// A run whose `|theta|` exceeds this is marked diverged.
    pub divergence_cap: f64,
}

impl RunConfig {
    pub fn new(
        model: Arc<dyn LossModel>,
        theta0: Vec<f64>,
        schedule: Schedule,
        update: UpdateRule,
    ) -> Self {
        RunConfig {
            model,
            theta0,
            schedule,
            cost: CostModel::selected_only(),
            seed: 0,
            draw_cap: DrawCap::default(),
            update,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            divergence_cap: DEFAULT_DIVERGENCE_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let expected = self.model.param_dim();
        if self.theta0.len() != expected {
            return Err(EngineError::Dimension {
                expected,
                got: self.theta0.len(),
            });
        }
        if self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFiniteTheta);
        }
        if let DrawCap::Fixed(cap) = self.draw_cap {
            if cap < self.schedule.max_count() {
                return Err(EngineError::DrawCap {
                    cap,
                    needed: self.schedule.max_count(),
                });
            }
        }
        if let DrawCap::PerSelected(0) = self.draw_cap {
            return Err(EngineError::DrawCap {
                cap: 0,
                needed: self.schedule.max_count(),
            });
        }
        if !(self.divergence_cap > 0.0) {
            return Err(EngineError::DivergenceCap(self.divergence_cap));
        }
        if self.model.expected_reward(&self.theta0).is_none() && self.eval_samples == 0 {
            return Err(EngineError::EvalSamples);
        }
        if self.update == UpdateRule::Mle {
            let mut probe = Batch::new(self.model.sample_dim());
            probe.push(&vec![0.0; self.model.sample_dim()]);
            if self.model.mle(&probe).is_none() {
                return Err(EngineError::NoMle);
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub t: usize,
    pub selected: usize,
    pub drawn: usize,
    pub theta_after: Vec<f64>,
    pub expected_reward_after: f64,
    pub gap_after: f64,
    pub cum_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    DrawCapHit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub seed: u64,
    pub status: RunStatus,
    pub records: Vec<IterationRecord>,
    pub optimal_reward: f64,
    /// Rewards that fell outside `[0, 1]` and were clipped.
    pub clipped_rewards: u64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawCapHit {
    pub drawn: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub batch: Batch,
    pub drawn: usize,
    pub clipped: u64,
}

/// Draws from `model` at `theta`, keeping each draw with probability equal to
/// its reward, until `selected` draws are kept or `cap` draws are spent.
pub fn select_batch(
    model: &dyn LossModel,
    theta: &[f64],
    selected: usize,
    cap: usize,
    rng: &mut SimRng,
) -> Result<Selection, DrawCapHit> {
    let mut batch = Batch::with_capacity(model.sample_dim(), selected);
    let mut x = vec![0.0; model.sample_dim()];
    let mut drawn = 0usize;
    let mut clipped = 0u64;
    while batch.len() < selected {
        if drawn == cap {
            return Err(DrawCapHit {
                drawn,
                accepted: batch.len(),
            });
        }
        model.sample_into(theta, rng, &mut x);
        drawn += 1;
        let mut r = model.reward(&x);
        if !(0.0..=1.0).contains(&r) {
            clipped += 1;
            r = if r > 1.0 { 1.0 } else { 0.0 };
        }
        if rng.random::<f64>() < r {
            batch.push(&x);
        }
    }
    Ok(Selection {
        batch,
        drawn,
        clipped,
    })
}

fn held_out_reward(model: &dyn LossModel, theta: &[f64], samples: usize, rng: &mut SimRng) -> f64 {
    let mut x = vec![0.0; model.sample_dim()];
    let mut sum = 0.0;
    for _ in 0..samples {
        model.sample_into(theta, rng, &mut x);
        sum += model.reward(&x).clamp(0.0, 1.0);
    }
    sum / samples as f64
}

/// Executes one run of the loop. Configuration errors are returned as `Err`;
/// divergence and draw-cap exhaustion end the run early with a flagged trace.
pub fn run(cfg: &RunConfig) -> Result<RunTrace, EngineError> {
    cfg.validate()?;
    let model = cfg.model.as_ref();
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut eval_rng = SimRng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(EVAL_STREAM);

    let optimal = model.optimal_reward();
    let mut theta = cfg.theta0.clone();
    let mut cum_cost = 0.0;
    let mut records = Vec::with_capacity(cfg.schedule.horizon());
    let mut clipped_rewards = 0;
    let mut status = RunStatus::Completed;
    let mut diagnostic = None;

    for (t, &selected) in cfg.schedule.counts().iter().enumerate() {
        let selection = match select_batch(model, &theta, selected, cfg.draw_cap.at(selected), &mut rng) {
            Ok(s) => s,
            Err(hit) => {
                status = RunStatus::DrawCapHit;
                diagnostic = Some(format!(
                    "iteration {t}: {} of {selected} samples accepted after {} draws",
                    hit.accepted, hit.drawn
                ));
                break;
            }
        };
        clipped_rewards += selection.clipped;

        let next = match cfg.update {
            UpdateRule::Mle => model.mle(&selection.batch).ok_or(EngineError::NoMle)?,
            UpdateRule::Gd(upd) => match gd_update(&theta, &selection.batch, model, &upd) {
                Ok(next) => next,
                Err(e) => {
                    status = RunStatus::Diverged;
                    diagnostic = Some(format!("iteration {t}: {e}"));
                    break;
                }
            },
        };
        let norm = crate::gaussian::norm2(&next).sqrt();
        if !(norm <= cfg.divergence_cap) {
            status = RunStatus::Diverged;
            diagnostic = Some(format!(
                "iteration {t}: |theta| = {norm} exceeds cap {}",
                cfg.divergence_cap
            ));
            break;
        }
        theta = next;

        cum_cost += cfg
            .cost
            .iteration_cost(selection.drawn as f64, selected as f64);
        let expected = model
            .expected_reward(&theta)
            .unwrap_or_else(|| held_out_reward(model, &theta, cfg.eval_samples, &mut eval_rng));
        records.push(IterationRecord {
            t,
            selected,
            drawn: selection.drawn,
            theta_after: theta.clone(),
            expected_reward_after: expected,
            gap_after: optimal - expected,
            cum_cost,
        });
    }

    Ok(RunTrace {
        seed: cfg.seed,
        status,
        records,
        optimal_reward: optimal,
        clipped_rewards,
        diagnostic,
    })
}

/// SplitMix64 finalizer applied to `index + golden gamma`.
pub fn splitmix64(index: u64) -> u64 {
    let mut z = index.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn run_seed(master: u64, index: u64) -> u64 {
    master ^ splitmix64(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// All traces of a Monte Carlo batch, indexed by run.
pub fn monte_carlo_traces(
    cfg: &RunConfig,
    runs: usize,
    execution: Execution,
) -> Result<Vec<RunTrace>, EngineError> {
    if runs < 2 {
        return Err(EngineError::TooFewRuns(runs));
    }
    cfg.validate()?;
    let one = |i: usize| run(&cfg.with_seed(run_seed(cfg.seed, i as u64)));
    match execution {
        Execution::Serial => (0..runs).map(one).collect(),
        Execution::Parallel => (0..runs).into_par_iter().map(one).collect(),
    }
}

pub fn monte_carlo(
    cfg: &RunConfig,
    runs: usize,
    execution: Execution,
) -> Result<AggregateTrace, EngineError> {
    AggregateTrace::from_traces(&monte_carlo_traces(cfg, runs, execution)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl From<&Moments> for Estimate {
    fn from(m: &Moments) -> Self {
        Estimate {
            mean: m.mean(),
            se: m.std_error(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    /// Iterations completed, `t + 1`.
    pub horizon: usize,
    pub selected: usize,
    pub drawn: Estimate,
    pub gap: Estimate,
    pub expected_reward: Estimate,
    pub cum_cost: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateTrace {
    pub rows: Vec<AggregateRow>,
    pub runs: usize,
    pub runs_completed: usize,
    pub runs_diverged: usize,
    pub runs_draw_cap_hit: usize,
    pub clipped_rewards: u64,
}

impl AggregateTrace {
    /// Averages completed runs in the order given. Diverged and capped runs
    /// are counted but excluded.
    pub fn from_traces(traces: &[RunTrace]) -> Result<Self, EngineError> {
        let completed: Vec<&RunTrace> = traces
            .iter()
            .filter(|t| t.status == RunStatus::Completed)
            .collect();
        let count = |s: RunStatus| traces.iter().filter(|t| t.status == s).count();
        if completed.len() < 2 {
            return Err(EngineError::TooFewCompleted {
                completed: completed.len(),
                runs: traces.len(),
            });
        }
        let horizon = completed[0].records.len();
        let rows = (0..horizon)
            .map(|t| {
                let mut drawn = Moments::new();
                let mut gap = Moments::new();
                let mut reward = Moments::new();
                let mut cost = Moments::new();
                for trace in &completed {
                    let r = &trace.records[t];
                    drawn.push(r.drawn as f64);
                    gap.push(r.gap_after);
                    reward.push(r.expected_reward_after);
                    cost.push(r.cum_cost);
                }
                AggregateRow {
                    horizon: t + 1,
                    selected: completed[0].records[t].selected,
                    drawn: (&drawn).into(),
                    gap: (&gap).into(),
                    expected_reward: (&reward).into(),
                    cum_cost: (&cost).into(),
                }
            })
            .collect();
        Ok(AggregateTrace {
            rows,
            runs: traces.len(),
            runs_completed: completed.len(),
            runs_diverged: count(RunStatus::Diverged),
            runs_draw_cap_hit: count(RunStatus::DrawCapHit),
            clipped_rewards: traces.iter().map(|t| t.clipped_rewards).sum(),
        })
    }
}
