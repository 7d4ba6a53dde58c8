//! Loss-based models and the gradient-descent update.
//!
//! [`LossModel`] is the extension point for generators other than the
//! Gaussian: it supplies sampling, the per-sample reward, a non-negative loss
//! and its gradient in the parameters. [`GaussianNll`] is the built-in
//! instance; with `eta = sigma2` one gradient step lands exactly on the
//! sample mean, so it reproduces the MLE dynamics.

use thiserror::Error;

use crate::gaussian::{self, ExpReward, GaussianError, GaussianSetting};
use crate::{Batch, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdError {
    #[error("learning rate must be finite and positive, got {0}")]
    LearningRate(f64),
    #[error("gradient step on an empty sample set")]
    EmptyBatch,
    #[error("non-finite gradient at coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },
}

/// A parametric generator with a loss, its gradient and a reward.
///
/// Implementations must be stateless apart from construction parameters so
/// one instance can be shared by concurrent runs.
pub trait LossModel: Send + Sync {
    fn param_dim(&self) -> usize;

    fn sample_dim(&self) -> usize;

    /// `l(x; theta) >= 0`.
    fn loss(&self, x: &[f64], theta: &[f64]) -> f64;

    /// Gradient of [`LossModel::loss`] with respect to `theta`.
    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64>;

    fn sample_into(&self, theta: &[f64], rng: &mut SimRng, out: &mut [f64]);

    /// Acceptance probability of a sample. Values outside `[0, 1]` are
    /// clipped by the engine.
    fn reward(&self, x: &[f64]) -> f64;

    /// Closed-form expected reward under `theta`, if one exists.
    fn expected_reward(&self, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Reference reward used for gaps. Defaults to the top of the reward range.
    fn optimal_reward(&self) -> f64 {
        1.0
    }

    /// Closed-form maximum-likelihood fit, if the model has one.
    fn mle(&self, _batch: &Batch) -> Option<Vec<f64>> {
        None
    }

    /// `theta - (eta / |D|) * sum_x grad(x, theta)`.
    ///
    /// Overriding implementations must compute the same quantity.
    fn descent_step(&self, theta: &[f64], batch: &Batch, eta: f64) -> Vec<f64> {
        generic_descent_step(self, theta, batch, eta)
    }
}

/// The summed-gradient form of a descent step, usable for any model.
pub fn generic_descent_step<M: LossModel + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &Batch,
    eta: f64,
) -> Vec<f64> {
    let mut sum = vec![0.0; theta.len()];
    for x in batch.iter() {
        for (s, g) in sum.iter_mut().zip(model.grad(x, theta)) {
            *s += g;
        }
    }
    let scale = eta / batch.len() as f64;
    theta
        .iter()
        .zip(sum)
        .map(|(t, s)| t - scale * s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdUpdater {
    eta: f64,
}

impl GdUpdater {
    pub fn new(eta: f64) -> Result<Self, GdError> {
        if eta.is_finite() && eta > 0.0 {
            Ok(GdUpdater { eta })
        } else {
            Err(GdError::LearningRate(eta))
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

pub fn gd_update(
    theta: &[f64],
    batch: &Batch,
    model: &dyn LossModel,
    updater: &GdUpdater,
) -> Result<Vec<f64>, GdError> {
    if batch.is_empty() {
        return Err(GdError::EmptyBatch);
    }
    let next = model.descent_step(theta, batch, updater.eta);
    match next.iter().position(|v| !v.is_finite()) {
        Some(coordinate) => Err(GdError::NonFiniteGradient { coordinate }),
        None => Ok(next),
    }
}

/// Negative log-likelihood of `N(theta, sigma2 I_d)` up to its constant,
/// `|x - theta|^2 / (2 sigma2)`, paired with the exponential reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianNll {
    setting: GaussianSetting,
    reward: ExpReward,
    sigma: f64,
}

impl GaussianNll {
    pub fn new(setting: GaussianSetting) -> Self {
        GaussianNll {
            setting,
            reward: setting.reward(),
            sigma: setting.sigma2().sqrt(),
        }
    }

    pub fn setting(&self) -> &GaussianSetting {
        &self.setting
    }
}

pub fn gaussian_nll(sigma2: f64, kappa2: f64, dim: usize) -> Result<GaussianNll, GaussianError> {
    Ok(GaussianNll::new(GaussianSetting::new(dim, sigma2, kappa2)?))
}

impl LossModel for GaussianNll {
    fn param_dim(&self) -> usize {
        self.setting.dim()
    }

    fn sample_dim(&self) -> usize {
        self.setting.dim()
    }

    fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
        d2 / (2.0 * self.setting.sigma2())
    }

    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let s2 = self.setting.sigma2();
        theta.iter().zip(x).map(|(t, v)| (t - v) / s2).collect()
    }

    fn sample_into(&self, theta: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        gaussian::draw_isotropic(theta, self.sigma, rng, out);
    }

    fn reward(&self, x: &[f64]) -> f64 {
        self.reward.value(x)
    }

    fn expected_reward(&self, theta: &[f64]) -> Option<f64> {
        Some(self.setting.expected_reward(theta))
    }

    fn optimal_reward(&self) -> f64 {
        self.setting.optimal_reward()
    }

    fn mle(&self, batch: &Batch) -> Option<Vec<f64>> {
        gaussian::mle_update(batch).ok()
    }

    // The mean gradient is (theta - mean) / sigma2, so the step is the convex
    // combination (1 - w) theta + w mean with w = eta / sigma2. At w = 1 this
    // is the batch mean to the last bit.
    fn descent_step(&self, theta: &[f64], batch: &Batch, eta: f64) -> Vec<f64> {
        let Some(mean) = batch.mean() else {
            return theta.to_vec();
        };
        let w = eta / self.setting.sigma2();
        theta
            .iter()
            .zip(mean)
            .map(|(t, m)| (1.0 - w) * t + w * m)
            .collect()
    }
}

/// Largest coordinate-wise gap between `grad` and a central finite
/// difference of `loss` with step `h`.
pub fn check_gradient(model: &dyn LossModel, theta: &[f64], x: &[f64], h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = model.grad(x, theta);
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = model.loss(x, &probe);
        probe[i] = theta[i] - h;
        let down = model.loss(x, &probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - analytic[i]).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn nll(sigma2: f64, dim: usize) -> GaussianNll {
        gaussian_nll(sigma2, 2.0, dim).unwrap()
    }

    fn scalar_batch(xs: &[f64]) -> Batch {
        Batch::from_rows(&xs.iter().map(|&x| [x]).collect::<Vec<_>>()).unwrap()
    }

    /// `sum_i cosh(x_i - theta_i) - 1`: smooth, non-negative, non-quadratic.
    struct CoshLoss;

    impl LossModel for CoshLoss {
        fn param_dim(&self) -> usize {
            2
        }
        fn sample_dim(&self) -> usize {
            2
        }
        fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
            x.iter().zip(theta).map(|(a, b)| (a - b).cosh() - 1.0).sum()
        }
        fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
            x.iter().zip(theta).map(|(a, b)| -(a - b).sinh()).collect()
        }
        fn sample_into(&self, theta: &[f64], rng: &mut SimRng, out: &mut [f64]) {
            for (o, t) in out.iter_mut().zip(theta) {
                *o = t + rng.random::<f64>() - 0.5;
            }
        }
        fn reward(&self, _x: &[f64]) -> f64 {
            1.0
        }
    }

    /// `|A (theta - x)|^2 / 2` for a fixed 3x3 matrix.
    struct Quadratic3;

    const A: [[f64; 3]; 3] = [[2.0, 0.5, 0.0], [0.0, 1.0, -0.3], [0.7, 0.0, 1.5]];

    impl Quadratic3 {
        fn residual(x: &[f64], theta: &[f64]) -> [f64; 3] {
            let mut r = [0.0; 3];
            for (i, row) in A.iter().enumerate() {
                r[i] = (0..3).map(|j| row[j] * (theta[j] - x[j])).sum();
            }
            r
        }
    }

    impl LossModel for Quadratic3 {
        fn param_dim(&self) -> usize {
            3
        }
        fn sample_dim(&self) -> usize {
            3
        }
        fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
            0.5 * Self::residual(x, theta).iter().map(|r| r * r).sum::<f64>()
        }
        fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
            let r = Self::residual(x, theta);
            (0..3).map(|j| (0..3).map(|i| A[i][j] * r[i]).sum()).collect()
        }
        fn sample_into(&self, theta: &[f64], _rng: &mut SimRng, out: &mut [f64]) {
            out.copy_from_slice(theta);
        }
        fn reward(&self, _x: &[f64]) -> f64 {
            1.0
        }
    }

    #[test]
    fn gd_update_examples() {
        let model = nll(1.0, 1);
        let d = scalar_batch(&[2.0, 4.0]);
        let full = GdUpdater::new(1.0).unwrap();
        let half = GdUpdater::new(0.5).unwrap();
        assert_eq!(gd_update(&[0.0], &d, &model, &full).unwrap(), vec![3.0]);
        assert_eq!(gd_update(&[0.0], &d, &model, &half).unwrap(), vec![1.5]);
        assert_eq!(
            gd_update(&[0.0], &Batch::new(1), &model, &full),
            Err(GdError::EmptyBatch)
        );
        assert!(GdUpdater::new(0.0).is_err());
        assert!(GdUpdater::new(f64::NAN).is_err());
    }

    #[test]
    fn non_finite_step_is_reported() {
        let model = nll(1.0, 1);
        let d = scalar_batch(&[f64::MAX, f64::MAX]);
        let upd = GdUpdater::new(1.0).unwrap();
        assert_eq!(
            gd_update(&[0.0], &d, &model, &upd),
            Err(GdError::NonFiniteGradient { coordinate: 0 })
        );
    }

    #[test]
    fn nll_examples() {
        let m = nll(1.0, 1);
        assert_eq!(m.loss(&[0.7], &[0.7]), 0.0);
        assert_eq!(m.grad(&[0.0], &[1.0]), vec![1.0]);
        assert_eq!(nll(2.0, 1).loss(&[3.0], &[1.0]), 1.0);
    }

    #[test]
    fn unit_step_is_exactly_the_mle() {
        let model = nll(1.7, 2);
        let mut rng = SimRng::seed_from_u64(5);
        let upd = GdUpdater::new(1.7).unwrap();
        for _ in 0..200 {
            let theta = [rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 1e3];
            let mut batch = Batch::new(2);
            let mut x = [0.0; 2];
            for _ in 0..rng.random_range(1..40) {
                model.sample_into(&theta, &mut rng, &mut x);
                batch.push(&x);
            }
            let gd = gd_update(&theta, &batch, &model, &upd).unwrap();
            assert_eq!(gd, gaussian::mle_update(&batch).unwrap());
        }
    }

    #[test]
    fn closed_form_step_matches_summed_gradients() {
        let model = nll(0.8, 3);
        let mut rng = SimRng::seed_from_u64(9);
        for eta in [0.1, 0.8, 1.3] {
            let theta = [0.3, -1.2, 2.0];
            let mut batch = Batch::new(3);
            let mut x = [0.0; 3];
            for _ in 0..25 {
                model.sample_into(&theta, &mut rng, &mut x);
                batch.push(&x);
            }
            let fast = model.descent_step(&theta, &batch, eta);
            let slow = generic_descent_step(&model, &theta, &batch, eta);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn gradient_check_examples() {
        let m = nll(1.0, 1);
        assert!(check_gradient(&m, &[0.3], &[1.1], 1e-5) < 1e-6);
        assert!(check_gradient(&m, &[0.3], &[1.1], 1e-2) < 1e-4);
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            assert!(check_gradient(&Quadratic3, &theta, &x, 1e-5) < 1e-6);
        }
    }

    #[test]
    fn gradient_check_error_is_second_order() {
        let theta = [0.4, -0.9];
        let x = [1.3, 0.2];
        let coarse = check_gradient(&CoshLoss, &theta, &x, 1e-2);
        let fine = check_gradient(&CoshLoss, &theta, &x, 5e-3);
        assert!(coarse > 0.0);
        assert!(coarse / fine >= 3.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn default_step_on_generic_model() {
        let batch = Batch::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let upd = GdUpdater::new(0.5).unwrap();
        let next = gd_update(&[1.0, 0.0], &batch, &CoshLoss, &upd).unwrap();
        assert_eq!(next, vec![1.0, 0.0]);
        assert_eq!(CoshLoss.optimal_reward(), 1.0);
        assert!(CoshLoss.mle(&batch).is_none());
    }

    proptest! {
        #[test]
        fn step_length_bounded_by_gradient_norms(
            theta in proptest::collection::vec(-3.0f64..3.0, 2),
            xs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 1..20),
            eta in 0.01f64..2.0,
        ) {
            let batch = Batch::from_rows(&xs).unwrap();
            let upd = GdUpdater::new(eta).unwrap();
            for model in [&CoshLoss as &dyn LossModel, &nll(0.7, 2)] {
                let next = gd_update(&theta, &batch, model, &upd).unwrap();
                let moved = gaussian::norm2(&next.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt();
                let bound: f64 = eta / xs.len() as f64
                    * batch.iter().map(|x| gaussian::norm2(&model.grad(x, &theta)).sqrt()).sum::<f64>();
                prop_assert!(moved <= bound * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn nll_is_non_negative(x in proptest::collection::vec(-1e3f64..1e3, 3), t in proptest::collection::vec(-1e3f64..1e3, 3)) {
            prop_assert!(nll(0.5, 3).loss(&x, &t) >= 0.0);
        }
    }
}
