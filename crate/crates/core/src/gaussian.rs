//! Isotropic Gaussian generator with an exponential reward.
//!
//! The generator is `N(theta, sigma2 I_d)` and the reward is
//! `exp(-|x|^2 / (2 kappa2))`. Everything about this pair is available in
//! closed form: the expected reward, its maximum, and the law of a sample that
//! survives reward filtering, which is again Gaussian with the mean shrunk by
//! `1 + rho` where `rho = sigma2 / kappa2`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::Batch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("sigma2 must be finite and positive, got {0}")]
    Sigma2(f64),
    #[error("kappa2 must be finite and positive, got {0}")]
    Kappa2(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("theta must be finite")]
    NonFiniteTheta,
    #[error("theta has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("only isotropic covariances are supported; got per-coordinate variances {0:?}")]
    Anisotropic(Vec<f64>),
    #[error("cannot fit the mean of an empty sample set")]
    EmptyBatch,
}

fn check_sigma2(sigma2: f64) -> Result<(), GaussianError> {
    if sigma2.is_finite() && sigma2 > 0.0 {
        Ok(())
    } else {
        Err(GaussianError::Sigma2(sigma2))
    }
}

/// `R(x) = exp(-|x|^2 / (2 kappa2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpReward {
    kappa2: f64,
    inv_two_kappa2: f64,
}

impl ExpReward {
    pub fn new(kappa2: f64) -> Result<Self, GaussianError> {
        if !(kappa2.is_finite() && kappa2 > 0.0) {
            return Err(GaussianError::Kappa2(kappa2));
        }
        Ok(ExpReward {
            kappa2,
            inv_two_kappa2: 0.5 / kappa2,
        })
    }

    pub fn kappa2(&self) -> f64 {
        self.kappa2
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (-norm2(x) * self.inv_two_kappa2).exp()
    }
}

/// `N(theta, sigma2 I_d)` with `d = theta.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    theta: Vec<f64>,
    sigma2: f64,
    sigma: f64,
}

impl GaussianModel {
    pub fn new(theta: Vec<f64>, sigma2: f64) -> Result<Self, GaussianError> {
        check_sigma2(sigma2)?;
        if theta.is_empty() {
            return Err(GaussianError::ZeroDimension);
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFiniteTheta);
        }
        Ok(GaussianModel {
            theta,
            sigma2,
            sigma: sigma2.sqrt(),
        })
    }

    /// Accepts a diagonal covariance only when every entry is the same.
    pub fn with_variances(theta: Vec<f64>, variances: &[f64]) -> Result<Self, GaussianError> {
        if variances.len() != theta.len() {
            return Err(GaussianError::DimensionMismatch {
                expected: theta.len(),
                got: variances.len(),
            });
        }
        let first = *variances.first().ok_or(GaussianError::ZeroDimension)?;
        if variances.iter().any(|&v| v != first) {
            return Err(GaussianError::Anisotropic(variances.to_vec()));
        }
        GaussianModel::new(theta, first)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<(), GaussianError> {
        if theta.len() != self.theta.len() {
            return Err(GaussianError::DimensionMismatch {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFiniteTheta);
        }
        self.theta = theta;
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        draw_isotropic(&self.theta, self.sigma, rng, out);
    }
}

pub(crate) fn draw_isotropic<R: Rng + ?Sized>(
    theta: &[f64],
    sigma: f64,
    rng: &mut R,
    out: &mut [f64],
) {
    for (o, &m) in out.iter_mut().zip(theta) {
        let z: f64 = rng.sample(StandardNormal);
        *o = m + sigma * z;
    }
}

/// The fixed part of a Gaussian/exponential-reward problem: `sigma2`,
/// `kappa2`, dimension and the ratio `rho = sigma2 / kappa2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSetting {
    dim: usize,
    sigma2: f64,
    kappa2: f64,
    rho: f64,
}

impl GaussianSetting {
    pub fn new(dim: usize, sigma2: f64, kappa2: f64) -> Result<Self, GaussianError> {
        if dim == 0 {
            return Err(GaussianError::ZeroDimension);
        }
        check_sigma2(sigma2)?;
        ExpReward::new(kappa2)?;
        Ok(GaussianSetting {
            dim,
            sigma2,
            kappa2,
            rho: sigma2 / kappa2,
        })
    }

    pub fn for_pair(model: &GaussianModel, reward: &ExpReward) -> Self {
        GaussianSetting {
            dim: model.dim(),
            sigma2: model.sigma2(),
            kappa2: reward.kappa2(),
            rho: model.sigma2() / reward.kappa2(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn kappa2(&self) -> f64 {
        self.kappa2
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn reward(&self) -> ExpReward {
        ExpReward::new(self.kappa2).expect("validated at construction")
    }

    /// `(1 + rho)^(-d/2)`, attained at `theta = 0`.
    pub fn optimal_reward(&self) -> f64 {
        (1.0 + self.rho).powf(-0.5 * self.dim as f64)
    }

    /// `(1 + rho)^(-d/2) exp(-|theta|^2 / (2 (sigma2 + kappa2)))`.
    pub fn expected_reward(&self, theta: &[f64]) -> f64 {
        self.optimal_reward() * (-norm2(theta) / (2.0 * (self.sigma2 + self.kappa2))).exp()
    }

    /// Mean and per-coordinate variance of a sample accepted with
    /// probability `R(x)`: `(theta / (1+rho), sigma2 / (1+rho))`.
    pub fn post_selection(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let shrink = 1.0 + self.rho;
        (
            theta.iter().map(|v| v / shrink).collect(),
            self.sigma2 / shrink,
        )
    }
}

pub fn sample<R: Rng + ?Sized>(model: &GaussianModel, rng: &mut R) -> Vec<f64> {
    model.sample(rng)
}

pub fn reward(r: &ExpReward, x: &[f64]) -> f64 {
    r.value(x)
}

pub fn expected_reward(model: &GaussianModel, r: &ExpReward) -> f64 {
    GaussianSetting::for_pair(model, r).expected_reward(model.theta())
}

pub fn optimal_reward(dim: usize, sigma2: f64, kappa2: f64) -> Result<f64, GaussianError> {
    Ok(GaussianSetting::new(dim, sigma2, kappa2)?.optimal_reward())
}

/// Maximum-likelihood mean of the batch.
pub fn mle_update(batch: &Batch) -> Result<Vec<f64>, GaussianError> {
    batch.mean().ok_or(GaussianError::EmptyBatch)
}

pub fn post_selection_params(model: &GaussianModel, r: &ExpReward) -> (Vec<f64>, f64) {
    GaussianSetting::for_pair(model, r).post_selection(model.theta())
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{variance_with_se, Moments};
    use crate::SimRng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn construction_rejects_degenerate_parameters() {
        assert_eq!(
            GaussianModel::new(vec![0.0], 0.0),
            Err(GaussianError::Sigma2(0.0))
        );
        assert!(GaussianModel::new(vec![], 1.0).is_err());
        assert!(GaussianModel::new(vec![f64::NAN], 1.0).is_err());
        assert!(ExpReward::new(0.0).is_err());
        assert!(ExpReward::new(f64::INFINITY).is_err());
        assert!(matches!(
            GaussianModel::with_variances(vec![0.0, 0.0], &[1.0, 2.0]),
            Err(GaussianError::Anisotropic(_))
        ));
        assert!(GaussianModel::with_variances(vec![0.0, 0.0], &[2.0, 2.0]).is_ok());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(ExpReward::new(3.0).unwrap().value(&[0.0, 0.0]), 1.0);
        assert_relative_eq!(
            ExpReward::new(2.0).unwrap().value(&[1.0, 1.0]),
            (-0.5f64).exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(
            ExpReward::new(0.5).unwrap().value(&[1.0, 0.0]),
            (-1.0f64).exp(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn expected_and_optimal_reward_examples() {
        let r = ExpReward::new(2.0).unwrap();
        let at = |theta: Vec<f64>, r: &ExpReward| {
            expected_reward(&GaussianModel::new(theta, 1.0).unwrap(), r)
        };
        assert_relative_eq!(at(vec![0.0, 0.0], &r), 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(
            at(vec![1.0, 1.0], &r),
            (2.0 / 3.0) * (-2.0f64 / 6.0).exp(),
            max_relative = 1e-14
        );
        assert!((at(vec![1.0, 1.0], &r) - 0.47767).abs() < 5e-5);
        let r1 = ExpReward::new(1.0).unwrap();
        assert_relative_eq!(at(vec![0.0], &r1), 0.5f64.sqrt(), max_relative = 1e-14);

        assert_relative_eq!(optimal_reward(2, 1.0, 2.0).unwrap(), 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(optimal_reward(1, 1.0, 1.0).unwrap(), 0.5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(optimal_reward(4, 1.0, 1.0).unwrap(), 0.25, max_relative = 1e-14);
    }

    #[test]
    fn expected_reward_agrees_with_monte_carlo() {
        let model = GaussianModel::new(vec![1.0, 1.0], 1.0).unwrap();
        let r = ExpReward::new(2.0).unwrap();
        let mut rng = SimRng::seed_from_u64(7);
        let mc: Moments = (0..1_000_000).map(|_| r.value(&model.sample(&mut rng))).collect();
        let exact = expected_reward(&model, &r);
        assert!((mc.mean() - exact).abs() <= 3.0 * mc.std_error());
    }

    #[test]
    fn sample_moments() {
        let model = GaussianModel::new(vec![1.0, 1.0], 1.0).unwrap();
        let mut rng = SimRng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample(&model, &mut rng)).collect();
        for k in 0..2 {
            let coord: Vec<f64> = draws.iter().map(|x| x[k]).collect();
            let m: Moments = coord.iter().copied().collect();
            assert!((m.mean() - 1.0).abs() < 0.02);
            let (var, _) = variance_with_se(&coord);
            assert!((var - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn post_selection_examples() {
        let r2 = ExpReward::new(2.0).unwrap();
        let (m, v) = post_selection_params(&GaussianModel::new(vec![1.0], 1.0).unwrap(), &r2);
        assert_relative_eq!(m[0], 2.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(v, 2.0 / 3.0, max_relative = 1e-15);
        let (m, v) = post_selection_params(&GaussianModel::new(vec![0.0, 0.0], 3.0).unwrap(), &r2);
        assert_eq!(m, vec![0.0, 0.0]);
        assert_relative_eq!(v, 3.0 / 2.5, max_relative = 1e-15);
        let r1 = ExpReward::new(1.0).unwrap();
        let (m, v) = post_selection_params(&GaussianModel::new(vec![3.0], 1.0).unwrap(), &r1);
        assert_relative_eq!(m[0], 1.5, max_relative = 1e-15);
        assert_relative_eq!(v, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn mle_examples() {
        let b = Batch::from_rows(&[[1.0, 1.0], [3.0, 3.0]]).unwrap();
        assert_eq!(mle_update(&b).unwrap(), vec![2.0, 2.0]);
        let b = Batch::from_rows(&[[5.0]]).unwrap();
        assert_eq!(mle_update(&b).unwrap(), vec![5.0]);
        assert_eq!(mle_update(&Batch::new(2)), Err(GaussianError::EmptyBatch));
    }

    // Rejection sampling with acceptance probability R(x) is the selection
    // step; its output law must be the post-selection Gaussian and its
    // acceptance rate the expected reward.
    #[test]
    fn rejection_sampling_matches_closed_forms() {
        let model = GaussianModel::new(vec![1.0], 1.0).unwrap();
        let r = ExpReward::new(2.0).unwrap();
        let mut rng = SimRng::seed_from_u64(3);
        let draws = 200_000;
        let mut accepted = Vec::new();
        for _ in 0..draws {
            let x = model.sample(&mut rng);
            if rng.random::<f64>() < r.value(&x) {
                accepted.push(x[0]);
            }
        }
        let rate = accepted.len() as f64 / draws as f64;
        let exact_rate = expected_reward(&model, &r);
        assert!((rate - exact_rate).abs() <= 4.0 * (exact_rate * (1.0 - exact_rate) / draws as f64).sqrt());

        let (mean, var) = post_selection_params(&model, &r);
        let m: Moments = accepted.iter().copied().collect();
        assert!((m.mean() - mean[0]).abs() <= 4.0 * m.std_error());
        let (v, se) = variance_with_se(&accepted);
        assert!((v - var).abs() <= 4.0 * se);

        let batch = Batch::from_rows(&accepted[..10_000].iter().map(|&x| [x]).collect::<Vec<_>>()).unwrap();
        let fitted = mle_update(&batch).unwrap()[0];
        let se = (var / 10_000.0).sqrt();
        assert!((fitted - 2.0 / 3.0).abs() <= 4.0 * se);
    }

    #[test]
    fn setting_caches_rho() {
        let s = GaussianSetting::new(3, 1.5, 0.5).unwrap();
        assert_eq!(s.rho(), 3.0);
        assert!(GaussianSetting::new(0, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn expected_reward_peaks_at_origin(x in -5.0f64..5.0, y in -5.0f64..5.0, s2 in 0.1f64..4.0, k2 in 0.1f64..4.0) {
            let s = GaussianSetting::new(2, s2, k2).unwrap();
            let r = s.expected_reward(&[x, y]);
            prop_assert!(r <= s.optimal_reward());
            if x != 0.0 || y != 0.0 {
                prop_assert!(r < s.optimal_reward() || norm2(&[x, y]) < 1e-12);
            }
            prop_assert!(r > 0.0 && r <= 1.0);
        }

        #[test]
        fn expected_reward_rotation_invariant(x in -3.0f64..3.0, y in -3.0f64..3.0, angle in 0.0f64..std::f64::consts::TAU) {
            let s = GaussianSetting::new(2, 1.0, 2.0).unwrap();
            let (c, sn) = (angle.cos(), angle.sin());
            let rotated = [c * x - sn * y, sn * x + c * y];
            prop_assert!((s.expected_reward(&[x, y]) - s.expected_reward(&rotated)).abs() < 1e-14);
        }

        #[test]
        fn reward_in_unit_interval(x in proptest::collection::vec(-50.0f64..50.0, 1..5), k2 in 1e-3f64..1e3) {
            let v = ExpReward::new(k2).unwrap().value(&x);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
