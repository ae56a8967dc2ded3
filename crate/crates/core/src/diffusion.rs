//! DDPM machinery in displacement space.
//!
//! Steps are 1-based: `t = 1..=T`. `alpha_bar(0)` is defined as 1.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step {t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("sampling noise must be zero at the final step")]
    NoiseAtFinalStep,
}

/// Masking threshold: `alpha_bar(T)` must fall below this in strict mode.
pub const MASKED_ALPHA_BAR: f64 = 0.01;

/// Linear-beta schedule parameters, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Real>(&self) -> Result<NoiseSchedule<T>, DiffusionError> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }

    /// Like [`build`](Self::build) but also rejects schedules that do not
    /// fully mask the signal.
    pub fn build_strict<T: Real>(&self) -> Result<NoiseSchedule<T>, DiffusionError> {
        let s = self.build::<T>()?;
        if s.alpha_bar(s.t_max()).as_f64() >= MASKED_ALPHA_BAR {
            return Err(DiffusionError::InvalidSchedule(format!(
                "alpha_bar(T) = {} does not mask the signal (needs < {MASKED_ALPHA_BAR})",
                s.alpha_bar(s.t_max())
            )));
        }
        Ok(s)
    }
}

/// Precomputed per-step tables. `sigma_t^2 = beta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
    sigmas: Vec<T>,
}

impl<T: Real> NoiseSchedule<T> {
    /// Builds the tables from explicit `beta_1..beta_T`.
    pub fn from_betas(betas: Vec<T>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule(
                "at least one step is required".into(),
            ));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > T::zero() && b < T::one()) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "beta_{} = {b} not in (0, 1)",
                    i + 1
                )));
            }
            if i > 0 && b < betas[i - 1] {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "beta_{} decreases",
                    i + 1
                )));
            }
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = T::one();
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || !(acc > T::zero()) {
            return Err(DiffusionError::InvalidSchedule(
                "alpha_bar must decrease strictly and stay positive".into(),
            ));
        }
        let sigmas = betas.iter().map(|&b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }
}

/// `beta` interpolated linearly from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn linear_schedule<T: Real>(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>, DiffusionError> {
    if t_max == 0 {
        return Err(DiffusionError::InvalidSchedule("t_max must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..t_max)
        .map(|i| {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            T::lit(beta_start + (beta_end - beta_start) * frac)
        })
        .collect();
    let s = NoiseSchedule::from_betas(betas)?;
    if s.alpha_bar(t_max).as_f64() >= MASKED_ALPHA_BAR {
        log::warn!(
            "alpha_bar(T) = {} leaves signal unmasked",
            s.alpha_bar(t_max)
        );
    }
    Ok(s)
}

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit `alpha_bar`.
pub fn noise_with_alpha_bar<T: Real>(
    x0: &Array2<T>,
    eps: &Array2<T>,
    alpha_bar: T,
) -> Result<Array2<T>, DiffusionError> {
    same_shape(x0, eps)?;
    let a = alpha_bar.sqrt();
    let b = (T::one() - alpha_bar).sqrt();
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Forward (masking) process: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_sample<T: Real>(
    x0: &Array2<T>,
    t: usize,
    eps: &Array2<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>, DiffusionError> {
    sched.check_step(t)?;
    noise_with_alpha_bar(x0, eps, sched.alpha_bar(t))
}

/// One reverse step:
/// `d_{t-1} = (d_t - (1 - a_t) / sqrt(1 - ab_t) * eps_pred) / sqrt(a_t) + sigma_t z`.
///
/// `z = None` means zero noise; non-zero noise at `t = 1` is rejected.
pub fn posterior_step<T: Real>(
    delta_t: &Array2<T>,
    eps_pred: &Array2<T>,
    t: usize,
    z: Option<&Array2<T>>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>, DiffusionError> {
    sched.check_step(t)?;
    same_shape(delta_t, eps_pred)?;
    let alpha = sched.alpha(t);
    let coef = (T::one() - alpha) / (T::one() - sched.alpha_bar(t)).sqrt();
    let sqrt_alpha = alpha.sqrt();
    let mean = Zip::from(delta_t)
        .and(eps_pred)
        .map_collect(|&d, &e| (d - coef * e) / sqrt_alpha);
    match z {
        None => Ok(mean),
        Some(z) => {
            same_shape(delta_t, z)?;
            if t == 1 {
                if z.iter().any(|&v| v != T::zero()) {
                    return Err(DiffusionError::NoiseAtFinalStep);
                }
                return Ok(mean);
            }
            let sigma = sched.sigma(t);
            Ok(Zip::from(&mean).and(z).map_collect(|&m, &n| m + sigma * n))
        }
    }
}

/// Inverts the forward process given a noise estimate:
/// `x0 = (x_t - sqrt(1 - ab_t) eps_pred) / sqrt(ab_t)`.
pub fn estimate_x0<T: Real>(
    x_t: &Array2<T>,
    eps_pred: &Array2<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>, DiffusionError> {
    sched.check_step(t)?;
    same_shape(x_t, eps_pred)?;
    let ab = sched.alpha_bar(t);
    let s = (T::one() - ab).sqrt();
    let r = ab.sqrt();
    Ok(Zip::from(x_t)
        .and(eps_pred)
        .map_collect(|&x, &e| (x - s * e) / r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn single_step_schedule() {
        let s = linear_schedule::<f64>(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_term_product() {
        let s = NoiseSchedule::from_betas(vec![0.1f64, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.sigma(2), 0.2f64.sqrt());
    }

    #[test]
    fn default_schedule_masks_the_signal() {
        let s = ScheduleConfig::default().build_strict::<f64>().unwrap();
        assert_eq!(s.t_max(), 200);
        let mut prod = 1.0;
        for t in 1..=200 {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.sigma(t), s.beta(t).sqrt());
        }
        assert!(s.alpha_bar(200) < 0.01);
    }

    #[test]
    fn weak_schedule_fails_strict_mode() {
        let cfg = ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        assert!(cfg.build::<f64>().is_ok());
        assert!(matches!(
            cfg.build_strict::<f64>(),
            Err(DiffusionError::InvalidSchedule(_))
        ));
    }

    #[test]
    fn invalid_schedules() {
        assert!(linear_schedule::<f64>(0, 0.1, 0.2).is_err());
        assert!(linear_schedule::<f64>(10, 0.3, 0.2).is_err());
        assert!(linear_schedule::<f64>(10, 0.0, 0.2).is_err());
        assert!(linear_schedule::<f64>(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2f64, 0.1]).is_err());
    }

    #[test]
    fn zero_noise_scales_the_signal() {
        let s = linear_schedule::<f64>(10, 0.01, 0.1).unwrap();
        let x0 = array![[1.0, -2.0, 0.5]];
        let xt = forward_sample(&x0, 4, &Array2::zeros((1, 3)), &s).unwrap();
        assert_eq!(xt, x0.mapv(|v| s.alpha_bar(4).sqrt() * v));
    }

    #[test]
    fn unit_alpha_bar_is_identity() {
        let x0 = array![[1.0, -2.0, 0.5], [0.1, 0.2, 0.3]];
        let eps = array![[0.3, 0.3, 0.3], [-1.0, 2.0, 0.0]];
        assert_eq!(noise_with_alpha_bar(&x0, &eps, 1.0).unwrap(), x0);
    }

    #[test]
    fn zero_prediction_rescales_delta() {
        let s = linear_schedule::<f64>(10, 0.01, 0.1).unwrap();
        let d = array![[0.4, -0.2, 1.0]];
        let out = posterior_step(&d, &Array2::zeros((1, 3)), 5, None, &s).unwrap();
        for (o, i) in out.iter().zip(d.iter()) {
            assert_eq!(*o, i / s.alpha(5).sqrt());
        }
    }

    #[test]
    fn final_step_by_hand() {
        let s = linear_schedule::<f64>(10, 0.01, 0.1).unwrap();
        let d = array![[0.4, -0.2, 1.0]];
        let e = array![[0.5, 0.25, -1.0]];
        let out = posterior_step(&d, &e, 1, Some(&Array2::zeros((1, 3))), &s).unwrap();
        let a1 = 1.0 - 0.01;
        let coef = (1.0 - a1) / (1.0 - a1 as f64).sqrt();
        for k in 0..3 {
            let want = (d[[0, k]] - coef * e[[0, k]]) / a1.sqrt();
            assert!((out[[0, k]] - want).abs() < 1e-15);
            assert!(out[[0, k]].is_finite());
        }
        assert_eq!(
            posterior_step(&d, &e, 1, Some(&array![[0.0, 1.0, 0.0]]), &s).unwrap_err(),
            DiffusionError::NoiseAtFinalStep
        );
    }

    #[test]
    fn oracle_noise_gives_posterior_mean() {
        let s = linear_schedule::<f64>(50, 1e-4, 0.05).unwrap();
        let mut r = rng::seeded(17);
        let target = rng::normal_matrix::<f64, _>(&mut r, 16, 3).mapv(|v| 0.1 * v);
        let eps = rng::normal_matrix::<f64, _>(&mut r, 16, 3);
        for t in [1, 2, 25, 50] {
            let dt = forward_sample(&target, t, &eps, &s).unwrap();
            let out = posterior_step(&dt, &eps, t, None, &s).unwrap();
            // closed-form mean with the model noise set to the true noise
            let beta = s.beta(t);
            let ab = s.alpha_bar(t);
            for ((o, &x), &e) in out.iter().zip(dt.iter()).zip(eps.iter()) {
                let mu = (x - beta / (1.0 - ab).sqrt() * e) / (1.0 - beta).sqrt();
                assert!((o - mu).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn estimate_inverts_forward_with_true_noise() {
        let s = ScheduleConfig::default().build::<f64>().unwrap();
        let mut r = rng::seeded(5);
        let x0 = rng::normal_matrix::<f64, _>(&mut r, 32, 3);
        let eps = rng::normal_matrix::<f64, _>(&mut r, 32, 3);
        for t in 1..=200 {
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = estimate_x0(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_prediction_estimate() {
        let s = linear_schedule::<f64>(10, 0.01, 0.1).unwrap();
        let xt = array![[0.3, 0.6, -0.9]];
        let out = estimate_x0(&xt, &Array2::zeros((1, 3)), 7, &s).unwrap();
        assert_eq!(out, xt.mapv(|v| v / s.alpha_bar(7).sqrt()));
    }

    #[test]
    fn estimate_error_is_linear_in_noise_error() {
        let s = ScheduleConfig::default().build::<f64>().unwrap();
        let mut r = rng::seeded(8);
        let x0 = rng::normal_matrix::<f64, _>(&mut r, 8, 3);
        let eps = rng::normal_matrix::<f64, _>(&mut r, 8, 3);
        let t = 137;
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        let delta = 0.01;
        let back = estimate_x0(&xt, &eps.mapv(|e| e + delta), t, &s).unwrap();
        let ab = s.alpha_bar(t);
        let want = (1.0 - ab).sqrt() / ab.sqrt() * delta;
        for (a, b) in back.iter().zip(x0.iter()) {
            assert!(((b - a) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_and_step_errors() {
        let s = linear_schedule::<f64>(10, 0.01, 0.1).unwrap();
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            forward_sample(&a, 1, &b, &s),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            forward_sample(&a, 0, &a, &s),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            estimate_x0(&a, &a, 11, &s),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            posterior_step(&a, &b, 2, None, &s),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
    }
}
