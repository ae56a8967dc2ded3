//! Self-supervised training: on-the-fly defect synthesis, noise-prediction
//! loss, Adam updates.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::diffusion::{DiffusionError, NoiseSchedule, ScheduleConfig};
use crate::geom::{self, GeomError, PointCloud};
use crate::model::{
    self, evaluate_batch, GradientSet, LossWeighting, ModelError, ModelParams, NoisedSample,
    TrainingTuple, Widths,
};
use crate::patchgen::{patch_gen, PatchGenConfig, PatchGenError};
use crate::rng::{self, derive_seed, stream};
use crate::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training pool is empty")]
    EmptyPool,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged {
        iteration: usize,
        what: &'static str,
    },
    #[error("adam state does not match the parameters: {0}")]
    ShapeMismatch(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("metrics log: {0}")]
    Log(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    PatchGen(#[from] PatchGenError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates, one flat array per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        Self::with_lengths(
            &params.slices().iter().map(|s| s.len()).collect::<Vec<_>>(),
            config,
        )
    }

    pub fn with_lengths(lengths: &[usize], config: AdamConfig) -> Self {
        let zeros = || lengths.iter().map(|&n| vec![T::zero(); n]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Bias-corrected Adam update of arbitrary flat arrays.
    pub fn update(
        &mut self,
        params: Vec<&mut [T]>,
        grads: Vec<&[T]>,
        lr: T,
    ) -> Result<(), TrainError> {
        let lens = |v: &Vec<Vec<T>>| v.iter().map(Vec::len).collect::<Vec<_>>();
        let p_lens: Vec<_> = params.iter().map(|s| s.len()).collect();
        let g_lens: Vec<_> = grads.iter().map(|s| s.len()).collect();
        if p_lens != g_lens || p_lens != lens(&self.m) {
            return Err(TrainError::ShapeMismatch(format!(
                "params {p_lens:?}, grads {g_lens:?}, state {:?}",
                lens(&self.m)
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
        let step = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = T::one() - b1.powi(step);
        let c2 = T::one() - b2.powi(step);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update of the model parameters.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<(), TrainError> {
    if grads.tensor_infos() != params.tensor_infos() {
        return Err(TrainError::ShapeMismatch(
            "gradient set laid out for other widths".into(),
        ));
    }
    state.update(params.slices_mut(), grads.slices(), lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Points per training cloud after downsampling.
    pub num_points: usize,
    pub seed: u64,
    /// Metrics are logged every this many iterations and at the last one.
    pub log_every: usize,
    pub widths: Widths,
    pub schedule: ScheduleConfig,
    pub loss_weighting: LossWeighting,
    pub patchgen: PatchGenConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    /// Paper-scale settings.
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            iterations: 40_000,
            num_points: 2048,
            seed: 0,
            log_every: 50,
            widths: Widths::default(),
            schedule: ScheduleConfig::default(),
            loss_weighting: LossWeighting::Uniform,
            patchgen: PatchGenConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single desktop machine.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            iterations: 2000,
            num_points: 1024,
            widths: Widths::desk(),
            loss_weighting: LossWeighting::MinSnr { gamma: 0.3 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.num_points == 0 {
            return bad("num_points must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad(format!("adam parameters out of range: {a:?}"));
        }
        self.loss_weighting
            .validate()
            .map_err(TrainError::InvalidConfig)?;
        self.widths.validate()?;
        self.patchgen.validate()?;
        self.schedule.build::<f64>()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, ignoring `iterations` so a
    /// run can be extended from its checkpoint.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    /// 1-based.
    pub iteration: usize,
    pub noise_loss: f64,
    pub recon_mse: f64,
    /// Milliseconds since the start of this `train` call.
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str = "iteration\tnoise_loss\trecon_mse\twall_ms";

impl IterationMetrics {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{}",
            self.iteration, self.noise_loss, self.recon_mse, self.wall_ms
        )
    }
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    derive_seed(derive_seed(seed, stream::BATCH), iteration as u64)
}

/// Builds the noised batch of one iteration (0-based index).
pub fn make_batch<T: Real>(
    pool: &[PointCloud<T>],
    cfg: &TrainConfig,
    sched: &NoiseSchedule<T>,
    iteration: usize,
) -> Result<Vec<NoisedSample<T>>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let base = iteration_seed(cfg.seed, iteration);
    (0..cfg.batch_size)
        .into_par_iter()
        .map(|b| {
            let s = derive_seed(base, b as u64);
            let pick = rng::seeded(derive_seed(s, stream::BATCH)).random_range(0..pool.len());
            let sub = geom::downsample_random(
                &pool[pick],
                cfg.num_points,
                derive_seed(s, stream::DOWNSAMPLE),
            );
            let (normal, _) = geom::normalize_cloud(&sub)?;
            let aug = patch_gen(
                &normal,
                &cfg.patchgen.with_seed(derive_seed(s, stream::PATCHGEN)),
            )?;
            let tuple = TrainingTuple::from_sample(&aug);
            Ok(NoisedSample::draw(
                &tuple,
                sched,
                derive_seed(s, stream::NOISE),
            )?)
        })
        .collect()
}

/// One optimization step; `iteration` is 0-based.
pub fn train_iteration<T: Real>(
    pool: &[PointCloud<T>],
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule<T>,
    iteration: usize,
) -> Result<model::BatchMetrics<T>, TrainError> {
    let batch = make_batch(pool, cfg, sched, iteration)?;
    let ev = evaluate_batch(&batch, params, sched, cfg.loss_weighting)?;
    let it = iteration + 1;
    if !(ev.metrics.noise_loss.is_finite() && ev.metrics.objective.is_finite()) {
        return Err(TrainError::Diverged {
            iteration: it,
            what: "noise loss",
        });
    }
    if !ev.grads.is_finite() {
        return Err(TrainError::Diverged {
            iteration: it,
            what: "gradient",
        });
    }
    adam_step(params, &ev.grads, adam, T::lit(cfg.learning_rate))?;
    if !params.is_finite() {
        return Err(TrainError::Diverged {
            iteration: it,
            what: "parameters",
        });
    }
    Ok(ev.metrics)
}

/// Runs `cfg.iterations` iterations (or the remainder after `resume`) and
/// returns the final checkpoint together with every iteration's metrics.
///
/// Rows are written to `log` every `cfg.log_every` iterations and at the last
/// iteration.
pub fn train<T: Real>(
    pool: &[PointCloud<T>],
    cfg: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint<T>, Vec<IterationMetrics>), TrainError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let sched: NoiseSchedule<T> = cfg.schedule.build()?;
    let (mut params, mut adam, start) = match resume {
        None => {
            let p = model::init_params(cfg.seed, &cfg.widths)?;
            let a = AdamState::new(&p, cfg.adam);
            (p, a, 0)
        }
        Some(ck) => {
            if ck.config_digest != cfg.digest() {
                return Err(TrainError::Resume(
                    "checkpoint was trained with a different config".into(),
                ));
            }
            if ck.iteration > cfg.iterations {
                return Err(TrainError::Resume(format!(
                    "checkpoint is at iteration {}, beyond {}",
                    ck.iteration, cfg.iterations
                )));
            }
            let adam = ck
                .adam
                .ok_or_else(|| TrainError::Resume("checkpoint has no optimizer state".into()))?;
            (ck.params, adam, ck.iteration)
        }
    };
    if let Some(w) = log.as_deref_mut() {
        if start == 0 {
            writeln!(w, "{METRICS_HEADER}")?;
        }
    }
    let t0 = Instant::now();
    let mut history = Vec::with_capacity(cfg.iterations - start);
    for i in start..cfg.iterations {
        let m = train_iteration(pool, &mut params, &mut adam, cfg, &sched, i)?;
        let row = IterationMetrics {
            iteration: i + 1,
            noise_loss: m.noise_loss.as_f64(),
            recon_mse: m.recon_mse.as_f64(),
            wall_ms: t0.elapsed().as_millis(),
        };
        if (i + 1) % cfg.log_every == 0 || i + 1 == cfg.iterations {
            log::info!(
                "iteration {} noise_loss {:.5} recon_mse {:.5}",
                row.iteration,
                row.noise_loss,
                row.recon_mse
            );
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.to_row())?;
            }
        }
        history.push(row);
    }
    let ck = Checkpoint {
        params,
        schedule: cfg.schedule,
        num_points: cfg.num_points,
        config_digest: cfg.digest(),
        iteration: cfg.iterations,
        train_config: Some(cfg.clone()),
        adam: Some(adam),
    };
    Ok((ck, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::model::{batch_metrics, OracleNoise};

    #[test]
    fn zero_gradients_leave_params_and_decay_moments() {
        let mut st = AdamState::<f64>::with_lengths(&[2], AdamConfig::default());
        st.m[0] = vec![1.0, -2.0];
        st.v[0] = vec![4.0, 1.0];
        let mut p = vec![0.5, 0.25];
        let before = p.clone();
        st.update(vec![&mut p], vec![&[0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(st.m[0], vec![0.9, -1.8]);
        assert_eq!(st.v[0], vec![4.0 * 0.999, 0.999]);
        // non-zero moments still move parameters; with zero moments they stay put
        assert_ne!(p, before);
        let mut st = AdamState::<f64>::with_lengths(&[2], AdamConfig::default());
        let mut p = before.clone();
        st.update(vec![&mut p], vec![&[0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g in [3.0, -0.02] {
            let mut st = AdamState::<f64>::with_lengths(&[1], AdamConfig::default());
            let mut p = vec![1.0];
            st.update(vec![&mut p], vec![&[g]], 1e-3).unwrap();
            let step = p[0] - 1.0;
            assert!((step.abs() - 1e-3).abs() < 1e-8, "{step}");
            assert_eq!(step.signum(), -g.signum());
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut st = AdamState::<f64>::with_lengths(&[1], AdamConfig::default());
        let mut p = vec![1.0];
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            st.update(vec![&mut p], vec![&g], 0.05).unwrap();
        }
        assert!(p[0].abs() < 0.1, "{}", p[0]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut st = AdamState::<f64>::with_lengths(&[2], AdamConfig::default());
        let mut p = vec![0.0; 3];
        assert!(matches!(
            st.update(vec![&mut p], vec![&[0.0; 3]], 0.1),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    fn sphere(n: usize, seed: u64) -> PointCloud<f64> {
        let mut r = rng::seeded(seed);
        let pts = (0..n)
            .map(|_| {
                let p = Point3::new(
                    rng::normal(&mut r),
                    rng::normal(&mut r),
                    rng::normal(&mut r),
                );
                p * (1.0 / p.norm())
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            iterations: 4,
            num_points: 64,
            log_every: 2,
            widths: Widths {
                encoder: vec![8, 16],
                denoiser: vec![16, 8],
            },
            schedule: ScheduleConfig {
                steps: 20,
                beta_start: 1e-4,
                beta_end: 0.3,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn oracle_stub_has_zero_loss_and_zero_recon_on_unperturbed_points() {
        let cfg = tiny_cfg();
        let sched: NoiseSchedule<f64> = cfg.schedule.build().unwrap();
        let pool = vec![sphere(100, 1)];
        let batch = make_batch(&pool, &cfg, &sched, 0).unwrap();
        let m = batch_metrics(&batch, &OracleNoise, &sched, LossWeighting::Uniform).unwrap();
        assert_eq!(m.noise_loss, 0.0);
        assert!(m.recon_mse < 1e-20);
        // unperturbed points: zero target displacement, so the oracle
        // recovers exactly zero up to rounding
        for s in &batch {
            let x0 = crate::diffusion::estimate_x0(&s.delta_t, &s.noise, s.t, &sched).unwrap();
            for (row, d) in x0.rows().into_iter().zip(s.displacement.rows()) {
                if d.iter().all(|&v| v == 0.0) {
                    assert!(row.iter().all(|v| v.abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn empty_pool_rejected() {
        let cfg = tiny_cfg();
        assert!(matches!(
            train::<f64>(&[], &cfg, None, None),
            Err(TrainError::EmptyPool)
        ));
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let cfg = tiny_cfg();
        let pool = vec![sphere(100, 1), sphere(80, 2)];
        let mut log_a = Vec::new();
        let (a, ha) = train(&pool, &cfg, None, Some(&mut log_a)).unwrap();
        let (b, hb) = train(&pool, &cfg, None, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.adam, b.adam);
        let strip = |h: &[IterationMetrics]| {
            h.iter()
                .map(|m| (m.noise_loss, m.recon_mse))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&ha), strip(&hb));
        let text = String::from_utf8(log_a).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2\t") && lines[2].starts_with("4\t"));
    }

    #[test]
    fn one_iteration_gives_one_row_and_a_checkpoint() {
        let cfg = TrainConfig {
            iterations: 1,
            ..tiny_cfg()
        };
        let mut log = Vec::new();
        let (ck, h) = train(&[sphere(64, 3)], &cfg, None, Some(&mut log)).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);
        assert_eq!(ck.iteration, 1);
    }

    #[test]
    fn resume_with_no_extra_iterations_is_a_no_op() {
        let cfg = tiny_cfg();
        let pool = vec![sphere(100, 1)];
        let (ck, _) = train(&pool, &cfg, None, None).unwrap();
        let (again, h) = train(&pool, &cfg, Some(ck.clone()), None).unwrap();
        assert!(h.is_empty());
        assert_eq!(again.params, ck.params);
    }

    #[test]
    fn resume_continues_bit_identically() {
        let cfg = tiny_cfg();
        let pool = vec![sphere(100, 1)];
        let (full, _) = train(&pool, &cfg, None, None).unwrap();
        let half = TrainConfig {
            iterations: 2,
            ..cfg.clone()
        };
        let (ck, _) = train(&pool, &half, None, None).unwrap();
        let (resumed, _) = train(&pool, &cfg, Some(ck), None).unwrap();
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn resume_with_other_config_rejected() {
        let cfg = tiny_cfg();
        let pool = vec![sphere(100, 1)];
        let (ck, _) = train(&pool, &cfg, None, None).unwrap();
        let other = TrainConfig {
            learning_rate: 0.01,
            ..cfg
        };
        assert!(matches!(
            train(&pool, &other, Some(ck), None),
            Err(TrainError::Resume(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e300,
            iterations: 3,
            ..tiny_cfg()
        };
        let err = train(&[sphere(64, 3)], &cfg, None, None).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn digest_ignores_iterations_only() {
        let a = TrainConfig::desk();
        assert_eq!(
            a.digest(),
            TrainConfig {
                iterations: 7,
                ..a.clone()
            }
            .digest()
        );
        assert_ne!(
            a.digest(),
            TrainConfig {
                seed: 1,
                ..a.clone()
            }
            .digest()
        );
        assert_eq!(a.digest().len(), 64);
    }
}
