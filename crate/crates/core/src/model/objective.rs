//! Noise-prediction objective and its gradients.

use ndarray::{Array2, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{
    denoiser_backward, denoiser_forward, encoder_backward, encoder_forward, point_features,
};
use super::{
    context, denoise, encode_points, shape_err, GradientSet, ModelError, ModelParams,
    ShapeEmbedding, EMBED_DIM,
};
use crate::diffusion::{estimate_x0, forward_sample, NoiseSchedule};
use crate::patchgen::AugmentedSample;
use crate::rng::{self, stream};
use crate::Real;

/// Conditioning cloud and the displacement that repairs it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple<T> {
    pub anomalous: Array2<T>,
    pub displacement: Array2<T>,
}

impl<T: Real> TrainingTuple<T> {
    pub fn new(anomalous: Array2<T>, displacement: Array2<T>) -> Result<Self, ModelError> {
        if anomalous.nrows() == 0 {
            return Err(ModelError::EmptyCloud);
        }
        if anomalous.ncols() != 3 || anomalous.dim() != displacement.dim() {
            return Err(shape_err(
                "training tuple",
                &[anomalous.nrows(), 3],
                displacement.shape(),
            ));
        }
        Ok(Self {
            anomalous,
            displacement,
        })
    }

    pub fn from_sample(s: &AugmentedSample<T>) -> Self {
        let n = s.gt_displacement.len();
        let displacement = Array2::from_shape_fn((n, 3), |(i, k)| s.gt_displacement[i].axis(k));
        Self {
            anomalous: s.anomalous.to_array(),
            displacement,
        }
    }
}

/// A training tuple after the forward process: step, noise and noisy field.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample<T> {
    pub anchors: Array2<T>,
    pub displacement: Array2<T>,
    pub t: usize,
    pub noise: Array2<T>,
    pub delta_t: Array2<T>,
}

impl<T: Real> NoisedSample<T> {
    /// Draws `t` uniformly from `1..=T` and standard normal noise.
    pub fn draw(
        tuple: &TrainingTuple<T>,
        sched: &NoiseSchedule<T>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut r = rng::seeded(seed);
        let t = r.random_range(1..=sched.t_max());
        let noise = rng::normal_matrix(&mut r, tuple.displacement.nrows(), 3);
        Self::with_noise(tuple, t, noise, sched)
    }

    pub fn with_noise(
        tuple: &TrainingTuple<T>,
        t: usize,
        noise: Array2<T>,
        sched: &NoiseSchedule<T>,
    ) -> Result<Self, ModelError> {
        let delta_t = forward_sample(&tuple.displacement, t, &noise, sched)?;
        Ok(Self {
            anchors: tuple.anomalous.clone(),
            displacement: tuple.displacement.clone(),
            t,
            noise,
            delta_t,
        })
    }
}

/// Preconditioned denoiser input `delta_t / sqrt(1 - ab_t)`. Where the clean
/// displacement is zero this is exactly the injected noise.
pub fn scaled_input<T: Real>(delta_t: &Array2<T>, t: usize, sched: &NoiseSchedule<T>) -> Array2<T> {
    delta_t / (T::one() - sched.alpha_bar(t)).sqrt()
}

/// Signal-to-noise ratio `ab_t / (1 - ab_t)`.
pub fn snr<T: Real>(t: usize, sched: &NoiseSchedule<T>) -> T {
    let ab = sched.alpha_bar(t);
    ab / (T::one() - ab)
}

/// Maps the denoiser output `out = x + r` to a noise prediction
/// `x - sqrt(snr_t) * r`, so the learned correction `r` estimates the clean
/// displacement at every step instead of a step-dependent multiple of it.
/// A zero correction predicts `x`, the exact noise where the displacement is
/// zero.
fn noise_from_output<T: Real>(
    x: &Array2<T>,
    out: &Array2<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Array2<T> {
    let g = snr(t, sched).sqrt();
    Zip::from(x).and(out).map_collect(|&x, &o| x - g * (o - x))
}

/// Noise prediction at step `t` for a cloud with point features
/// `features` and embedding `c`.
pub fn predict_noise<T: Real>(
    features: &Array2<T>,
    delta_t: &Array2<T>,
    c: &ShapeEmbedding<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
    params: &ModelParams<T>,
) -> Result<Array2<T>, ModelError> {
    let x = scaled_input(delta_t, t, sched);
    let out = denoise(features, &x, c, sched.beta(t), params)?;
    Ok(noise_from_output(&x, &out, t, sched))
}

/// Per-step weight on the squared noise error.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossWeighting {
    /// Plain noise-prediction loss.
    #[default]
    Uniform,
    /// `min(snr_t, gamma) / snr_t`: caps the weight of near-clean steps,
    /// whose squared noise error scales with the signal-to-noise ratio.
    MinSnr { gamma: f64 },
}

impl LossWeighting {
    pub fn weight<T: Real>(&self, t: usize, sched: &NoiseSchedule<T>) -> T {
        match *self {
            Self::Uniform => T::one(),
            Self::MinSnr { gamma } => {
                let r = snr(t, sched);
                r.min(T::lit(gamma)) / r
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Self::MinSnr { gamma } if !(gamma.is_finite() && gamma > 0.0) => {
                Err(format!("min_snr gamma must be positive, got {gamma}"))
            }
            _ => Ok(()),
        }
    }
}

/// Anything that predicts the injected noise of a [`NoisedSample`].
pub trait NoisePredictor<T: Real>: Sync {
    fn predict_noise(
        &self,
        s: &NoisedSample<T>,
        sched: &NoiseSchedule<T>,
    ) -> Result<Array2<T>, ModelError>;
}

impl<T: Real> NoisePredictor<T> for ModelParams<T> {
    fn predict_noise(
        &self,
        s: &NoisedSample<T>,
        sched: &NoiseSchedule<T>,
    ) -> Result<Array2<T>, ModelError> {
        let c = encode_points(&s.anchors, self)?;
        predict_noise(
            &point_features(&s.anchors)?,
            &s.delta_t,
            &c,
            s.t,
            sched,
            self,
        )
    }
}

/// Returns the true injected noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleNoise;

impl<T: Real> NoisePredictor<T> for OracleNoise {
    fn predict_noise(
        &self,
        s: &NoisedSample<T>,
        _: &NoiseSchedule<T>,
    ) -> Result<Array2<T>, ModelError> {
        Ok(s.noise.clone())
    }
}

/// Batch means of the two tracked quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics<T> {
    /// Mean squared noise-prediction error per coordinate.
    pub noise_loss: T,
    /// The optimized loss: `noise_loss` with the per-step weight applied.
    pub objective: T,
    /// Mean squared per-point distance between the target and
    /// `anomalous + estimate_x0(delta_t, eps_pred)`.
    pub recon_mse: T,
}

fn sample_metrics<T: Real>(
    s: &NoisedSample<T>,
    eps: &Array2<T>,
    sched: &NoiseSchedule<T>,
    weighting: LossWeighting,
) -> Result<BatchMetrics<T>, ModelError> {
    let n = T::from_count(s.noise.nrows());
    let sq: T = Zip::from(eps)
        .and(&s.noise)
        .fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
    let x0 = estimate_x0(&s.delta_t, eps, s.t, sched)?;
    let rec: T = Zip::from(&x0)
        .and(&s.displacement)
        .fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
    let noise_loss = sq / (n * T::lit(3.0));
    Ok(BatchMetrics {
        noise_loss,
        objective: weighting.weight(s.t, sched) * noise_loss,
        recon_mse: rec / n,
    })
}

fn mean_metrics<T: Real>(items: impl Iterator<Item = BatchMetrics<T>>) -> BatchMetrics<T> {
    let (mut a, mut o, mut b, mut k) = (T::zero(), T::zero(), T::zero(), 0usize);
    for m in items {
        a += m.noise_loss;
        o += m.objective;
        b += m.recon_mse;
        k += 1;
    }
    let k = T::from_count(k);
    BatchMetrics {
        noise_loss: a / k,
        objective: o / k,
        recon_mse: b / k,
    }
}

/// Metrics of any predictor; samples are evaluated in parallel and reduced in
/// index order.
pub fn batch_metrics<T: Real, P: NoisePredictor<T>>(
    batch: &[NoisedSample<T>],
    predictor: &P,
    sched: &NoiseSchedule<T>,
    weighting: LossWeighting,
) -> Result<BatchMetrics<T>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per: Vec<_> = batch
        .par_iter()
        .map(|s| {
            predictor
                .predict_noise(s, sched)
                .and_then(|eps| sample_metrics(s, &eps, sched, weighting))
        })
        .collect::<Result<_, _>>()?;
    Ok(mean_metrics(per.into_iter()))
}

/// Loss, metrics and exact gradients of the mean batch loss.
#[derive(Debug, Clone)]
pub struct BatchEvaluation<T> {
    pub metrics: BatchMetrics<T>,
    pub grads: GradientSet<T>,
}

fn sample_gradients<T: Real>(
    s: &NoisedSample<T>,
    params: &ModelParams<T>,
    sched: &NoiseSchedule<T>,
    weighting: LossWeighting,
) -> Result<(BatchMetrics<T>, GradientSet<T>), ModelError> {
    if s.anchors.dim() != s.delta_t.dim() {
        return Err(shape_err(
            "noised sample",
            s.anchors.shape(),
            s.delta_t.shape(),
        ));
    }
    let (c, enc_tape) = encoder_forward(&s.anchors, params)?;
    let ctx = context(&c, sched.beta(s.t));
    let x = scaled_input(&s.delta_t, s.t, sched);
    let (out, tape) = denoiser_forward(&point_features(&s.anchors)?, &x, &ctx, params, true);
    let eps = noise_from_output(&x, &out, s.t, sched);
    let metrics = sample_metrics(s, &eps, sched, weighting)?;

    // d eps / d out = -sqrt(snr_t)
    let k = -T::lit(2.0) * weighting.weight(s.t, sched) * snr(s.t, sched).sqrt()
        / T::from_count(eps.len());
    let dout = Zip::from(&eps)
        .and(&s.noise)
        .map_collect(|&a, &b| k * (a - b));
    let mut grads = GradientSet::zeros_like(params);
    let dctx = denoiser_backward(
        &dout,
        tape.as_ref().expect("recorded"),
        &ctx,
        params,
        grads.as_params_mut(),
    );
    let dc = dctx.slice(ndarray::s![..EMBED_DIM]).to_owned();
    encoder_backward(&dc, &enc_tape, params, grads.as_params_mut());
    Ok((metrics, grads))
}

/// Mean batch loss and its gradients for already-noised samples. Per-sample
/// work runs in parallel; the reduction is in index order, so results do
/// not depend on the thread count.
pub fn evaluate_batch<T: Real>(
    batch: &[NoisedSample<T>],
    params: &ModelParams<T>,
    sched: &NoiseSchedule<T>,
    weighting: LossWeighting,
) -> Result<BatchEvaluation<T>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per: Vec<_> = batch
        .par_iter()
        .map(|s| sample_gradients(s, params, sched, weighting))
        .collect::<Result<_, _>>()?;
    let mut grads = GradientSet::zeros_like(params);
    for (_, g) in &per {
        grads.add_assign(g);
    }
    grads.scale(T::one() / T::from_count(batch.len()));
    Ok(BatchEvaluation {
        metrics: mean_metrics(per.iter().map(|(m, _)| *m)),
        grads,
    })
}

/// Unweighted noise-prediction loss over a batch of tuples: per tuple, `t`
/// and the noise are drawn from a seed derived from `(seed, tuple index)`.
pub fn loss_and_gradients<T: Real>(
    tuples: &[TrainingTuple<T>],
    params: &ModelParams<T>,
    sched: &NoiseSchedule<T>,
    seed: u64,
) -> Result<(T, GradientSet<T>), ModelError> {
    if tuples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let base = rng::derive_seed(seed, stream::NOISE);
    let batch: Vec<_> = tuples
        .iter()
        .enumerate()
        .map(|(i, tp)| NoisedSample::draw(tp, sched, rng::derive_seed(base, i as u64)))
        .collect::<Result<_, _>>()?;
    let ev = evaluate_batch(&batch, params, sched, LossWeighting::Uniform)?;
    Ok((ev.metrics.noise_loss, ev.grads))
}
