//! Learnable networks.
//!
//! The encoder maps a cloud to a 256-d [`ShapeEmbedding`] (per-point MLP,
//! max-pool, linear head). The denoiser is a stack of concat-squash layers
//! applied to every point independently; each point's input is its noisy
//! displacement and its anchor position in the conditioning cloud, and the
//! layer context is the shape embedding plus the [`TimeEmbedding`]. The
//! stack output is added to the input displacement.
//!
//! Weight matrices are stored `fan_in x fan_out` and applied to row
//! vectors. Gradients come from a hand-written reverse pass over this fixed
//! graph.

mod network;
mod objective;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::rng::{self, stream};
use crate::Real;

pub use network::{denoise, encode, encode_points, point_features};
pub use objective::{
    batch_metrics, evaluate_batch, loss_and_gradients, predict_noise, scaled_input, snr,
    BatchEvaluation, BatchMetrics, LossWeighting, NoisePredictor, NoisedSample, OracleNoise,
    TrainingTuple,
};

pub const EMBED_DIM: usize = 256;
pub const TIME_DIM: usize = 3;
pub const CONTEXT_DIM: usize = EMBED_DIM + TIME_DIM;
/// Per-point conditioning features: anchor position (3) and local offset (3).
pub const POINT_FEATURE_DIM: usize = 6;
/// Displacement (3) plus the point features.
pub const DENOISER_INPUT_DIM: usize = 3 + POINT_FEATURE_DIM;
/// Neighbourhood size of the local-offset feature.
pub const LOCAL_K: usize = 16;

/// `b` of the squareplus ramp; makes it agree with softplus at zero.
pub const SQUAREPLUS_B: f64 = 4.0 * std::f64::consts::LN_2 * std::f64::consts::LN_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid widths: {0}")]
    InvalidWidths(String),
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty cloud")]
    EmptyCloud,
    #[error("invalid conditioning cloud: {0}")]
    InvalidCloud(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

fn shape_err(what: impl Into<String>, expected: &[usize], found: &[usize]) -> ModelError {
    ModelError::ShapeMismatch {
        what: what.into(),
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

/// Hidden widths of both networks. Input and output sizes are fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    /// Per-point encoder layers before pooling; the last one is the pooled width.
    pub encoder: Vec<usize>,
    /// Hidden concat-squash layer widths between the input and the 3-d output.
    pub denoiser: Vec<usize>,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            encoder: vec![128, 256, 512],
            denoiser: vec![128, 256, 512, 256, 128],
        }
    }
}

impl Widths {
    /// Narrower networks for single-machine end-to-end runs.
    pub fn desk() -> Self {
        Self {
            encoder: vec![64, 128, 256],
            denoiser: vec![128, 256, 128],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder.is_empty() {
            return Err(ModelError::InvalidWidths(
                "encoder needs at least one layer".into(),
            ));
        }
        if self.denoiser.is_empty() {
            return Err(ModelError::InvalidWidths(
                "denoiser needs at least one hidden layer".into(),
            ));
        }
        if self.encoder.iter().chain(&self.denoiser).any(|&w| w == 0) {
            return Err(ModelError::InvalidWidths("zero-width layer".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each per-point encoder layer.
    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        chain_dims(3, &self.encoder, None)
    }

    fn head_dims(&self) -> (usize, usize) {
        (*self.encoder.last().expect("validated"), EMBED_DIM)
    }

    fn denoiser_dims(&self) -> Vec<(usize, usize)> {
        chain_dims(DENOISER_INPUT_DIM, &self.denoiser, Some(3))
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let linear = |(i, o): (usize, usize)| i * o + o;
        let enc: usize = self.encoder_dims().into_iter().map(linear).sum();
        let cs: usize = self
            .denoiser_dims()
            .into_iter()
            .map(|(i, o)| linear((i, o)) + linear((CONTEXT_DIM, o)) + CONTEXT_DIM * o)
            .sum();
        enc + linear(self.head_dims()) + cs
    }
}

fn chain_dims(input: usize, hidden: &[usize], output: Option<usize>) -> Vec<(usize, usize)> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.extend(output);
    sizes.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Affine map on row vectors: `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    fn zeros((i, o): (usize, usize)) -> Self {
        Self {
            weight: Array2::zeros((i, o)),
            bias: Array1::zeros(o),
        }
    }
}

/// `out = (x Wx + bx) * sigmoid(ctx Wg + bg) + ctx Wb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatSquash<T> {
    pub layer: Linear<T>,
    pub gate: Linear<T>,
    pub hyper_weight: Array2<T>,
}

impl<T: Real> ConcatSquash<T> {
    fn zeros((i, o): (usize, usize)) -> Self {
        Self {
            layer: Linear::zeros((i, o)),
            gate: Linear::zeros((CONTEXT_DIM, o)),
            hyper_weight: Array2::zeros((CONTEXT_DIM, o)),
        }
    }
}

/// All learnable arrays of the encoder and the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    widths: Widths,
    pub encoder: Vec<Linear<T>>,
    pub head: Linear<T>,
    pub denoiser: Vec<ConcatSquash<T>>,
}

/// Name and shape of one parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Whether an array is a weight matrix (random init) or a bias (zero init).
#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Weight,
    Bias,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(widths: &Widths) -> Result<Self, ModelError> {
        widths.validate()?;
        Ok(Self {
            widths: widths.clone(),
            encoder: widths
                .encoder_dims()
                .into_iter()
                .map(Linear::zeros)
                .collect(),
            head: Linear::zeros(widths.head_dims()),
            denoiser: widths
                .denoiser_dims()
                .into_iter()
                .map(ConcatSquash::zeros)
                .collect(),
        })
    }

    pub fn widths(&self) -> &Widths {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn visit<'a>(&'a self, mut f: impl FnMut(String, Role, &'a [usize], &'a [T])) {
        let mut w = |name: String, a: &'a Array2<T>| {
            f(
                name,
                Role::Weight,
                a.shape(),
                a.as_slice().expect("standard layout"),
            )
        };
        for (i, l) in self.encoder.iter().enumerate() {
            w(format!("encoder.{i}.weight"), &l.weight);
        }
        w("head.weight".into(), &self.head.weight);
        for (i, l) in self.denoiser.iter().enumerate() {
            w(format!("denoiser.{i}.weight"), &l.layer.weight);
            w(format!("denoiser.{i}.gate_weight"), &l.gate.weight);
            w(format!("denoiser.{i}.hyper_weight"), &l.hyper_weight);
        }
        let mut b = |name: String, a: &'a Array1<T>| {
            f(
                name,
                Role::Bias,
                a.shape(),
                a.as_slice().expect("standard layout"),
            )
        };
        for (i, l) in self.encoder.iter().enumerate() {
            b(format!("encoder.{i}.bias"), &l.bias);
        }
        b("head.bias".into(), &self.head.bias);
        for (i, l) in self.denoiser.iter().enumerate() {
            b(format!("denoiser.{i}.bias"), &l.layer.bias);
            b(format!("denoiser.{i}.gate_bias"), &l.gate.bias);
        }
    }

    fn slices_mut_with_role(&mut self) -> Vec<(Role, &mut [T])> {
        fn s2<T>(a: &mut Array2<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        fn s1<T>(a: &mut Array1<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &mut self.encoder {
            weights.push((Role::Weight, s2(&mut l.weight)));
            biases.push((Role::Bias, s1(&mut l.bias)));
        }
        weights.push((Role::Weight, s2(&mut self.head.weight)));
        biases.push((Role::Bias, s1(&mut self.head.bias)));
        for l in &mut self.denoiser {
            weights.push((Role::Weight, s2(&mut l.layer.weight)));
            weights.push((Role::Weight, s2(&mut l.gate.weight)));
            weights.push((Role::Weight, s2(&mut l.hyper_weight)));
            biases.push((Role::Bias, s1(&mut l.layer.bias)));
            biases.push((Role::Bias, s1(&mut l.gate.bias)));
        }
        weights.extend(biases);
        weights
    }

    /// Every parameter array in a fixed canonical order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        self.visit(|_, _, _, s| out.push(s));
        out
    }

    /// Same order as [`Self::slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.slices_mut_with_role()
            .into_iter()
            .map(|(_, s)| s)
            .collect()
    }

    /// Names and shapes, same order as [`Self::slices`].
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        self.visit(|name, _, shape, _| {
            out.push(TensorInfo {
                name,
                shape: shape.to_vec(),
            })
        });
        out
    }

    /// Rebuilds parameters from flat arrays in canonical order.
    pub fn from_slices(widths: &Widths, data: &[Vec<T>]) -> Result<Self, ModelError> {
        let mut p = Self::zeros(widths)?;
        let infos = p.tensor_infos();
        if infos.len() != data.len() {
            return Err(shape_err(
                "parameter array count",
                &[infos.len()],
                &[data.len()],
            ));
        }
        for ((dst, src), info) in p.slices_mut().into_iter().zip(data).zip(&infos) {
            if dst.len() != src.len() {
                return Err(shape_err(info.name.clone(), &info.shape, &[src.len()]));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Zeroes the last denoiser layer, making the denoiser the identity on
    /// the input displacement.
    pub fn zero_output_layer(&mut self) {
        let last = self.denoiser.last_mut().expect("validated widths");
        *last = ConcatSquash::zeros(last.layer.weight.dim());
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params<T: Real>(seed: u64, widths: &Widths) -> Result<ModelParams<T>, ModelError> {
    let mut p = ModelParams::zeros(widths)?;
    let infos = p.tensor_infos();
    let mut r = rng::seeded(rng::derive_seed(seed, stream::INIT));
    for ((role, s), info) in p.slices_mut_with_role().into_iter().zip(&infos) {
        if role == Role::Weight {
            let bound = 1.0 / (info.shape[0] as f64).sqrt();
            for v in s.iter_mut() {
                *v = rng::uniform(&mut r, -bound, bound);
            }
        }
    }
    Ok(p)
}

/// Gradient of a scalar loss with respect to every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T>(ModelParams<T>);

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self(ModelParams::zeros(params.widths()).expect("params hold valid widths"))
    }

    /// Same order as [`ModelParams::slices`].
    pub fn slices(&self) -> Vec<&[T]> {
        self.0.slices()
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        self.0.tensor_infos()
    }

    /// Gradients laid out like the parameters they belong to.
    pub fn as_params(&self) -> &ModelParams<T> {
        &self.0
    }

    pub(crate) fn as_params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.0
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in self.0.slices_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Global shape feature `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeEmbedding<T>(Array1<T>);

impl<T: Real> ShapeEmbedding<T> {
    pub fn new(values: Array1<T>) -> Result<Self, ModelError> {
        if values.len() != EMBED_DIM {
            return Err(shape_err("shape embedding", &[EMBED_DIM], &[values.len()]));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array1<T> {
        &self.0
    }
}

/// `(beta, sin beta, cos beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding<T>([T; TIME_DIM]);

impl<T: Real> TimeEmbedding<T> {
    pub fn new(beta: T) -> Self {
        Self([beta, beta.sin(), beta.cos()])
    }

    pub fn values(&self) -> [T; TIME_DIM] {
        self.0
    }
}

/// Concatenation `[c, time]` fed to every concat-squash layer.
pub(crate) fn context<T: Real>(c: &ShapeEmbedding<T>, beta: T) -> Array1<T> {
    let mut ctx = Array1::zeros(CONTEXT_DIM);
    ctx.slice_mut(ndarray::s![..EMBED_DIM]).assign(c.values());
    for (k, v) in TimeEmbedding::new(beta).values().into_iter().enumerate() {
        ctx[EMBED_DIM + k] = v;
    }
    ctx
}
