//! Point-cloud anomaly detection by reconstruction through a conditional
//! displacement-space diffusion model.
//!
//! Normal training clouds are defected on the fly ([`patchgen`]), a
//! point-wise denoiser conditioned on a global shape embedding learns to
//! predict the noise added to the corrective displacement field
//! ([`diffusion`], [`model`], [`train`]), and at test time the reverse chain
//! reconstructs an anomaly-free cloud whose local neighbourhoods are compared
//! with the input ([`detect`]).
//!
//! Everything numeric is generic over [`Real`]; the aliases below fix the
//! working precision to `f64`.

pub mod checkpoint;
pub mod dataio;
pub mod detect;
pub mod diffusion;
pub mod geom;
pub mod model;
pub mod patchgen;
pub mod rng;
mod scalar;
pub mod train;

pub use scalar::Real;

pub type Point = geom::Point3<f64>;
pub type Cloud = geom::PointCloud<f64>;
pub type Rotation = geom::RotationMatrix<f64>;
pub type Schedule = diffusion::NoiseSchedule<f64>;
pub type Sample = patchgen::AugmentedSample<f64>;
pub type Params = model::ModelParams<f64>;
pub type Gradients = model::GradientSet<f64>;
pub type Embedding = model::ShapeEmbedding<f64>;
pub type ModelCheckpoint = checkpoint::Checkpoint<f64>;
