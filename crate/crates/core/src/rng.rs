//! Seeded random streams.
//!
//! Every stochastic operation takes an integer seed and builds its own
//! ChaCha stream from it, so results never depend on call order or thread
//! scheduling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Real;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `seed` with a stream id (splitmix64 finalizer) to get an
/// independent sub-seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = rng.sample(StandardNormal);
    T::lit(x)
}

/// Uniform in `[lo, hi)`.
pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    let u: f64 = rng.random();
    T::lit(lo + (hi - lo) * u)
}

/// Row-major matrix of i.i.d. standard normal draws.
pub fn normal_matrix<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

// Stream ids used when one seed feeds several independent draws.
pub(crate) mod stream {
    pub const ROTATION: u64 = 1;
    pub const VIEWPOINT: u64 = 2;
    pub const TRANSLATION: u64 = 3;
    pub const KIND: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const DOWNSAMPLE: u64 = 6;
    pub const PATCHGEN: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const INIT: u64 = 9;
    pub const REVERSE: u64 = 10;
    pub const SHAPE: u64 = 11;
    pub const JITTER: u64 = 12;
    pub const TEST_DEFECT: u64 = 13;
}
