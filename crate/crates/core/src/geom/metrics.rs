//! Reconstruction quality metrics.

use super::{GeomError, KdTree, PointCloud};
use crate::Real;

/// Peak signal value for clouds normalized to `[-1, 1]`.
pub const PSNR_PEAK: f64 = 2.0;

fn mean_nearest_sq<T: Real>(from: &PointCloud<T>, to: &PointCloud<T>) -> T {
    let tree = KdTree::build(to.points());
    let mut sum = T::zero();
    for &q in from.points() {
        let j = tree.nearest(q, 1)[0];
        sum += q.dist_squared(to.points()[j]);
    }
    sum / T::from_count(from.len())
}

/// Symmetric Chamfer distance with squared nearest-neighbour distances:
/// `mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2`.
pub fn chamfer_distance<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> T {
    mean_nearest_sq(a, b) + mean_nearest_sq(b, a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr<T> {
    /// The clouds are identical (zero error).
    Infinite,
    Db(T),
}

impl<T: Real> Psnr<T> {
    pub fn db(self) -> Option<T> {
        match self {
            Psnr::Infinite => None,
            Psnr::Db(v) => Some(v),
        }
    }

    /// `+inf` for identical clouds.
    pub fn value(self) -> T {
        self.db().unwrap_or_else(T::infinity)
    }
}

/// `10 log10(peak^2 / MSE)` over index-aligned coordinates.
pub fn psnr<T: Real>(
    reference: &PointCloud<T>,
    candidate: &PointCloud<T>,
) -> Result<Psnr<T>, GeomError> {
    if reference.len() != candidate.len() {
        return Err(GeomError::LengthMismatch {
            left: reference.len(),
            right: candidate.len(),
        });
    }
    let sse: T = reference
        .points()
        .iter()
        .zip(candidate.points())
        .map(|(a, b)| a.dist_squared(*b))
        .sum();
    let mse = sse / T::from_count(3 * reference.len());
    if mse == T::zero() {
        return Ok(Psnr::Infinite);
    }
    let peak = T::lit(PSNR_PEAK);
    Ok(Psnr::Db(T::lit(10.0) * (peak * peak / mse).log10()))
}
