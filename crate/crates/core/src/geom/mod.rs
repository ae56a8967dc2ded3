//! Point-cloud types and the geometric operations the pipeline is built on.

mod knn;
mod metrics;

use std::ops::{Add, Mul, Neg, Sub};

use ndarray::Array2;
use rand::seq::index;
use thiserror::Error;

use crate::rng;
use crate::Real;

pub use knn::{knn, KdTree};
pub use metrics::{chamfer_distance, psnr, Psnr, PSNR_PEAK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("all points coincide; cloud has no extent")]
    DegenerateCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("{labels} labels for {points} points")]
    LabelCount { points: usize, labels: usize },
    #[error("k = {k} exceeds the {available} reference points")]
    KTooLarge { k: usize, available: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Point3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    /// Coordinate by axis index (0, 1, 2).
    #[inline]
    pub fn axis(&self, axis: usize) -> T {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Squared Euclidean distance, summed x, y, z in that order.
    #[inline]
    pub fn dist_squared(self, o: Self) -> T {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    /// Element-wise product.
    #[inline]
    pub fn hadamard(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<T: Real> Add for Point3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Point3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Point3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Point3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Ordered points with optional per-point binary anomaly labels.
///
/// Order is meaningful: index `i` of an augmented cloud corresponds to index
/// `i` of its anomaly-free target.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point3<T>>,
    labels: Option<Vec<bool>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeomError::NonFinite { index });
        }
        Ok(Self {
            points,
            labels: None,
        })
    }

    pub fn with_labels(points: Vec<Point3<T>>, labels: Vec<bool>) -> Result<Self, GeomError> {
        let mut pc = Self::new(points)?;
        pc.set_labels(Some(labels))?;
        Ok(pc)
    }

    /// Builds a cloud from an `(N, 3)` array.
    pub fn from_array(a: &Array2<T>) -> Result<Self, GeomError> {
        assert_eq!(a.ncols(), 3, "point arrays have three columns");
        Self::new(
            a.rows()
                .into_iter()
                .map(|r| Point3::new(r[0], r[1], r[2]))
                .collect(),
        )
    }

    pub fn to_array(&self) -> Array2<T> {
        let mut a = Array2::zeros((self.len(), 3));
        for (mut row, p) in a.rows_mut().into_iter().zip(&self.points) {
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        a
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false: a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<bool>>) -> Result<(), GeomError> {
        if let Some(l) = &labels {
            if l.len() != self.points.len() {
                return Err(GeomError::LabelCount {
                    points: self.points.len(),
                    labels: l.len(),
                });
            }
        }
        self.labels = labels;
        Ok(())
    }

    pub fn into_parts(self) -> (Vec<Point3<T>>, Option<Vec<bool>>) {
        (self.points, self.labels)
    }

    pub fn centroid(&self) -> Point3<T> {
        let n = T::from_count(self.len());
        let sum = self.points.iter().fold(Point3::zero(), |acc, &p| acc + p);
        sum * (T::one() / n)
    }

    /// Applies `f` to every point, keeping labels.
    pub fn map_points(&self, f: impl Fn(Point3<T>) -> Point3<T>) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Picks points (and labels) by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Centroid-and-scale mapping into the `[-1, 1]` cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform<T> {
    pub centroid: Point3<T>,
    pub scale: T,
}

impl<T: Real> NormalizationTransform<T> {
    pub fn apply(&self, p: Point3<T>) -> Point3<T> {
        let c = p - self.centroid;
        Point3::new(c.x / self.scale, c.y / self.scale, c.z / self.scale)
    }

    pub fn invert(&self, p: Point3<T>) -> Point3<T> {
        p * self.scale + self.centroid
    }
}

/// Moves the centroid to the origin and scales so the largest absolute
/// coordinate is 1.
pub fn normalize_cloud<T: Real>(
    pc: &PointCloud<T>,
) -> Result<(PointCloud<T>, NormalizationTransform<T>), GeomError> {
    let centroid = pc.centroid();
    let scale = pc
        .points()
        .iter()
        .map(|&p| (p - centroid).max_abs())
        .fold(T::zero(), T::max);
    if !(scale > T::zero()) {
        return Err(GeomError::DegenerateCloud);
    }
    let tf = NormalizationTransform { centroid, scale };
    // Division rather than multiplication by 1/scale keeps the extreme
    // coordinate at exactly +-1.
    let out = pc.map_points(|p| tf.apply(p));
    Ok((out, tf))
}

/// Uniform subsample of `min(n, |pc|)` points without replacement.
/// With `n >= |pc|` the result is a shuffled copy.
pub fn downsample_random<T: Real>(pc: &PointCloud<T>, n: usize, seed: u64) -> PointCloud<T> {
    assert!(n >= 1, "downsample target must be positive");
    let mut rng = rng::seeded(seed);
    let picked = index::sample(&mut rng, pc.len(), n.min(pc.len())).into_vec();
    pc.select(&picked)
}

/// 3x3 rotation applied to row vectors: `p' = p * R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix<T> {
    m: [[T; 3]; 3],
}

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn about_x(a: T) -> Self {
        let (s, c, o, z) = (a.sin(), a.cos(), T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, c, -s], [z, s, c]],
        }
    }

    pub fn about_y(a: T) -> Self {
        let (s, c, o, z) = (a.sin(), a.cos(), T::one(), T::zero());
        Self {
            m: [[c, z, s], [z, o, z], [-s, z, c]],
        }
    }

    pub fn about_z(a: T) -> Self {
        let (s, c, o, z) = (a.sin(), a.cos(), T::one(), T::zero());
        Self {
            m: [[c, -s, z], [s, c, z], [z, z, o]],
        }
    }

    /// `Rx(ax) * Ry(ay) * Rz(az)`.
    pub fn from_euler(ax: T, ay: T, az: T) -> Self {
        Self::about_x(ax)
            .matmul(&Self::about_y(ay))
            .matmul(&Self::about_z(az))
    }

    pub fn matmul(&self, o: &Self) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn transpose(&self) -> Self {
        let mut m = self.m;
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.m[j][i];
            }
        }
        Self { m }
    }

    pub fn determinant(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn entries(&self) -> [[T; 3]; 3] {
        self.m
    }

    /// Row vector times matrix.
    #[inline]
    pub fn apply(&self, p: Point3<T>) -> Point3<T> {
        let m = &self.m;
        Point3::new(
            p.x * m[0][0] + p.y * m[1][0] + p.z * m[2][0],
            p.x * m[0][1] + p.y * m[1][1] + p.z * m[2][1],
            p.x * m[0][2] + p.y * m[1][2] + p.z * m[2][2],
        )
    }
}

/// Rotation with X, Y and Z angles drawn uniformly from `[0, 2*pi)`.
pub fn random_rotation<T: Real>(seed: u64) -> RotationMatrix<T> {
    let mut r = rng::seeded(seed);
    let tau = std::f64::consts::TAU;
    let ax = rng::uniform(&mut r, 0.0, tau);
    let ay = rng::uniform(&mut r, 0.0, tau);
    let az = rng::uniform(&mut r, 0.0, tau);
    RotationMatrix::from_euler(ax, ay, az)
}

pub fn apply_rotation<T: Real>(pc: &PointCloud<T>, r: &RotationMatrix<T>) -> PointCloud<T> {
    pc.map_points(|p| r.apply(p))
}
