//! Seeded synthetic shapes sampled uniformly by surface area.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geom::{normalize_cloud, Point3, PointCloud};
use crate::rng::{self, derive_seed, stream, SeededRng};
use crate::Real;

pub const MIN_SHAPE_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Torus {
        major_radius: f64,
        minor_radius: f64,
    },
    /// Axis-aligned box with full side lengths.
    Box {
        size: [f64; 3],
    },
    Ellipsoid {
        radii: [f64; 3],
    },
}

impl Default for Shape {
    fn default() -> Self {
        Shape::Sphere { radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShapeSpec {
    pub shape: Shape,
    pub num_points: usize,
    /// Standard deviation of per-coordinate Gaussian noise.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticShapeSpec {
    fn default() -> Self {
        Self {
            shape: Shape::default(),
            num_points: 1024,
            jitter: 0.002,
            seed: 0,
        }
    }
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_points < MIN_SHAPE_POINTS {
            return bad(format!(
                "num_points must be >= {MIN_SHAPE_POINTS}, got {}",
                self.num_points
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!(
                "jitter must be finite and >= 0, got {}",
                self.jitter
            ));
        }
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        let ok = match self.shape {
            Shape::Sphere { radius } => positive(&[radius]),
            Shape::Torus {
                major_radius,
                minor_radius,
            } => positive(&[major_radius, minor_radius]) && minor_radius < major_radius,
            Shape::Box { size } => positive(&size),
            Shape::Ellipsoid { radii } => positive(&radii),
        };
        if !ok {
            return bad(format!(
                "shape parameters must be positive (torus: minor < major): {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

fn unit_vector(r: &mut SeededRng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng::normal(r), rng::normal(r), rng::normal(r)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn surface_point(shape: &Shape, r: &mut SeededRng) -> [f64; 3] {
    use std::f64::consts::TAU;
    match *shape {
        Shape::Sphere { radius } => unit_vector(r).map(|c| c * radius),
        Shape::Torus {
            major_radius: big,
            minor_radius: small,
        } => {
            // area element is proportional to big + small cos(theta)
            let theta = loop {
                let th = TAU * r.random::<f64>();
                if r.random::<f64>() * (big + small) < big + small * th.cos() {
                    break th;
                }
            };
            let phi = TAU * r.random::<f64>();
            let ring = big + small * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), small * theta.sin()]
        }
        Shape::Box { size: [a, b, c] } => {
            let areas = [b * c, a * c, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = r.random::<f64>() * total;
            let mut axis = 2;
            for (k, &ar) in areas.iter().enumerate() {
                if pick < ar {
                    axis = k;
                    break;
                }
                pick -= ar;
            }
            let half = [a / 2.0, b / 2.0, c / 2.0];
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k == axis {
                    sign * half[k]
                } else {
                    half[k] * (2.0 * r.random::<f64>() - 1.0)
                };
            }
            p
        }
        Shape::Ellipsoid { radii: [a, b, c] } => {
            // map a uniform sphere point and accept in proportion to the
            // local area stretch
            let g_max = (b * c).max(a * c).max(a * b);
            loop {
                let u = unit_vector(r);
                let g = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2))
                    .sqrt();
                if r.random::<f64>() * g_max < g {
                    break [a * u[0], b * u[1], c * u[2]];
                }
            }
        }
    }
}

/// Raw surface samples with jitter, before normalization.
pub fn sample_surface<T: Real>(spec: &SyntheticShapeSpec) -> Result<PointCloud<T>, DataError> {
    spec.validate()?;
    let mut shape_rng = rng::seeded(derive_seed(spec.seed, stream::SHAPE));
    let mut jitter_rng = rng::seeded(derive_seed(spec.seed, stream::JITTER));
    let pts = (0..spec.num_points)
        .map(|_| {
            let p = surface_point(&spec.shape, &mut shape_rng);
            let mut q = [0.0; 3];
            for k in 0..3 {
                let n: f64 = rng::normal(&mut jitter_rng);
                q[k] = p[k] + spec.jitter * n;
            }
            Point3::new(T::lit(q[0]), T::lit(q[1]), T::lit(q[2]))
        })
        .collect();
    Ok(PointCloud::new(pts)?)
}

/// Surface samples, jittered, then normalized.
pub fn gen_shape<T: Real>(spec: &SyntheticShapeSpec) -> Result<PointCloud<T>, DataError> {
    Ok(normalize_cloud(&sample_surface(spec)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, n: usize, jitter: f64) -> SyntheticShapeSpec {
        SyntheticShapeSpec {
            shape,
            num_points: n,
            jitter,
            seed: 3,
        }
    }

    #[test]
    fn unit_sphere_points_have_unit_norm() {
        let pc: PointCloud<f64> =
            sample_surface(&spec(Shape::Sphere { radius: 1.0 }, 500, 0.0)).unwrap();
        assert!(pc.points().iter().all(|p| (p.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(
            Shape::Box {
                size: [1.0, 2.0, 0.5],
            },
            300,
            0.01,
        );
        assert_eq!(gen_shape::<f64>(&s).unwrap(), gen_shape::<f64>(&s).unwrap());
        assert_ne!(
            gen_shape::<f64>(&s).unwrap(),
            gen_shape::<f64>(&s.with_seed(4)).unwrap()
        );
    }

    #[test]
    fn torus_points_lie_on_the_surface() {
        let jitter = 0.005;
        let pc: PointCloud<f64> = sample_surface(&spec(
            Shape::Torus {
                major_radius: 1.0,
                minor_radius: 0.3,
            },
            4096,
            jitter,
        ))
        .unwrap();
        let within = pc
            .points()
            .iter()
            .filter(|p| {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                (((rho - 1.0).powi(2) + p.z * p.z).sqrt() - 0.3).abs() < 3.0 * jitter
            })
            .count();
        assert!(within as f64 >= 0.99 * 4096.0, "{within}");
    }

    #[test]
    fn torus_is_area_weighted() {
        // outer half (cos theta > 0) carries (pi R + 2r) / (2 pi R) of the area
        let pc: PointCloud<f64> = sample_surface(&spec(
            Shape::Torus {
                major_radius: 1.0,
                minor_radius: 0.5,
            },
            20000,
            0.0,
        ))
        .unwrap();
        let outer = pc
            .points()
            .iter()
            .filter(|p| (p.x * p.x + p.y * p.y).sqrt() > 1.0)
            .count() as f64
            / 20000.0;
        let want = (std::f64::consts::PI + 1.0) / (2.0 * std::f64::consts::PI);
        let se = (want * (1.0 - want) / 20000.0).sqrt();
        assert!((outer - want).abs() < 5.0 * se, "{outer} vs {want}");
    }

    #[test]
    fn box_points_are_on_faces_by_area() {
        let pc: PointCloud<f64> = sample_surface(&spec(
            Shape::Box {
                size: [2.0, 1.0, 0.5],
            },
            20000,
            0.0,
        ))
        .unwrap();
        let on_x = pc.points().iter().filter(|p| p.x.abs() == 1.0).count() as f64 / 20000.0;
        for p in pc.points() {
            assert!(p.x.abs() == 1.0 || p.y.abs() == 0.5 || p.z.abs() == 0.25);
        }
        // face areas: x-faces 0.5, y-faces 1.0, z-faces 2.0 (each pair)
        let want = 0.5 / 3.5;
        assert!((on_x - want).abs() < 5.0 * (want * (1.0 - want) / 20000.0f64).sqrt());
    }

    #[test]
    fn ellipsoid_points_satisfy_the_quadric() {
        let pc: PointCloud<f64> = sample_surface(&spec(
            Shape::Ellipsoid {
                radii: [1.0, 0.5, 0.25],
            },
            1000,
            0.0,
        ))
        .unwrap();
        for p in pc.points() {
            let q = p.x * p.x + (p.y / 0.5).powi(2) + (p.z / 0.25).powi(2);
            assert!((q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(gen_shape::<f64>(&spec(Shape::Sphere { radius: 1.0 }, 63, 0.0)).is_err());
        assert!(gen_shape::<f64>(&spec(Shape::Sphere { radius: -1.0 }, 100, 0.0)).is_err());
        assert!(gen_shape::<f64>(&spec(
            Shape::Torus {
                major_radius: 0.3,
                minor_radius: 1.0
            },
            100,
            0.0
        ))
        .is_err());
        assert!(gen_shape::<f64>(&spec(Shape::Sphere { radius: 1.0 }, 100, -0.1)).is_err());
    }

    #[test]
    fn output_is_normalized() {
        let pc: PointCloud<f64> = gen_shape(&spec(
            Shape::Ellipsoid {
                radii: [3.0, 1.0, 2.0],
            },
            500,
            0.01,
        ))
        .unwrap();
        let m = pc.points().iter().map(|p| p.max_abs()).fold(0.0, f64::max);
        assert!((m - 1.0).abs() < 1e-12);
        assert!(pc.centroid().norm() < 1e-12);
    }
}
