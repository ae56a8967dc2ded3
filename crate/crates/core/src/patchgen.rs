//! Patch-Gen defect synthesis.
//!
//! A normal cloud is (optionally) rotated, a viewpoint is drawn on the
//! surface of the `[-1, 1]` cube, and the `n` points nearest to it are pushed
//! along their viewpoint rays:
//!
//! ```text
//! P_n <- P_n + S * normalize(P_n - P_v) (*) T
//! ```
//!
//! where `T` holds one Gaussian row per selected point. Sorting `|T|` by
//! distance rank gives smooth bulges and sinks; raw `T` gives damage.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geom::{self, GeomError, Point3, PointCloud, RotationMatrix};
use crate::rng::{self, derive_seed, stream};
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchGenError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("patch of {requested} points requested from a {available}-point cloud")]
    SelectionTooLarge { requested: usize, available: usize },
    #[error("invalid patch-gen config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Bulge,
    Sink,
    Damage,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Bulge, DefectKind::Sink, DefectKind::Damage];
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefectKind::Bulge => "bulge",
            DefectKind::Sink => "sink",
            DefectKind::Damage => "damage",
        })
    }
}

impl FromStr for DefectKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bulge" => Ok(DefectKind::Bulge),
            "sink" => Ok(DefectKind::Sink),
            "damage" => Ok(DefectKind::Damage),
            other => Err(format!(
                "unknown defect kind `{other}` (expected bulge, sink or damage)"
            )),
        }
    }
}

/// Fraction of the cloud that forms the defect patch, kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionRatio(Ratio<u64>);

impl SelectionRatio {
    pub fn new(num: u64, den: u64) -> Result<Self, String> {
        if den == 0 || num == 0 || num > den {
            return Err(format!("selection ratio {num}/{den} must lie in (0, 1]"));
        }
        Ok(Self(Ratio::new(num, den)))
    }

    /// `ceil(ratio * n)`.
    pub fn count(&self, n: usize) -> usize {
        let num = *self.0.numer() as u128 * n as u128;
        let den = *self.0.denom() as u128;
        num.div_ceil(den) as usize
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl Default for SelectionRatio {
    fn default() -> Self {
        Self(Ratio::new(1, 32))
    }
}

impl fmt::Display for SelectionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl FromStr for SelectionRatio {
    type Err = String;

    /// Accepts `a/b` or a decimal such as `0.03125`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let bad = || format!("cannot parse selection ratio `{s}`");
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Self::new(a, b);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18
            || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
            || s.is_empty()
        {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac_v: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        Self::new(num, den)
    }
}

impl Serialize for SelectionRatio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Number(x) => format!("{x}").parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which cloud the augmented sample is supervised against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPose {
    /// The rotated normal cloud: the displacement only removes the defect.
    #[default]
    Aligned,
    /// The un-rotated input, so the displacement also undoes the rotation.
    Unrotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchGenConfig {
    pub selection_ratio: SelectionRatio,
    /// Scaling factor `S`.
    pub scale: f64,
    /// `None` draws a kind uniformly per sample.
    pub kind: Option<DefectKind>,
    pub rotate: bool,
    pub target_pose: TargetPose,
    pub seed: u64,
}

impl Default for PatchGenConfig {
    fn default() -> Self {
        Self {
            selection_ratio: SelectionRatio::default(),
            scale: 0.1,
            kind: None,
            rotate: true,
            target_pose: TargetPose::Aligned,
            seed: 0,
        }
    }
}

impl PatchGenConfig {
    pub fn validate(&self) -> Result<(), PatchGenError> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(PatchGenError::InvalidConfig(format!(
                "scale must be finite and >= 0, got {}",
                self.scale
            )));
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

/// What was done to produce one augmented sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefectRecord {
    pub seed: u64,
    pub kind: DefectKind,
    pub selection_ratio: String,
    pub scale: f64,
    pub viewpoint: [f64; 3],
    pub rotation: Option<[[f64; 3]; 3]>,
    pub selected: usize,
}

/// A labeled training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample<T> {
    /// Defected cloud; its labels are the defect mask.
    pub anomalous: PointCloud<T>,
    /// Anomaly-free cloud in the same pose.
    pub target: PointCloud<T>,
    pub defect_mask: Vec<bool>,
    /// Per point, `target - anomalous` (exactly the negated defect offset on
    /// the patch, exact zero elsewhere).
    pub gt_displacement: Vec<Point3<T>>,
    pub record: DefectRecord,
}

/// Uniform point on the surface of `[-1, 1]^3`.
pub fn sample_viewpoint<T: Real>(seed: u64) -> Point3<T> {
    let mut r = rng::seeded(seed);
    let face = r.random_range(0..6usize);
    let mut open = || loop {
        let u: f64 = 2.0 * r.random::<f64>() - 1.0;
        if u > -1.0 {
            break u;
        }
    };
    let (u, v) = (open(), open());
    cube_face_point(face, T::lit(u), T::lit(v))
}

/// Point on cube face `face` (0: +x, 1: -x, 2: +y, 3: -y, 4: +z, 5: -z)
/// with in-face offsets `(u, v)`.
pub fn cube_face_point<T: Real>(face: usize, u: T, v: T) -> Point3<T> {
    let sign = if face.is_multiple_of(2) { T::one() } else { -T::one() };
    match face / 2 {
        0 => Point3::new(sign, u, v),
        1 => Point3::new(u, sign, v),
        _ => Point3::new(u, v, sign),
    }
}

/// Per-point translation rows for a defect of `n` points.
///
/// Rows are i.i.d. standard normal. For damage they are used as drawn. For
/// bulge and sink the absolute rows are ordered by decreasing norm so the
/// patch point nearest the viewpoint moves most; bulge rows point back
/// toward the viewpoint (outward) and sink rows are their negation.
pub fn make_translation<T: Real>(kind: DefectKind, n: usize, seed: u64) -> Vec<Point3<T>> {
    let mut r = rng::seeded(seed);
    let mut rows: Vec<Point3<T>> = (0..n)
        .map(|_| {
            let x = rng::normal(&mut r);
            let y = rng::normal(&mut r);
            let z = rng::normal(&mut r);
            Point3::new(x, y, z)
        })
        .collect();
    if kind == DefectKind::Damage {
        return rows;
    }
    for row in &mut rows {
        *row = Point3::new(row.x.abs(), row.y.abs(), row.z.abs());
    }
    rows.sort_by(|a, b| {
        b.norm_squared()
            .partial_cmp(&a.norm_squared())
            .expect("finite")
    });
    match kind {
        DefectKind::Bulge => rows.into_iter().map(|p| -p).collect(),
        _ => rows,
    }
}

fn unit_or_zero<T: Real>(v: Point3<T>) -> Point3<T> {
    let n = v.norm();
    if n > T::zero() {
        Point3::new(v.x / n, v.y / n, v.z / n)
    } else {
        Point3::zero()
    }
}

pub fn patch_gen<T: Real>(
    pc: &PointCloud<T>,
    cfg: &PatchGenConfig,
) -> Result<AugmentedSample<T>, PatchGenError> {
    cfg.validate()?;
    let n = cfg.selection_ratio.count(pc.len());
    if n > pc.len() {
        return Err(PatchGenError::SelectionTooLarge {
            requested: n,
            available: pc.len(),
        });
    }
    let first = pc.points()[0];
    if pc.points().iter().all(|&p| p == first) {
        return Err(GeomError::DegenerateCloud.into());
    }

    let rotation = cfg
        .rotate
        .then(|| geom::random_rotation::<T>(derive_seed(cfg.seed, stream::ROTATION)));
    let posed = match &rotation {
        Some(r) => geom::apply_rotation(pc, r),
        None => pc.clone(),
    };
    let (points, _) = posed.into_parts();

    let viewpoint = sample_viewpoint::<T>(derive_seed(cfg.seed, stream::VIEWPOINT));
    let vp_cloud = PointCloud::new(vec![viewpoint])?;
    let target_cloud = PointCloud::new(points)?;
    let patch = geom::knn(&vp_cloud, &target_cloud, n)?.remove(0);

    let kind = cfg.kind.unwrap_or_else(|| {
        let mut r = rng::seeded(derive_seed(cfg.seed, stream::KIND));
        DefectKind::ALL[r.random_range(0..3usize)]
    });
    let translation = make_translation::<T>(kind, n, derive_seed(cfg.seed, stream::TRANSLATION));
    let scale = T::lit(cfg.scale);

    let target_points = target_cloud.points();
    let mut anomalous = target_points.to_vec();
    let mut gt = vec![Point3::zero(); pc.len()];
    let mut mask = vec![false; pc.len()];
    for (&i, &t) in patch.iter().zip(&translation) {
        let offset = (unit_or_zero(target_points[i] - viewpoint) * scale).hadamard(t);
        anomalous[i] = target_points[i] + offset;
        gt[i] = -offset;
        mask[i] = true;
    }

    let target = match cfg.target_pose {
        TargetPose::Aligned => target_cloud.clone(),
        TargetPose::Unrotated => {
            let mut t = pc.clone();
            t.set_labels(None)?;
            for (g, (a, p)) in gt.iter_mut().zip(anomalous.iter().zip(t.points())) {
                *g = *p - *a;
            }
            t
        }
    };

    let record = DefectRecord {
        seed: cfg.seed,
        kind,
        selection_ratio: cfg.selection_ratio.to_string(),
        scale: cfg.scale,
        viewpoint: viewpoint.to_array().map(T::as_f64),
        rotation: rotation.map(|r: RotationMatrix<T>| r.entries().map(|row| row.map(T::as_f64))),
        selected: n,
    };
    Ok(AugmentedSample {
        anomalous: PointCloud::with_labels(anomalous, mask.clone())?,
        target,
        defect_mask: mask,
        gt_displacement: gt,
        record,
    })
}
