//! Test-time pipeline: reconstruct, score points, aggregate, evaluate.

use std::cmp::Ordering;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffusion::{posterior_step, DiffusionError, NoiseSchedule};
use crate::geom::{self, GeomError, PointCloud};
use crate::model::{encode, point_features, predict_noise, ModelError, ModelParams};
use crate::rng::{self, derive_seed, stream};
use crate::Real;

/// Neighbourhood size for point-cluster scoring.
pub const DEFAULT_K: usize = 8;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("cloud has {found} points, the model expects {expected}")]
    PointCountMismatch { expected: usize, found: usize },
    #[error("only one class present among {n} labels")]
    SingleClass { n: usize },
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("anomalous sample {id} has no point labels")]
    MissingPointLabels { id: String },
    #[error("no scores")]
    Empty,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Runs the reverse chain from seeded Gaussian noise and returns
/// `pc + delta_0`, index-aligned with `pc`.
pub fn reconstruct_with<T: Real>(
    pc: &PointCloud<T>,
    params: &ModelParams<T>,
    sched: &NoiseSchedule<T>,
    seed: u64,
) -> Result<PointCloud<T>, DetectError> {
    let anchors = pc.to_array();
    let features = point_features(&anchors)?;
    let c = encode(pc, params);
    let mut r = rng::seeded(derive_seed(seed, stream::REVERSE));
    let n = pc.len();
    let mut delta: Array2<T> = rng::normal_matrix(&mut r, n, 3);
    for t in (1..=sched.t_max()).rev() {
        let eps = predict_noise(&features, &delta, &c, t, sched, params)?;
        let z = (t > 1).then(|| rng::normal_matrix(&mut r, n, 3));
        delta = posterior_step(&delta, &eps, t, z.as_ref(), sched)?;
    }
    Ok(PointCloud::from_array(&(anchors + delta))?)
}

/// [`reconstruct_with`] using a checkpoint's parameters and schedule.
pub fn reconstruct<T: Real>(
    pc: &PointCloud<T>,
    ck: &Checkpoint<T>,
    seed: u64,
) -> Result<PointCloud<T>, DetectError> {
    if pc.len() != ck.num_points {
        return Err(DetectError::PointCountMismatch {
            expected: ck.num_points,
            found: pc.len(),
        });
    }
    reconstruct_with(pc, &ck.params, &ck.noise_schedule()?, seed)
}

/// Per point: mean squared distance between the distance-sorted `k`-NN
/// cluster of the input point (within the input) and that of the same-index
/// reconstructed point (within the reconstruction).
pub fn point_scores<T: Real>(
    input: &PointCloud<T>,
    recon: &PointCloud<T>,
    k: usize,
) -> Result<Vec<T>, DetectError> {
    if input.len() != recon.len() {
        return Err(DetectError::LengthMismatch {
            what: "input and reconstruction",
            left: input.len(),
            right: recon.len(),
        });
    }
    let a = geom::knn(input, input, k)?;
    let b = geom::knn(recon, recon, k)?;
    let (pi, pr) = (input.points(), recon.points());
    let kk = T::from_count(k);
    Ok(a.iter()
        .zip(&b)
        .map(|(ca, cb)| {
            ca.iter()
                .zip(cb)
                .map(|(&i, &j)| pi[i].dist_squared(pr[j]))
                .sum::<T>()
                / kk
        })
        .collect())
}

/// Number of points in the top-1% aggregate.
pub fn top_count(n: usize) -> usize {
    n.div_ceil(100)
}

/// Mean of the top `ceil(N / 100)` scores.
pub fn object_score<T: Real>(scores: &[T]) -> Result<T, DetectError> {
    if scores.is_empty() {
        return Err(DetectError::Empty);
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let m = top_count(s.len());
    Ok(s[..m].iter().copied().sum::<T>() / T::from_count(m))
}

/// Per-cloud min-max scaling to `[0, 1]`; a constant cloud maps to zeros.
pub fn min_max_normalize<T: Real>(scores: &[T]) -> Vec<T> {
    let lo = scores.iter().copied().fold(T::infinity(), T::min);
    let hi = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    scores
        .iter()
        .map(|&s| {
            if span > T::zero() {
                (s - lo) / span
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Twice the Mann-Whitney U statistic (ties count one half) and twice
/// `n_pos * n_neg`, as exact integers.
pub fn mann_whitney_counts<T: Real>(
    scores: &[T],
    labels: &[bool],
) -> Result<(u128, u128), DetectError> {
    if scores.len() != labels.len() {
        return Err(DetectError::LengthMismatch {
            what: "scores and labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DetectError::SingleClass { n: labels.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(Ordering::Equal));
    let (mut u2, mut neg_below) = (0u128, 0u128);
    let mut g = 0;
    while g < order.len() {
        let mut e = g;
        while e < order.len() && scores[order[e]] == scores[order[g]] {
            e += 1;
        }
        let pos = order[g..e].iter().filter(|&&i| labels[i]).count() as u128;
        let neg = (e - g) as u128 - pos;
        u2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        g = e;
    }
    Ok((u2, 2 * n_pos * n_neg))
}

/// Converts exact counts to a ratio so that swapping the labels
/// (`u -> m - u`) yields exactly `1 - ratio`.
pub fn auroc_from_counts<T: Real>(u2: u128, m2: u128) -> T {
    let (u, m) = (T::lit(u2 as f64), T::lit(m2 as f64));
    if 2 * u2 <= m2 {
        u / m
    } else {
        T::one() - T::lit((m2 - u2) as f64) / m
    }
}

/// Area under the ROC curve.
pub fn auroc<T: Real>(scores: &[T], labels: &[bool]) -> Result<T, DetectError> {
    let (u2, m2) = mann_whitney_counts(scores, labels)?;
    Ok(auroc_from_counts(u2, m2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve<T> {
    /// Descending; a point is positive when its score is `>=` the threshold.
    pub thresholds: Vec<T>,
    pub tpr: Vec<T>,
    pub fpr: Vec<T>,
    pub auroc: T,
}

/// ROC sweep over every distinct score, starting at `(0, 0)` for an
/// infinite threshold.
pub fn roc_curve<T: Real>(scores: &[T], labels: &[bool]) -> Result<RocCurve<T>, DetectError> {
    let auroc = auroc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal));
    let mut curve = RocCurve {
        thresholds: vec![T::infinity()],
        tpr: vec![T::zero()],
        fpr: vec![T::zero()],
        auroc,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut g = 0;
    while g < order.len() {
        let s = scores[order[g]];
        while g < order.len() && scores[order[g]] == s {
            if labels[order[g]] {
                tp += 1;
            } else {
                fp += 1;
            }
            g += 1;
        }
        curve.thresholds.push(s);
        curve.tpr.push(T::from_count(tp) / T::from_count(n_pos));
        curve.fpr.push(T::from_count(fp) / T::from_count(n_neg));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport<T> {
    pub input: PointCloud<T>,
    pub reconstruction: PointCloud<T>,
    pub point_scores: Vec<T>,
    pub object_score: T,
}

/// Scores an input against a given reconstruction.
pub fn analyze<T: Real>(
    input: &PointCloud<T>,
    reconstruction: PointCloud<T>,
    k: usize,
) -> Result<AnomalyReport<T>, DetectError> {
    let point_scores = point_scores(input, &reconstruction, k)?;
    let object_score = object_score(&point_scores)?;
    Ok(AnomalyReport {
        input: input.clone(),
        reconstruction,
        point_scores,
        object_score,
    })
}

/// Reconstructs and scores one cloud.
pub fn detect<T: Real>(
    pc: &PointCloud<T>,
    ck: &Checkpoint<T>,
    k: usize,
    seed: u64,
) -> Result<AnomalyReport<T>, DetectError> {
    analyze(pc, reconstruct(pc, ck, seed)?, k)
}

/// One labelled test cloud; its point labels (if any) mark defect points.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample<T> {
    pub id: String,
    pub cloud: PointCloud<T>,
    pub anomalous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub i_auroc: T,
    pub p_auroc: T,
    pub reports: Vec<AnomalyReport<T>>,
    pub warnings: Vec<String>,
}

/// Per-sample reconstruction seed: sample `i` uses `derive_seed(seed, i)`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Reconstructs every sample (in parallel, results in input order) and
/// computes both AUROCs.
pub fn evaluate<T: Real>(
    samples: &[TestSample<T>],
    ck: &Checkpoint<T>,
    k: usize,
    seed: u64,
) -> Result<Evaluation<T>, DetectError> {
    let reports: Vec<_> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| detect(&s.cloud, ck, k, sample_seed(seed, i)))
        .collect::<Result<_, _>>()?;
    evaluate_reports(samples, reports)
}

fn degenerate<T: Real>(scores: &[T]) -> bool {
    scores.iter().all(|&s| s == scores[0])
}

/// AUROCs of already-scored samples. Constant scores give 0.5 and a warning.
pub fn evaluate_reports<T: Real>(
    samples: &[TestSample<T>],
    reports: Vec<AnomalyReport<T>>,
) -> Result<Evaluation<T>, DetectError> {
    if samples.len() != reports.len() {
        return Err(DetectError::LengthMismatch {
            what: "samples and reports",
            left: samples.len(),
            right: reports.len(),
        });
    }
    let obj: Vec<T> = reports.iter().map(|r| r.object_score).collect();
    let pts: Vec<&[T]> = reports.iter().map(|r| r.point_scores.as_slice()).collect();
    let s = evaluate_scores(samples, &obj, &pts)?;
    Ok(Evaluation {
        i_auroc: s.i_auroc,
        p_auroc: s.p_auroc,
        reports,
        warnings: s.warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary<T> {
    pub i_auroc: T,
    pub p_auroc: T,
    pub warnings: Vec<String>,
}

/// I-AUROC over `object_scores` and P-AUROC over the pooled point scores.
/// Normal samples without point labels count as all-normal points.
pub fn evaluate_scores<T: Real>(
    samples: &[TestSample<T>],
    object_scores: &[T],
    point_scores: &[&[T]],
) -> Result<ScoreSummary<T>, DetectError> {
    for (what, n) in [
        ("samples and object scores", object_scores.len()),
        ("samples and point-score sets", point_scores.len()),
    ] {
        if samples.len() != n {
            return Err(DetectError::LengthMismatch {
                what,
                left: samples.len(),
                right: n,
            });
        }
    }
    let mut warnings = Vec::new();
    let obj_labels: Vec<bool> = samples.iter().map(|s| s.anomalous).collect();
    let i_auroc = auroc(object_scores, &obj_labels)?;
    if degenerate(object_scores) {
        warnings.push("all object scores are equal; I-AUROC is uninformative".to_string());
    }

    let mut pts = Vec::new();
    let mut pt_labels = Vec::new();
    for (s, &p) in samples.iter().zip(point_scores) {
        if p.len() != s.cloud.len() {
            return Err(DetectError::LengthMismatch {
                what: "cloud and point scores",
                left: s.cloud.len(),
                right: p.len(),
            });
        }
        match s.cloud.labels() {
            Some(l) => pt_labels.extend_from_slice(l),
            None if !s.anomalous => pt_labels.extend(std::iter::repeat_n(false, s.cloud.len())),
            None => return Err(DetectError::MissingPointLabels { id: s.id.clone() }),
        }
        pts.extend_from_slice(p);
    }
    let p_auroc = auroc(&pts, &pt_labels)?;
    if degenerate(&pts) {
        warnings.push("all point scores are equal; P-AUROC is uninformative".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ScoreSummary {
        i_auroc,
        p_auroc,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;
    use crate::geom::Point3;
    use crate::model::{init_params, Widths};

    fn cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let m: Array2<f64> = rng::normal_matrix(&mut rng::seeded(seed), n, 3);
        PointCloud::from_array(&m).unwrap()
    }

    #[test]
    fn zeroed_output_layer_follows_the_closed_form_recursion() {
        let mut p = init_params::<f64>(
            1,
            &Widths {
                encoder: vec![8],
                denoiser: vec![8],
            },
        )
        .unwrap();
        p.zero_output_layer();
        let sched = linear_schedule::<f64>(10, 1e-4, 0.2).unwrap();
        let pc = cloud(12, 2);
        let rec = reconstruct_with(&pc, &p, &sched, 5).unwrap();

        // eps_pred = d / sqrt(1 - ab): d <- d (1 - (1 - a)/(1 - ab)) / sqrt(a) + sigma z
        let mut r = rng::seeded(derive_seed(5, stream::REVERSE));
        let mut d: Array2<f64> = rng::normal_matrix(&mut r, 12, 3);
        for t in (1..=10).rev() {
            let a = sched.alpha(t);
            let k = (1.0 - (1.0 - a) / (1.0 - sched.alpha_bar(t))) / a.sqrt();
            d.mapv_inplace(|v| v * k);
            if t > 1 {
                let z: Array2<f64> = rng::normal_matrix(&mut r, 12, 3);
                d = d + z * sched.beta(t).sqrt();
            }
        }
        let want = pc.to_array() + d;
        for (a, b) in rec.to_array().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let p = init_params::<f64>(
            1,
            &Widths {
                encoder: vec![8],
                denoiser: vec![8],
            },
        )
        .unwrap();
        let sched = linear_schedule::<f64>(10, 1e-4, 0.2).unwrap();
        let pc = cloud(12, 2);
        assert_eq!(
            reconstruct_with(&pc, &p, &sched, 3).unwrap(),
            reconstruct_with(&pc, &p, &sched, 3).unwrap()
        );
        assert_ne!(
            reconstruct_with(&pc, &p, &sched, 3).unwrap(),
            reconstruct_with(&pc, &p, &sched, 4).unwrap()
        );
    }

    #[test]
    fn point_count_checked_against_checkpoint() {
        let params = init_params::<f64>(
            1,
            &Widths {
                encoder: vec![8],
                denoiser: vec![8],
            },
        )
        .unwrap();
        let ck = Checkpoint {
            params,
            schedule: Default::default(),
            num_points: 10,
            config_digest: String::new(),
            iteration: 0,
            train_config: None,
            adam: None,
        };
        assert!(matches!(
            reconstruct(&cloud(12, 1), &ck, 0),
            Err(DetectError::PointCountMismatch {
                expected: 10,
                found: 12
            })
        ));
    }

    #[test]
    fn identical_clouds_score_zero() {
        let pc = cloud(50, 1);
        assert!(point_scores(&pc, &pc, 8).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn k1_is_squared_point_distance() {
        let a = cloud(40, 1);
        let b = cloud(40, 2);
        let s = point_scores(&a, &b, 1).unwrap();
        for i in 0..40 {
            assert_eq!(s[i], a.points()[i].dist_squared(b.points()[i]));
        }
    }

    #[test]
    fn displaced_points_hold_the_top_scores() {
        let a = cloud(256, 3);
        let moved: Vec<usize> = (0..8).map(|i| i * 31 + 5).collect();
        let pts: Vec<_> = a
            .points()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if moved.contains(&i) {
                    p + Point3::new(3.0, -2.0, 4.0)
                } else {
                    p
                }
            })
            .collect();
        let b = PointCloud::new(pts).unwrap();
        let s = point_scores(&a, &b, 8).unwrap();
        let mut order: Vec<usize> = (0..256).collect();
        order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
        let mut top = order[..8].to_vec();
        top.sort_unstable();
        assert_eq!(top, moved);
    }

    #[test]
    fn object_score_examples() {
        assert_eq!(object_score(&[0.0; 100]).unwrap(), 0.0);
        let mut s = vec![0.0; 100];
        s[37] = 1.0;
        assert_eq!(object_score(&s).unwrap(), 1.0);
        let mut s = vec![0.0; 200];
        s[3] = 0.5;
        s[150] = 0.3;
        assert_eq!(object_score(&s).unwrap(), 0.4);
        assert!(object_score::<f64>(&[]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[0.9, 0.8, 0.3, 0.2], &[false, false, true, true]).unwrap(),
            0.0
        );
        assert_eq!(
            auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(DetectError::SingleClass { .. })
        ));
    }

    #[test]
    fn roc_curve_is_monotone_and_ends_at_one() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.05];
        let labels = [false, true, false, true, false, false];
        let c = roc_curve(&scores, &labels).unwrap();
        assert!(c.tpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((*c.tpr.last().unwrap(), *c.fpr.last().unwrap()), (1.0, 1.0));
        // trapezoid area equals the rank statistic
        let area: f64 = (1..c.tpr.len())
            .map(|i| (c.fpr[i] - c.fpr[i - 1]) * (c.tpr[i] + c.tpr[i - 1]) / 2.0)
            .sum();
        assert!((area - c.auroc).abs() < 1e-12);
    }

    fn sample(id: &str, pc: PointCloud<f64>, anomalous: bool) -> TestSample<f64> {
        TestSample {
            id: id.into(),
            cloud: pc,
            anomalous,
        }
    }

    #[test]
    fn oracle_reconstructions_score_perfectly() {
        let mut samples = Vec::new();
        let mut reports = Vec::new();
        for i in 0..4 {
            let target = cloud(100, i);
            let anomalous = i % 2 == 1;
            let (input, labels) = if anomalous {
                let labels: Vec<bool> = (0..100).map(|j| j < 3).collect();
                let pts = target
                    .points()
                    .iter()
                    .zip(&labels)
                    .map(|(&p, &l)| if l { p * 1.5 } else { p })
                    .collect();
                (
                    PointCloud::with_labels(pts, labels.clone()).unwrap(),
                    labels,
                )
            } else {
                (target.clone(), vec![false; 100])
            };
            let _ = labels;
            reports.push((
                analyze(&input, target.clone(), 1).unwrap(),
                analyze(&input, target, 8).unwrap(),
            ));
            samples.push(sample(&i.to_string(), input, anomalous));
        }
        let (k1, k8): (Vec<_>, Vec<_>) = reports.into_iter().unzip();
        let ev = evaluate_reports(&samples, k1).unwrap();
        assert_eq!((ev.i_auroc, ev.p_auroc), (1.0, 1.0));
        assert!(ev.warnings.is_empty());
        // wider clusters leak defect distance onto neighbouring normal points,
        // so only the object level stays perfect
        let ev = evaluate_reports(&samples, k8).unwrap();
        assert_eq!(ev.i_auroc, 1.0);
        assert!(ev.p_auroc > 0.5);
    }

    #[test]
    fn identity_reconstructions_give_half_with_warning() {
        let samples: Vec<_> = (0..4)
            .map(|i| {
                let pc = cloud(100, i);
                let pc = if i % 2 == 1 {
                    let (p, _) = pc.into_parts();
                    PointCloud::with_labels(p, (0..100).map(|j| j == 0).collect()).unwrap()
                } else {
                    pc
                };
                sample("s", pc, i % 2 == 1)
            })
            .collect();
        let reports = samples
            .iter()
            .map(|s| analyze(&s.cloud, s.cloud.clone(), 8).unwrap())
            .collect();
        let ev = evaluate_reports(&samples, reports).unwrap();
        assert_eq!((ev.i_auroc, ev.p_auroc), (0.5, 0.5));
        assert_eq!(ev.warnings.len(), 2);
    }

    #[test]
    fn missing_point_labels_reported() {
        let samples = vec![
            sample("n", cloud(20, 1), false),
            sample("a", cloud(20, 2), true),
        ];
        let reports = samples
            .iter()
            .map(|s| analyze(&s.cloud, cloud(20, 9), 4).unwrap())
            .collect();
        assert!(matches!(
            evaluate_reports(&samples, reports),
            Err(DetectError::MissingPointLabels { .. })
        ));
    }
}
