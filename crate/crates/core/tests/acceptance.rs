//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8-10 train a desk-scale model twice (about half an hour on one
//! core) and only run with `DIFFAD_ACCEPTANCE_FULL=1`; otherwise they print
//! SKIP. Any FAIL makes the binary exit non-zero.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use diffad::dataio::{
    build_synthetic_dataset, gen_shape, DatasetManifest, Shape, SyntheticClass, SyntheticShapeSpec,
};
use diffad::detect::{auroc, auroc_from_counts, evaluate, mann_whitney_counts, DEFAULT_K};
use diffad::diffusion::{estimate_x0, forward_sample, posterior_step, ScheduleConfig};
use diffad::geom::{knn, Point3, PointCloud};
use diffad::model::{init_params, loss_and_gradients, ModelParams, TrainingTuple, Widths};
use diffad::patchgen::{patch_gen, DefectKind, PatchGenConfig, SelectionRatio};
use diffad::rng;
use diffad::train::{train, TrainConfig};
use diffad::{Cloud, Schedule};
use ndarray::Array2;
use rand::Rng;

type Outcome = Result<String, String>;

/// Unit roundoff of f64.
const U: f64 = f64::EPSILON / 2.0;

// pinned tolerances
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_REL_FLOOR: f64 = 1e-6;
const FD_BUDGET: Duration = Duration::from_secs(60);
const FORWARD_DRAWS: usize = 10_000;
const FORWARD_SE: f64 = 4.0;
const FORWARD_BUDGET: Duration = Duration::from_secs(10);
const X0_TOL: f64 = 1e-10;
const MIN_I_AUROC: f64 = 0.80;
const MIN_P_AUROC: f64 = 0.70;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const RECON_RATIO: f64 = 0.20;

fn sched() -> Schedule {
    ScheduleConfig::default().build().unwrap()
}

fn sphere(n: usize, seed: u64) -> Cloud {
    gen_shape(&SyntheticShapeSpec {
        shape: Shape::Sphere { radius: 1.0 },
        num_points: n,
        jitter: 0.002,
        seed,
    })
    .unwrap()
}

/// Analytic gradients against central differences for 100 parameter
/// entries drawn across every tensor, default widths, 64 points.
fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let s = sched();
    let widths = Widths::default();
    let mut p: ModelParams<f64> = init_params(21, &widths).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(22);
    for (info, sl) in p.tensor_infos().into_iter().zip(p.slices_mut()) {
        if info.name.ends_with("bias") {
            sl.iter_mut()
                .for_each(|v| *v = rng::uniform(&mut r, -0.1, 0.1));
        }
    }
    let tuples: Vec<TrainingTuple<f64>> = (0..2)
        .map(|i| {
            let cfg = PatchGenConfig {
                selection_ratio: SelectionRatio::new(1, 8).unwrap(),
                ..PatchGenConfig::default()
            }
            .with_seed(i);
            TrainingTuple::from_sample(&patch_gen(&sphere(64, 30 + i), &cfg).unwrap())
        })
        .collect();
    let seed = 23;
    let (_, grads) = loss_and_gradients(&tuples, &p, &s, seed).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    let infos = p.tensor_infos();
    let mut worst = (0.0f64, String::new());
    for _ in 0..100 {
        let a = r.random_range(0..infos.len());
        let e = r.random_range(0..grads[a].len());
        let orig = p.slices()[a][e];
        p.slices_mut()[a][e] = orig + FD_STEP;
        let up = loss_and_gradients(&tuples, &p, &s, seed).unwrap().0;
        p.slices_mut()[a][e] = orig - FD_STEP;
        let down = loss_and_gradients(&tuples, &p, &s, seed).unwrap().0;
        p.slices_mut()[a][e] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = grads[a][e];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_REL_FLOOR);
        if rel > worst.0 {
            worst = (rel, format!("{}[{e}]", infos[a].name));
        }
    }
    let dt = t0.elapsed();
    let msg = format!(
        "max rel err {:.2e} at {} (tol {FD_REL_TOL:e}), {:.1}s (budget {}s)",
        worst.0,
        worst.1,
        dt.as_secs_f64(),
        FD_BUDGET.as_secs()
    );
    if worst.0 < FD_REL_TOL && dt < FD_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Monte-Carlo moments of the forward process at t = 1, T/2, T.
fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let s = sched();
    let x0 = Array2::from_shape_vec((2, 3), vec![0.7, -0.3, 0.05, 1.0, 0.0, -0.8]).unwrap();
    let n = FORWARD_DRAWS as f64;
    let mut worst: f64 = 0.0;
    let mut r = rng::seeded(31);
    for t in [1, s.t_max() / 2, s.t_max()] {
        let ab = s.alpha_bar(t);
        let mut sum = Array2::<f64>::zeros((2, 3));
        let mut sum2 = Array2::<f64>::zeros((2, 3));
        for _ in 0..FORWARD_DRAWS {
            let eps: Array2<f64> = rng::normal_matrix(&mut r, 2, 3);
            let x = forward_sample(&x0, t, &eps, &s).map_err(|e| e.to_string())?;
            sum += &x;
            sum2 += &(&x * &x);
        }
        let var_true = 1.0 - ab;
        for ((&m1, &m2), &x) in sum.iter().zip(&sum2).zip(&x0) {
            let mean = m1 / n;
            let var = (m2 - n * mean * mean) / (n - 1.0);
            let se_mean = (var_true / n).sqrt();
            let se_var = var_true * (2.0 / (n - 1.0)).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * x).abs() / se_mean)
                .max((var - var_true).abs() / se_var);
        }
    }
    let dt = t0.elapsed();
    let msg = format!(
        "worst deviation {worst:.2} SE (tol {FORWARD_SE}), {:.2}s (budget {}s)",
        dt.as_secs_f64(),
        FORWARD_BUDGET.as_secs()
    );
    if worst < FORWARD_SE && dt < FORWARD_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Reverse chain driven by the noise actually present in the current state,
/// z = 0; and `estimate_x0` with the true noise at every t.
fn criterion_4() -> Outcome {
    let s = sched();
    let mut r = rng::seeded(41);
    let n = 256;
    let truth: Array2<f64> = rng::normal_matrix::<f64, _>(&mut r, n, 3) * 0.1;
    let mut d: Array2<f64> = rng::normal_matrix(&mut r, n, 3);
    let mut d1 = d.clone();
    for t in (1..=s.t_max()).rev() {
        let eps = (&d - &(&truth * s.alpha_bar(t).sqrt())) / (1.0 - s.alpha_bar(t)).sqrt();
        if t == 1 {
            d1 = d.clone();
        }
        d = posterior_step(&d, &eps, t, None, &s).map_err(|e| e.to_string())?;
    }
    let maxabs = |a: &Array2<f64>| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = maxabs(&(&d - &truth));
    // the t = 1 step is (d1 - sqrt(1 - a1) eps) / sqrt(a1); each of its few
    // operations adds at most one rounding of the operands' magnitude
    let bound = 16.0 * U * (maxabs(&d1) + maxabs(&truth)) / s.alpha(1).sqrt();

    let mut x0_err: f64 = 0.0;
    for t in 1..=s.t_max() {
        let eps: Array2<f64> = rng::normal_matrix(&mut r, n, 3);
        let xt = forward_sample(&truth, t, &eps, &s).map_err(|e| e.to_string())?;
        let est = estimate_x0(&xt, &eps, t, &s).map_err(|e| e.to_string())?;
        x0_err = x0_err.max(maxabs(&(&est - &truth)));
    }
    let msg = format!(
        "chain err {err:.2e} (bound {bound:.2e}); estimate_x0 err {x0_err:.2e} (tol {X0_TOL:e})"
    );
    if err < bound && x0_err < X0_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn brute_knn(query: &Cloud, reference: &Cloud, k: usize) -> Vec<Vec<usize>> {
    query
        .points()
        .iter()
        .map(|&q| {
            let mut idx: Vec<usize> = (0..reference.len()).collect();
            idx.sort_by(|&a, &b| {
                let (da, db) = (
                    q.dist_squared(reference.points()[a]),
                    q.dist_squared(reference.points()[b]),
                );
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        })
        .collect()
}

/// kNN against an exhaustive scan on 200 instances; half use a coarse
/// integer grid so distance ties and duplicate points are common.
fn criterion_5() -> Outcome {
    let mut r = rng::seeded(51);
    for inst in 0..200 {
        let m = r.random_range(1..=2000);
        let q = r.random_range(1..=64);
        let k = r.random_range(1..=16.min(m));
        let grid = inst % 2 == 0;
        let mut draw = |count: usize| {
            let pts = (0..count)
                .map(|_| {
                    let mut c = || {
                        if grid {
                            r.random_range(-3..=3) as f64
                        } else {
                            rng::uniform(&mut r, -1.0, 1.0)
                        }
                    };
                    Point3::new(c(), c(), c())
                })
                .collect();
            PointCloud::new(pts).unwrap()
        };
        let reference = draw(m);
        let query = draw(q);
        let got = knn(&query, &reference, k).map_err(|e| e.to_string())?;
        if got != brute_knn(&query, &reference, k) {
            return Err(format!(
                "instance {inst} (|ref| {m}, k {k}, grid {grid}) differs"
            ));
        }
    }
    Ok("200/200 instances identical, including tie order".into())
}

/// AUROC counts against the O(n^2) pair count on 50 instances; exact
/// symmetry under label flipping.
fn criterion_6() -> Outcome {
    let mut r = rng::seeded(61);
    for inst in 0..50 {
        let n = r.random_range(2..=1000);
        let tie_heavy = inst % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tie_heavy {
                    r.random_range(0..4) as f64
                } else {
                    r.random::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins2, mut pairs2) = (0u128, 0u128);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs2 += 2;
                wins2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let counts = mann_whitney_counts(&scores, &labels).map_err(|e| e.to_string())?;
        if counts != (wins2, pairs2) {
            return Err(format!(
                "instance {inst}: counts {counts:?} vs oracle {:?}",
                (wins2, pairs2)
            ));
        }
        let a = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        if a != auroc_from_counts::<f64>(wins2, pairs2)
            || (a - wins2 as f64 / pairs2 as f64).abs() > f64::EPSILON
        {
            return Err(format!(
                "instance {inst}: auroc {a} vs oracle {wins2}/{pairs2}"
            ));
        }
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = auroc(&scores, &flipped).unwrap();
        if a + b != 1.0 {
            return Err(format!("instance {inst}: {a} + {b} != 1"));
        }
    }
    Ok("50/50 instances match the pair-count oracle; symmetry exact".into())
}

/// Patch-Gen invariants over 500 seeded runs.
fn criterion_7() -> Outcome {
    let mut r = rng::seeded(71);
    let ratios = [(1, 32), (1, 16), (1, 8), (3, 64), (1, 1000), (7, 10)];
    for run in 0..500u64 {
        let n = r.random_range(64..=2048);
        let (a, b) = ratios[r.random_range(0..ratios.len())];
        let ratio = SelectionRatio::new(a, b).unwrap();
        let pc = sphere(n, 1000 + run);
        let cfg = PatchGenConfig {
            selection_ratio: ratio,
            rotate: r.random_bool(0.5),
            ..PatchGenConfig::default()
        }
        .with_seed(run);
        let fail = |m: String| Err(format!("run {run} (n {n}, ratio {ratio}): {m}"));
        let s = patch_gen(&pc, &cfg).map_err(|e| e.to_string())?;
        if s.anomalous.len() != n || s.target.len() != n {
            return fail("point count changed".into());
        }
        let want = (a as usize * n).div_ceil(b as usize);
        let masked = s.defect_mask.iter().filter(|&&m| m).count();
        let moved = (0..n)
            .filter(|&i| s.anomalous.points()[i] != s.target.points()[i])
            .count();
        if masked != want || moved != want {
            return fail(format!("{masked} masked / {moved} moved, want {want}"));
        }
        if (0..n).any(|i| !s.defect_mask[i] && s.anomalous.points()[i] != s.target.points()[i]) {
            return fail("an unmasked point moved".into());
        }
        for i in 0..n {
            let (p, g, t) = (
                s.anomalous.points()[i],
                s.gt_displacement[i],
                s.target.points()[i],
            );
            let back = p + g;
            let tol = 2.0 * U * t.max_abs().max(p.max_abs());
            if (back - t).max_abs() > tol {
                return fail(format!("anomalous + gt misses target at {i}"));
            }
        }
        let bulge = patch_gen(
            &pc,
            &PatchGenConfig {
                kind: Some(DefectKind::Bulge),
                ..cfg.clone()
            },
        )
        .unwrap();
        let sink = patch_gen(
            &pc,
            &PatchGenConfig {
                kind: Some(DefectKind::Sink),
                ..cfg.clone()
            },
        )
        .unwrap();
        if bulge
            .gt_displacement
            .iter()
            .zip(&sink.gt_displacement)
            .any(|(x, y)| *x != -*y)
        {
            return fail("bulge and sink are not exact negations".into());
        }
        if patch_gen(&pc, &cfg).unwrap() != s {
            return fail("rerun differs".into());
        }
    }
    Ok("500/500 runs: count kept, ceil(ratio*N) moved, rest exact, bulge = -sink, reruns identical".into())
}

struct DeskRun {
    i_auroc: f64,
    p_auroc: f64,
    checkpoint: Vec<u8>,
    recon_mse: BTreeMap<usize, f64>,
    elapsed: Duration,
}

fn desk_run(dir: &std::path::Path) -> Result<DeskRun, String> {
    let t0 = Instant::now();
    let class = SyntheticClass::default();
    let cfg = TrainConfig::desk();
    let m = build_synthetic_dataset(dir, &class).map_err(|e| e.to_string())?;
    let m = DatasetManifest::load(&m.manifest_path()).map_err(|e| e.to_string())?;
    let pool = m.load_train::<f64>().map_err(|e| e.to_string())?;
    let (ck, history) = train(&pool, &cfg, None, None).map_err(|e| e.to_string())?;
    let test = m.load_test::<f64>().map_err(|e| e.to_string())?;
    let ev = evaluate(&test, &ck, DEFAULT_K, 0).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        i_auroc: ev.i_auroc,
        p_auroc: ev.p_auroc,
        checkpoint: ck.to_bytes(),
        recon_mse: history.iter().map(|h| (h.iteration, h.recon_mse)).collect(),
        elapsed: t0.elapsed(),
    })
}

fn criterion_8(run: &DeskRun) -> Outcome {
    let msg = format!(
        "I-AUROC {:.4} (min {MIN_I_AUROC}), P-AUROC {:.4} (min {MIN_P_AUROC}), {:.0}s (budget {}s)",
        run.i_auroc,
        run.p_auroc,
        run.elapsed.as_secs_f64(),
        DESK_BUDGET.as_secs()
    );
    if run.i_auroc >= MIN_I_AUROC && run.p_auroc >= MIN_P_AUROC && run.elapsed <= DESK_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_9(a: &DeskRun, b: &DeskRun) -> Outcome {
    let same = a.checkpoint == b.checkpoint
        && a.i_auroc.to_bits() == b.i_auroc.to_bits()
        && a.p_auroc.to_bits() == b.p_auroc.to_bits();
    let msg = format!(
        "checkpoint {} bytes, identical: {}; AUROCs identical: {}",
        a.checkpoint.len(),
        a.checkpoint == b.checkpoint,
        same
    );
    if same {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_10(run: &DeskRun) -> Outcome {
    let last = *run.recon_mse.keys().last().ok_or("no metrics")?;
    let (early, late) = (run.recon_mse[&50], run.recon_mse[&last]);
    let msg = format!(
        "recon_mse iter 50 {early:.4e}, iter {last} {late:.4e}, ratio {:.3} (max {RECON_RATIO})",
        late / early
    );
    if late < RECON_RATIO * early {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut line = |id: u32, outcome: Outcome| match outcome {
        Ok(m) => println!("criterion {id:>2}: PASS  {m}"),
        Err(m) => {
            failed += 1;
            println!("criterion {id:>2}: FAIL  {m}");
        }
    };
    println!("criterion  1: INFO  published full-dataset AUROCs are reference points only; not reproducible at desk scale");
    line(2, criterion_2());
    line(3, criterion_3());
    line(4, criterion_4());
    line(5, criterion_5());
    line(6, criterion_6());
    line(7, criterion_7());
    if std::env::var_os("DIFFAD_ACCEPTANCE_FULL").is_some_and(|v| v == "1") {
        let dir = tempfile::tempdir().expect("temp dir");
        let runs = desk_run(&dir.path().join("a"))
            .and_then(|a| desk_run(&dir.path().join("b")).map(|b| (a, b)));
        match runs {
            Ok((a, b)) => {
                line(8, criterion_8(&a));
                line(9, criterion_9(&a, &b));
                line(10, criterion_10(&a));
            }
            Err(e) => {
                for id in 8..=10 {
                    line(id, Err(format!("desk run failed: {e}")));
                }
            }
        }
    } else {
        for id in 8..=10 {
            println!(
                "criterion {id:>2}: SKIP  desk-scale training run; set DIFFAD_ACCEPTANCE_FULL=1"
            );
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
