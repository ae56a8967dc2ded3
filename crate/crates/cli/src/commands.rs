//! One function per subcommand. Each writes its resolved config next to its
//! outputs before doing any work.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use diffad::checkpoint::CheckpointError;
use diffad::dataio::{
    build_synthetic_dataset, load_ply, read_ply, save_anomaly_map, save_ply, DatasetManifest,
};
use diffad::detect::{detect, evaluate_scores, sample_seed, AnomalyReport, TestSample};
use diffad::geom::{normalize_cloud, PointCloud};
use diffad::patchgen::patch_gen;
use diffad::rng::derive_seed;
use diffad::train::train as run_training;
use diffad::ModelCheckpoint;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const SCORES_HEADER: &str = "id\tobject_score\tlabel\tmap";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const EVAL_FILE: &str = "eval.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg
        .paths
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(io(&out))?;
    Ok(out)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| {
        CliError::Config(format!(
            "--{flag} is required (or set paths.{flag} in the config)"
        ))
    })
}

fn echo_config(cfg: &RunConfig, out: &Path, cmd: &str) -> Result<(), CliError> {
    let p = out.join(format!("{cmd}.resolved.toml"));
    fs::write(&p, cfg.to_toml()?).map_err(io(&p))
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CliError> {
    ModelCheckpoint::load(path).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Checkpoint(format!("{}: {io}", path.display())),
        other => CliError::Checkpoint(format!("{}: {other}", path.display())),
    })
}

/// A single `.ply` file, or every `.ply` directly inside a directory in
/// name order.
fn ply_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Io(format!("{}: no .ply files", input.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn maybe_normalize(pc: PointCloud<f64>, on: bool) -> Result<PointCloud<f64>, CliError> {
    if !on {
        return Ok(pc);
    }
    let (n, _) = normalize_cloud(&pc).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(n)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    echo_config(cfg, &out, "synth")?;
    let m = build_synthetic_dataset(&out, &cfg.synth)?;
    println!("{}", m.manifest_path().display());
    Ok(())
}

#[derive(Serialize)]
struct DefectMetadata<'a> {
    source: String,
    record: &'a diffad::patchgen::DefectRecord,
    defect_points: usize,
    /// Per selected point, the displacement that restores the target.
    gt_displacement: Vec<(usize, [f64; 3])>,
}

pub fn augment(cfg: &RunConfig) -> Result<(), CliError> {
    let input = required(&cfg.paths.input, "input")?;
    let out = out_dir(cfg)?;
    echo_config(cfg, &out, "augment")?;
    for (i, file) in ply_inputs(input)?.iter().enumerate() {
        let pc = load_ply(file)?;
        let pg = cfg
            .augment
            .with_seed(derive_seed(cfg.augment.seed, i as u64));
        let aug = patch_gen(&pc, &pg)?;
        let name = stem(file);
        let cloud_path = out.join(format!("{name}_anomalous.ply"));
        save_ply(&aug.anomalous, &cloud_path, None)?;
        let meta = DefectMetadata {
            source: file.to_string_lossy().into_owned(),
            record: &aug.record,
            defect_points: aug.defect_mask.iter().filter(|&&m| m).count(),
            gt_displacement: aug
                .defect_mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(j, _)| (j, aug.gt_displacement[j].to_array()))
                .collect(),
        };
        let meta_path = out.join(format!("{name}_defect.json"));
        let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&meta_path, json + "\n").map_err(io(&meta_path))?;
        println!(
            "{}\t{}\t{}",
            cloud_path.display(),
            aug.record.kind,
            meta.defect_points
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(required(&cfg.paths.manifest, "manifest")?)?;
    let out = out_dir(cfg)?;
    echo_config(cfg, &out, "train")?;
    let pool = manifest.load_train::<f64>()?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let log_path = out.join(METRICS_FILE);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(io(&log_path))?;
    let mut log = BufWriter::new(file);
    let result = run_training(&pool, &cfg.train, resume, Some(&mut log));
    log.flush().map_err(io(&log_path))?;
    let (ck, history) = result?;
    let ck_path = out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", ck_path.display())))?;
    if let Some(last) = history.last() {
        println!(
            "iteration {}\tnoise_loss {:e}\trecon_mse {:e}",
            last.iteration, last.noise_loss, last.recon_mse
        );
    }
    println!("{}", ck_path.display());
    Ok(())
}

struct DetectInput {
    id: String,
    cloud: PointCloud<f64>,
    label: Option<bool>,
}

fn map_name(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    match s.strip_suffix(".ply") {
        Some(b) => format!("{b}.ply"),
        None => format!("{s}.ply"),
    }
}

pub fn detect_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let ck = load_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let inputs: Vec<DetectInput> = match (&cfg.paths.manifest, &cfg.paths.input) {
        (Some(m), None) => DatasetManifest::load(m)?
            .load_test::<f64>()?
            .into_iter()
            .map(|s| DetectInput {
                id: s.id,
                cloud: s.cloud,
                label: Some(s.anomalous),
            })
            .collect(),
        (None, Some(input)) => ply_inputs(input)?
            .iter()
            .map(|f| {
                Ok(DetectInput {
                    id: stem(f),
                    cloud: load_ply(f)?,
                    label: None,
                })
            })
            .collect::<Result<_, CliError>>()?,
        _ => {
            return Err(CliError::Config(
                "give exactly one of --manifest or --input".into(),
            ))
        }
    };
    let out = out_dir(cfg)?;
    echo_config(cfg, &out, "detect")?;
    let maps = out.join("maps");
    fs::create_dir_all(&maps).map_err(io(&maps))?;
    let d = &cfg.detect;
    let reports: Vec<AnomalyReport<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<_, CliError> {
            let pc = maybe_normalize(s.cloud.clone(), d.normalize)?;
            Ok(detect(&pc, &ck, d.k, sample_seed(d.seed, i))?)
        })
        .collect::<Result<_, _>>()?;
    let mut table = format!("{SCORES_HEADER}\n");
    for (s, r) in inputs.iter().zip(&reports) {
        let rel = format!("maps/{}", map_name(&s.id));
        save_anomaly_map(&r.input, &out.join(&rel), &r.point_scores)?;
        let label = s.label.map_or("-".to_string(), |l| u8::from(l).to_string());
        let _ = writeln!(table, "{}\t{:?}\t{label}\t{rel}", s.id, r.object_score);
    }
    let p = out.join(SCORES_FILE);
    fs::write(&p, &table).map_err(io(&p))?;
    print!("{table}");
    Ok(())
}

struct ScoreRow {
    object_score: f64,
    map: PathBuf,
}

fn read_scores(path: &Path) -> Result<HashMap<String, ScoreRow>, CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let bad = |no: usize, m: &str| CliError::Io(format!("{}:{no}: {m}", path.display()));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if lines.next().map(|(_, h)| h) != Some(SCORES_HEADER) {
        return Err(bad(1, &format!("header must be '{SCORES_HEADER}'")));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = HashMap::new();
    for (no, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(no, "expected 4 tab-separated fields"));
        }
        let object_score = f[1]
            .parse()
            .map_err(|_| bad(no, "object_score is not a number"))?;
        if rows
            .insert(
                f[0].to_string(),
                ScoreRow {
                    object_score,
                    map: base.join(f[3]),
                },
            )
            .is_some()
        {
            return Err(bad(no, &format!("duplicate id '{}'", f[0])));
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct EvalResult {
    i_auroc: f64,
    p_auroc: f64,
    samples: usize,
    anomalous_samples: usize,
    points: usize,
    warnings: Vec<String>,
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(required(&cfg.paths.manifest, "manifest")?)?;
    let scores = read_scores(required(&cfg.paths.scores, "scores")?)?;
    let out = out_dir(cfg)?;
    echo_config(cfg, &out, "eval")?;
    let samples: Vec<TestSample<f64>> = manifest.load_test()?;
    let mut object = Vec::with_capacity(samples.len());
    let mut points = Vec::with_capacity(samples.len());
    for s in &samples {
        let row = scores
            .get(&s.id)
            .ok_or_else(|| CliError::Io(format!("no score row for test sample '{}'", s.id)))?;
        object.push(row.object_score);
        let map = read_ply::<f64>(&row.map)?;
        let p = map.scores.ok_or_else(|| {
            CliError::Io(format!("{}: no anomaly_score channel", row.map.display()))
        })?;
        points.push(p);
    }
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let s = evaluate_scores(&samples, &object, &refs)?;
    let result = EvalResult {
        i_auroc: s.i_auroc,
        p_auroc: s.p_auroc,
        samples: samples.len(),
        anomalous_samples: samples.iter().filter(|s| s.anomalous).count(),
        points: points.iter().map(Vec::len).sum(),
        warnings: s.warnings,
    };
    let p = out.join(EVAL_FILE);
    let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&p, json + "\n").map_err(io(&p))?;
    println!("metric\tvalue");
    println!("I-AUROC\t{:.6}", result.i_auroc);
    println!("P-AUROC\t{:.6}", result.p_auroc);
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
