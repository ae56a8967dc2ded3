//! Dataset manifests and the synthetic dataset builder.
//!
//! Layout: `<root>/<class>/{train,test}/<name>.ply` with the manifest at
//! `<root>/<class>/manifest.tsv`. Manifest paths are relative to the class
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{gen_shape, io_err, load_ply, save_ply, DataError, SyntheticShapeSpec};
use crate::detect::TestSample;
use crate::geom::PointCloud;
use crate::patchgen::{patch_gen, PatchGenConfig};
use crate::rng::{derive_seed, stream};
use crate::Real;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "path\tsplit\tobject_label\thas_point_labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the class directory.
    pub path: PathBuf,
    pub split: Split,
    pub object_label: bool,
    pub has_point_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_name: String,
    /// The class directory holding the manifest.
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn train(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.path.to_string_lossy().replace('\\', "/"),
                e.split.as_str(),
                u8::from(e.object_label),
                u8::from(e.has_point_labels)
            );
        }
        s
    }

    pub fn save(&self) -> Result<PathBuf, DataError> {
        let p = self.manifest_path();
        fs::write(&p, self.to_tsv()).map_err(io_err(&p))?;
        Ok(p)
    }

    /// Parses and validates a manifest; every listed file must exist.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let merr = |line: usize, message: String| DataError::Manifest {
            path: path.into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(merr(1, format!("header must be '{MANIFEST_HEADER}'"))),
        }
        let bit = |no: usize, v: &str, what: &str| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(merr(no, format!("{what} must be 0 or 1, got '{v}'"))),
        };
        let mut entries = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(merr(
                    no,
                    format!("expected 4 tab-separated fields, found {}", f.len()),
                ));
            }
            let split = match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(merr(
                        no,
                        format!("split must be train or test, got '{other}'"),
                    ))
                }
            };
            let object_label = bit(no, f[2], "object_label")?;
            if split == Split::Train && object_label {
                return Err(merr(no, "training samples must be normal".into()));
            }
            entries.push(ManifestEntry {
                path: f[0].into(),
                split,
                object_label,
                has_point_labels: bit(no, f[3], "has_point_labels")?,
            });
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let class_name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let m = Self {
            class_name,
            dir,
            entries,
        };
        if m.train().next().is_none() {
            return Err(merr(0, "no training samples".into()));
        }
        for e in &m.entries {
            let p = m.dir.join(&e.path);
            if !p.is_file() {
                return Err(DataError::MissingFile(p));
            }
        }
        Ok(m)
    }

    /// Training clouds in manifest order.
    pub fn load_train<T: Real>(&self) -> Result<Vec<PointCloud<T>>, DataError> {
        self.train()
            .map(|e| load_ply(&self.dir.join(&e.path)))
            .collect()
    }

    /// Test clouds in manifest order; ids are the manifest paths.
    pub fn load_test<T: Real>(&self) -> Result<Vec<TestSample<T>>, DataError> {
        self.test()
            .map(|e| {
                let mut cloud = load_ply(&self.dir.join(&e.path))?;
                if !e.has_point_labels {
                    cloud.set_labels(None)?;
                }
                Ok(TestSample {
                    id: e.path.to_string_lossy().into_owned(),
                    cloud,
                    anomalous: e.object_label,
                })
            })
            .collect()
    }
}

/// A synthetic class: one shape family and the split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticClass {
    pub name: String,
    /// Its `seed` is ignored; each cloud gets a derived one.
    pub shape: SyntheticShapeSpec,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Defects for anomalous test clouds; `seed` and `rotate` are ignored.
    pub patchgen: PatchGenConfig,
    pub seed: u64,
}

impl Default for SyntheticClass {
    fn default() -> Self {
        Self {
            name: "sphere".into(),
            shape: SyntheticShapeSpec::default(),
            n_train: 4,
            n_test_normal: 25,
            n_test_anomalous: 25,
            patchgen: PatchGenConfig::default(),
            seed: 0,
        }
    }
}

/// Writes train normals, test normals and defected test clouds (with point
/// labels) under `<root>/<name>/`, plus the manifest. Output bytes depend
/// only on `class`.
///
/// Test defects are applied without rotation so anomalous and normal test
/// clouds share one pose, and use a seed stream disjoint from training.
pub fn build_synthetic_dataset(
    root: &Path,
    class: &SyntheticClass,
) -> Result<DatasetManifest, DataError> {
    if class.n_train == 0 || class.n_test_normal == 0 || class.n_test_anomalous == 0 {
        return Err(DataError::InvalidSpec(
            "every split count must be >= 1".into(),
        ));
    }
    if class.name.is_empty() || class.name.contains(['/', '\\']) {
        return Err(DataError::InvalidSpec(format!(
            "invalid class name '{}'",
            class.name
        )));
    }
    class.shape.validate()?;
    class.patchgen.validate()?;
    let dir = root.join(&class.name);
    for sub in ["train", "test"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
    }
    let mut entries = Vec::new();
    let mut shape_index = 0u64;
    let mut next_shape = || -> Result<PointCloud<f64>, DataError> {
        let c = gen_shape(&class.shape.with_seed(derive_seed(class.seed, shape_index)));
        shape_index += 1;
        c
    };
    let mut put = |rel: String,
                   pc: &PointCloud<f64>,
                   split: Split,
                   object_label: bool|
     -> Result<(), DataError> {
        save_ply(pc, &dir.join(&rel), None)?;
        entries.push(ManifestEntry {
            path: rel.into(),
            split,
            object_label,
            has_point_labels: split == Split::Test,
        });
        Ok(())
    };
    for i in 0..class.n_train {
        put(
            format!("train/{i:03}.ply"),
            &next_shape()?,
            Split::Train,
            false,
        )?;
    }
    for i in 0..class.n_test_normal {
        let pc = next_shape()?;
        let labelled = PointCloud::with_labels(pc.points().to_vec(), vec![false; pc.len()])?;
        put(
            format!("test/good_{i:03}.ply"),
            &labelled,
            Split::Test,
            false,
        )?;
    }
    let defect_base = derive_seed(class.seed, stream::TEST_DEFECT);
    for i in 0..class.n_test_anomalous {
        let pc = next_shape()?;
        let cfg = PatchGenConfig {
            rotate: false,
            seed: derive_seed(defect_base, i as u64),
            ..class.patchgen.clone()
        };
        let aug = patch_gen(&pc, &cfg)?;
        put(
            format!("test/defect_{i:03}.ply"),
            &aug.anomalous,
            Split::Test,
            true,
        )?;
    }
    let m = DatasetManifest {
        class_name: class.name.clone(),
        dir,
        entries,
    };
    m.save()?;
    Ok(m)
}
