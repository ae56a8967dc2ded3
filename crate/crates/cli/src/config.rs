//! Run configuration: a TOML file layered over a preset, then flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use diffad::dataio::SyntheticClass;
use diffad::detect::DEFAULT_K;
use diffad::patchgen::{DefectKind, PatchGenConfig, SelectionRatio};
use diffad::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Training settings from the reference setup (batch 128, 40k iterations, 2048 points).
    Paper,
    /// Settings sized for one desktop machine.
    #[default]
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Neighbourhood size for point-cluster scores.
    pub k: usize,
    /// Base seed; sample `i` reconstructs with `derive_seed(seed, i)`.
    pub seed: u64,
    /// Centre and scale each input before detection.
    pub normalize: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
}

/// Fully resolved settings for every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub paths: Paths,
    pub synth: SyntheticClass,
    pub augment: PatchGenConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            paths: Paths::default(),
            synth: SyntheticClass::default(),
            augment: PatchGenConfig::default(),
            train: match preset {
                Preset::Paper => TrainConfig::default(),
                Preset::Desk => TrainConfig::desk(),
            },
            detect: DetectConfig::default(),
        }
    }

    /// Preset defaults with the file's tables merged over them. Unknown keys
    /// are rejected.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| {
                CliError::Config(format!("preset: {}", e.message()))
            })?,
        };
        let base = toml::Table::try_from(Self::preset(preset))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let merged = merge(base, user, "");
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::preset(Preset::default())),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.train.validate().map_err(|e| cfg(&e))?;
        self.augment.validate().map_err(|e| cfg(&e))?;
        self.synth.shape.validate().map_err(|e| cfg(&e))?;
        self.synth.patchgen.validate().map_err(|e| cfg(&e))?;
        if self.synth.n_train == 0
            || self.synth.n_test_normal == 0
            || self.synth.n_test_anomalous == 0
        {
            return Err(CliError::Config(
                "synth: every split count must be >= 1".into(),
            ));
        }
        if self.detect.k == 0 {
            return Err(CliError::Config("detect.k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.seed {
            self.synth.seed = s;
            self.augment.seed = s;
            self.train.seed = s;
            self.detect.seed = s;
        }
        for pg in [
            &mut self.synth.patchgen,
            &mut self.augment,
            &mut self.train.patchgen,
        ] {
            if let Some(r) = o.ratio {
                pg.selection_ratio = r;
            }
            if let Some(s) = o.scale {
                pg.scale = s;
            }
            if let Some(k) = o.kind {
                pg.kind = Some(k);
            }
        }
        if let Some(v) = o.k {
            self.detect.k = v;
        }
        if let Some(v) = o.steps {
            self.train.schedule.steps = v;
        }
        if let Some(v) = o.iterations {
            self.train.iterations = v;
        }
        if let Some(v) = o.batch {
            self.train.batch_size = v;
        }
        if o.normalize {
            self.detect.normalize = true;
        }
        for (slot, v) in [
            (&mut self.paths.out, &o.out),
            (&mut self.paths.manifest, &o.manifest),
            (&mut self.paths.checkpoint, &o.checkpoint),
            (&mut self.paths.input, &o.input),
            (&mut self.paths.scores, &o.scores),
        ] {
            if v.is_some() {
                slot.clone_from(v);
            }
        }
        self.validate()
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self)
            .map_err(|e| CliError::Config(format!("cannot encode the resolved config: {e}")))
    }
}

/// Values given on the command line; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub ratio: Option<SelectionRatio>,
    pub scale: Option<f64>,
    pub kind: Option<DefectKind>,
    pub steps: Option<usize>,
    pub iterations: Option<usize>,
    pub batch: Option<usize>,
    pub normalize: bool,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub scores: Option<PathBuf>,
}

/// Recursive table merge; `over` wins. Keys absent from `base` are kept so
/// deserialization can reject them by name.
fn merge(mut base: toml::Table, over: toml::Table, prefix: &str) -> toml::Table {
    for (k, v) in over {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let merged = match (base.remove(&k), v) {
            // tagged enums (such as the shape) are replaced whole when the tag changes
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if same_tag(&b, &o) => {
                toml::Value::Table(merge(b, o, &path))
            }
            (_, v) => v,
        };
        base.insert(k, merged);
    }
    base
}

fn same_tag(b: &toml::Table, o: &toml::Table) -> bool {
    match (b.get("kind"), o.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}
