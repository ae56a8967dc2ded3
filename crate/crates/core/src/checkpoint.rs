//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `DIFFADCK`, `u32` LE format version, `u64` LE header
//! length, UTF-8 JSON header, then every tensor listed in the header as
//! little-endian `f64` values in header order.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::model::{ModelError, ModelParams, TensorInfo, Widths};
use crate::train::{AdamConfig, AdamState, TrainConfig};
use crate::Real;

pub const MAGIC: &[u8; 8] = b"DIFFADCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint stores {stored} values, requested {requested}")]
    Precision {
        stored: String,
        requested: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to sample with, or continue training, a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub schedule: ScheduleConfig,
    /// Points per cloud the model was trained on.
    pub num_points: usize,
    pub config_digest: String,
    /// Completed training iterations.
    pub iteration: usize,
    pub train_config: Option<TrainConfig>,
    pub adam: Option<AdamState<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    widths: Widths,
    schedule: ScheduleConfig,
    num_points: usize,
    config_digest: String,
    iteration: usize,
    train_config: Option<TrainConfig>,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

impl<T: Real> Checkpoint<T> {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule<T>, CheckpointError> {
        self.schedule
            .build()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.params.tensor_infos();
        let mut tensors = params.clone();
        if self.adam.is_some() {
            for prefix in ["adam.m.", "adam.v."] {
                tensors.extend(params.iter().map(|t| TensorInfo {
                    name: format!("{prefix}{}", t.name),
                    shape: t.shape.clone(),
                }));
            }
        }
        let header = Header {
            dtype: T::NAME.to_string(),
            widths: self.params.widths().clone(),
            schedule: self.schedule,
            num_points: self.num_points,
            config_digest: self.config_digest.clone(),
            iteration: self.iteration,
            train_config: self.train_config.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |s: &[T]| {
            s.iter()
                .for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes()))
        };
        self.params.slices().into_iter().for_each(&mut put);
        if let Some(a) = &self.adam {
            a.m.iter().for_each(|s| put(s));
            a.v.iter().for_each(|s| put(s));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.dtype != T::NAME {
            return Err(CheckpointError::Precision {
                stored: header.dtype,
                requested: T::NAME,
            });
        }
        let expected = ModelParams::<T>::zeros(&header.widths)?.tensor_infos();
        let n_param = expected.len();
        let n_total = if header.adam.is_some() {
            3 * n_param
        } else {
            n_param
        };
        if header.tensors.len() != n_total || header.tensors[..n_param] != expected[..] {
            return Err(corrupt("tensor table does not match the widths"));
        }
        let mut data = &body[hlen..];
        let mut arrays = Vec::with_capacity(n_total);
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if data.len() < 8 * n {
                return Err(corrupt("truncated tensor data"));
            }
            let (chunk, rest) = data.split_at(8 * n);
            let values: Vec<T> = chunk
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            arrays.push(values);
            data = rest;
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let params = ModelParams::from_slices(&header.widths, &arrays[..n_param])?;
        let adam = header.adam.map(|a| AdamState {
            config: a.config,
            step: a.step,
            m: arrays[n_param..2 * n_param].to_vec(),
            v: arrays[2 * n_param..].to_vec(),
        });
        let ck = Self {
            params,
            schedule: header.schedule,
            num_points: header.num_points,
            config_digest: header.config_digest,
            iteration: header.iteration,
            train_config: header.train_config,
            adam,
        };
        ck.noise_schedule()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
