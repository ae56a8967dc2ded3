//! Point-cloud files, dataset layout and synthetic shapes.

mod dataset;
mod ply;
mod shapes;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::geom::GeomError;
use crate::patchgen::PatchGenError;

pub use dataset::{
    build_synthetic_dataset, DatasetManifest, ManifestEntry, Split, SyntheticClass, MANIFEST_FILE,
    MANIFEST_HEADER,
};
pub use ply::{load_ply, read_ply, save_anomaly_map, save_ply, PlyData};
pub use shapes::{gen_shape, sample_surface, Shape, SyntheticShapeSpec, MIN_SHAPE_POINTS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported format {format:?} (only ascii PLY is supported)")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("cannot write an empty cloud")]
    EmptyCloud,
    #[error("{what}: expected {expected} values, found {found}")]
    ChannelLength {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest lists missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    PatchGen(#[from] PatchGenError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
