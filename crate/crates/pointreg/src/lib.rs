//! Keypoint-based point cloud registration with self-ensembling domain
//! adaptation.
//!
//! The pipeline aligns two keypoint clouds extracted from scalar volumes:
//! a structure-tensor detector proposes keypoints, an edge-convolution graph
//! network turns raw coordinates into per-point features, and differentiable
//! min-sum belief propagation matches fixed points against nearest-neighbor
//! candidate sets, reading out soft displacement vectors. Training runs
//! either supervised on labeled pairs or with a student/teacher consistency
//! scheme that adapts the feature extractor to an unlabeled domain.
//!
//! Modules follow the data flow: [`keypoints`] -> [`geometry`] -> [`gcn`] ->
//! [`lbp`] -> [`trainer`], with [`synthdata`] providing seeded benchmark
//! datasets, [`eval`] the registration metrics, and [`experiment`] the
//! file-level orchestration used by the CLI.

pub mod eval;
pub mod experiment;
pub mod gcn;
pub mod geometry;
pub mod keypoints;
pub mod lbp;
pub mod stream;
pub mod synthdata;
pub mod trainer;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("knn requires k < {n} points, got k = {k}")]
    KnnTooLarge { k: usize, n: usize },
    #[error("cloud of {n} points is too small ({required} required for {what})")]
    CloudTooSmall {
        n: usize,
        required: usize,
        what: &'static str,
    },
    #[error("{what}: expected {expected} rows, got {got}")]
    RowCountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid rotation matrix: {detail}")]
    InvalidRotation { detail: String },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Tape(#[from] tapegrad::Error),
    #[error("dataset is empty at {0}")]
    EmptyDataset(String),
    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("deformation stayed non-injective after {attempts} resamples")]
    Injectivity { attempts: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("volume dims {dims:?} below the minimum (8, 8, 8)")]
    VolumeTooSmall { dims: (usize, usize, usize) },
}

pub type Result<T> = std::result::Result<T, Error>;
