//! Voxelwise segmentation of enhancing lesions in 4D dynamic volumes.
//!
//! The pipeline decomposes per-voxel time curves into independent temporal
//! sources (FastICA), classifies voxels with a kernel SVM, and controls the
//! false-positive rate by translating the SVM decision boundary into the
//! positive class. A deterministic synthetic phantom generator, classical
//! SER baselines and a full evaluation suite make the whole pipeline
//! verifiable without clinical data.

pub mod baselines;
pub mod error;
pub mod ica;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod svm;
pub mod volume;

pub use error::{Error, Result};
