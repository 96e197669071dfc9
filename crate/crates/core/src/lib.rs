//! Distill per-view image features into a view-consistent continuous 3D
//! feature field from a handful of RGBD scans, then transfer an articulated
//! end-effector pose to a new scene by minimizing a feature-matching energy
//! over that field.
//!
//! The pipeline stages map onto the top-level modules:
//!
//! 1. [`scan`] — load scan bundles, back-project depth, lift per-pixel
//!    features onto points, merge views.
//! 2. [`refiner`] — train the per-point refinement MLP with a contrastive
//!    loss over cross-view correspondences; apply it frozen to new scenes.
//! 3. [`pruner`] — vote-based removal of feature-inconsistent points.
//! 4. [`field`] — inverse-squared-distance interpolation of point features
//!    with analytic spatial gradients.
//! 5. [`effector`] + [`optimizer`] — articulated end-effector model, energy
//!    terms, and the pose optimizer.
//!
//! [`synth`] generates fully synthetic scenes with ground truth for testing,
//! and [`config`] carries the file-driven pipeline configuration.

pub mod config;
pub mod effector;
pub mod field;
pub mod geometry;
pub mod optimizer;
pub mod pipeline;
pub mod pruner;
pub mod refiner;
pub mod scan;
pub mod synth;

mod binio;
mod seed;

pub use seed::derive_seed;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("query within {eps} m of data point {index}; field gradient is singular there")]
    Singular { index: usize, eps: f64 },
    #[error("no view pair has any correspondence closer than {max_dist} m")]
    InsufficientOverlap { max_dist: f64 },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("non-finite energy at iteration {iteration}")]
    NonFiniteEnergy { iteration: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
