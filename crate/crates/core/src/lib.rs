//! Transformation-robust point cloud processing on PCA-guided relaxed K-D trees.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod ead;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod linalg;
pub mod model;
pub mod pca;
pub mod sampler;

pub use ead::EadEstimate;
pub use error::{Error, Result};
pub use geometry::{AffineTransform, PointCloud, ProjectiveTransform, Transform};
pub use kdtree::{KdTree, NodeId, SplitRule};
pub use linalg::{Mat3, Vec3};
pub use model::{Model, ModelConfig, TrainConfig};
pub use pca::PcaDecomposition;
pub use sampler::{DistributionKind, Record, TransformDistribution};
