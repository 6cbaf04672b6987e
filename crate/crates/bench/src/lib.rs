//! Shared inputs for the pointtree benchmarks.

use pointtree::data::{generate, ShapeKind, ShapeSpec};
use pointtree::PointCloud;

/// An anisotropic cloud with well-separated principal axes.
pub fn stretched_cloud(n: usize, seed: u64) -> PointCloud {
    generate(ShapeSpec::new(ShapeKind::RandomUniform, n, seed))
        .and_then(|c| c.map_points(|p| [3.0 * p[0], 1.5 * p[1], 0.6 * p[2]]))
        .expect("valid benchmark cloud")
}
