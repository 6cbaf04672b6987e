//! Point cloud values, canonical preprocessing and transform application.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Mat4, Vec3, IDENTITY3};

/// Default guard on projective homogeneous weights.
pub const DEFAULT_WEIGHT_GUARD: f64 = 1e-3;

/// An index-ordered set of 3D points with optional per-point labels.
///
/// The position of a point in the list is its stable identity. It is only
/// ever used for tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    labels: Option<Vec<u16>>,
    duplicate: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        Self::validate(&points)?;
        Ok(Self {
            points,
            labels: None,
            duplicate: None,
        })
    }

    pub fn with_labels(points: Vec<Vec3>, labels: Vec<u16>) -> Result<Self> {
        Self::validate(&points)?;
        if labels.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: labels.len(),
            });
        }
        Ok(Self {
            points,
            labels: Some(labels),
            duplicate: None,
        })
    }

    fn validate(points: &[Vec3]) -> Result<()> {
        if points.is_empty() {
            return Err(Error::InvalidInput(
                "point cloud must contain at least one point".into(),
            ));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Per-point flag set by padding; `None` when the cloud was never padded.
    pub fn duplicate_mask(&self) -> Option<&[bool]> {
        self.duplicate.as_deref()
    }

    pub fn is_duplicate(&self, i: usize) -> bool {
        self.duplicate.as_ref().is_some_and(|d| d[i])
    }

    pub(crate) fn extend_with_duplicates(&mut self, sources: &[usize]) {
        let n = self.points.len();
        let mut mask = self.duplicate.take().unwrap_or_else(|| vec![false; n]);
        for &s in sources {
            self.points.push(self.points[s]);
            if let Some(labels) = self.labels.as_mut() {
                labels.push(labels[s]);
            }
            mask.push(true);
        }
        self.duplicate = Some(mask);
    }

    /// Replaces every point, keeping labels and padding flags attached.
    pub fn map_points(&self, mut f: impl FnMut(Vec3) -> Vec3) -> Result<Self> {
        let points: Vec<Vec3> = self.points.iter().map(|&p| f(p)).collect();
        Self::validate(&points)?;
        Ok(Self {
            points,
            labels: self.labels.clone(),
            duplicate: self.duplicate.clone(),
        })
    }

    pub(crate) fn with_points_unchecked(&self, points: Vec<Vec3>) -> Self {
        debug_assert_eq!(points.len(), self.points.len());
        Self {
            points,
            labels: self.labels.clone(),
            duplicate: self.duplicate.clone(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            c = linalg::add(c, *p);
        }
        linalg::scale(c, 1.0 / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|&p| linalg::norm(p)).fold(0.0, f64::max)
    }

    fn max_abs_coordinate(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

/// Shifts the cloud so that its centroid sits at the origin.
pub fn center(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    cloud.with_points_unchecked(cloud.points.iter().map(|&p| linalg::sub(p, c)).collect())
}

/// Centers the cloud and scales it so the farthest point lies on the unit sphere.
pub fn unitize(cloud: &PointCloud) -> Result<PointCloud> {
    let scale = cloud.max_abs_coordinate();
    let centered = center(cloud);
    let r = centered.max_norm();
    if r == 0.0 || r <= 1e-12 * scale {
        return Err(Error::DegenerateCloud("all points coincide"));
    }
    let inv = 1.0 / r;
    let points = centered.points.iter().map(|&p| linalg::scale(p, inv)).collect();
    Ok(centered.with_points_unchecked(points))
}

/// Linear map plus translation, `p ↦ A·p + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: Mat3,
    pub shift: Vec3,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: IDENTITY3,
            shift: [0.0; 3],
        }
    }

    pub fn from_linear(linear: Mat3) -> Self {
        Self {
            linear,
            shift: [0.0; 3],
        }
    }

    pub fn new(linear: Mat3, shift: Vec3) -> Self {
        Self { linear, shift }
    }

    pub fn translation(shift: Vec3) -> Self {
        Self {
            linear: IDENTITY3,
            shift,
        }
    }

    /// Rotation (or any orthogonal matrix) followed by uniform scaling and a shift.
    pub fn similarity(orthogonal: Mat3, scale: f64, shift: Vec3) -> Self {
        let mut linear = orthogonal;
        for row in linear.iter_mut() {
            for c in row.iter_mut() {
                *c *= scale;
            }
        }
        Self { linear, shift }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        linalg::add(linalg::mat_vec(&self.linear, p), self.shift)
    }

    /// The transform that applies `self` first and `next` second.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        AffineTransform {
            linear: linalg::mat_mul(&next.linear, &self.linear),
            shift: next.apply_point(self.shift),
        }
    }

    pub fn determinant(&self) -> f64 {
        linalg::det(&self.linear)
    }

    /// True iff `AᵀA = s·I` for some `s > 0`, within 1e-9 relative to `s`.
    pub fn is_similarity(&self) -> bool {
        let ata = linalg::mat_mul(&linalg::transpose(&self.linear), &self.linear);
        let s = (ata[0][0] + ata[1][1] + ata[2][2]) / 3.0;
        if s <= 0.0 {
            return false;
        }
        let tol = 1e-9 * s.max(1.0);
        (0..3).all(|i| {
            (0..3).all(|j| {
                let want = if i == j { s } else { 0.0 };
                (ata[i][j] - want).abs() <= tol
            })
        })
    }
}

/// Homogeneous 4×4 map, `p ↦ dehomogenize(M·(p, 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveTransform {
    pub matrix: Mat4,
    /// Smallest admissible `|w|` of the homogeneous image.
    pub weight_guard: f64,
}

impl ProjectiveTransform {
    pub fn new(matrix: Mat4) -> Self {
        Self {
            matrix,
            weight_guard: DEFAULT_WEIGHT_GUARD,
        }
    }

    pub fn homogeneous(&self, p: Vec3) -> [f64; 4] {
        let h = [p[0], p[1], p[2], 1.0];
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(self.matrix.iter()) {
            *o = row.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn weight(&self, p: Vec3) -> f64 {
        self.homogeneous(p)[3]
    }

    pub fn min_abs_weight(&self, cloud: &PointCloud) -> f64 {
        cloud
            .points()
            .iter()
            .map(|&p| self.weight(p).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn apply_point(&self, p: Vec3) -> Option<Vec3> {
        let h = self.homogeneous(p);
        if h[3].abs() < self.weight_guard {
            return None;
        }
        Some([h[0] / h[3], h[1] / h[3], h[2] / h[3]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Affine(AffineTransform),
    Projective(ProjectiveTransform),
}

impl From<AffineTransform> for Transform {
    fn from(t: AffineTransform) -> Self {
        Transform::Affine(t)
    }
}

impl From<ProjectiveTransform> for Transform {
    fn from(t: ProjectiveTransform) -> Self {
        Transform::Projective(t)
    }
}

impl Transform {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match self {
            Transform::Affine(t) => cloud.map_points(|p| t.apply_point(p)),
            Transform::Projective(t) => {
                let mut points = Vec::with_capacity(cloud.len());
                for (index, &p) in cloud.points().iter().enumerate() {
                    match t.apply_point(p) {
                        Some(q) => points.push(q),
                        None => {
                            return Err(Error::NearInfiniteProjection {
                                index,
                                weight: t.weight(p),
                                guard: t.weight_guard,
                            })
                        }
                    }
                }
                PointCloud::validate(&points)?;
                Ok(cloud.with_points_unchecked(points))
            }
        }
    }

    /// Flattened matrix entries, used to record and compare sampled transforms.
    pub fn coefficients(&self) -> Vec<f64> {
        match self {
            Transform::Affine(t) => t.linear.iter().flatten().chain(t.shift.iter()).copied().collect(),
            Transform::Projective(t) => t.matrix.iter().flatten().copied().collect(),
        }
    }
}

/// Applies `transform` to every point; labels are carried unchanged.
pub fn apply(transform: impl Into<Transform>, cloud: &PointCloud) -> Result<PointCloud> {
    transform.into().apply(cloud)
}

/// Rotation about `axis` (need not be normalized) by `angle` radians.
pub fn rotation_about(axis: Vec3, angle: f64) -> Mat3 {
    let n = linalg::norm(axis);
    let [x, y, z] = linalg::scale(axis, 1.0 / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
