//! Deterministic three-component PCA and the pre-alignment built on it.
//!
//! Directions come from a cyclic Jacobi eigensolve of the scatter matrix
//! `PᵀP` of the centered cloud, with `Σ_k = sqrt(λ_k)`. Every direction is
//! oriented by a fixed sign rule so that identical inputs always give
//! identical trees and pre-aligned clouds:
//!
//! 1. the third central moment of the projections is made non-negative;
//! 2. if that moment is negligible, the largest-magnitude component is made positive;
//! 3. if magnitudes tie, the first nonzero component is made positive.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{self, Mat3, Vec3};

/// Rank threshold on `Σ₃ / Σ₁`.
pub const RANK_EPS: f64 = 1e-9;

/// Relative magnitude below which the third-moment sign statistic is ignored.
pub const SIGN_MOMENT_EPS: f64 = 1e-9;

/// Default iteration cap for [`iterative_prealign`].
pub const DEFAULT_MAX_ITER: usize = 20;

/// Tolerance of the "directions are coordinate axes" convergence test.
pub const AXIS_CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDecomposition {
    /// Row `i` holds the scores of point `i`, i.e. `U` with `P - c = U·diag(Σ)·Vᵀ`.
    pub scores: Vec<Vec3>,
    /// Non-increasing and non-negative.
    pub singular_values: Vec3,
    /// Orthonormal principal directions stored as columns of `V`.
    pub directions: Mat3,
    pub centroid: Vec3,
    /// Set when `Σ₃ ≤ RANK_EPS·Σ₁` or fewer than three points were given.
    pub rank_deficient: bool,
}

impl PcaDecomposition {
    pub fn direction(&self, k: usize) -> Vec3 {
        linalg::column(&self.directions, k)
    }

    /// `U·diag(Σ)·Vᵀ`, i.e. the centered cloud.
    pub fn reconstruct(&self) -> Vec<Vec3> {
        self.scores
            .iter()
            .map(|u| {
                let mut p = [0.0; 3];
                for (k, &uk) in u.iter().enumerate() {
                    let v = self.direction(k);
                    p = linalg::add(p, linalg::scale(v, uk * self.singular_values[k]));
                }
                p
            })
            .collect()
    }
}

struct Directions {
    centroid: Vec3,
    singular_values: Vec3,
    directions: Mat3,
}

fn mean(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        c = linalg::add(c, *p);
    }
    linalg::scale(c, 1.0 / points.len() as f64)
}

fn principal_directions(points: &[Vec3]) -> Result<Directions> {
    if points.is_empty() {
        return Err(Error::DegenerateCloud("empty point set"));
    }
    let centroid = mean(points);
    let mut scatter = [[0.0; 3]; 3];
    let mut scale = 0.0f64;
    for p in points {
        let q = linalg::sub(*p, centroid);
        for i in 0..3 {
            scale = scale.max(p[i].abs());
            for j in i..3 {
                scatter[i][j] += q[i] * q[j];
            }
        }
    }
    let eig = linalg::sym_eigen3(&scatter);
    let singular_values = eig.values.map(|l| l.max(0.0).sqrt());
    if singular_values[0] == 0.0 || singular_values[0] <= 1e-12 * scale * (points.len() as f64).sqrt() {
        return Err(Error::DegenerateCloud("covariance is numerically zero"));
    }

    let mut directions = eig.vectors;
    for k in 0..3 {
        let v = linalg::column(&directions, k);
        if orientation(points, centroid, v) < 0.0 {
            for row in directions.iter_mut() {
                row[k] = -row[k];
            }
        }
    }
    Ok(Directions {
        centroid,
        singular_values,
        directions,
    })
}

/// +1 or -1: the sign that orients `v` under the crate's sign rule.
fn orientation(points: &[Vec3], centroid: Vec3, v: Vec3) -> f64 {
    let (mut moment, mut magnitude) = (0.0, 0.0);
    for p in points {
        let t = linalg::dot(linalg::sub(*p, centroid), v);
        moment += t * t * t;
        magnitude += (t * t * t).abs();
    }
    if moment.abs() > SIGN_MOMENT_EPS * magnitude {
        return moment.signum();
    }
    let largest = v.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let near = |c: f64| (c.abs() - largest).abs() <= 1e-12 * largest;
    let candidates: Vec<f64> = v.iter().copied().filter(|&c| near(c)).collect();
    if candidates.len() == 1 {
        return candidates[0].signum();
    }
    v.iter().find(|c| **c != 0.0).map(|c| c.signum()).unwrap_or(1.0)
}

fn scores_with(points: &[Vec3], d: &Directions, divisors: Vec3) -> Vec<Vec3> {
    points
        .iter()
        .map(|p| {
            let q = linalg::sub(*p, d.centroid);
            let mut u = [0.0; 3];
            for k in 0..3 {
                if divisors[k] > 0.0 {
                    u[k] = linalg::dot(q, linalg::column(&d.directions, k)) / divisors[k];
                }
            }
            u
        })
        .collect()
}

/// PCA of the centered cloud.
pub fn pca(cloud: &PointCloud) -> Result<PcaDecomposition> {
    pca_points(cloud.points())
}

pub fn pca_points(points: &[Vec3]) -> Result<PcaDecomposition> {
    let d = principal_directions(points)?;
    let scores = scores_with(points, &d, d.singular_values);
    let rank_deficient = points.len() < 3 || d.singular_values[2] <= RANK_EPS * d.singular_values[0];
    Ok(PcaDecomposition {
        scores,
        singular_values: d.singular_values,
        directions: d.directions,
        centroid: d.centroid,
        rank_deficient,
    })
}

/// Unit normal of the division plane: the oriented first principal direction.
pub fn choose_division_plane(points: &[Vec3]) -> Result<Vec3> {
    if points.len() < 2 {
        return Err(Error::DegenerateCloud("need at least two points to split"));
    }
    let d = principal_directions(points)?;
    let w = linalg::column(&d.directions, 0);
    Ok(linalg::scale(w, 1.0 / linalg::norm(w)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrealignOptions {
    pub rank_eps: f64,
    /// Replace a too-small `Σ₃` by `rank_eps·Σ₁` instead of failing.
    pub planar_fallback: bool,
}

impl Default for PrealignOptions {
    fn default() -> Self {
        Self {
            rank_eps: RANK_EPS,
            planar_fallback: false,
        }
    }
}

/// Replaces the centered cloud by its PCA scores `U`.
pub fn prealign(cloud: &PointCloud) -> Result<PointCloud> {
    prealign_with(cloud, PrealignOptions::default())
}

pub fn prealign_with(cloud: &PointCloud, opts: PrealignOptions) -> Result<PointCloud> {
    let d = principal_directions(cloud.points())?;
    let sv = d.singular_values;
    let floor = opts.rank_eps * sv[0];
    let mut divisors = sv;
    if sv[2] <= floor {
        if !opts.planar_fallback {
            return Err(Error::RankDeficient {
                ratio: sv[2] / sv[0],
                threshold: opts.rank_eps,
            });
        }
        for s in divisors.iter_mut().skip(1) {
            *s = s.max(floor);
        }
    }
    let scores = scores_with(cloud.points(), &d, divisors);
    cloud.map_points_from(scores)
}

impl PointCloud {
    fn map_points_from(&self, points: Vec<Vec3>) -> Result<PointCloud> {
        let mut it = points.into_iter();
        self.map_points(|_| it.next().expect("one score row per point"))
    }
}

/// True iff every column of `v` is ±e_k for distinct k, within `tol`.
pub fn is_signed_permutation(v: &Mat3, tol: f64) -> bool {
    let mut used = [false; 3];
    for k in 0..3 {
        let col = linalg::column(v, k);
        let Some(axis) = (0..3).find(|&i| (col[i].abs() - 1.0).abs() <= tol) else {
            return false;
        };
        if used[axis] || (0..3).any(|i| i != axis && col[i].abs() > tol) {
            return false;
        }
        used[axis] = true;
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativePrealign {
    pub cloud: PointCloud,
    /// Number of align-and-rescale passes that were applied.
    pub iterations: usize,
    /// Whether the principal axes settled onto the coordinate axes.
    pub converged: bool,
}

/// Alternates PCA alignment with per-axis rescaling to unit mean absolute
/// coordinate, stopping once the principal directions are the coordinate axes.
pub fn iterative_prealign(cloud: &PointCloud, max_iter: usize) -> Result<IterativePrealign> {
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }
    let mut current = cloud.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let d = principal_directions(current.points())?;
        if is_signed_permutation(&d.directions, AXIS_CONVERGENCE_TOL) {
            converged = true;
            break;
        }
        iterations += 1;
        let aligned = prealign(&current)?;
        current = rescale_mean_abs(&aligned)?;
    }
    Ok(IterativePrealign {
        cloud: current,
        iterations,
        converged,
    })
}

/// Divides each axis by the mean absolute coordinate along it.
pub fn rescale_mean_abs(cloud: &PointCloud) -> Result<PointCloud> {
    let n = cloud.len() as f64;
    let mut f = [0.0; 3];
    for p in cloud.points() {
        for k in 0..3 {
            f[k] += p[k].abs();
        }
    }
    for fk in f.iter_mut() {
        *fk /= n;
        if *fk == 0.0 {
            return Err(Error::DegenerateCloud("an axis has zero extent"));
        }
    }
    cloud.map_points(|p| [p[0] / f[0], p[1] / f[1], p[2] / f[2]])
}
