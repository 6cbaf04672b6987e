//! Expected angle difference between two index-corresponded clouds.
//!
//! For a triple of distinct indices `(a, b, c)` the vertex angle is
//! `∠P_b P_a P_c`; the metric is the mean absolute difference of that angle
//! between the two clouds. Exact mode enumerates every ordered triple,
//! Monte-Carlo mode samples them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{self, Vec3};

/// Largest cloud accepted by [`ead_exact`].
pub const DEFAULT_EXACT_CAP: usize = 64;

/// Triples drawn per pair when no budget is given.
pub const DEFAULT_TRIPLES: usize = 10_000;

/// Attempts allowed per requested sample before giving up on degeneracy.
pub const RESAMPLE_FACTOR: usize = 100;

/// Two points closer than this are treated as coincident.
pub const COINCIDENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EadMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EadEstimate {
    /// Radians in `[0, π]`.
    pub value: f64,
    /// Standard error of `value`; zero in exact mode.
    pub stderr: f64,
    pub samples: usize,
    pub mode: EadMode,
}

pub fn angle_diff(theta: f64, theta_prime: f64) -> f64 {
    (theta - theta_prime).abs()
}

/// Angle at `a` between the rays towards `b` and `c`, or `None` when either
/// ray has (numerically) zero length.
pub fn vertex_angle(a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let u = linalg::sub(b, a);
    let v = linalg::sub(c, a);
    let tol = COINCIDENCE_TOL * linalg::norm(a).max(1.0);
    if linalg::norm(u) <= tol || linalg::norm(v) <= tol {
        return None;
    }
    Some(linalg::norm(linalg::cross(u, v)).atan2(linalg::dot(u, v)))
}

fn triple_diff(p: &[Vec3], q: &[Vec3], [a, b, c]: [usize; 3]) -> Option<f64> {
    let t = vertex_angle(p[a], p[b], p[c])?;
    let t2 = vertex_angle(q[a], q[b], q[c])?;
    Some(angle_diff(t, t2))
}

fn check_pair(p: &PointCloud, q: &PointCloud) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    if p.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "EAD needs at least three points, got {}",
            p.len()
        )));
    }
    Ok(())
}

/// Mean over all ordered triples of distinct indices.
pub fn ead_exact(p: &PointCloud, q: &PointCloud) -> Result<EadEstimate> {
    ead_exact_capped(p, q, DEFAULT_EXACT_CAP)
}

pub fn ead_exact_capped(p: &PointCloud, q: &PointCloud, cap: usize) -> Result<EadEstimate> {
    check_pair(p, q)?;
    let n = p.len();
    if n > cap {
        return Err(Error::InvalidInput(format!(
            "exact EAD is limited to {cap} points, got {n}"
        )));
    }
    let (pp, qq) = (p.points(), q.points());
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                if a == b || b == c || a == c {
                    continue;
                }
                sum += triple_diff(pp, qq, [a, b, c]).ok_or(Error::DegenerateTriple { a, b, c })?;
                count += 1;
            }
        }
    }
    Ok(EadEstimate {
        value: sum / count as f64,
        stderr: 0.0,
        samples: count,
        mode: EadMode::Exact,
    })
}

/// Draws a uniformly random ordered triple of distinct indices below `n`.
pub fn draw_triple(rng: &mut impl Rng, n: usize) -> [usize; 3] {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut c = rng.gen_range(0..n - 2);
    if c >= lo {
        c += 1;
    }
    if c >= hi {
        c += 1;
    }
    [a, b, c]
}

/// Monte-Carlo estimate from `samples` uniformly drawn triples.
///
/// Triples that are degenerate in either cloud are redrawn; after
/// `RESAMPLE_FACTOR * samples` draws in total the estimator gives up.
pub fn ead_mc(p: &PointCloud, q: &PointCloud, samples: usize, seed: u64) -> Result<EadEstimate> {
    check_pair(p, q)?;
    if samples == 0 {
        return Err(Error::InvalidInput("EAD needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pp, qq) = (p.points(), q.points());
    let limit = RESAMPLE_FACTOR * samples;
    let mut attempts = 0usize;
    let (mut mean, mut m2) = (0.0, 0.0);
    let mut k = 0usize;
    while k < samples {
        if attempts == limit {
            return Err(Error::TooManyDegenerateTriples { attempts });
        }
        attempts += 1;
        let Some(x) = triple_diff(pp, qq, draw_triple(&mut rng, p.len())) else {
            continue;
        };
        // Welford update
        k += 1;
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let stderr = if samples > 1 {
        (m2 / (samples - 1) as f64).sqrt() / (samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(EadEstimate {
        value: mean,
        stderr,
        samples,
        mode: EadMode::MonteCarlo,
    })
}

/// Exact when the cloud is small enough, Monte-Carlo otherwise.
pub fn ead(p: &PointCloud, q: &PointCloud, samples: usize, seed: u64) -> Result<EadEstimate> {
    if p.len() <= DEFAULT_EXACT_CAP {
        ead_exact(p, q)
    } else {
        ead_mc(p, q, samples, seed)
    }
}
