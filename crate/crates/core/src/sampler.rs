//! Random transformation distributions and transformed-dataset generation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ead;
use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, PointCloud, ProjectiveTransform, Transform, DEFAULT_WEIGHT_GUARD};
use crate::linalg::{self, Mat3, Mat4, Vec3};

/// Entries of a random affine are uniform on `(-1/√3, 1/√3)`.
pub const AFFINE_ENTRY_BOUND: f64 = 0.577_350_269_189_625_8;
pub const MIN_ABS_DET: f64 = 1e-6;
pub const MAX_ATTEMPTS: usize = 1000;
pub const DEFAULT_CANDIDATES: usize = 5000;
pub const DEFAULT_SCORING_TRIPLES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistributionKind {
    /// Always the identity; a test hook.
    Identity,
    /// Random rotation or reflection, uniform scale and shift.
    Similarity,
    Affine,
    AffineAggressive,
    Projective,
}

impl DistributionKind {
    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::Identity => "identity",
            DistributionKind::Similarity => "similarity",
            DistributionKind::Affine => "affine",
            DistributionKind::AffineAggressive => "affine-agg",
            DistributionKind::Projective => "projective",
        }
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => DistributionKind::Identity,
            "similarity" => DistributionKind::Similarity,
            "affine" => DistributionKind::Affine,
            "affine-agg" => DistributionKind::AffineAggressive,
            "projective" => DistributionKind::Projective,
            other => return Err(Error::InvalidInput(format!("unknown distribution {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformDistribution {
    pub kind: DistributionKind,
    /// Affine draws scored per aggressive sample.
    pub candidates: usize,
    /// Triple budget of the EAD score used to rank aggressive candidates.
    pub scoring_triples: usize,
    /// Range of the projective scalars `a, b, c, d`.
    pub scalar_range: (f64, f64),
    /// Half-width of the cube the vanishing points and `O_p` are drawn from.
    pub vanishing_extent: f64,
    pub weight_guard: f64,
    /// Scale range of similarity draws.
    pub similarity_scale: (f64, f64),
    /// Normalization applied before a projective draw.
    pub projective_frame: ProjectiveFrame,
}

/// How a cloud is normalized before the projective map is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectiveFrame {
    /// Centered, farthest point on the unit sphere.
    UnitBall,
    /// Centered, largest absolute coordinate equal to one.
    UnitCube,
}

impl TransformDistribution {
    pub fn new(kind: DistributionKind) -> Self {
        Self {
            kind,
            candidates: DEFAULT_CANDIDATES,
            scoring_triples: DEFAULT_SCORING_TRIPLES,
            scalar_range: (0.5, 2.0),
            vanishing_extent: 2.0,
            weight_guard: DEFAULT_WEIGHT_GUARD,
            similarity_scale: (0.5, 2.0),
            projective_frame: ProjectiveFrame::UnitCube,
        }
    }

    pub fn with_candidates(mut self, candidates: usize) -> Self {
        self.candidates = candidates;
        self
    }

    /// Draws one transform for `cloud`.
    pub fn sample(&self, cloud: &PointCloud, rng: &mut impl Rng) -> Result<SampledTransform> {
        let (transform, rejections) = match self.kind {
            DistributionKind::Identity => (AffineTransform::identity().into(), 0),
            DistributionKind::Similarity => (sample_similarity(rng, self.similarity_scale).into(), 0),
            DistributionKind::Affine => {
                let (t, r) = sample_affine_counted(rng)?;
                (t.into(), r)
            }
            DistributionKind::AffineAggressive => {
                let draw = sample_affine_aggressive_with(cloud, rng, self.candidates, self.scoring_triples)?;
                (draw.transform.into(), draw.rejections)
            }
            DistributionKind::Projective => {
                let (t, r) = sample_projective_with(cloud, rng, self)?;
                (t.into(), r)
            }
        };
        Ok(SampledTransform {
            transform,
            kind: self.kind,
            rejections,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTransform {
    pub transform: Transform,
    pub kind: DistributionKind,
    /// Draws discarded by rejection rules before this one was accepted.
    pub rejections: usize,
}

/// Uniform random rotation, optionally composed with a reflection.
pub fn random_orthogonal(rng: &mut impl Rng, allow_reflection: bool) -> Mat3 {
    // Normalized Gaussian quaternion is uniform on SO(3).
    let mut q = [0.0f64; 4];
    loop {
        for x in q.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    let mut r = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    if allow_reflection && rng.gen_bool(0.5) {
        for row in r.iter_mut() {
            row[0] = -row[0];
        }
    }
    r
}

pub fn sample_similarity(rng: &mut impl Rng, scale_range: (f64, f64)) -> AffineTransform {
    let r = random_orthogonal(rng, true);
    let s = rng.gen_range(scale_range.0..scale_range.1);
    let shift = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    AffineTransform::similarity(r, s, shift)
}

/// Random linear map with i.i.d. entries on `(-1/√3, 1/√3)` and zero shift.
pub fn sample_affine(rng: &mut impl Rng) -> Result<AffineTransform> {
    sample_affine_counted(rng).map(|(t, _)| t)
}

/// [`sample_affine`] that also reports how many near-singular draws were rejected.
pub fn sample_affine_counted(rng: &mut impl Rng) -> Result<(AffineTransform, usize)> {
    for rejected in 0..MAX_ATTEMPTS {
        let mut a = [[0.0; 3]; 3];
        for x in a.iter_mut().flatten() {
            *x = rng.gen_range(-AFFINE_ENTRY_BOUND..AFFINE_ENTRY_BOUND);
        }
        if linalg::det(&a).abs() >= MIN_ABS_DET {
            return Ok((AffineTransform::from_linear(a), rejected));
        }
    }
    Err(Error::SamplerStuck {
        what: "affine determinant",
        attempts: MAX_ATTEMPTS,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggressiveDraw {
    pub transform: AffineTransform,
    /// EAD score of the winning candidate.
    pub score: f64,
    /// Score of every candidate in draw order (empty for a single candidate).
    pub candidate_scores: Vec<f64>,
    pub rejections: usize,
}

/// The highest-EAD affine among `candidates` draws.
pub fn sample_affine_aggressive(cloud: &PointCloud, rng: &mut impl Rng, candidates: usize) -> Result<AffineTransform> {
    sample_affine_aggressive_with(cloud, rng, candidates, DEFAULT_SCORING_TRIPLES).map(|d| d.transform)
}

pub fn sample_affine_aggressive_with(
    cloud: &PointCloud,
    rng: &mut impl Rng,
    candidates: usize,
    scoring_triples: usize,
) -> Result<AggressiveDraw> {
    if candidates == 0 {
        return Err(Error::InvalidInput("need at least one candidate".into()));
    }
    if candidates == 1 {
        let (transform, rejections) = sample_affine_counted(rng)?;
        return Ok(AggressiveDraw {
            transform,
            score: f64::NAN,
            candidate_scores: Vec::new(),
            rejections,
        });
    }
    // All candidates are scored on the same triples.
    let score_seed = rng.next_u64();
    let mut best: Option<(AffineTransform, f64)> = None;
    let mut scores = Vec::with_capacity(candidates);
    let mut rejections = 0;
    for _ in 0..candidates {
        let (t, r) = sample_affine_counted(rng)?;
        rejections += r;
        let image = Transform::Affine(t).apply(cloud)?;
        let score = ead::ead_mc(cloud, &image, scoring_triples, score_seed)?.value;
        scores.push(score);
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((t, score));
        }
    }
    let (transform, score) = best.expect("at least one candidate");
    Ok(AggressiveDraw {
        transform,
        score,
        candidate_scores: scores,
        rejections,
    })
}

/// Projective transform built from random vanishing points.
pub fn sample_projective(cloud: &PointCloud, rng: &mut impl Rng) -> Result<ProjectiveTransform> {
    sample_projective_with(cloud, rng, &TransformDistribution::new(DistributionKind::Projective)).map(|(t, _)| t)
}

/// Map that centers `cloud` and scales it into the chosen frame.
fn unitizing_affine(cloud: &PointCloud, frame: ProjectiveFrame) -> Result<AffineTransform> {
    let c = cloud.centroid();
    let extent = |v: Vec3| match frame {
        ProjectiveFrame::UnitBall => linalg::norm(v),
        ProjectiveFrame::UnitCube => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
    };
    let r = cloud
        .points()
        .iter()
        .map(|&p| extent(linalg::sub(p, c)))
        .fold(0.0, f64::max);
    if r == 0.0 {
        return Err(Error::DegenerateCloud("all points coincide"));
    }
    let s = 1.0 / r;
    Ok(AffineTransform::new(
        [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
        linalg::scale(c, -s),
    ))
}

fn embed_affine(t: &AffineTransform) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&t.linear[i]);
        m[i][3] = t.shift[i];
    }
    m[3][3] = 1.0;
    m
}

fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn sample_projective_with(
    cloud: &PointCloud,
    rng: &mut impl Rng,
    dist: &TransformDistribution,
) -> Result<(ProjectiveTransform, usize)> {
    let (affine, mut rejections) = sample_affine_counted(rng)?;
    let prep = unitizing_affine(cloud, dist.projective_frame)?.then(&affine);
    let staged: Vec<Vec3> = cloud.points().iter().map(|&p| prep.apply_point(p)).collect();

    let e = dist.vanishing_extent;
    let cube_point =
        |rng: &mut dyn RngCore| -> Vec3 { [rng.gen_range(-e..e), rng.gen_range(-e..e), rng.gen_range(-e..e)] };
    let vx = cube_point(rng);
    let vy = cube_point(rng);
    let vz = cube_point(rng);
    let (lo, hi) = dist.scalar_range;
    let a = rng.gen_range(lo..hi);
    let b = rng.gen_range(lo..hi);
    let c = rng.gen_range(lo..hi);

    for _ in 0..MAX_ATTEMPTS {
        let origin = cube_point(rng);
        let d = rng.gen_range(lo..hi);
        let m = vanishing_point_matrix([vx, vy, vz], origin, [a, b, c, d]);
        let candidate = ProjectiveTransform {
            matrix: m,
            weight_guard: dist.weight_guard,
        };
        let min_w = staged
            .iter()
            .map(|&p| candidate.weight(p).abs())
            .fold(f64::INFINITY, f64::min);
        if min_w >= dist.weight_guard {
            let full = mat4_mul(&m, &embed_affine(&prep));
            return Ok((
                ProjectiveTransform {
                    matrix: full,
                    weight_guard: dist.weight_guard,
                },
                rejections,
            ));
        }
        rejections += 1;
    }
    Err(Error::SamplerStuck {
        what: "projective weight guard",
        attempts: MAX_ATTEMPTS,
    })
}

/// Homogeneous matrix sending the x, y, z directions at infinity to the
/// vanishing points and the origin to `origin`:
/// `p ↦ (a·x·V_x + b·y·V_y + c·z·V_z + d·O_p) / (a·x + b·y + c·z + d)`.
pub fn vanishing_point_matrix(vanishing: [Vec3; 3], origin: Vec3, [a, b, c, d]: [f64; 4]) -> Mat4 {
    let [vx, vy, vz] = vanishing;
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i] = [a * vx[i], b * vy[i], c * vz[i], d * origin[i]];
    }
    m[3] = [a, b, c, d];
    m
}

/// Deterministic seed for a path of indices below `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(seed), |h, &p| {
        splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub kind: DistributionKind,
    /// `seed/record/draw`, enough to regenerate the transform.
    pub seed_path: String,
    pub rejections: usize,
    /// The sampled transform; not persisted in dataset manifests.
    pub transform: Option<Transform>,
}

/// A labelled cloud, optionally with the transform that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub cloud: PointCloud,
    pub class_label: u16,
    pub provenance: Option<Provenance>,
}

/// Applies `augment` independent draws from `dist` to every record.
///
/// Draw `d` of record `r` uses the RNG stream `derive_seed(seed, [r, d])`,
/// so output does not depend on evaluation order.
pub fn transform_dataset(
    records: &[Record],
    dist: &TransformDistribution,
    augment: usize,
    seed: u64,
) -> Result<Vec<Record>> {
    if augment == 0 {
        return Err(Error::InvalidInput("augment time must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(records.len() * augment);
    for (r, record) in records.iter().enumerate() {
        for d in 0..augment {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64, d as u64]));
            let sampled = dist.sample(&record.cloud, &mut rng)?;
            let cloud = sampled.transform.apply(&record.cloud)?;
            out.push(Record {
                name: format!("{}_t{d}", record.name),
                cloud,
                class_label: record.class_label,
                provenance: Some(Provenance {
                    kind: sampled.kind,
                    seed_path: format!("{seed}/{r}/{d}"),
                    rejections: sampled.rejections,
                    transform: Some(sampled.transform),
                }),
            });
        }
    }
    Ok(out)
}
