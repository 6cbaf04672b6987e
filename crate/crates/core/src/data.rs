//! Synthetic shapes, power-of-two padding and dataset splits.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{self, Vec3};
use crate::sampler::{derive_seed, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    /// Planar S-shaped curve; eight points give the fixed small fixture.
    SShape,
    /// Uniform on the unit sphere. Every direction is principal.
    SphereShell,
    /// Surface of a box with half-extents 1, 0.75 and 0.5.
    CubeFaces,
    /// Ellipsoidal candy (label 1) on a flattened stick (label 0).
    Lollipop,
    /// Two anisotropic Gaussian blobs.
    TwoCluster,
    /// Uniform in `[-1, 1]³`.
    RandomUniform,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::SShape,
        ShapeKind::SphereShell,
        ShapeKind::CubeFaces,
        ShapeKind::Lollipop,
        ShapeKind::TwoCluster,
        ShapeKind::RandomUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::SShape => "s-shape",
            ShapeKind::SphereShell => "sphere-shell",
            ShapeKind::CubeFaces => "cube-faces",
            ShapeKind::Lollipop => "lollipop",
            ShapeKind::TwoCluster => "two-cluster",
            ShapeKind::RandomUniform => "random-uniform",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown shape {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub points: usize,
    /// Standard deviation of isotropic Gaussian jitter added to every point.
    pub noise: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, points: usize, seed: u64) -> Self {
        Self {
            kind,
            points,
            noise: 0.0,
            seed,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }
}

/// Point `u ∈ [0, 1]` along the S curve in the xy plane.
fn s_curve(u: f64) -> Vec3 {
    let t = 1.5 * PI * (2.0 * u - 1.0);
    [t.sin(), t.signum() * (t.cos() - 1.0), 0.0]
}

fn gaussian3(rng: &mut impl Rng) -> Vec3 {
    [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ]
}

fn unit_sphere(rng: &mut impl Rng) -> Vec3 {
    loop {
        let g = gaussian3(rng);
        let n = linalg::norm(g);
        if n > 1e-9 {
            return linalg::scale(g, 1.0 / n);
        }
    }
}

const BOX_HALF: Vec3 = [1.0, 0.75, 0.5];

fn box_surface(rng: &mut impl Rng) -> Vec3 {
    let [a, b, c] = BOX_HALF;
    // face pairs normal to x, y, z weighted by area
    let areas = [b * c, a * c, a * b];
    let mut pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
    let mut axis = 0;
    while axis < 2 && pick >= areas[axis] {
        pick -= areas[axis];
        axis += 1;
    }
    let mut p = [0.0; 3];
    for (k, x) in p.iter_mut().enumerate() {
        *x = if k == axis {
            if rng.gen_bool(0.5) {
                BOX_HALF[k]
            } else {
                -BOX_HALF[k]
            }
        } else {
            rng.gen_range(-BOX_HALF[k]..BOX_HALF[k])
        };
    }
    p
}

/// Stick along z from 0 to 1.2 with a 0.1 × 0.05 cross-section; candy is an
/// ellipsoid with semi-axes 0.55, 0.4, 0.45 centred above it.
fn lollipop(rng: &mut impl Rng) -> (Vec3, u16) {
    if rng.gen_bool(0.35) {
        let r = rng.gen_range(0.0f64..1.0).sqrt();
        let phi = rng.gen_range(0.0..2.0 * PI);
        ([0.1 * r * phi.cos(), 0.05 * r * phi.sin(), rng.gen_range(0.0..1.2)], 0)
    } else {
        let s = unit_sphere(rng);
        ([0.55 * s[0], 0.4 * s[1], 1.6 + 0.45 * s[2]], 1)
    }
}

fn two_cluster(rng: &mut impl Rng) -> Vec3 {
    let g = gaussian3(rng);
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    [side + 0.3 * g[0], 0.2 * g[1], 0.1 * g[2]]
}

/// Deterministic synthetic cloud for `spec`.
pub fn generate(spec: ShapeSpec) -> Result<PointCloud> {
    if spec.points == 0 {
        return Err(Error::InvalidInput("shape needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.points;
    let mut labels = None;
    let mut points: Vec<Vec3> = match spec.kind {
        ShapeKind::SShape => (0..n).map(|i| s_curve((i as f64 + 0.5) / n as f64)).collect(),
        ShapeKind::SphereShell => (0..n).map(|_| unit_sphere(&mut rng)).collect(),
        ShapeKind::CubeFaces => (0..n).map(|_| box_surface(&mut rng)).collect(),
        ShapeKind::Lollipop => {
            let (pts, ls) = (0..n).map(|_| lollipop(&mut rng)).unzip();
            labels = Some(ls);
            pts
        }
        ShapeKind::TwoCluster => (0..n).map(|_| two_cluster(&mut rng)).collect(),
        ShapeKind::RandomUniform => (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect(),
    };
    if spec.noise > 0.0 {
        for p in points.iter_mut() {
            *p = linalg::add(*p, linalg::scale(gaussian3(&mut rng), spec.noise));
        }
    }
    match labels {
        Some(ls) => PointCloud::with_labels(points, ls),
        None => PointCloud::new(points),
    }
}

/// Pads to the next power of two by duplicating seeded random points.
pub fn pad_to_pow2(cloud: &PointCloud, seed: u64) -> PointCloud {
    pad_to(cloud, cloud.len().next_power_of_two(), seed)
}

/// Pads to `target` points by duplicating seeded random points; no-op if already that large.
pub fn pad_to(cloud: &PointCloud, target: usize, seed: u64) -> PointCloud {
    let n = cloud.len();
    let mut out = cloud.clone();
    if target <= n {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<usize> = (0..target - n).map(|_| rng.gen_range(0..n)).collect();
    out.extend_with_duplicates(&sources);
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[Record]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Seeded split stratified by class label.
///
/// Within each class the train and val counts are the rounded exact
/// proportions and test takes the remainder.
pub fn split(records: &[Record], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.class_label).or_default().push(i);
    }
    let mut out = Splits::default();
    for (&class, idx) in by_class.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64]));
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = ((n * fractions[0]).round() as usize).min(idx.len());
        let n_val = ((n * fractions[1]).round() as usize).min(idx.len() - n_train);
        let (train, rest) = idx.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        out.train.extend(train.iter().map(|&i| records[i].clone()));
        out.val.extend(val.iter().map(|&i| records[i].clone()));
        out.test.extend(test.iter().map(|&i| records[i].clone()));
    }
    for (name, f, part) in [
        ("train", fractions[0], &out.train),
        ("val", fractions[1], &out.val),
        ("test", fractions[2], &out.test),
    ] {
        if f > 0.0 && part.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    Ok(out)
}

/// Synthetic benchmarks with fixed class or part semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    /// SphereShell, CubeFaces and TwoCluster as classes 0, 1, 2.
    Cls3,
    /// Lollipop part segmentation; every record has class 0.
    Lollipop,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Cls3 => "cls3",
            Benchmark::Lollipop => "lollipop",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Benchmark::Cls3 => 3,
            Benchmark::Lollipop => 1,
        }
    }

    pub fn parts(self) -> usize {
        match self {
            Benchmark::Cls3 => 0,
            Benchmark::Lollipop => 2,
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls3" => Ok(Benchmark::Cls3),
            "lollipop" => Ok(Benchmark::Lollipop),
            other => Err(Error::InvalidInput(format!("unknown benchmark {other:?}"))),
        }
    }
}

/// Builds `counts[k]` records for split `k`, each generated with its own seed.
pub fn benchmark(kind: Benchmark, counts: [usize; 3], points: usize, noise: f64, seed: u64) -> Result<Splits> {
    let mut splits = Splits::default();
    for (s, (&count, name)) in counts.iter().zip(SPLIT_NAMES).enumerate() {
        let part = match s {
            0 => &mut splits.train,
            1 => &mut splits.val,
            _ => &mut splits.test,
        };
        for i in 0..count {
            let (shape, class) = match kind {
                Benchmark::Cls3 => {
                    let shapes = [ShapeKind::SphereShell, ShapeKind::CubeFaces, ShapeKind::TwoCluster];
                    (shapes[i % 3], (i % 3) as u16)
                }
                Benchmark::Lollipop => (ShapeKind::Lollipop, 0),
            };
            let spec = ShapeSpec::new(shape, points, derive_seed(seed, &[s as u64, i as u64])).with_noise(noise);
            part.push(Record {
                name: format!("{name}_{i:05}"),
                cloud: generate(spec)?,
                class_label: class,
                provenance: None,
            });
        }
    }
    Ok(splits)
}
