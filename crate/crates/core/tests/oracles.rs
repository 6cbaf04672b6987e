//! Cross-checks against independent implementations.

use std::collections::BTreeSet;

use approx::assert_relative_eq;
use nalgebra::{DMatrix, Matrix4, Vector4};
use pointtree::data::{generate, ShapeKind, ShapeSpec};
use pointtree::ead::ead_exact;
use pointtree::geometry::{apply, AffineTransform};
use pointtree::kdtree::{self, Partition};
use pointtree::pca::{pca, prealign};
use pointtree::sampler::{DistributionKind, TransformDistribution};
use pointtree::{PointCloud, SplitRule, Transform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stretch = [3.0, 1.5, 0.6];
    PointCloud::new(
        (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = stretch[k] * rng.gen_range(-1.0..1.0f64).powi(3) + 0.2 * rng.gen::<f64>();
                }
                p
            })
            .collect(),
    )
    .unwrap()
}

fn centered(points: &[Vec3]) -> DMatrix<f64> {
    let n = points.len();
    let mut m = DMatrix::from_fn(n, 3, |i, j| points[i][j]);
    for j in 0..3 {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    m
}

#[test]
fn pca_matches_nalgebra_svd() {
    for seed in 0..5 {
        let cloud = random_cloud(200, seed);
        let ours = pca(&cloud).unwrap();
        let svd = centered(cloud.points()).svd(true, true);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        for (k, &j) in order.iter().enumerate() {
            assert_relative_eq!(ours.singular_values[k], svd.singular_values[j], max_relative = 1e-10);
            let dir = ours.direction(k);
            let cos: f64 = (0..3).map(|i| dir[i] * vt[(j, i)]).sum();
            assert_relative_eq!(cos.abs(), 1.0, epsilon = 1e-10);
            for (i, s) in ours.scores.iter().enumerate() {
                assert_relative_eq!(s[k], cos.signum() * u[(i, j)], epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn prealign_has_orthonormal_score_columns() {
    let aligned = prealign(&random_cloud(300, 9)).unwrap();
    let m = DMatrix::from_fn(aligned.len(), 3, |i, j| aligned.points()[i][j]);
    let gram = m.transpose() * &m;
    for i in 0..3 {
        for j in 0..3 {
            assert_relative_eq!(gram[(i, j)], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-10);
        }
    }
}

/// Pre-aligned images of affinely related clouds differ by an orthogonal map.
#[test]
fn prealign_leaves_only_an_orthogonal_residual() {
    let cloud = random_cloud(500, 4);
    let to_matrix = |c: &PointCloud| DMatrix::from_fn(c.len(), 3, |i, j| c.points()[i][j]);
    let reference = to_matrix(&prealign(&cloud).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 20 {
        let mut a = [[0.0; 3]; 3];
        for row in a.iter_mut() {
            for x in row.iter_mut() {
                *x = rng.gen_range(-2.0..2.0);
            }
        }
        let t = AffineTransform::new(a, [rng.gen_range(-5.0..5.0), 1.0, -2.0]);
        if t.determinant().abs() < 0.05 {
            continue;
        }
        checked += 1;
        let moved = to_matrix(&prealign(&apply(t, &cloud).unwrap()).unwrap());
        // columns of the reference are orthonormal, so its transpose is the least-squares solve
        let q = reference.transpose() * &moved;
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(3, 3)).amax() < 1e-9);
        assert!((&reference * &q - &moved).amax() < 1e-9);
    }
}

/// Straightforward recursive median split, with the PCA normal from nalgebra.
fn naive_partition(points: &[Vec3], rule: SplitRule) -> Partition {
    fn recurse(points: &[Vec3], idx: Vec<usize>, layer: usize, rule: SplitRule, out: &mut Partition) {
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        out.insert(sorted);
        if idx.len() == 1 {
            return;
        }
        let normal: Vec3 = match rule {
            SplitRule::AxisMedian => {
                let mut w = [0.0; 3];
                w[layer % 3] = 1.0;
                w
            }
            SplitRule::PcaMedian => {
                let sub: Vec<Vec3> = idx.iter().map(|&i| points[i]).collect();
                let svd = centered(&sub).svd(false, true);
                let j = svd.singular_values.imax();
                let vt = svd.v_t.unwrap();
                [vt[(j, 0)], vt[(j, 1)], vt[(j, 2)]]
            }
        };
        let proj = |i: usize| (0..3).map(|k| normal[k] * points[i][k]).sum::<f64>();
        let mut keyed = idx;
        keyed.sort_by(|&a, &b| proj(a).total_cmp(&proj(b)).then(a.cmp(&b)));
        let right = keyed.split_off(keyed.len() / 2);
        recurse(points, keyed, layer + 1, rule, out);
        recurse(points, right, layer + 1, rule, out);
    }
    let mut out = BTreeSet::new();
    recurse(points, (0..points.len()).collect(), 0, rule, &mut out);
    out
}

#[test]
fn trees_match_a_naive_builder() {
    for seed in 0..6 {
        let cloud = random_cloud(64, 100 + seed);
        for rule in [SplitRule::AxisMedian, SplitRule::PcaMedian] {
            let tree = kdtree::build(&cloud, rule).unwrap();
            assert_eq!(
                tree.partition(),
                naive_partition(cloud.points(), rule),
                "seed {seed} {rule:?}"
            );
        }
    }
}

#[test]
fn projective_sample_matches_homogeneous_divide() {
    let mut points = Vec::new();
    for i in 0..4 {
        for j in 0..2 {
            for k in 0..2 {
                points.push([i as f64 / 3.0, j as f64, k as f64]);
            }
        }
    }
    let cube = PointCloud::new(points).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sampled = TransformDistribution::new(DistributionKind::Projective)
        .sample(&cube, &mut rng)
        .unwrap();
    let Transform::Projective(t) = sampled.transform else {
        panic!("expected a projective transform");
    };
    let m = Matrix4::from_fn(|i, j| t.matrix[i][j]);
    let moved = sampled.transform.apply(&cube).unwrap();
    for (p, q) in cube.points().iter().zip(moved.points()) {
        let h = m * Vector4::new(p[0], p[1], p[2], 1.0);
        assert!(h[3].abs() >= t.weight_guard);
        for k in 0..3 {
            assert_relative_eq!(q[k], h[k] / h[3], max_relative = 1e-12);
        }
    }
    // genuinely projective: the bottom row is not (0, 0, 0, c)
    assert!((0..3).any(|j| t.matrix[3][j].abs() > 1e-6));
}

#[test]
fn exact_ead_matches_acos_enumeration() {
    let p = generate(ShapeSpec::new(ShapeKind::RandomUniform, 9, 1)).unwrap();
    let q = random_cloud(9, 2);
    let angle = |c: &PointCloud, a: usize, b: usize, d: usize| {
        let [pa, pb, pd] = [c.point(a), c.point(b), c.point(d)].map(nalgebra::Vector3::from);
        (pb - pa).angle(&(pd - pa))
    };
    let mut sum = 0.0;
    let mut count = 0;
    for a in 0..9 {
        for b in 0..9 {
            for c in 0..9 {
                if a != b && b != c && a != c {
                    sum += (angle(&p, a, b, c) - angle(&q, a, b, c)).abs();
                    count += 1;
                }
            }
        }
    }
    assert_relative_eq!(ead_exact(&p, &q).unwrap().value, sum / count as f64, epsilon = 1e-12);
}
