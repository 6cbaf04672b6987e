use std::fs;
use std::path::Path;

use pointtree::data::{generate, ShapeKind, ShapeSpec};
use pointtree::io::parse_xyz;
use pointtree::{kdtree, PointCloud, SplitRule};

fn fixture(name: &str) -> PointCloud {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    parse_xyz(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn s_shape_generator_matches_committed_layout() {
    assert_eq!(
        generate(ShapeSpec::new(ShapeKind::SShape, 8, 0)).unwrap(),
        fixture("s_shape8.xyz")
    );
}

#[test]
fn s_shape_tree_is_balanced_and_invariant_under_its_own_rotation() {
    let cloud = fixture("s_shape8.xyz");
    let tree = kdtree::build(&cloud, SplitRule::PcaMedian).unwrap();
    assert_eq!(tree.depth(), 3);
    // the layout is symmetric under the half turn about z, which maps point i to 7 - i
    let turned = PointCloud::new(cloud.points().iter().rev().map(|p| [-p[0], -p[1], p[2]]).collect()).unwrap();
    let relabel = |part: kdtree::Partition| -> kdtree::Partition {
        part.into_iter()
            .map(|s| {
                let mut s: Vec<usize> = s.into_iter().map(|i| 7 - i).collect();
                s.sort_unstable();
                s
            })
            .collect()
    };
    let turned_tree = kdtree::build(&turned, SplitRule::PcaMedian).unwrap();
    assert_eq!(relabel(turned_tree.partition()), tree.partition());
}

#[test]
fn rotation_changes_axis_partition_but_not_pca_partition() {
    let original = fixture("witness.xyz");
    let rotated = fixture("witness_rotated.xyz");
    let part = |c: &PointCloud, rule| kdtree::build(c, rule).unwrap().partition();
    assert_ne!(
        part(&original, SplitRule::AxisMedian),
        part(&rotated, SplitRule::AxisMedian)
    );
    assert_eq!(
        part(&original, SplitRule::PcaMedian),
        part(&rotated, SplitRule::PcaMedian)
    );
}
