//! Relaxed K-D trees over `2^d` points and the information flows on them.
//!
//! Nodes live in heap order: the root is node 0, the children of node `j`
//! are `2j + 1` and `2j + 2`, and layer `i` occupies the contiguous range
//! `2^i - 1 .. 2^{i+1} - 1`. Inside a layer the children of the `k`-th node
//! are entries `2k` and `2k + 1` of the next layer, which is what the
//! layer-at-a-time flows rely on.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{self, Vec3};
use crate::pca;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitRule {
    /// Axis-parallel planes, cycling x, y, z by depth.
    AxisMedian,
    /// Normal is the first principal direction of the node's points.
    PcaMedian,
}

impl SplitRule {
    /// `inherited` is the parent's normal; a PCA node whose points all
    /// coincide (padding duplicates) reuses it and relies on index tie-breaks.
    fn normal(self, points: &[Vec3], layer: usize, inherited: Option<Vec3>) -> Result<Vec3> {
        match self {
            SplitRule::AxisMedian => {
                let mut w = [0.0; 3];
                w[layer % 3] = 1.0;
                Ok(w)
            }
            SplitRule::PcaMedian => match (pca::choose_division_plane(points), inherited) {
                (Err(Error::DegenerateCloud(_)), Some(w)) => Ok(w),
                (result, _) => result,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Division plane of a non-leaf node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    /// Unit normal `W_o`.
    pub normal: Vec3,
    /// Threshold `b_o` on `W_o·p`; points with a smaller projection go left.
    pub bias: f64,
    /// Sort key `(projection, index)` of the first point on the upper side.
    boundary: (f64, usize),
    /// Children were exchanged after construction.
    swapped: bool,
}

impl Split {
    fn key_is_below(&self, projection: f64, index: usize) -> bool {
        (projection, index) < self.boundary
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdTree {
    depth: usize,
    rule: SplitRule,
    splits: Vec<Split>,
    /// Point index of every leaf, in layer order.
    leaves: Vec<usize>,
    points: Vec<Vec3>,
}

/// The unordered family of subtree point sets; two trees are isomorphic up
/// to child order iff their partitions are equal.
pub type Partition = BTreeSet<Vec<usize>>;

pub fn depth_for(n: usize) -> Result<usize> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(n.trailing_zeros() as usize)
}

/// Builds a tree by recursive median splits along the rule's normals.
///
/// Ties in projection are broken by point index, so every split is exactly
/// balanced even with duplicated points.
pub fn build(cloud: &PointCloud, rule: SplitRule) -> Result<KdTree> {
    build_points(cloud.points(), rule)
}

pub fn build_points(points: &[Vec3], rule: SplitRule) -> Result<KdTree> {
    let depth = depth_for(points.len())?;
    let n = points.len();
    let mut tree = KdTree {
        depth,
        rule,
        splits: Vec::with_capacity(n - 1),
        leaves: vec![0; n],
        points: points.to_vec(),
    };
    tree.splits.resize(
        n - 1,
        Split {
            normal: [0.0; 3],
            bias: 0.0,
            boundary: (0.0, 0),
            swapped: false,
        },
    );
    let mut indices: Vec<usize> = (0..n).collect();
    let mut scratch = Vec::with_capacity(n);
    tree.build_node(0, 0, &mut indices, &mut scratch, None)?;

    #[cfg(debug_assertions)]
    if rule == SplitRule::PcaMedian {
        debug_check_equivariance(points);
    }
    Ok(tree)
}

impl KdTree {
    fn build_node(
        &mut self,
        node: usize,
        layer: usize,
        indices: &mut [usize],
        scratch: &mut Vec<Vec3>,
        inherited: Option<Vec3>,
    ) -> Result<()> {
        if indices.len() == 1 {
            self.leaves[node + 1 - (1 << self.depth)] = indices[0];
            return Ok(());
        }
        scratch.clear();
        scratch.extend(indices.iter().map(|&i| self.points[i]));
        let normal = self.rule.normal(scratch, layer, inherited)?;

        let mut keyed: Vec<(f64, usize)> = indices
            .iter()
            .map(|&i| (linalg::dot(normal, self.points[i]), i))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let half = keyed.len() / 2;
        let (lo, hi) = (keyed[half - 1].0, keyed[half].0);
        let bias = if lo == hi { lo } else { lo + 0.5 * (hi - lo) };
        self.splits[node] = Split {
            normal,
            bias,
            boundary: keyed[half],
            swapped: false,
        };
        for (slot, (_, i)) in indices.iter_mut().zip(keyed) {
            *slot = i;
        }
        let (left, right) = indices.split_at_mut(half);
        self.build_node(2 * node + 1, layer + 1, left, scratch, Some(normal))?;
        self.build_node(2 * node + 2, layer + 1, right, scratch, Some(normal))
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn rule(&self) -> SplitRule {
        self.rule
    }

    pub fn num_points(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.leaves.len() - 1
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn layer(&self, node: NodeId) -> usize {
        (usize::BITS - 1 - (node.0 + 1).leading_zeros()) as usize
    }

    pub fn layer_nodes(&self, layer: usize) -> impl Iterator<Item = NodeId> {
        ((1usize << layer) - 1..(1usize << (layer + 1)) - 1).map(NodeId)
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.layer(node) == self.depth
    }

    pub fn children(&self, node: NodeId) -> Option<(NodeId, NodeId)> {
        (!self.is_leaf(node)).then(|| (NodeId(2 * node.0 + 1), NodeId(2 * node.0 + 2)))
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        (node.0 > 0).then(|| NodeId((node.0 - 1) / 2))
    }

    pub fn split(&self, node: NodeId) -> Option<&Split> {
        self.splits.get(node.0)
    }

    /// `p(o)` for a leaf.
    pub fn leaf_point(&self, node: NodeId) -> Option<usize> {
        self.is_leaf(node).then(|| self.leaves[node.0 + 1 - (1 << self.depth)])
    }

    /// Point indices of all leaves, left to right.
    pub fn leaf_order(&self) -> &[usize] {
        &self.leaves
    }

    /// Point indices under `node`, in leaf order.
    pub fn subtree_points(&self, node: NodeId) -> &[usize] {
        let layer = self.layer(node);
        let width = 1usize << (self.depth - layer);
        let k = node.0 + 1 - (1 << layer);
        &self.leaves[k * width..(k + 1) * width]
    }

    /// Whether a point lies in the subspace `S(node)`: every ancestor's
    /// criterion must place it on the side leading to `node`. A point lying
    /// exactly on a division plane counts as the upper side.
    pub fn contains(&self, node: NodeId, point: Vec3) -> bool {
        self.path_holds(node, |split| linalg::dot(split.normal, point) < split.bias)
    }

    /// Like [`contains`](Self::contains) for the tree's own point `index`,
    /// resolving plane ties with the same index rule used during construction.
    pub fn contains_index(&self, node: NodeId, index: usize) -> bool {
        let p = self.points[index];
        self.path_holds(node, |split| split.key_is_below(linalg::dot(split.normal, p), index))
    }

    fn path_holds(&self, node: NodeId, mut below: impl FnMut(&Split) -> bool) -> bool {
        let mut child = node;
        while let Some(parent) = self.parent(child) {
            let split = &self.splits[parent.0];
            let went_left = child.0 == 2 * parent.0 + 1;
            if (below(split) ^ split.swapped) != went_left {
                return false;
            }
            child = parent;
        }
        true
    }

    /// Exchanges the two children of `node`, moving their whole subtrees.
    pub fn swap_children(&mut self, node: NodeId) -> Result<()> {
        if self.is_leaf(node) || node.0 >= self.num_nodes() {
            return Err(Error::InvalidInput(format!("node {} has no children", node.0)));
        }
        self.splits[node.0].swapped ^= true;
        let (mut l, mut r, mut width) = (2 * node.0 + 1, 2 * node.0 + 2, 1usize);
        loop {
            let layer = self.layer(NodeId(l));
            if layer == self.depth {
                let base = (1 << self.depth) - 1;
                for k in 0..width {
                    self.leaves.swap(l - base + k, r - base + k);
                }
                return Ok(());
            }
            for k in 0..width {
                self.splits.swap(l + k, r + k);
            }
            l = 2 * l + 1;
            r = 2 * r + 1;
            width *= 2;
        }
    }

    pub fn partition(&self) -> Partition {
        (0..self.num_nodes())
            .map(|j| {
                let mut s = self.subtree_points(NodeId(j)).to_vec();
                s.sort_unstable();
                s
            })
            .collect()
    }

    /// Line-oriented preorder dump, one node per line:
    /// `N <layer> <W_x> <W_y> <W_z> <b>` or `L <layer> <point_index>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_node(NodeId(0), &mut out);
        out
    }

    fn dump_node(&self, node: NodeId, out: &mut String) {
        let layer = self.layer(node);
        match self.children(node) {
            None => {
                let _ = writeln!(out, "L {layer} {}", self.leaf_point(node).unwrap_or_default());
            }
            Some((l, r)) => {
                let s = &self.splits[node.0];
                let _ = writeln!(
                    out,
                    "N {layer} {:.16e} {:.16e} {:.16e} {:.16e}",
                    s.normal[0], s.normal[1], s.normal[2], s.bias
                );
                self.dump_node(l, out);
                self.dump_node(r, out);
            }
        }
    }
}

/// Reads the subtree point sets back out of a [`KdTree::dump`].
pub fn partition_from_dump(text: &str) -> Result<Partition> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let mut partition = Partition::new();
    let root = parse_dump_node(&mut lines, 0, &mut partition)?;
    if lines.next().is_some() {
        return Err(Error::format("tree dump", "trailing lines after the root subtree"));
    }
    let mut all = root;
    all.sort_unstable();
    partition.insert(all);
    Ok(partition)
}

fn parse_dump_node<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    layer: usize,
    partition: &mut Partition,
) -> Result<Vec<usize>> {
    let line = lines
        .next()
        .ok_or_else(|| Error::format("tree dump", "unexpected end of dump"))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let declared: usize = fields
        .get(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("tree dump", format!("bad layer in {line:?}")))?;
    if declared != layer {
        return Err(Error::format(
            "tree dump",
            format!("expected layer {layer} in {line:?}"),
        ));
    }
    match fields[0] {
        "L" if fields.len() == 3 => {
            let idx = fields[2]
                .parse()
                .map_err(|_| Error::format("tree dump", format!("bad point index in {line:?}")))?;
            Ok(vec![idx])
        }
        "N" if fields.len() == 6 => {
            let mut left = parse_dump_node(lines, layer + 1, partition)?;
            let mut right = parse_dump_node(lines, layer + 1, partition)?;
            for side in [&mut left, &mut right] {
                let mut s = side.clone();
                s.sort_unstable();
                partition.insert(s);
            }
            left.append(&mut right);
            Ok(left)
        }
        _ => Err(Error::format("tree dump", format!("unrecognized line {line:?}"))),
    }
}

#[cfg(debug_assertions)]
fn debug_check_equivariance(points: &[Vec3]) {
    if points.len() < 4 {
        return;
    }
    let Ok(d) = pca::pca_points(points) else {
        return;
    };
    let s = d.singular_values;
    if s[0] - s[1] < 1e-3 * s[0] {
        return;
    }
    let r = crate::geometry::rotation_about([0.2, -0.7, 0.4], 0.9);
    let rotated: Vec<Vec3> = points.iter().map(|&p| linalg::mat_vec(&r, p)).collect();
    if let (Ok(w), Ok(wr)) = (pca::choose_division_plane(points), pca::choose_division_plane(&rotated)) {
        let c = linalg::dot(linalg::mat_vec(&r, w), wr).abs();
        debug_assert!(c > 1.0 - 1e-6, "split rule is not rotation-equivariant: |cos| = {c}");
    }
}

/// Per-node result of an information flow.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoFlowResult {
    /// Feature vector of every node, indexed by [`NodeId`].
    pub values: Vec<Vec<f64>>,
    /// Feature width of each layer, root first.
    pub layer_dims: Vec<usize>,
}

impl InfoFlowResult {
    pub fn get(&self, node: NodeId) -> &[f64] {
        &self.values[node.0]
    }
}

/// Layer-at-a-time bottom-up flow.
///
/// `leaves` holds every leaf value in layer order; `merge` receives all
/// values of layer `i + 1` together with the parent layer index `i` and
/// returns the values of layer `i`. The result is indexed by layer.
pub fn bottom_up_layers<V, E>(
    depth: usize,
    leaves: V,
    mut merge: impl FnMut(&V, usize) -> std::result::Result<V, E>,
) -> std::result::Result<Vec<V>, E> {
    let mut layers = Vec::with_capacity(depth + 1);
    layers.push(leaves);
    for parent_layer in (0..depth).rev() {
        let next = merge(layers.last().expect("non-empty"), parent_layer)?;
        layers.push(next);
    }
    layers.reverse();
    Ok(layers)
}

/// Layer-at-a-time top-down flow: `step` maps the carries of layer `i` to
/// those of layer `i + 1` (the argument is the child layer index).
pub fn top_down_layers<V, E>(
    depth: usize,
    root: V,
    mut step: impl FnMut(&V, usize) -> std::result::Result<V, E>,
) -> std::result::Result<Vec<V>, E> {
    let mut layers = Vec::with_capacity(depth + 1);
    layers.push(root);
    for child_layer in 1..=depth {
        let next = step(layers.last().expect("non-empty"), child_layer)?;
        layers.push(next);
    }
    Ok(layers)
}

fn uniform_dim(values: &[Vec<f64>]) -> Result<usize> {
    let d = values.first().map_or(0, Vec::len);
    match values.iter().find(|v| v.len() != d) {
        Some(v) => Err(Error::DimensionMismatch {
            expected: d,
            found: v.len(),
        }),
        None => Ok(d),
    }
}

/// Bottom-up flow: `info(leaf) = leaf_init(p(o))` and
/// `info(o) = merge(info(o_l), info(o_r), layer(o))`.
///
/// `merge` must be symmetric in its two children; debug builds spot-check it.
pub fn bottom_up(
    tree: &KdTree,
    mut leaf_init: impl FnMut(usize, Vec3) -> Vec<f64>,
    mut merge: impl FnMut(&[f64], &[f64], usize) -> Vec<f64>,
) -> Result<InfoFlowResult> {
    let leaves: Vec<Vec<f64>> = tree.leaves.iter().map(|&i| leaf_init(i, tree.points[i])).collect();
    uniform_dim(&leaves)?;
    let layers = bottom_up_layers(tree.depth, leaves, |children: &Vec<Vec<f64>>, layer| {
        let merged: Vec<Vec<f64>> = children
            .chunks(2)
            .map(|pair| merge(&pair[0], &pair[1], layer))
            .collect();
        #[cfg(debug_assertions)]
        {
            let swapped = merge(&children[1], &children[0], layer);
            let scale = merged[0].iter().fold(1.0f64, |m, x| m.max(x.abs()));
            debug_assert!(
                merged[0].len() == swapped.len()
                    && merged[0]
                        .iter()
                        .zip(&swapped)
                        .all(|(a, b)| (a - b).abs() <= 1e-9 * scale),
                "bottom-up merge is not symmetric in its children"
            );
        }
        uniform_dim(&merged)?;
        Ok::<_, Error>(merged)
    })?;
    Ok(flatten_layers(layers))
}

/// Top-down flow: `carry(R) = self(R)` and
/// `carry(o) = merge_carry(self(o), carry(par(o)))`.
pub fn top_down(
    tree: &KdTree,
    mut self_info: impl FnMut(NodeId) -> Vec<f64>,
    mut merge_carry: impl FnMut(&[f64], &[f64]) -> Vec<f64>,
) -> Result<InfoFlowResult> {
    let root = vec![self_info(tree.root())];
    let layers = top_down_layers(tree.depth, root, |parents: &Vec<Vec<f64>>, layer| {
        let carries: Vec<Vec<f64>> = tree
            .layer_nodes(layer)
            .enumerate()
            .map(|(k, node)| merge_carry(&self_info(node), &parents[k / 2]))
            .collect();
        uniform_dim(&carries)?;
        Ok::<_, Error>(carries)
    })?;
    Ok(flatten_layers(layers))
}

fn flatten_layers(layers: Vec<Vec<Vec<f64>>>) -> InfoFlowResult {
    let layer_dims = layers.iter().map(|l| l.first().map_or(0, Vec::len)).collect();
    InfoFlowResult {
        values: layers.into_iter().flatten().collect(),
        layer_dims,
    }
}
