//! Tree encoder with max merges, alignment network, classification head and
//! top-down segmentation decoder, plus the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::pad_to;
use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud};
use crate::io::MetricsRow;
use crate::kdtree::{self, KdTree, SplitRule};
use crate::linalg::{self, Vec3};
use crate::pca;
use crate::sampler::{self, derive_seed, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

/// How two child features become the parent feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    /// `max(W·l, W·r)`, symmetric in the children.
    Max,
    /// `relu(W·[l, r] + b)`; an ablation that depends on child order.
    ConcatMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Tree depth; inputs are padded to `2^depth` points.
    pub depth: usize,
    /// Feature width after the leaf MLP and after each merge, bottom-up.
    pub dims: Vec<usize>,
    pub leaf_hidden: usize,
    pub classifier_hidden: [usize; 2],
    pub carry_dim: usize,
    pub classes: usize,
    pub parts: usize,
    pub merge: Merge,
    pub rule: SplitRule,
    pub use_prealign: bool,
    pub use_alignment_net: bool,
    /// Random axis flips and permutations of the network input.
    pub augment_flip: bool,
    /// Random affine followed by a fresh pre-alignment; needs a tree rebuild.
    pub augment_affine: bool,
}

/// Feature widths for trees of depth 7 at desk scale.
pub const DESK_DIMS: [usize; 8] = [8, 8, 16, 16, 32, 32, 64, 64];

/// Widths of a 12-level tree at full scale.
pub const FULL_DIMS: [usize; 13] = [32, 32, 64, 128, 256, 512, 512, 1024, 1024, 2048, 2048, 4096, 4096];

impl ModelConfig {
    pub fn classification(classes: usize) -> Self {
        Self {
            task: Task::Classify,
            depth: 7,
            dims: DESK_DIMS.to_vec(),
            leaf_hidden: 16,
            classifier_hidden: [64, 32],
            carry_dim: 32,
            classes,
            parts: 0,
            merge: Merge::Max,
            rule: SplitRule::PcaMedian,
            use_prealign: true,
            use_alignment_net: false,
            augment_flip: true,
            augment_affine: false,
        }
    }

    pub fn segmentation(parts: usize) -> Self {
        Self {
            task: Task::Segment,
            parts,
            classes: 0,
            ..Self::classification(0)
        }
    }

    /// Replaces depth and derives a non-decreasing schedule that ends at `top`.
    pub fn with_depth(mut self, depth: usize, base: usize, top: usize) -> Self {
        self.depth = depth;
        self.dims = (0..=depth).map(|k| (base << (k / 2)).min(top)).collect();
        self
    }

    pub fn points(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.depth == 0 || self.depth > 20 {
            return bad(format!("depth {} out of range", self.depth));
        }
        if self.dims.len() != self.depth + 1 {
            return bad(format!(
                "{} dims for depth {}; need depth + 1",
                self.dims.len(),
                self.depth
            ));
        }
        if self.dims.windows(2).any(|w| w[1] < w[0]) || self.dims.contains(&0) {
            return bad(format!("dims {:?} must be positive and non-decreasing", self.dims));
        }
        match self.task {
            Task::Classify if self.classes < 2 => bad("classification needs at least 2 classes".into()),
            Task::Segment if self.parts < 2 => bad("segmentation needs at least 2 parts".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), out, inp, rng),
            b: store.add_bias(format!("{name}.b"), out),
        }
    }

    fn forward(self, g: &mut Graph, store: &ParamStore, x: Var, relu: bool) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.linear(x, w)?;
        let y = g.add_bias(y, b)?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderIds {
    leaf: [Dense; 2],
    /// Per merge, bottom-up: max merges use only the weight.
    layers: Vec<Dense>,
}

fn add_encoder(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    hidden: usize,
    merge: Merge,
    rng: &mut impl Rng,
) -> EncoderIds {
    let leaf = [
        Dense::new(store, &format!("{prefix}.leaf0"), hidden, 3, rng),
        Dense::new(store, &format!("{prefix}.leaf1"), dims[0], hidden, rng),
    ];
    let layers = (1..dims.len())
        .map(|k| {
            let name = format!("{prefix}.layer{k}");
            match merge {
                Merge::Max => Dense {
                    w: store.add_weight(format!("{name}.w"), dims[k], dims[k - 1], rng),
                    b: ParamId(usize::MAX),
                },
                Merge::ConcatMlp => Dense::new(store, &name, dims[k], 2 * dims[k - 1], rng),
            }
        })
        .collect();
    EncoderIds { leaf, layers }
}

fn even_odd(rows: usize) -> (Vec<usize>, Vec<usize>) {
    (
        (0..rows / 2).map(|i| 2 * i).collect(),
        (0..rows / 2).map(|i| 2 * i + 1).collect(),
    )
}

/// Features of every layer, leaves first and root last. Rows of `x` are
/// stacked samples, each in leaf order.
fn encoder_forward(g: &mut Graph, store: &ParamStore, ids: &EncoderIds, merge: Merge, x: Var) -> Result<Vec<Var>> {
    let h = ids.leaf[0].forward(g, store, x, true)?;
    let mut h = ids.leaf[1].forward(g, store, h, true)?;
    let mut out = vec![h];
    for layer in &ids.layers {
        let (even, odd) = even_odd(g.value(h).rows());
        h = match merge {
            Merge::Max => {
                let w = g.param(store, layer.w)?;
                let z = g.linear(h, w)?;
                let l = g.gather_rows(z, even)?;
                let r = g.gather_rows(z, odd)?;
                g.pointwise_max(l, r)?
            }
            Merge::ConcatMlp => {
                let l = g.gather_rows(h, even)?;
                let r = g.gather_rows(h, odd)?;
                let both = g.concat(l, r)?;
                layer.forward(g, store, both, true)?
            }
        };
        out.push(h);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct AlignIds {
    encoder: EncoderIds,
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct SegIds {
    root: Dense,
    /// Merge of own feature and parent carry, indexed by layer from the bottom.
    merges: Vec<Dense>,
    head: [Dense; 2],
}

#[derive(Debug, Clone)]
struct ModelIds {
    encoder: EncoderIds,
    align: Option<AlignIds>,
    classifier: Option<[Dense; 3]>,
    norm: Option<(ParamId, ParamId)>,
    seg: Option<SegIds>,
}

/// A cloud after preprocessing, with its cached tree.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Network input coordinates in leaf order.
    pub input: Vec<Vec3>,
    pub tree: KdTree,
    pub class: u16,
    /// Part label per leaf.
    pub part_labels: Option<Vec<u16>>,
    /// Zero for padding duplicates.
    pub weights: Vec<f64>,
    /// Points before padding.
    pub original_len: usize,
}

/// Root and per-layer features of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// Layer features bottom-up; entry `k` has `2^(depth-k)` rows.
    pub layers: Vec<Tensor>,
    pub root: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: ModelIds,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = &config.dims;
        let encoder = add_encoder(&mut store, "enc", dims, config.leaf_hidden, config.merge, &mut rng);
        let align = config.use_alignment_net.then(|| {
            let half: Vec<usize> = dims.iter().map(|d| (d / 2).max(1)).collect();
            let encoder = add_encoder(
                &mut store,
                "align",
                &half,
                (config.leaf_hidden / 2).max(1),
                config.merge,
                &mut rng,
            );
            let hidden = Dense::new(&mut store, "align.mlp0", 32, *half.last().unwrap(), &mut rng);
            let out = Dense {
                w: store.add("align.mlp1.w", Tensor::zeros(&[9, 32])),
                b: store.add(
                    "align.mlp1.b",
                    Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
                ),
            };
            AlignIds { encoder, hidden, out }
        });
        let root = *dims.last().unwrap();
        let (classifier, norm, seg) = match config.task {
            Task::Classify => {
                let [h1, h2] = config.classifier_hidden;
                let norm = (
                    store.add("cls.norm.scale", Tensor::vector(vec![1.0; root])),
                    store.add("cls.norm.shift", Tensor::zeros(&[root])),
                );
                let mlp = [
                    Dense::new(&mut store, "cls.mlp0", h1, root, &mut rng),
                    Dense::new(&mut store, "cls.mlp1", h2, h1, &mut rng),
                    Dense::new(&mut store, "cls.mlp2", config.classes, h2, &mut rng),
                ];
                (Some(mlp), Some(norm), None)
            }
            Task::Segment => {
                let c = config.carry_dim;
                let root_proj = Dense::new(&mut store, "seg.root", c, root, &mut rng);
                let merges = (0..config.depth)
                    .map(|k| Dense::new(&mut store, &format!("seg.merge{k}"), c, dims[k] + c, &mut rng))
                    .collect();
                let head = [
                    Dense::new(&mut store, "seg.head0", c, c, &mut rng),
                    Dense::new(&mut store, "seg.head1", config.parts, c, &mut rng),
                ];
                (
                    None,
                    None,
                    Some(SegIds {
                        root: root_proj,
                        merges,
                        head,
                    }),
                )
            }
        };
        Ok(Self {
            config,
            params: store,
            ids: ModelIds {
                encoder,
                align,
                classifier,
                norm,
                seg,
            },
        })
    }

    /// Preprocesses a cloud and builds its tree: pad, centre and unitize,
    /// optionally pre-align (then unitize again).
    pub fn prepare(&self, cloud: &PointCloud, class: u16, pad_seed: u64) -> Result<Prepared> {
        let n = self.config.points();
        if cloud.len() > n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: cloud.len(),
            });
        }
        let original_len = cloud.len();
        let c = pad_to(cloud, n, pad_seed);
        let c = normalize(&c, self.config.use_prealign)?;
        self.prepare_normalized(&c, class, original_len)
    }

    fn prepare_normalized(&self, c: &PointCloud, class: u16, original_len: usize) -> Result<Prepared> {
        let tree = kdtree::build(c, self.config.rule)?;
        let order = tree.leaf_order();
        let input = order.iter().map(|&i| c.point(i)).collect();
        let part_labels = c.labels().map(|l| order.iter().map(|&i| l[i]).collect());
        let weights = order
            .iter()
            .map(|&i| if c.is_duplicate(i) { 0.0 } else { 1.0 })
            .collect();
        Ok(Prepared {
            input,
            tree,
            class,
            part_labels,
            weights,
            original_len,
        })
    }

    /// Input matrix for a batch, with an optional per-sample 3×3 map.
    fn batch_input(batch: &[&Prepared], maps: Option<&[[[f64; 3]; 3]]>) -> Result<Tensor> {
        let rows: usize = batch.iter().map(|p| p.input.len()).sum();
        let mut data = Vec::with_capacity(rows * 3);
        for (s, p) in batch.iter().enumerate() {
            for &x in &p.input {
                let y = match maps {
                    Some(m) => linalg::mat_vec(&m[s], x),
                    None => x,
                };
                data.extend_from_slice(&y);
            }
        }
        Tensor::matrix(rows, 3, data)
    }

    fn root_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let x = match &self.ids.align {
            Some(a) => {
                let feats = encoder_forward(g, store, &a.encoder, self.config.merge, x)?;
                let h = a.hidden.forward(g, store, *feats.last().unwrap(), true)?;
                let m = a.out.forward(g, store, h, false)?;
                g.transform3(x, m)?
            }
            None => x,
        };
        encoder_forward(g, store, &self.ids.encoder, self.config.merge, x)
    }

    /// Logits of a batch: `B × classes` or `(B·2^d) × parts` in leaf order.
    fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let layers = self.root_features(g, store, x)?;
        let root = *layers.last().unwrap();
        match self.config.task {
            Task::Classify => {
                // fixed statistics come from the model, never from the point being differentiated
                let (scale, shift) = self.ids.norm.unwrap();
                let (scale, shift) = (
                    self.params.get(scale).data().to_vec(),
                    self.params.get(shift).data().to_vec(),
                );
                let h = g.scale_shift(root, scale, shift)?;
                let [m0, m1, m2] = self.ids.classifier.unwrap();
                let h = m0.forward(g, store, h, true)?;
                let h = m1.forward(g, store, h, true)?;
                m2.forward(g, store, h, false)
            }
            Task::Segment => {
                let seg = self.ids.seg.as_ref().unwrap();
                let carry = self.decode(g, store, &layers)?;
                let h = seg.head[0].forward(g, store, carry, true)?;
                seg.head[1].forward(g, store, h, false)
            }
        }
    }

    /// Top-down carries; returns the leaf layer.
    fn decode(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<Var> {
        let seg = self.ids.seg.as_ref().unwrap();
        let mut carry = seg.root.forward(g, store, *layers.last().unwrap(), false)?;
        for k in (0..self.config.depth).rev() {
            let own = layers[k];
            let parents = (0..g.value(own).rows()).map(|i| i / 2).collect();
            let up = g.gather_rows(carry, parents)?;
            let both = g.concat(own, up)?;
            carry = seg.merges[k].forward(g, store, both, true)?;
        }
        Ok(carry)
    }

    /// Mean loss of a batch under `store`; `maps` are augmentation matrices.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Prepared],
        maps: Option<&[[[f64; 3]; 3]]>,
    ) -> Result<Var> {
        let x = g.constant(Self::batch_input(batch, maps)?)?;
        let logits = self.logits(g, store, x)?;
        let (targets, weights) = self.targets(batch)?;
        g.softmax_xent(logits, &targets, &weights)
    }

    fn targets(&self, batch: &[&Prepared]) -> Result<(Vec<usize>, Vec<f64>)> {
        Ok(match self.config.task {
            Task::Classify => (batch.iter().map(|p| p.class as usize).collect(), vec![1.0; batch.len()]),
            Task::Segment => {
                let mut t = Vec::new();
                let mut w = Vec::new();
                for p in batch {
                    let labels = p
                        .part_labels
                        .as_ref()
                        .ok_or_else(|| Error::InvalidInput("segmentation needs per-point labels".into()))?;
                    t.extend(labels.iter().map(|&l| l as usize));
                    w.extend_from_slice(&p.weights);
                }
                (t, w)
            }
        })
    }

    /// Log-likelihood rows for a batch in evaluation mode.
    fn predict_batch(&self, batch: &[&Prepared]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(Self::batch_input(batch, None)?)?;
        let logits = self.logits(&mut g, &self.params, x)?;
        let t = g.value(logits);
        let data = (0..t.rows()).flat_map(|r| autodiff::log_softmax(t.row(r))).collect();
        Tensor::matrix(t.rows(), t.cols(), data)
    }

    /// Class log-likelihoods for one cloud.
    pub fn classify(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        if self.config.task != Task::Classify {
            return Err(Error::InvalidInput("model was built for segmentation".into()));
        }
        let p = self.prepare(cloud, 0, 0)?;
        Ok(self.predict_batch(&[&p])?.row(0).to_vec())
    }

    /// Per-point part log-likelihoods, in the cloud's own point order.
    pub fn segment(&self, cloud: &PointCloud) -> Result<Vec<Vec<f64>>> {
        if self.config.task != Task::Segment {
            return Err(Error::InvalidInput("model was built for classification".into()));
        }
        let p = self.prepare(cloud, 0, 0)?;
        let t = self.predict_batch(&[&p])?;
        let mut out = vec![Vec::new(); p.original_len];
        for (leaf, &i) in p.tree.leaf_order().iter().enumerate() {
            if i < p.original_len {
                out[i] = t.row(leaf).to_vec();
            }
        }
        Ok(out)
    }

    /// Encoder features of `cloud` on a given tree, without preprocessing.
    pub fn encode(&self, cloud: &PointCloud, tree: &KdTree) -> Result<Encoding> {
        self.check_tree(cloud, tree)?;
        let mut g = Graph::new();
        let x = g.constant(leaf_input(cloud, tree)?)?;
        let layers = encoder_forward(&mut g, &self.params, &self.ids.encoder, self.config.merge, x)?;
        let tensors: Vec<Tensor> = layers.iter().map(|&v| g.value(v).clone()).collect();
        let root = tensors.last().unwrap().data().to_vec();
        Ok(Encoding { layers: tensors, root })
    }

    /// Sets the classifier's fixed standardization from root features of `batch`.
    pub fn calibrate(&mut self, batch: &[&Prepared]) -> Result<()> {
        let Some((scale, shift)) = self.ids.norm else {
            return Ok(());
        };
        let mut g = Graph::new();
        let x = g.constant(Self::batch_input(batch, None)?)?;
        let layers = self.root_features(&mut g, &self.params, x)?;
        let root = g.value(*layers.last().unwrap());
        let (r, c) = (root.rows() as f64, root.cols());
        let mut sc = vec![1.0; c];
        let mut sh = vec![0.0; c];
        for j in 0..c {
            let mean = (0..root.rows()).map(|i| root.get(i, j)).sum::<f64>() / r;
            let var = (0..root.rows()).map(|i| (root.get(i, j) - mean).powi(2)).sum::<f64>() / r;
            let sd = var.sqrt().max(1e-3);
            sc[j] = 1.0 / sd;
            sh[j] = -mean / sd;
        }
        self.params.get_mut(scale).data_mut().copy_from_slice(&sc);
        self.params.get_mut(shift).data_mut().copy_from_slice(&sh);
        Ok(())
    }

    /// Leaf carries of the segmentation decoder in leaf order, without preprocessing.
    pub fn leaf_carries(&self, cloud: &PointCloud, tree: &KdTree) -> Result<Tensor> {
        if self.config.task != Task::Segment {
            return Err(Error::InvalidInput("model was built for classification".into()));
        }
        self.check_tree(cloud, tree)?;
        let mut g = Graph::new();
        let x = g.constant(leaf_input(cloud, tree)?)?;
        let layers = encoder_forward(&mut g, &self.params, &self.ids.encoder, self.config.merge, x)?;
        let carry = self.decode(&mut g, &self.params, &layers)?;
        Ok(g.value(carry).clone())
    }

    fn check_tree(&self, cloud: &PointCloud, tree: &KdTree) -> Result<()> {
        if tree.num_points() != cloud.len() {
            return Err(Error::DimensionMismatch {
                expected: cloud.len(),
                found: tree.num_points(),
            });
        }
        if tree.depth() != self.config.depth {
            return Err(Error::DimensionMismatch {
                expected: self.config.depth,
                found: tree.depth(),
            });
        }
        Ok(())
    }
}

fn leaf_input(cloud: &PointCloud, tree: &KdTree) -> Result<Tensor> {
    let data = tree.leaf_order().iter().flat_map(|&i| cloud.point(i)).collect();
    Tensor::matrix(cloud.len(), 3, data)
}

/// Centre and unitize; with pre-alignment, replace by PCA scores and unitize again.
pub fn normalize(cloud: &PointCloud, use_prealign: bool) -> Result<PointCloud> {
    let c = geometry::unitize(cloud)?;
    if use_prealign {
        geometry::unitize(&pca::prealign(&c)?)
    } else {
        Ok(c)
    }
}

/// Random signed permutation.
fn flip_permute(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut axes = [0usize, 1, 2];
    axes.shuffle(rng);
    let mut m = [[0.0; 3]; 3];
    for (row, &a) in axes.iter().enumerate() {
        m[row][a] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    m
}

/// Training clouds whose root features set the classifier standardization.
pub const CALIBRATION_SAMPLES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig::default(),
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalResult {
    pub loss: f64,
    /// Per-cloud accuracy for classification, per-point for segmentation.
    pub accuracy: f64,
    /// Mean over clouds of the mean part IoU; segmentation only.
    pub miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the latest epoch with the best validation accuracy.
    /// Metrics start at epoch 0, before any update.
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub tree_builds: usize,
}

/// Preprocesses every record once; `salt` separates padding seeds of splits.
pub fn prepare_all(model: &Model, records: &[Record], salt: u64) -> Result<Vec<Prepared>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| model.prepare(&r.cloud, r.class_label, derive_seed(salt, &[i as u64])))
        .collect()
}

/// Loss, accuracy and mIoU over prepared samples.
pub fn evaluate(model: &Model, samples: &[Prepared], batch_size: usize) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let mut loss = 0.0;
    let (mut correct, mut total) = (0.0, 0.0);
    let mut iou_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let lp = model.predict_batch(&batch)?;
        let (targets, weights) = model.targets(&batch)?;
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = lp.row(r);
            loss -= row[t];
            correct += (argmax(row) == t) as usize as f64;
            total += 1.0;
        }
        if model.config.task == Task::Segment {
            let n = model.config.points();
            for (s, p) in batch.iter().enumerate() {
                let pred: Vec<usize> = (0..n).map(|i| argmax(lp.row(s * n + i))).collect();
                iou_sum += shape_iou(&pred, &targets[s * n..(s + 1) * n], &p.weights, model.config.parts);
            }
        }
    }
    Ok(EvalResult {
        loss: loss / total,
        accuracy: correct / total,
        miou: (model.config.task == Task::Segment).then(|| iou_sum / samples.len() as f64),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean IoU over parts; a part absent from both prediction and truth counts as 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], weights: &[f64], parts: usize) -> f64 {
    let mut sum = 0.0;
    for part in 0..parts {
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..pred.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let (a, b) = (pred[i] == part, truth[i] == part);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    sum / parts as f64
}

/// Seeded mini-batch Adam with early stopping on validation accuracy.
pub fn train(config: &ModelConfig, tc: &TrainConfig, train_set: &[Record], val_set: &[Record]) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut model = Model::new(config.clone(), derive_seed(tc.seed, &[0]))?;
    let mut tree_builds = 0;
    let mut train_prep = prepare_all(&model, train_set, derive_seed(tc.seed, &[1]))?;
    let val_prep = prepare_all(&model, val_set, derive_seed(tc.seed, &[2]))?;
    tree_builds += train_prep.len() + val_prep.len();

    let mut order: Vec<usize> = (0..train_prep.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[3]));
    order.shuffle(&mut rng);
    let first: Vec<&Prepared> = order
        .iter()
        .take(tc.batch_size.max(CALIBRATION_SAMPLES))
        .map(|&i| &train_prep[i])
        .collect();
    model.calibrate(&first)?;

    let mut adam = Adam::new(&model.params, tc.adam);
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut metrics = Vec::new();
    let mut log = |epoch: usize, model: &Model, train_prep: &[Prepared]| -> Result<f64> {
        let tr = evaluate(model, train_prep, tc.batch_size)?;
        let va = evaluate(model, &val_prep, tc.batch_size)?;
        for (split, r) in [("train", tr), ("val", va)] {
            metrics.push(MetricsRow {
                epoch,
                split: split.into(),
                loss: r.loss,
                accuracy: r.accuracy,
                miou: r.miou,
            });
        }
        Ok(va.accuracy)
    };
    log(0, &model, &train_prep)?;
    let affine = sampler::TransformDistribution::new(sampler::DistributionKind::Affine);
    for epoch in 1..=tc.epochs {
        if config.augment_affine {
            train_prep = train_set
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[4, epoch as u64, i as u64]));
                    let t = affine.sample(&r.cloud, &mut arng)?.transform;
                    let moved = t.apply(&r.cloud)?;
                    model.prepare(&moved, r.class_label, derive_seed(tc.seed, &[5, i as u64]))
                })
                .collect::<Result<_>>()?;
            tree_builds += train_prep.len();
        }
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(tc.batch_size.max(1)).enumerate() {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_prep[i]).collect();
            let maps: Option<Vec<[[f64; 3]; 3]>> = config
                .augment_flip
                .then(|| batch.iter().map(|_| flip_permute(&mut rng)).collect());
            let mut g = Graph::new();
            let loss = model
                .batch_loss(&mut g, &model.params, &batch, maps.as_deref())
                .map_err(|e| match e {
                    Error::NonFiniteValue(_) => Error::NonFiniteLoss { epoch, batch: b },
                    e => e,
                })?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            g.backward(loss)?;
            adam.step(&mut model.params, &g.param_grads());
        }
        let val_accuracy = log(epoch, &model, &train_prep)?;
        if val_accuracy >= best.0 {
            best = (val_accuracy, epoch, model.params.clone());
        } else if epoch - best.1 >= tc.patience {
            break;
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        metrics,
        best_epoch: best.1,
        tree_builds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, log_sum_exp};
    use crate::data::{benchmark, generate, Benchmark, ShapeKind, ShapeSpec};
    use crate::geometry::AffineTransform;
    use crate::kdtree::NodeId;
    use crate::sampler::random_orthogonal;

    fn set(model: &mut Model, name: &str, data: &[f64]) {
        let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        model.params.get_mut(id).data_mut().copy_from_slice(data);
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        generate(ShapeSpec::new(ShapeKind::RandomUniform, n, seed)).unwrap()
    }

    fn toy(task: Task) -> ModelConfig {
        let base = match task {
            Task::Classify => ModelConfig::classification(3),
            Task::Segment => ModelConfig::segmentation(2),
        };
        ModelConfig {
            leaf_hidden: 4,
            classifier_hidden: [6, 5],
            carry_dim: 4,
            ..base.with_depth(4, 3, 6)
        }
    }

    #[test]
    fn depth_one_root_is_hand_max() {
        let cfg = ModelConfig {
            leaf_hidden: 2,
            ..ModelConfig::classification(2).with_depth(1, 2, 2)
        };
        let mut m = Model::new(cfg, 0).unwrap();
        set(&mut m, "enc.leaf0.w", &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        set(&mut m, "enc.leaf0.b", &[0.0, 0.0]);
        set(&mut m, "enc.leaf1.w", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut m, "enc.leaf1.b", &[0.0, 0.0]);
        set(&mut m, "enc.layer1.w", &[1.0, -1.0, 2.0, 0.5]);
        let c = PointCloud::new(vec![[0.5, 0.2, 0.0], [0.1, 0.9, 0.0]]).unwrap();
        let tree = kdtree::build(&c, SplitRule::PcaMedian).unwrap();
        let enc = m.encode(&c, &tree).unwrap();
        // W·f0 = (0.3, 1.1), W·f1 = (-0.8, 0.65)
        assert!((enc.root[0] - 0.3).abs() < 1e-12);
        assert!((enc.root[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn child_swaps_keep_the_root() {
        let m = Model::new(ModelConfig::classification(3).with_depth(5, 4, 16), 3).unwrap();
        let c = cloud(32, 1);
        let mut tree = kdtree::build(&c, SplitRule::PcaMedian).unwrap();
        let root = m.encode(&c, &tree).unwrap().root;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let node = rng.gen_range(0..(1 << 5) - 1);
            tree.swap_children(NodeId(node)).unwrap();
        }
        assert_eq!(m.encode(&c, &tree).unwrap().root, root);
    }

    #[test]
    fn concat_merge_depends_on_child_order() {
        let cfg = ModelConfig {
            merge: Merge::ConcatMlp,
            ..ModelConfig::classification(3).with_depth(3, 4, 8)
        };
        let m = Model::new(cfg, 3).unwrap();
        let c = cloud(8, 2);
        let mut tree = kdtree::build(&c, SplitRule::PcaMedian).unwrap();
        let root = m.encode(&c, &tree).unwrap().root;
        tree.swap_children(NodeId(0)).unwrap();
        assert_ne!(m.encode(&c, &tree).unwrap().root, root);
    }

    #[test]
    fn constant_leaf_features_make_similarities_invisible() {
        let mut m = Model::new(ModelConfig::classification(3).with_depth(4, 4, 8), 9).unwrap();
        let leaf1 = m.params.id("enc.leaf1.w").unwrap();
        let len = m.params.get(leaf1).len();
        set(&mut m, "enc.leaf1.w", &vec![0.0; len]);
        set(&mut m, "enc.leaf1.b", &[0.3, 0.1, 0.7, 0.2]);
        let c = cloud(16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim = AffineTransform::similarity(random_orthogonal(&mut rng, true), 1.7, [0.4, -2.0, 1.0]);
        let moved = geometry::apply(sim, &c).unwrap();
        let t0 = kdtree::build(&c, SplitRule::PcaMedian).unwrap();
        let t1 = kdtree::build(&moved, SplitRule::PcaMedian).unwrap();
        assert_eq!(m.encode(&c, &t0).unwrap().root, m.encode(&moved, &t1).unwrap().root);
    }

    #[test]
    fn classify_returns_a_log_distribution() {
        let m = Model::new(ModelConfig::classification(4), 1).unwrap();
        let lp = m.classify(&cloud(128, 3)).unwrap();
        assert_eq!(lp.len(), 4);
        assert!(log_sum_exp(&lp).abs() < 1e-9);
    }

    #[test]
    fn padding_matches_the_explicitly_padded_cloud() {
        let m = Model::new(ModelConfig::classification(3), 1).unwrap();
        let c = cloud(100, 3);
        let padded = pad_to(&c, 128, 0);
        assert_eq!(m.classify(&c).unwrap(), m.classify(&padded).unwrap());
    }

    #[test]
    fn oversized_cloud_is_rejected() {
        let m = Model::new(ModelConfig::classification(3), 1).unwrap();
        assert!(matches!(
            m.classify(&cloud(129, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::classification(3);
        cfg.dims.pop();
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = ModelConfig::classification(3);
        cfg.dims[3] = 1;
        assert!(Model::new(cfg, 0).is_err());
        assert!(Model::new(ModelConfig::classification(1), 0).is_err());
        assert!(Model::new(ModelConfig::segmentation(1), 0).is_err());
    }

    #[test]
    fn fresh_alignment_net_is_the_identity() {
        let cfg = ModelConfig {
            use_alignment_net: true,
            ..ModelConfig::classification(3).with_depth(4, 4, 8)
        };
        let m = Model::new(cfg, 2).unwrap();
        let p = m.prepare(&cloud(16, 7), 0, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Model::batch_input(&[&p], None).unwrap()).unwrap();
        let aligned = m.root_features(&mut g, &m.params, x).unwrap();
        let plain = encoder_forward(&mut g, &m.params, &m.ids.encoder, m.config.merge, x).unwrap();
        assert_eq!(g.value(*aligned.last().unwrap()), g.value(*plain.last().unwrap()));
    }

    #[test]
    fn segment_maps_back_to_original_points() {
        let m = Model::new(ModelConfig::segmentation(3), 1).unwrap();
        let out = m.segment(&cloud(100, 2)).unwrap();
        assert_eq!(out.len(), 100);
        for row in &out {
            assert_eq!(row.len(), 3);
            assert!(log_sum_exp(row).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_two_carries_follow_the_merge_chain() {
        let m = Model::new(
            ModelConfig {
                carry_dim: 3,
                ..ModelConfig::segmentation(2).with_depth(2, 2, 4)
            },
            6,
        )
        .unwrap();
        let c = cloud(4, 8);
        let tree = kdtree::build(&c, SplitRule::PcaMedian).unwrap();
        let enc = m.encode(&c, &tree).unwrap();
        let carries = m.leaf_carries(&c, &tree).unwrap();

        let p = |name: &str| m.params.get(m.params.id(name).unwrap()).clone();
        let affine = |w: &Tensor, b: &Tensor, x: &[f64], relu: bool| -> Vec<f64> {
            (0..w.rows())
                .map(|r| {
                    let v = b.data()[r] + w.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let root = affine(&p("seg.root.w"), &p("seg.root.b"), &enc.root, false);
        for leaf in 0..4 {
            let mid_own = enc.layers[1].row(leaf / 2);
            let mid = affine(&p("seg.merge1.w"), &p("seg.merge1.b"), &[mid_own, &root].concat(), true);
            let own = enc.layers[0].row(leaf);
            let expect = affine(&p("seg.merge0.w"), &p("seg.merge0.b"), &[own, &mid].concat(), true);
            for (a, b) in carries.row(leaf).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "leaf {leaf}: {a} vs {b}");
            }
        }
    }

    fn toy_batch(model: &Model, n: usize, seed: u64) -> Vec<Prepared> {
        let kinds = [ShapeKind::TwoCluster, ShapeKind::CubeFaces, ShapeKind::Lollipop];
        (0..n)
            .map(|i| {
                let c = generate(ShapeSpec::new(kinds[i % 3], 16, seed + i as u64).with_noise(0.02)).unwrap();
                let c = if c.labels().is_some() {
                    c
                } else {
                    let labels = (0..c.len()).map(|j| (j % 2) as u16).collect();
                    PointCloud::with_labels(c.points().to_vec(), labels).unwrap()
                };
                model.prepare(&c, (i % 3) as u16, i as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn classification_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            use_alignment_net: true,
            ..toy(Task::Classify)
        };
        let mut m = Model::new(cfg, 11).unwrap();
        let batch = toy_batch(&m, 3, 40);
        let refs: Vec<&Prepared> = batch.iter().collect();
        m.calibrate(&refs).unwrap();
        // move the alignment head off its identity start so its gradients are generic
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let id = m.params.id("align.mlp1.w").unwrap();
        for x in m.params.get_mut(id).data_mut() {
            *x = 0.1 * rng.gen_range(-1.0..1.0);
        }
        let maps = [flip_permute(&mut rng), flip_permute(&mut rng), flip_permute(&mut rng)];
        let report = grad_check(|g, s| m.batch_loss(g, s, &refs, Some(&maps)), &m.params, 1e-4).unwrap();
        assert!(report.kink_free, "{report:?}");
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn segmentation_gradients_match_finite_differences() {
        let m = Model::new(toy(Task::Segment), 12).unwrap();
        let batch = toy_batch(&m, 2, 50);
        let refs: Vec<&Prepared> = batch.iter().collect();
        let report = grad_check(|g, s| m.batch_loss(g, s, &refs, None), &m.params, 1e-4).unwrap();
        assert!(report.kink_free, "{report:?}");
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn alignment_parameters_receive_gradient() {
        let cfg = ModelConfig {
            use_alignment_net: true,
            ..toy(Task::Classify)
        };
        let m = Model::new(cfg, 4).unwrap();
        let batch = toy_batch(&m, 3, 60);
        let refs: Vec<&Prepared> = batch.iter().collect();
        let mut g = Graph::new();
        let loss = m.batch_loss(&mut g, &m.params, &refs, None).unwrap();
        g.backward(loss).unwrap();
        let id = m.params.id("align.mlp1.b").unwrap();
        let grads = g.param_grads();
        let (_, grad) = grads.iter().find(|(p, _)| *p == id).unwrap();
        assert!(grad.iter().any(|&x| x != 0.0));
    }

    fn tiny_run(seed: u64) -> TrainOutcome {
        let s = benchmark(Benchmark::Cls3, [24, 9, 0], 32, 0.01, 3).unwrap();
        let cfg = ModelConfig::classification(3).with_depth(5, 4, 16);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        train(&cfg, &tc, &s.train, &s.val).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let a = tiny_run(7);
        let b = tiny_run(7);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model.params, b.model.params);
        let train_loss = |epoch| {
            a.metrics
                .iter()
                .find(|r| r.epoch == epoch && r.split == "train")
                .unwrap()
                .loss
        };
        assert!(train_loss(1) < train_loss(0), "{:?}", a.metrics);
        assert_eq!(a.tree_builds, 33);
        assert_ne!(tiny_run(8).metrics, a.metrics);
    }

    #[test]
    fn checkpoint_round_trip_restores_predictions() {
        let a = tiny_run(1).model;
        let mut b = Model::new(a.config.clone(), 99).unwrap();
        b.params
            .assign_from(&ParamStore::from_ptw1(&a.params.to_ptw1()).unwrap())
            .unwrap();
        let c = cloud(32, 5);
        assert_eq!(a.classify(&c).unwrap(), b.classify(&c).unwrap());
    }

    #[test]
    fn empty_validation_split_is_an_error() {
        let s = benchmark(Benchmark::Cls3, [6, 0, 0], 32, 0.0, 3).unwrap();
        let cfg = ModelConfig::classification(3).with_depth(5, 4, 16);
        assert!(matches!(
            train(&cfg, &TrainConfig::default(), &s.train, &s.val),
            Err(Error::EmptySplit("val"))
        ));
    }

    #[test]
    fn iou_counts_absent_parts_as_perfect() {
        let w = [1.0, 1.0, 1.0, 0.0];
        assert_eq!(shape_iou(&[0, 0, 1, 2], &[0, 0, 1, 0], &w, 3), 1.0);
        assert!((shape_iou(&[0, 1, 1, 0], &[0, 0, 1, 0], &w, 2) - 0.5).abs() < 1e-12);
    }
}
