//! Reverse-mode differentiation over the small set of dense operations the
//! tree encoder needs, plus parameters, Adam and a finite-difference checker.
//!
//! Every graph value is a row-major matrix. Parameters live in a
//! [`ParamStore`]; a [`Graph`] records one forward pass and is discarded
//! after its backward pass.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense array of `f64` with up to three dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(shape_err("tensor", format!("rank must be 1..=3, got {}", shape.len())));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimensions folded into rows; a vector is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

pub const PTW1_MAGIC: &[u8; 4] = b"PTW1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix `out × inp` with He-normal entries.
    pub fn add_weight(&mut self, name: impl Into<String>, out: usize, inp: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / inp.max(1) as f64).sqrt();
        let data = (0..out * inp)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, Tensor::new(vec![out, inp], data).expect("consistent shape"))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, out: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[out]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `PTW1`, then per parameter: u32 name length, name bytes, u32 rank,
    /// u32 dims, f64 values, all little-endian. Records run to end of input.
    pub fn to_ptw1(&self) -> Vec<u8> {
        let mut out = PTW1_MAGIC.to_vec();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_ptw1(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::format("PTW1", detail);
        if !bytes.starts_with(PTW1_MAGIC) {
            return Err(bad("missing PTW1 header"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated record"))?;
            pos += n;
            Ok(s)
        };
        let mut store = ParamStore::new();
        while bytes.len() > 4 + store_bytes(&store) {
            let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
            let name_len = u32_at(take(4)?);
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let rank = u32_at(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?));
            }
            let len: usize = shape.iter().product();
            let data = take(8 * len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.id(&name).is_some() {
                return Err(bad("duplicate parameter name"));
            }
            store.add(name, Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ptw1())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ptw1(&fs::read(path)?)
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::format("PTW1", "parameter names do not match the model"));
        }
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if t.shape != o.shape {
                return Err(Error::format("PTW1", "parameter shapes do not match the model"));
            }
            t.data.copy_from_slice(&o.data);
        }
        Ok(())
    }
}

fn store_bytes(store: &ParamStore) -> usize {
    store
        .names
        .iter()
        .zip(&store.tensors)
        .map(|(n, t)| 8 + n.len() + 4 * t.shape.len() + 8 * t.len())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Max(Var, Var),
    Concat(Var, Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ScaleShift {
        x: Var,
        scale: Vec<f64>,
    },
    Transform3 {
        x: Var,
        m: Var,
    },
    Sum(Var),
    Xent {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
        total: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Closest approach to a ReLU or max kink seen during a forward pass, and a
/// fingerprint of which side of every kink each value fell on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkLog {
    pub min_margin: f64,
    pub pattern: u64,
}

impl KinkLog {
    fn new() -> Self {
        Self {
            min_margin: f64::INFINITY,
            pattern: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn record(&mut self, margin: f64, side: bool) {
        self.min_margin = self.min_margin.min(margin);
        self.pattern = (self.pattern ^ side as u64 ^ 0x100).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    kinks: Option<KinkLog>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that also logs kink margins, for gradient checking.
    pub fn tracking_kinks() -> Self {
        Self {
            kinks: Some(KinkLog::new()),
            ..Self::default()
        }
    }

    pub fn kinks(&self) -> Option<KinkLog> {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue(op_name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn as_matrix(t: Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        Tensor {
            shape: vec![r, c],
            data: t.data,
        }
    }

    /// Value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", Self::as_matrix(t), Op::Leaf, false)
    }

    /// Value whose gradient is kept after [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push("variable", Self::as_matrix(t), Op::Leaf, true)
    }

    /// The node for a parameter; repeated calls return the same node so
    /// that gradients sum over every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", Self::as_matrix(store.get(id).clone()), Op::Leaf, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x · Wᵀ` for `x: r × in` and `W: out × in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xt, wt) = (self.val(x), self.val(w));
        let (r, inp, out) = (xt.rows(), xt.cols(), wt.rows());
        if wt.cols() != inp {
            return Err(shape_err("linear", format!("x is {r}×{inp}, W is {out}×{}", wt.cols())));
        }
        let mut y = vec![0.0; r * out];
        for i in 0..r {
            let xi = xt.row(i);
            for o in 0..out {
                y[i * out + o] = dot(xi, wt.row(o));
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push("linear", Tensor::matrix(r, out, y)?, Op::Linear { x, w }, ng)
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.val(x), self.val(b));
        if bt.len() != xt.cols() {
            return Err(shape_err(
                "add_bias",
                format!("x has {} columns, bias has {}", xt.cols(), bt.len()),
            ));
        }
        let c = xt.cols();
        let y: Vec<f64> = xt.data.iter().enumerate().map(|(k, v)| v + bt.data[k % c]).collect();
        let ng = self.ng(x) || self.ng(b);
        self.push("add_bias", Tensor::matrix(xt.rows(), c, y)?, Op::AddBias { x, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let y: Vec<f64> = xt.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = xt.shape.clone();
        if let Some(k) = self.kinks.as_mut() {
            for &v in &self.nodes[x.0].value.data {
                k.record(v.abs(), v > 0.0);
            }
        }
        let ng = self.ng(x);
        self.push("relu", Tensor::new(shape, y)?, Op::Relu(x), ng)
    }

    /// Componentwise maximum; ties go to `a`.
    pub fn pointwise_max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        if at.shape != bt.shape {
            return Err(shape_err("pointwise_max", format!("{:?} vs {:?}", at.shape, bt.shape)));
        }
        let y: Vec<f64> = at
            .data
            .iter()
            .zip(&bt.data)
            .map(|(&p, &q)| if p >= q { p } else { q })
            .collect();
        let shape = at.shape.clone();
        if let Some(k) = self.kinks.as_mut() {
            let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for (&p, &q) in at.data.iter().zip(&bt.data) {
                // bitwise ties come from identical subgraphs and move together
                if p != q {
                    k.record((p - q).abs(), p > q);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push("pointwise_max", Tensor::new(shape, y)?, Op::Max(a, b), ng)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        if at.rows() != bt.rows() {
            return Err(shape_err("concat", format!("{} rows vs {} rows", at.rows(), bt.rows())));
        }
        let (r, ca, cb) = (at.rows(), at.cols(), bt.cols());
        let mut y = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            y.extend_from_slice(at.row(i));
            y.extend_from_slice(bt.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push("concat", Tensor::matrix(r, ca + cb, y)?, Op::Concat(a, b), ng)
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xt = self.val(x);
        let c = xt.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= xt.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {}", xt.rows())));
        }
        let mut y = Vec::with_capacity(index.len() * c);
        for &i in &index {
            y.extend_from_slice(xt.row(i));
        }
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            Tensor::matrix(index.len(), c, y)?,
            Op::Gather { x, index },
            ng,
        )
    }

    /// `y[i][j] = x[i][j] * scale[j] + shift[j]` with fixed constants.
    pub fn scale_shift(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let xt = self.val(x);
        let c = xt.cols();
        if scale.len() != c || shift.len() != c {
            return Err(shape_err(
                "scale_shift",
                format!("{c} columns, {} scales, {} shifts", scale.len(), shift.len()),
            ));
        }
        let y: Vec<f64> = xt
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v * scale[k % c] + shift[k % c])
            .collect();
        let ng = self.ng(x);
        self.push(
            "scale_shift",
            Tensor::matrix(xt.rows(), c, y)?,
            Op::ScaleShift { x, scale },
            ng,
        )
    }

    /// Applies one 3×3 matrix per group of rows: `x` is `(B·m) × 3`, `m` is
    /// `B × 9` holding row-major matrices, and row `i` of group `g` becomes
    /// `M_g · x_i`.
    pub fn transform3(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xt, mt) = (self.val(x), self.val(m));
        if xt.cols() != 3 || mt.cols() != 9 || mt.rows() == 0 || xt.rows() % mt.rows() != 0 {
            return Err(shape_err(
                "transform3",
                format!(
                    "x is {}×{}, matrices are {}×{}",
                    xt.rows(),
                    xt.cols(),
                    mt.rows(),
                    mt.cols()
                ),
            ));
        }
        let group = xt.rows() / mt.rows();
        let mut y = vec![0.0; xt.len()];
        for i in 0..xt.rows() {
            let mg = mt.row(i / group);
            let p = xt.row(i);
            for j in 0..3 {
                y[3 * i + j] = mg[3 * j] * p[0] + mg[3 * j + 1] * p[1] + mg[3 * j + 2] * p[2];
            }
        }
        let ng = self.ng(x) || self.ng(m);
        self.push(
            "transform3",
            Tensor::matrix(xt.rows(), 3, y)?,
            Op::Transform3 { x, m },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data.iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Weighted mean cross-entropy of row-wise softmax against `targets`.
    /// Rows with zero weight are ignored.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lt = self.val(logits);
        let (r, c) = (lt.rows(), lt.cols());
        if targets.len() != r || weights.len() != r {
            return Err(shape_err(
                "softmax_xent",
                format!("{r} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("softmax_xent", format!("target {t} with {c} classes")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(shape_err("softmax_xent", "weights sum to zero".into()));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = lt.row(i);
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let op = Op::Xent {
            logits,
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            total,
        };
        let ng = self.ng(logits);
        self.push("softmax_xent", Tensor::scalar(loss / total), op, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss has shape {:?}", self.val(loss).shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[v.0].needs_grad {
                    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                    f(slot);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w } => {
                    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (r, inp, out) = (xt.rows(), xt.cols(), wt.rows());
                    acc(*x, &mut |gx| {
                        for i in 0..r {
                            let gi = &g[i * out..(i + 1) * out];
                            let gxi = &mut gx[i * inp..(i + 1) * inp];
                            for (o, &go) in gi.iter().enumerate() {
                                if go != 0.0 {
                                    axpy(gxi, go, wt.row(o));
                                }
                            }
                        }
                    });
                    acc(*w, &mut |gw| {
                        for i in 0..r {
                            let xi = xt.row(i);
                            for o in 0..out {
                                let go = g[i * out + o];
                                if go != 0.0 {
                                    axpy(&mut gw[o * inp..(o + 1) * inp], go, xi);
                                }
                            }
                        }
                    });
                }
                Op::AddBias { x, b } => {
                    let c = nodes[b.0].value.len();
                    acc(*x, &mut |gx| axpy(gx, 1.0, &g));
                    acc(*b, &mut |gb| {
                        for (k, &gk) in g.iter().enumerate() {
                            gb[k % c] += gk;
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value.data;
                    acc(*x, &mut |gx| {
                        for k in 0..g.len() {
                            if xv[k] > 0.0 {
                                gx[k] += g[k];
                            }
                        }
                    });
                }
                Op::Max(a, b) => {
                    let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                    acc(*a, &mut |ga| {
                        for k in 0..g.len() {
                            if av[k] >= bv[k] {
                                ga[k] += g[k];
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for k in 0..g.len() {
                            if av[k] < bv[k] {
                                gb[k] += g[k];
                            }
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (nodes[a.0].value.cols(), nodes[b.0].value.cols());
                    let r = nodes[a.0].value.rows();
                    acc(*a, &mut |ga| {
                        for i in 0..r {
                            axpy(
                                &mut ga[i * ca..(i + 1) * ca],
                                1.0,
                                &g[i * (ca + cb)..i * (ca + cb) + ca],
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..r {
                            axpy(
                                &mut gb[i * cb..(i + 1) * cb],
                                1.0,
                                &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)],
                            );
                        }
                    });
                }
                Op::Gather { x, index } => {
                    let c = nodes[x.0].value.cols();
                    acc(*x, &mut |gx| {
                        for (i, &src) in index.iter().enumerate() {
                            axpy(&mut gx[src * c..(src + 1) * c], 1.0, &g[i * c..(i + 1) * c]);
                        }
                    });
                }
                Op::ScaleShift { x, scale } => {
                    let c = scale.len();
                    acc(*x, &mut |gx| {
                        for (k, &gk) in g.iter().enumerate() {
                            gx[k] += gk * scale[k % c];
                        }
                    });
                }
                Op::Transform3 { x, m } => {
                    let (xt, mt) = (&nodes[x.0].value, &nodes[m.0].value);
                    let group = xt.rows() / mt.rows();
                    acc(*x, &mut |gx| {
                        for i in 0..xt.rows() {
                            let mg = mt.row(i / group);
                            for j in 0..3 {
                                for k in 0..3 {
                                    gx[3 * i + k] += g[3 * i + j] * mg[3 * j + k];
                                }
                            }
                        }
                    });
                    acc(*m, &mut |gm| {
                        for i in 0..xt.rows() {
                            let p = xt.row(i);
                            let base = 9 * (i / group);
                            for j in 0..3 {
                                for k in 0..3 {
                                    gm[base + 3 * j + k] += g[3 * i + j] * p[k];
                                }
                            }
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
                Op::Xent {
                    logits,
                    probs,
                    targets,
                    weights,
                    total,
                } => {
                    let c = nodes[logits.0].value.cols();
                    acc(*logits, &mut |gl| {
                        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let s = g[0] * w / total;
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[i * c + j] += s * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter used in this graph, sorted by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .map_or_else(|| vec![0.0; self.val(v).len()], <[f64]>::to_vec);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of plain values.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| v - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient entry are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = &mut store.tensors[id.0].data;
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-6;

/// Points closer than this to a ReLU or max kink are jittered.
pub const KINK_MARGIN: f64 = 1e-5;

/// Attempts at finding a kink-free evaluation point.
pub const MAX_JITTERS: usize = 20;

const JITTER_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    /// How many times the point was jittered before the check ran.
    pub jitters: usize,
    /// False when no kink-free point was found within [`MAX_JITTERS`].
    pub kink_free: bool,
}

/// Compares reverse-mode gradients of the scalar `f` at `point` with
/// fourth-order central differences of step `eps`.
///
/// The point is jittered whenever a pre-activation lies within
/// [`KINK_MARGIN`] of a kink or a perturbed evaluation lands on a different
/// side of any kink than the centre.
pub fn grad_check<F>(f: F, point: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<(f64, KinkLog)> {
        let mut g = Graph::tracking_kinks();
        let out = f(&mut g, store)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(shape_err(
                "grad_check",
                format!("function returned shape {:?}", v.shape),
            ));
        }
        Ok((v.data[0], g.kinks.unwrap()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667_f3bc_c908);
    let mut current = point.clone();
    let mut jitters = 0;
    loop {
        let last_try = jitters == MAX_JITTERS;
        let mut g = Graph::tracking_kinks();
        let out = f(&mut g, &current)?;
        let centre = g.kinks.unwrap();
        if centre.min_margin < KINK_MARGIN && !last_try {
            jitter(&mut current, &mut rng);
            jitters += 1;
            continue;
        }
        g.backward(out)?;
        let mut analytic: Vec<Vec<f64>> = current.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for (id, grad) in g.param_grads() {
            analytic[id.0] = grad;
        }

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            worst_values: (0.0, 0.0),
            coordinates: 0,
            jitters,
            kink_free: true,
        };
        let mut work = current.clone();
        let mut crossed = false;
        'coords: for p in 0..work.tensors.len() {
            for k in 0..work.tensors[p].len() {
                let x0 = work.tensors[p].data[k];
                let mut vals = [0.0; 4];
                for (slot, step) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                    work.tensors[p].data[k] = x0 + step * eps;
                    let (v, log) = eval(&work)?;
                    if log.pattern != centre.pattern {
                        crossed = true;
                    }
                    vals[slot] = v;
                }
                work.tensors[p].data[k] = x0;
                if crossed && !last_try {
                    break 'coords;
                }
                // differences first, so an unchanged function gives exactly zero
                let numeric = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * eps);
                let a = analytic[p][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.coordinates += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((current.names[p].clone(), k));
                    report.worst_values = (a, numeric);
                }
            }
        }
        if crossed && !last_try {
            jitter(&mut current, &mut rng);
            jitters += 1;
            continue;
        }
        report.kink_free = !crossed && centre.min_margin >= KINK_MARGIN;
        return Ok(report);
    }
}

fn jitter(store: &mut ParamStore, rng: &mut impl Rng) {
    for t in store.tensors.iter_mut() {
        for x in t.data.iter_mut() {
            *x += JITTER_SCALE * rng.gen_range(-1.0..1.0);
        }
    }
}
