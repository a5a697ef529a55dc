//! Tape-based reverse-mode autodiff over whole 2-D tensors.
//!
//! Everything the models compute is expressed as ops on a [`Tape`]: each op
//! appends a node holding its forward value, and [`Tape::backward`] walks the
//! node list in reverse accumulating f64 gradients. Values are row-major
//! `[rows x cols]` matrices; scalars are `[1 x 1]`.
//!
//! Execution is single-threaded and allocation order is fixed, so a given
//! seed and input produce bit-identical values across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "tensor {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    /// Single row vector [1 x d].
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fill with uniform values in [lo, hi).
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut SeedRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { rows, cols, data }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// [R x C] + row-broadcast [1 x C]
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Row-wise softmax; excluded slots carry exactly 0 in the output, which
    /// is all the backward pass needs.
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Embedding(NodeId, Vec<usize>),
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Average over rows: [T x C] -> [1 x C].
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
    },
    /// Eq-style bag-of-words NLL: -(1/J) sum_j sum_l log softmax(row_j)[label_jl].
    BowNll {
        logits: NodeId,
        labels: Vec<Vec<usize>>,
    },
    /// sum_k max(0, phi + neg_k - pos) over scalar nodes.
    HingeSum {
        pos: NodeId,
        negs: Vec<NodeId>,
        phi: f64,
    },
    /// Elementwise multiply by a fixed 0 / (1/(1-rate)) mask.
    Dropout(NodeId, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Projection weights of one multi-head attention block, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    // ---- elementwise and affine ----------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        if self.shape(b) != (ra, ca) {
            return Err(Error::Dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x + y);
        Ok(self.push(Tensor { rows: ra, cols: ca, data }, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != ca {
            return Err(Error::Dim(format!(
                "add_bias: {}x{} + {}x{}",
                ra, ca, rb, cb
            )));
        }
        let b = &self.nodes[bias.0].value.data;
        let mut data = self.nodes[a.0].value.data.clone();
        for row in data.chunks_mut(ca) {
            for (x, y) in row.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        Ok(self.push(Tensor { rows: ra, cols: ca, data }, Op::AddBias(a, bias)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        if self.shape(b) != (ra, ca) {
            return Err(Error::Dim("sub: shape mismatch".into()));
        }
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x - y);
        Ok(self.push(Tensor { rows: ra, cols: ca, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        if self.shape(b) != (ra, ca) {
            return Err(Error::Dim("mul: shape mismatch".into()));
        }
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x * y);
        Ok(self.push(Tensor { rows: ra, cols: ca, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut value = self.nodes[a.0].value.clone();
        for x in value.data.iter_mut() {
            *x *= c;
        }
        self.push(value, Op::Scale(a, c))
    }

    // ---- matrix ops -----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul: {}x{} * {}x{}",
                m, ka, kb, n
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut out,
            m,
            ka,
            n,
        );
        Ok(self.push(Tensor { rows: m, cols: n, data: out }, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor { rows: c, cols: r, data }, Op::Transpose(a))
    }

    /// x @ w + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = map(&self.nodes[a.0].value, f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = map(&self.nodes[a.0].value, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = map(&self.nodes[a.0].value, |x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    // ---- softmax / normalization -----------------------------------------

    /// Row-wise softmax with optional exclusion mask (`true` = excluded slot,
    /// output exactly 0). Computed with max-subtraction. Errors if any row is
    /// fully excluded.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Dim(format!(
                    "masked_softmax: mask len {} for {}x{}",
                    m.len(),
                    r,
                    c
                )));
            }
        }
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mrow = mask.map(|m| &m[i * c..(i + 1) * c]);
            let keep = |j: usize| mrow.map_or(true, |m| !m[j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow(i));
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Tensor { rows: r, cols: c, data: out }, Op::MaskedSoftmax(a)))
    }

    /// Per-row standardization followed by affine gain/bias (both [1 x d]).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::Dim("layer_norm: gain/bias must be [1 x d]".into()));
        }
        let src = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor { rows: r, cols: c, data: out },
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    // ---- lookups / reshuffles ---------------------------------------------

    /// Gather embedding rows for `ids` from `table` [V x d].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_impl(table, ids, true)
    }

    /// Gather rows of `a` at `idx` (duplicates allowed).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.gather_impl(a, idx, false)
    }

    fn gather_impl(&mut self, a: NodeId, idx: &[usize], embedding: bool) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index(format!("row {} of {}x{}", i, r, c)));
            }
            data.extend_from_slice(&self.nodes[a.0].value.data[i * c..(i + 1) * c]);
        }
        let op = if embedding {
            Op::Embedding(a, idx.to_vec())
        } else {
            Op::GatherRows(a, idx.to_vec())
        };
        Ok(self.push(Tensor { rows: idx.len(), cols: c, data }, op))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Index(format!(
                "cols {}..{} of {}x{}",
                start,
                start + len,
                r,
                c
            )));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor { rows: r, cols: len, data }, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: no parts".into()));
        }
        let (r, _) = self.shape(parts[0]);
        let total: usize = parts
            .iter()
            .map(|&p| self.shape(p).1)
            .sum();
        for &p in parts {
            if self.shape(p).0 != r {
                return Err(Error::Dim("concat_cols: row mismatch".into()));
            }
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, c) = self.shape(p);
                data.extend_from_slice(&self.nodes[p.0].value.data[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor { rows: r, cols: total, data },
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    // ---- reductions -------------------------------------------------------

    /// Average pooling over time: [T x d] -> [1 x d]. Errors on empty input.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Dim("mean_rows: zero rows".into()));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        Ok(self.push(Tensor { rows: 1, cols: c, data }, Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel().max(1);
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(a))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean of -log softmax(logits)[t, targets[t]] over positions whose target
    /// is not `ignore`. Errors if every position is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let (t, v) = self.shape(logits);
        if targets.len() != t {
            return Err(Error::Dim(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                t
            )));
        }
        let src = &self.nodes[logits.0].value.data;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore {
                continue;
            }
            if tgt >= v {
                return Err(Error::Index(format!("target {} vs vocab {}", tgt, v)));
            }
            let row = &src[i * v..(i + 1) * v];
            total -= log_softmax_at(row, tgt);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
        ))
    }

    /// -(1/J) sum_j sum_l log softmax(row_j)[labels[j][l]]. Rows with empty
    /// label sets contribute zero but still count in J. Errors when J == 0.
    pub fn bow_nll(&mut self, logits: NodeId, labels: &[Vec<usize>]) -> Result<NodeId> {
        let (j, v) = self.shape(logits);
        if labels.len() != j {
            return Err(Error::Dim(format!(
                "bow_nll: {} label sets for {} rows",
                labels.len(),
                j
            )));
        }
        if j == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = &self.nodes[logits.0].value.data;
        let mut total = 0.0;
        for (i, set) in labels.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            for &l in set {
                if l >= v {
                    return Err(Error::Index(format!("bow label {} vs vocab {}", l, v)));
                }
                total -= log_softmax_at(row, l);
            }
        }
        Ok(self.push(
            Tensor::scalar(total / j as f64),
            Op::BowNll {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// sum_k max(0, phi + neg_k - pos); all nodes must be scalars.
    pub fn hinge_sum(&mut self, pos: NodeId, negs: &[NodeId], phi: f64) -> Result<NodeId> {
        if self.shape(pos) != (1, 1) {
            return Err(Error::Dim("hinge_sum: pos must be scalar".into()));
        }
        let rp = self.nodes[pos.0].value.data[0];
        let mut total = 0.0;
        for &n in negs {
            if self.shape(n) != (1, 1) {
                return Err(Error::Dim("hinge_sum: negs must be scalars".into()));
            }
            total += (phi + self.nodes[n.0].value.data[0] - rp).max(0.0);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::HingeSum {
                pos,
                negs: negs.to_vec(),
                phi,
            },
        ))
    }

    // ---- regularization -------------------------------------------------------

    /// Inverted dropout: zero each element with probability `rate`, scale the
    /// survivors by 1/(1-rate). `rate == 0` is the identity.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut SeedRng) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { scale })
            .collect();
        let (r, c) = self.shape(a);
        let data = zip_map(&self.nodes[a.0].value.data, &mask, |x, m| x * m);
        self.push(Tensor { rows: r, cols: c, data }, Op::Dropout(a, mask))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar node. Gradients for every reached node are
    /// available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.shape(target) != (1, 1) {
            return Err(Error::Dim("backward: target must be scalar".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[target.0] = Some(vec![1.0]);

        for i in (0..=target.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re=insert so callers can read it; backward only reads inputs' values.
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &g, &op);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let n = self.nodes[id.0].value.numel();
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; n]);
        }
        f(slot.as_mut().unwrap());
    }

    fn apply_backward(&mut self, i: usize, g: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga| axpy(ga, g, 1.0));
                self.acc(*b, |gb| axpy(gb, g, 1.0));
            }
            Op::AddBias(a, bias) => {
                self.acc(*a, |ga| axpy(ga, g, 1.0));
                let c = self.nodes[bias.0].value.cols;
                self.acc(*bias, |gb| {
                    for row in g.chunks(c) {
                        for (x, y) in gb.iter_mut().zip(row.iter()) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga| axpy(ga, g, 1.0));
                self.acc(*b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                self.acc(*a, |ga| {
                    for ((x, gg), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gg * y;
                    }
                });
                self.acc(*b, |gb| {
                    for ((x, gg), y) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gg * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |ga| axpy(ga, g, c));
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.shape();
                let n = self.nodes[b.0].value.cols;
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                // dA += dC * B^T ; dB += A^T * dC
                self.acc(*a, |ga| kernels::add_matmul_nt(g, &bv, ga, m, n, k));
                self.acc(*b, |gb| kernels::add_matmul_tn(&av, g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.shape();
                self.acc(*a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.data.clone();
                self.acc(*a, |ga| {
                    for ((x, gg), t) in ga.iter_mut().zip(g).zip(&out) {
                        *x += gg * (1.0 - t * t);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data.clone();
                self.acc(*a, |ga| {
                    for ((x, gg), s) in ga.iter_mut().zip(g).zip(&out) {
                        *x += gg * s * (1.0 - s);
                    }
                });
            }
            Op::Relu(a) => {
                let inp = self.nodes[a.0].value.data.clone();
                self.acc(*a, |ga| {
                    for ((x, gg), v) in ga.iter_mut().zip(g).zip(&inp) {
                        if *v > 0.0 {
                            *x += gg;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                // ds_j = s_j * (g_j - sum_k g_k s_k); excluded slots have s = 0.
                let out = self.nodes[i].value.clone();
                let c = out.cols;
                self.acc(*a, |ga| {
                    for r in 0..out.rows {
                        let s = &out.data[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let garow = &mut ga[r * c..(r + 1) * c];
                        for j in 0..c {
                            garow[j] += s[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.data.clone();
                let (r, c) = xv.shape();
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for row in 0..r {
                    let xr = &xv.data[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean = xr.iter().sum::<f64>() / cf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(&gv).map(|(gg, gn)| gg * gn).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dx[row * c + j] +=
                            inv / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.acc(*x, |gx| axpy(gx, &dx, 1.0));
                self.acc(*gain, |gg| axpy(gg, &dgain, 1.0));
                self.acc(*bias, |gb| axpy(gb, &dbias, 1.0));
            }
            Op::Embedding(table, ids) | Op::GatherRows(table, ids) => {
                let c = self.nodes[table.0].value.cols;
                let ids = ids.clone();
                self.acc(*table, |gt| {
                    for (k, &row) in ids.iter().enumerate() {
                        let src = &g[k * c..(k + 1) * c];
                        let dst = &mut gt[row * c..(row + 1) * c];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = self.nodes[a.0].value.shape();
                let (start, len) = (*start, *len);
                self.acc(*a, |ga| {
                    for i in 0..r {
                        let src = &g[i * len..(i + 1) * len];
                        let dst = &mut ga[i * c + start..i * c + start + len];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols;
                let rows = self.nodes[i].value.rows;
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let c = self.nodes[p.0].value.cols;
                    self.acc(p, |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            let dst = &mut gp[r * c..(r + 1) * c];
                            for (x, y) in dst.iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.nodes[a.0].value.shape();
                let inv = 1.0 / r as f64;
                self.acc(*a, |ga| {
                    for row in ga.chunks_mut(c) {
                        for (x, y) in row.iter_mut().zip(g) {
                            *x += y * inv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gg = g[0];
                self.acc(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gg;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel().max(1);
                let gg = g[0] / n as f64;
                self.acc(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gg;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let lv = self.nodes[logits.0].value.clone();
                let v = lv.cols;
                let scale = g[0] / *count as f64;
                let targets = targets.clone();
                let ignore = *ignore;
                self.acc(*logits, |gl| {
                    for (t, &tgt) in targets.iter().enumerate() {
                        if Some(tgt) == ignore {
                            continue;
                        }
                        let row = &lv.data[t * v..(t + 1) * v];
                        let grow = &mut gl[t * v..(t + 1) * v];
                        softmax_minus_onehot(row, &[tgt], scale, grow);
                    }
                });
            }
            Op::BowNll { logits, labels } => {
                let lv = self.nodes[logits.0].value.clone();
                let v = lv.cols;
                let scale = g[0] / labels.len() as f64;
                let labels = labels.clone();
                self.acc(*logits, |gl| {
                    for (j, set) in labels.iter().enumerate() {
                        if set.is_empty() {
                            continue;
                        }
                        let row = &lv.data[j * v..(j + 1) * v];
                        let grow = &mut gl[j * v..(j + 1) * v];
                        softmax_minus_onehot(row, set, scale, grow);
                    }
                });
            }
            Op::HingeSum { pos, negs, phi } => {
                let rp = self.nodes[pos.0].value.data[0];
                let mut active = 0.0;
                for &n in negs.clone().iter() {
                    let rn = self.nodes[n.0].value.data[0];
                    if phi + rn - rp > 0.0 {
                        active += 1.0;
                        self.acc(n, |gn| gn[0] += g[0]);
                    }
                }
                self.acc(*pos, |gp| gp[0] -= g[0] * active);
            }
            Op::Dropout(a, mask) => {
                let mask = mask.clone();
                self.acc(*a, |ga| {
                    for ((x, gg), m) in ga.iter_mut().zip(g).zip(&mask) {
                        *x += gg * m;
                    }
                });
            }
        }
    }
}

/// Multi-head attention: project q/k/v, per-head masked scaled dot-product,
/// concatenate heads, project out. `mask` is [Tq x Tk] with `true` = blocked.
/// Errors if `d` is not divisible by `heads` or a query row is fully blocked.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    mask: Option<&[bool]>,
    heads: usize,
    w: &AttnWeights,
) -> Result<NodeId> {
    let d = tape.value(q_in).cols;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dim(format!(
            "attention: dim {} not divisible by {} heads",
            d, heads
        )));
    }
    let dh = d / heads;
    let q = tape.linear(q_in, w.wq, w.bq)?;
    let k = tape.linear(k_in, w.wk, w.bk)?;
    let v = tape.linear(v_in, w.wv, w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.masked_softmax(scaled, mask)?;
        ctx.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&ctx)?;
    tape.linear(merged, w.wo, w.bo)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y * c;
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// grow += scale * (|labels| * softmax(row) - sum_l onehot(l)).
fn softmax_minus_onehot(row: &[f64], labels: &[usize], scale: f64, grow: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let exps: Vec<f64> = row
        .iter()
        .map(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        })
        .collect();
    let k = labels.len() as f64;
    for (gx, e) in grow.iter_mut().zip(&exps) {
        *gx += scale * k * e / sum;
    }
    for &l in labels {
        grow[l] -= scale;
    }
}

pub(crate) mod kernels {
    /// out = a[m x k] * b[k x n], k-unrolled so each output row is touched
    /// once per 4 inner products.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            let mut p = 0;
            while p + 4 <= k {
                let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
                let b0 = &b[p * n..p * n + n];
                let b1 = &b[(p + 1) * n..(p + 1) * n + n];
                let b2 = &b[(p + 2) * n..(p + 2) * n + n];
                let b3 = &b[(p + 3) * n..(p + 3) * n + n];
                for j in 0..n {
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                p += 4;
            }
            while p < k {
                let ap = arow[p];
                let brow = &b[p * n..p * n + n];
                for j in 0..n {
                    crow[j] += ap * brow[j];
                }
                p += 1;
            }
        }
    }

    /// out += a[m x n] * b[k x n]^T  (i.e. out[i,p] += dot(a_i, b_p)).
    pub fn add_matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let orow = &mut out[i * k..(i + 1) * k];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                let mut j = 0;
                while j + 2 <= n {
                    s0 += arow[j] * brow[j];
                    s1 += arow[j + 1] * brow[j + 1];
                    j += 2;
                }
                if j < n {
                    s0 += arow[j] * brow[j];
                }
                orow[p] += s0 + s1;
            }
        }
    }

    /// out += a[m x k]^T * b[m x n]  (i.e. out[p,:] += a[i,p] * b[i,:]).
    pub fn add_matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for p in 0..k {
                let aip = arow[p];
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
    }
}
