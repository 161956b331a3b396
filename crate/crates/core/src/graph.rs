//! Reverse-mode autodiff on a per-sample tape.
//!
//! A `Graph` records tensor ops during one forward pass and replays them in
//! reverse for gradients. Parameters live in a `ParamStore` and are
//! snapshotted into the tape when first referenced, so concurrent graphs can
//! share one store read-only. Batch parallelism builds one graph per sample
//! and reduces gradient maps in fixed batch order.

use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

// ── Parameter store ──────────────────────────────────────────────────

/// Which optimization stage owns a parameter.
///
/// `Backbone` parameters are trained once by pretraining and frozen for every
/// later stage. `Generator` parameters are the finetuning set (token bank,
/// spatial conditioning, gate scalars, LoRA factors). `MaskToken` is the
/// single textual-inversion embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Partition {
    Backbone,
    Generator,
    MaskToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub partition: Partition,
}

/// Named parameter tensors plus their stage partition.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, partition: Partition) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, partition });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Mutable access to every value slot at once (for disjoint updates).
    pub fn slots_mut(&mut self) -> Vec<Option<&mut Tensor>> {
        self.entries.iter_mut().map(|e| Some(&mut e.value)).collect()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids_in(&self, partition: Partition) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.partition == partition).map(|(i, _)| i).collect()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// SHA-256 over (name, shape, payload) of every parameter in `partition`,
    /// in id order. Used by the frozen-immutability checks.
    pub fn partition_digest(&self, partition: Partition) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (_, e) in self.iter().filter(|(_, e)| e.partition == partition) {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(e.value.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Total number of scalar parameters in a partition.
    pub fn partition_numel(&self, partition: Partition) -> usize {
        self.iter().filter(|(_, e)| e.partition == partition).map(|(_, e)| e.value.numel()).sum()
    }
}

/// Per-parameter gradients, dense over the store.
#[derive(Debug, Clone)]
pub struct GradMap {
    pub grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn empty(n_params: usize) -> Self {
        GradMap { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Accumulate `other` into `self`, in place.
    pub fn add_assign(&mut self, other: &GradMap) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.add_assign(s),
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// out = a @ b (or a @ b^T when `tb`); 2-D only.
    MatMul { a: NodeId, b: NodeId, tb: bool },
    /// Row-broadcast bias add: x [r,c] + bias [c].
    AddRow { x: NodeId, bias: NodeId },
    /// Channel-broadcast bias add: x [C,H,W] + bias [C].
    AddChanBias { x: NodeId, bias: NodeId },
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Row softmax; masked key columns were zeroed in the forward output.
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64 },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeom, cols: Vec<f64> },
    UpsampleNearest2 { x: NodeId },
    Transpose2(NodeId),
    Reshape { x: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    MeanRows(NodeId),
    MeanAll(NodeId),
    MseLoss { a: NodeId, b: NodeId },
    BceWithLogits { logits: NodeId, target: Arc<Tensor> },
    /// out = s * x where s is a one-element node.
    MulScalarNode { s: NodeId, x: NodeId },
    /// Mean negative log-softmax of the target column per row.
    CrossEntropyRows { logits: NodeId, targets: Arc<Vec<usize>> },
}

/// One forward pass worth of values and recorded ops.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    param_leaf: HashMap<ParamId, NodeId>,
    leaf_param: Vec<Option<ParamId>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), ops: Vec::new(), param_leaf: HashMap::new(), leaf_param: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(value);
        self.ops.push(op);
        self.leaf_param.push(None);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id]
    }

    /// Insert (once) a parameter as a leaf node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaf.get(&id) {
            return n;
        }
        let n = self.push(self.store.get(id).clone(), Op::Leaf);
        self.param_leaf.insert(id, n);
        self.leaf_param[n] = Some(id);
        n
    }

    /// Insert a constant/input leaf (no parameter gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    // ── Elementwise and linear ops ───────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape(), self.nodes[b].shape(), "add shape");
        let mut v = self.nodes[a].clone();
        v.add_assign(&self.nodes[b]);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape(), self.nodes[b].shape(), "sub shape");
        let v = Tensor::new(
            self.nodes[a].shape().to_vec(),
            self.nodes[a].data().iter().zip(self.nodes[b].data()).map(|(x, y)| x - y).collect(),
        );
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape(), self.nodes[b].shape(), "mul shape");
        let v = Tensor::new(
            self.nodes[a].shape().to_vec(),
            self.nodes[a].data().iter().zip(self.nodes[b].data()).map(|(x, y)| x * y).collect(),
        );
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// a @ b^T — the fast path for `Linear` layers and attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, tb: bool) -> NodeId {
        let (m, k) = (self.nodes[a].rows(), self.nodes[a].cols());
        let (bk, n) = if tb {
            (self.nodes[b].cols(), self.nodes[b].rows())
        } else {
            (self.nodes[b].rows(), self.nodes[b].cols())
        };
        assert_eq!(k, bk, "matmul inner dim");
        let mut out = vec![0.0; m * n];
        if tb {
            kernels::matmul_nt(self.nodes[a].data(), self.nodes[b].data(), &mut out, m, k, n);
        } else {
            kernels::matmul_nn(self.nodes[a].data(), self.nodes[b].data(), &mut out, m, k, n);
        }
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, tb })
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = (self.nodes[x].rows(), self.nodes[x].cols());
        assert_eq!(self.nodes[bias].numel(), c, "add_row bias width");
        let mut v = self.nodes[x].clone();
        {
            let b = self.nodes[bias].data();
            for i in 0..r {
                let row = &mut v.data_mut()[i * c..(i + 1) * c];
                for j in 0..c {
                    row[j] += b[j];
                }
            }
        }
        self.push(v, Op::AddRow { x, bias })
    }

    pub fn add_chan_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let sh = self.nodes[x].shape().to_vec();
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert_eq!(self.nodes[bias].numel(), c);
        let mut v = self.nodes[x].clone();
        {
            let b = self.nodes[bias].data();
            for ch in 0..c {
                for p in &mut v.data_mut()[ch * h * w..(ch + 1) * h * w] {
                    *p += b[ch];
                }
            }
        }
        self.push(v, Op::AddChanBias { x, bias })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].map(crate::fastmath::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId, valid: Option<Arc<Vec<bool>>>) -> NodeId {
        let (r, c) = (self.nodes[x].rows(), self.nodes[x].cols());
        if let Some(v) = &valid {
            assert_eq!(v.len(), c, "softmax mask width");
            assert!(v.iter().any(|&b| b), "softmax mask excludes every key");
        }
        let mut out = self.nodes[x].clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            match &valid {
                None => {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for p in row.iter_mut() {
                        *p = crate::fastmath::exp(*p - mx);
                        sum += *p;
                    }
                    let inv = 1.0 / sum;
                    for p in row.iter_mut() {
                        *p *= inv;
                    }
                }
                Some(v) => {
                    let mut mx = f64::NEG_INFINITY;
                    for (p, &ok) in row.iter().zip(v.iter()) {
                        if ok && *p > mx {
                            mx = *p;
                        }
                    }
                    let mut sum = 0.0;
                    for (p, &ok) in row.iter_mut().zip(v.iter()) {
                        if ok {
                            *p = crate::fastmath::exp(*p - mx);
                            sum += *p;
                        } else {
                            *p = 0.0;
                        }
                    }
                    let inv = 1.0 / sum;
                    for p in row.iter_mut() {
                        *p *= inv;
                    }
                }
            }
        }
        self.push(out, Op::SoftmaxRows { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (r, c) = (self.nodes[x].rows(), self.nodes[x].cols());
        assert_eq!(self.nodes[gamma].numel(), c);
        assert_eq!(self.nodes[beta].numel(), c);
        let mut out = Tensor::zeros(&[r, c]);
        {
            let xs = self.nodes[x].data();
            let g = self.nodes[gamma].data();
            let b = self.nodes[beta].data();
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let (mean, rstd) = row_stats(row, eps);
                let o = &mut out.data_mut()[i * c..(i + 1) * c];
                for j in 0..c {
                    o[j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let sh = self.nodes[x].shape().to_vec();
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert_eq!(c % groups, 0, "group_norm channel split");
        let mut out = Tensor::zeros(&sh);
        {
            let xs = self.nodes[x].data();
            let g = self.nodes[gamma].data();
            let b = self.nodes[beta].data();
            let per = (c / groups) * h * w;
            for gi in 0..groups {
                let span = &xs[gi * per..(gi + 1) * per];
                let (mean, rstd) = row_stats(span, eps);
                for (off, &v) in span.iter().enumerate() {
                    let flat = gi * per + off;
                    let ch = flat / (h * w);
                    out.data_mut()[flat] = (v - mean) * rstd * g[ch] + b[ch];
                }
            }
        }
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, eps })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeom) -> NodeId {
        let xs = self.nodes[x].shape();
        assert_eq!(xs, [geom.c_in, geom.h_in, geom.w_in], "conv input shape");
        assert_eq!(self.nodes[w].shape(), [geom.c_out, geom.c_in * geom.ksize * geom.ksize]);
        let cols = kernels::im2col(self.nodes[x].data(), &geom);
        let (ho, wo) = (geom.h_out(), geom.w_out());
        let hw = ho * wo;
        let mut out = vec![0.0; geom.c_out * hw];
        kernels::matmul_nn(self.nodes[w].data(), &cols, &mut out, geom.c_out, geom.c_in * geom.ksize * geom.ksize, hw);
        if let Some(bid) = bias {
            let b = self.nodes[bid].data();
            assert_eq!(b.len(), geom.c_out);
            for ch in 0..geom.c_out {
                for p in &mut out[ch * hw..(ch + 1) * hw] {
                    *p += b[ch];
                }
            }
        }
        self.push(Tensor::new(vec![geom.c_out, ho, wo], out), Op::Conv2d { x, w, bias, geom, cols })
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let sh = self.nodes[x].shape().to_vec();
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        {
            let xs = self.nodes[x].data();
            let od = out.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xs[(ch * h + y) * w + xx];
                        let base = (ch * 2 * h + 2 * y) * 2 * w + 2 * xx;
                        od[base] = v;
                        od[base + 1] = v;
                        od[base + 2 * w] = v;
                        od[base + 2 * w + 1] = v;
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest2 { x })
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let (r, c) = (self.nodes[x].rows(), self.nodes[x].cols());
        let v = Tensor::new(vec![c, r], kernels::transpose(self.nodes[x].data(), r, c));
        self.push(v, Op::Transpose2(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x].clone().reshaped(shape);
        self.push(v, Op::Reshape { x })
    }

    /// CHW feature map -> [H*W, C] token matrix (row-major cells).
    pub fn chw_to_tokens(&mut self, x: NodeId) -> NodeId {
        let sh = self.nodes[x].shape().to_vec();
        assert_eq!(sh.len(), 3);
        let flat = self.reshape(x, &[sh[0], sh[1] * sh[2]]);
        self.transpose2(flat)
    }

    /// [H*W, C] token matrix -> CHW feature map.
    pub fn tokens_to_chw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let c = self.nodes[x].cols();
        assert_eq!(self.nodes[x].rows(), h * w);
        let t = self.transpose2(x);
        self.reshape(t, &[c, h, w])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0]].cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            assert_eq!(self.nodes[p].cols(), c, "concat_rows width");
            r += self.nodes[p].rows();
            data.extend_from_slice(self.nodes[p].data());
        }
        self.push(Tensor::new(vec![r, c], data), Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0]].rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let pc = self.nodes[p].cols();
            assert_eq!(self.nodes[p].rows(), r, "concat_cols height");
            for i in 0..r {
                data[i * total + off..i * total + off + pc]
                    .copy_from_slice(&self.nodes[p].data()[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        self.push(Tensor::new(vec![r, total], data), Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Concatenate along the channel axis of CHW maps.
    pub fn concat_chan(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a].shape().to_vec(), self.nodes[b].shape().to_vec());
        assert_eq!(sa[1..], sb[1..], "concat_chan spatial dims");
        let fa = self.reshape(a, &[sa[0], sa[1] * sa[2]]);
        let fb = self.reshape(b, &[sb[0], sb[1] * sb[2]]);
        let cat = self.concat_rows(&[fa, fb]);
        self.reshape(cat, &[sa[0] + sb[0], sa[1], sa[2]])
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let c = self.nodes[x].cols();
        assert!(start + len <= self.nodes[x].rows());
        let data = self.nodes[x].data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(vec![len, c], data), Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.nodes[x].rows(), self.nodes[x].cols());
        assert!(start + len <= c);
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&self.nodes[x].data()[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(vec![r, len], data), Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let c = self.nodes[x].cols();
        let r = self.nodes[x].rows();
        let mut data = vec![0.0; idx.len() * c];
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < r, "gather_rows index {src} out of {r}");
            data[i * c..(i + 1) * c].copy_from_slice(&self.nodes[x].data()[src * c..(src + 1) * c]);
        }
        self.push(Tensor::new(vec![idx.len(), c], data), Op::GatherRows { x, idx })
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = (self.nodes[x].rows(), self.nodes[x].cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.nodes[x].data()[i * c + j];
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        self.push(Tensor::new(vec![1, c], data), Op::MeanRows(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].numel() as f64;
        let v = self.nodes[x].data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::MeanAll(x))
    }

    /// mean((a - b)^2)
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape(), self.nodes[b].shape());
        let n = self.nodes[a].numel() as f64;
        let v = self.nodes[a]
            .data()
            .iter()
            .zip(self.nodes[b].data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(v), Op::MseLoss { a, b })
    }

    /// mean over elements of the stable binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: Arc<Tensor>) -> NodeId {
        assert_eq!(self.nodes[logits].shape(), target.shape());
        let n = target.numel() as f64;
        let v = self.nodes[logits]
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (1.0 + crate::fastmath::exp(-z.abs())).ln())
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(v), Op::BceWithLogits { logits, target })
    }

    /// Stable mean cross-entropy over rows of logits.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Arc<Vec<usize>>) -> NodeId {
        let (r, c) = (self.nodes[logits].rows(), self.nodes[logits].cols());
        assert_eq!(targets.len(), r, "one target per row");
        let mut total = 0.0;
        for i in 0..r {
            let row = &self.nodes[logits].data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        self.push(Tensor::scalar(total / r as f64), Op::CrossEntropyRows { logits, targets })
    }

    pub fn mul_scalar_node(&mut self, s: NodeId, x: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].numel(), 1);
        let sv = self.nodes[s].item();
        let v = self.nodes[x].map(|v| sv * v);
        self.push(v, Op::MulScalarNode { s, x })
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss` node; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> GradMap {
        assert_eq!(self.nodes[loss].numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..self.ops.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads);
            // Leaves keep their gradient for parameter collection.
            if matches!(self.ops[id], Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut out = GradMap::empty(self.store.len());
        for (&pid, &node) in &self.param_leaf {
            if let Some(g) = grads[node].take() {
                out.grads[pid.0] = Some(g);
            }
        }
        out
    }

    fn backward_op(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(self.nodes[*b].data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(self.nodes[*a].data()).map(|(x, y)| x * y).collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * s)),
            Op::MatMul { a, b, tb } => {
                let (m, k) = (self.nodes[*a].rows(), self.nodes[*a].cols());
                let n = g.cols();
                if !tb {
                    // dA = g @ B^T ; dB = A^T @ g
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g.data(), self.nodes[*b].data(), &mut da, m, n, k);
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                    let at = kernels::transpose(self.nodes[*a].data(), m, k);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_nn(&at, g.data(), &mut db, k, m, n);
                    acc(grads, *b, Tensor::new(vec![k, n], db));
                } else {
                    // out = A @ B^T with B [n,k]: dA = g @ B ; dB = g^T @ A
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nn(g.data(), self.nodes[*b].data(), &mut da, m, n, k);
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                    let gt = kernels::transpose(g.data(), m, n);
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_nn(&gt, self.nodes[*a].data(), &mut db, n, m, k);
                    acc(grads, *b, Tensor::new(vec![n, k], db));
                }
            }
            Op::AddRow { x, bias } => {
                let (r, c) = (g.rows(), g.cols());
                acc(grads, *x, g.clone());
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g.data()[i * c + j];
                    }
                }
                acc(grads, *bias, Tensor::new(vec![c], db));
            }
            Op::AddChanBias { x, bias } => {
                let sh = g.shape();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                acc(grads, *x, g.clone());
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    db[ch] = g.data()[ch * hw..(ch + 1) * hw].iter().sum();
                }
                acc(grads, *bias, Tensor::new(vec![c], db));
            }
            Op::Gelu(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(self.nodes[*x].data()).map(|(gy, &v)| gy * gelu_prime(v)).collect(),
                );
                acc(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[id];
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gy, &t)| gy * (1.0 - t * t)).collect(),
                );
                acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id];
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gy, &s)| gy * s * (1.0 - s)).collect(),
                );
                acc(grads, *x, dx);
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id];
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, Tensor::new(vec![r, c], dx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                let xs = self.nodes[*x].data();
                let gam = self.nodes[*gamma].data();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xs[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let (mean, rstd) = row_stats(row, *eps);
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    let mut xhat = vec![0.0; c];
                    let mut dxh = vec![0.0; c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxh[j] = gr[j] * gam[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx[i * c + j] = rstd * (dxh[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(grads, *x, Tensor::new(vec![r, c], dx));
                acc(grads, *gamma, Tensor::new(vec![c], dgamma));
                acc(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let sh = self.nodes[*x].shape().to_vec();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let per = (c / groups) * h * w;
                let hw = h * w;
                let xs = self.nodes[*x].data();
                let gam = self.nodes[*gamma].data();
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for gi in 0..*groups {
                    let span = &xs[gi * per..(gi + 1) * per];
                    let gr = &g.data()[gi * per..(gi + 1) * per];
                    let (mean, rstd) = row_stats(span, *eps);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    let mut xhat = vec![0.0; per];
                    let mut dxh = vec![0.0; per];
                    for off in 0..per {
                        let ch = (gi * per + off) / hw;
                        xhat[off] = (span[off] - mean) * rstd;
                        dxh[off] = gr[off] * gam[ch];
                        m1 += dxh[off];
                        m2 += dxh[off] * xhat[off];
                        dgamma[ch] += gr[off] * xhat[off];
                        dbeta[ch] += gr[off];
                    }
                    m1 /= per as f64;
                    m2 /= per as f64;
                    for off in 0..per {
                        dx[gi * per + off] = rstd * (dxh[off] - m1 - xhat[off] * m2);
                    }
                }
                acc(grads, *x, Tensor::new(sh.clone(), dx));
                acc(grads, *gamma, Tensor::new(vec![c], dgamma));
                acc(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let hw = geom.h_out() * geom.w_out();
                let ck2 = geom.c_in * geom.ksize * geom.ksize;
                // dW = g · cols^T
                let mut dw = vec![0.0; geom.c_out * ck2];
                kernels::matmul_nt(g.data(), cols, &mut dw, geom.c_out, hw, ck2);
                acc(grads, *w, Tensor::new(vec![geom.c_out, ck2], dw));
                // dcols = W^T · g, then fold back
                let wt = kernels::transpose(self.nodes[*w].data(), geom.c_out, ck2);
                let mut dcols = vec![0.0; ck2 * hw];
                kernels::matmul_nn(&wt, g.data(), &mut dcols, ck2, geom.c_out, hw);
                let dx = kernels::col2im(&dcols, geom);
                acc(grads, *x, Tensor::new(vec![geom.c_in, geom.h_in, geom.w_in], dx));
                if let Some(bid) = bias {
                    let mut db = vec![0.0; geom.c_out];
                    for ch in 0..geom.c_out {
                        db[ch] = g.data()[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    acc(grads, *bid, Tensor::new(vec![geom.c_out], db));
                }
            }
            Op::UpsampleNearest2 { x } => {
                let sh = self.nodes[*x].shape().to_vec();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let base = (ch * 2 * h + 2 * y) * 2 * w + 2 * xx;
                            dx[(ch * h + y) * w + xx] = g.data()[base]
                                + g.data()[base + 1]
                                + g.data()[base + 2 * w]
                                + g.data()[base + 2 * w + 1];
                        }
                    }
                }
                acc(grads, *x, Tensor::new(sh, dx));
            }
            Op::Transpose2(x) => {
                let (r, c) = (g.rows(), g.cols());
                acc(grads, *x, Tensor::new(vec![c, r], kernels::transpose(g.data(), r, c)));
            }
            Op::Reshape { x } => {
                let sh = self.nodes[*x].shape().to_vec();
                acc(grads, *x, g.clone().reshaped(&sh));
            }
            Op::ConcatRows { parts } => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.nodes[p].rows();
                    let slice = g.data()[start * c..(start + r) * c].to_vec();
                    acc(grads, p, Tensor::new(vec![r, c], slice));
                    start += r;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols();
                    let mut dp = vec![0.0; r * pc];
                    for i in 0..r {
                        dp[i * pc..(i + 1) * pc].copy_from_slice(&g.data()[i * total + off..i * total + off + pc]);
                    }
                    acc(grads, p, Tensor::new(vec![r, pc], dp));
                    off += pc;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                acc(grads, *x, Tensor::new(vec![r, c], dx));
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                acc(grads, *x, Tensor::new(vec![r, c], dx));
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                let mut dx = vec![0.0; r * c];
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g.data()[i * c + j];
                    }
                }
                acc(grads, *x, Tensor::new(vec![r, c], dx));
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                acc(grads, *x, Tensor::new(vec![r, c], dx));
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].numel();
                let gv = g.item() / n as f64;
                acc(grads, *x, Tensor::full(self.nodes[*x].shape(), gv));
            }
            Op::MseLoss { a, b } => {
                let n = self.nodes[*a].numel() as f64;
                let gv = g.item();
                let da: Vec<f64> = self.nodes[*a]
                    .data()
                    .iter()
                    .zip(self.nodes[*b].data())
                    .map(|(x, y)| 2.0 * (x - y) / n * gv)
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                acc(grads, *a, Tensor::new(self.nodes[*a].shape().to_vec(), da));
                acc(grads, *b, Tensor::new(self.nodes[*b].shape().to_vec(), db));
            }
            Op::BceWithLogits { logits, target } => {
                let n = target.numel() as f64;
                let gv = g.item();
                let dz: Vec<f64> = self.nodes[*logits]
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &y)| (sigmoid(z) - y) / n * gv)
                    .collect();
                acc(grads, *logits, Tensor::new(self.nodes[*logits].shape().to_vec(), dz));
            }
            Op::MulScalarNode { s, x } => {
                let sv = self.nodes[*s].item();
                let ds: f64 = g.data().iter().zip(self.nodes[*x].data()).map(|(a, b)| a * b).sum();
                acc(grads, *s, Tensor::scalar(ds));
                acc(grads, *x, g.map(|v| v * sv));
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (r, c) = (self.nodes[*logits].rows(), self.nodes[*logits].cols());
                let gv = g.item() / r as f64;
                let mut dl = vec![0.0; r * c];
                for i in 0..r {
                    let row = &self.nodes[*logits].data()[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        dl[i * c + j] = gv * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *logits, Tensor::new(vec![r, c], dl));
            }
        }
    }
}

/// Build one scalar-loss graph per batch element (in parallel), then reduce
/// losses and gradients in element order. Each parameter slot is reduced by
/// exactly one task walking the batch in order, so the result is
/// bit-identical across thread counts. Returns the mean loss and mean
/// gradients.
pub fn batch_backward<F>(store: &ParamStore, n: usize, build: F) -> (f64, GradMap)
where
    F: Fn(usize, &mut Graph) -> NodeId + Sync,
{
    assert!(n > 0);
    let per: Vec<(f64, GradMap)> = crate::par::map_indexed(n, |i| {
        let mut g = Graph::new(store);
        let loss = build(i, &mut g);
        let gm = g.backward(loss);
        (g.value(loss).item(), gm)
    });
    let mut total = GradMap::empty(store.len());
    let mut loss_sum = 0.0;
    for (l, gm) in &per {
        loss_sum += l;
        total.add_assign(gm);
    }
    total.scale(1.0 / n as f64);
    (loss_sum / n as f64, total)
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

use crate::fastmath::{gelu, gelu_prime, sigmoid};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central finite differences against the tape for an arbitrary builder.
    fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], build: F, tol: f64)
    where
        F: Fn(&mut Graph) -> NodeId,
    {
        let analytic: Vec<Tensor> = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            let gm = g.backward(loss);
            ids.iter()
                .map(|id| gm.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(*id).shape())))
                .collect()
        };
        let eps = 1e-5;
        for (pi, &id) in ids.iter().enumerate() {
            for k in 0..store.get(id).numel() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let lp = {
                    let mut g = Graph::new(store);
                    let loss = build(&mut g);
                    g.value(loss).item()
                };
                store.get_mut(id).data_mut()[k] = orig - eps;
                let lm = {
                    let mut g = Graph::new(store);
                    let loss = build(&mut g);
                    g.value(loss).item()
                };
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[pi].data()[k];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "param {pi} elem {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn store_with(shapes: &[&[usize]], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "gradcheck", 0);
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, sh)| {
                let t = Tensor::new(sh.to_vec(), rng::normal_vec(&mut rng, sh.iter().product(), 0.5));
                store.add(format!("p{i}"), t, Partition::Generator)
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn grad_linear_chain() {
        let (mut store, ids) = store_with(&[&[3, 4], &[5, 4], &[5]], 1);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                let w = g.param(ids[1]);
                let b = g.param(ids[2]);
                let y = g.matmul_nt(x, w);
                let y = g.add_row(y, b);
                let y = g.gelu(y);
                let t = g.input(Tensor::zeros(&[3, 5]));
                g.mse_loss(y, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_attention_piece() {
        let (mut store, ids) = store_with(&[&[4, 6], &[3, 6]], 2);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let q = g.param(ids[0]);
                let k = g.param(ids[1]);
                let s = g.matmul_nt(q, k);
                let s = g.scale(s, 1.0 / (6.0f64).sqrt());
                let p = g.softmax_rows(s, None);
                let v = g.matmul(p, k);
                g.mean_all(v)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_masked_softmax_ignores_masked_keys() {
        let (mut store, ids) = store_with(&[&[2, 5]], 3);
        let valid = Arc::new(vec![true, true, false, true, false]);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                let p = g.softmax_rows(x, Some(valid.clone()));
                let t = g.input(Tensor::full(&[2, 5], 0.2));
                g.mse_loss(p, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_norms() {
        let (mut store, ids) = store_with(&[&[4, 6], &[6], &[6]], 4);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                let ga = g.param(ids[1]);
                let be = g.param(ids[2]);
                let y = g.layer_norm(x, ga, be, 1e-5);
                let y = g.tanh(y);
                g.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_group_norm_conv() {
        let (mut store, ids) = store_with(&[&[2, 4, 4], &[3, 2 * 9], &[3], &[2], &[2]], 5);
        let geom = ConvGeom { c_in: 2, h_in: 4, w_in: 4, c_out: 3, ksize: 3, stride: 1, pad: 1 };
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                let ga = g.param(ids[3]);
                let be = g.param(ids[4]);
                let xn = g.group_norm(x, ga, be, 2, 1e-5);
                let w = g.param(ids[1]);
                let b = g.param(ids[2]);
                let y = g.conv2d(xn, w, Some(b), geom);
                let y = g.gelu(y);
                g.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_strided_conv_and_upsample() {
        let (mut store, ids) = store_with(&[&[2, 6, 6], &[4, 2 * 9], &[4]], 6);
        let geom = ConvGeom { c_in: 2, h_in: 6, w_in: 6, c_out: 4, ksize: 3, stride: 2, pad: 1 };
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                let w = g.param(ids[1]);
                let b = g.param(ids[2]);
                let y = g.conv2d(x, w, Some(b), geom);
                let y = g.upsample_nearest2(y);
                let t = g.input(Tensor::full(&[4, 6, 6], 0.1));
                g.mse_loss(y, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_gather_slice_concat() {
        let (mut store, ids) = store_with(&[&[5, 4], &[2, 4]], 7);
        let idx = Arc::new(vec![0usize, 3, 3, 1]);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let table = g.param(ids[0]);
                let other = g.param(ids[1]);
                let picked = g.gather_rows(table, idx.clone());
                let joined = g.concat_rows(&[picked, other]);
                let left = g.slice_cols(joined, 0, 2);
                let right = g.slice_cols(joined, 2, 2);
                let back = g.concat_cols(&[right, left]);
                let head = g.slice_rows(back, 1, 3);
                let m = g.mean_rows(head);
                g.mean_all(m)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_scalar_gate() {
        let (mut store, ids) = store_with(&[&[1], &[3, 3]], 8);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let gamma = g.param(ids[0]);
                let x = g.param(ids[1]);
                let t = g.tanh(gamma);
                let y = g.mul_scalar_node(t, x);
                let z = g.add(y, x);
                g.mean_all(z)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_cross_entropy() {
        let (mut store, ids) = store_with(&[&[4, 5]], 12);
        let targets = Arc::new(vec![0usize, 3, 2, 4]);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                g.cross_entropy_rows(x, targets.clone())
            },
            1e-6,
        );
    }

    #[test]
    fn grad_bce_sigmoid() {
        let (mut store, ids) = store_with(&[&[3, 3]], 9);
        let target = Arc::new(Tensor::new(vec![3, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]));
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                g.bce_with_logits(x, target.clone())
            },
            1e-6,
        );
    }

    #[test]
    fn grad_transpose_token_roundtrip() {
        let (mut store, ids) = store_with(&[&[3, 4, 4]], 10);
        grad_check(
            &mut store,
            &ids.clone(),
            |g| {
                let x = g.param(ids[0]);
                let tok = g.chw_to_tokens(x);
                let back = g.tokens_to_chw(tok, 4, 4);
                let y = g.sigmoid(back);
                g.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn param_leaf_is_memoized() {
        let (store, ids) = store_with(&[&[2, 2]], 11);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let b = g.param(ids[0]);
        assert_eq!(a, b);
    }
}
