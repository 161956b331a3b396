//! Layers over the tape: linear, conv, norms, MLP, multi-head attention,
//! plus the AdamW optimizer. A layer owns `ParamId`s into a shared store and
//! is itself cheap to clone.

use std::sync::Arc;

use crate::graph::{Graph, NodeId, ParamId, ParamStore, Partition};
use crate::kernels::ConvGeom;
use crate::rng;
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

/// y = x @ W^T + b, with W stored [d_out, d_in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        partition: Partition,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(vec![d_out, d_in], rng::normal_vec(rng, d_out * d_in, std)),
            partition,
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), partition));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.matmul_nt(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// 3x3-style conv with square kernels; weight stored [C_out, C_in*k*k].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        partition: Partition,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = c_in * ksize * ksize;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(vec![c_out, fan_in], rng::normal_vec(rng, c_out * fan_in, std)),
            partition,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]), partition);
        Conv2d { w, b, c_in, c_out, ksize, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let sh = g.value(x).shape().to_vec();
        assert_eq!(sh.len(), 3, "conv input must be CHW");
        assert_eq!(sh[0], self.c_in, "conv in-channels");
        let geom = ConvGeom {
            c_in: self.c_in,
            h_in: sh[1],
            w_in: sh[2],
            c_out: self.c_out,
            ksize: self.ksize,
            stride: self.stride,
            pad: self.pad,
        };
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), geom)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, partition: Partition) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0), partition);
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[dim]), partition);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.layer_norm(x, ga, be, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, partition: Partition) -> Self {
        assert_eq!(channels % groups, 0);
        let gamma = store.add(format!("{name}.g"), Tensor::full(&[channels], 1.0), partition);
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[channels]), partition);
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.group_norm(x, ga, be, self.groups, 1e-5)
    }
}

/// Two-layer GELU MLP; hidden width is the caller's choice.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        partition: Partition,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, true, partition, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, true, partition, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled-dot-product attention from explicit weight nodes.
///
/// `wq`/`wk`/`wv`/`wo` are [d, d_q] / [d, d_kv] / [d, d_kv] / [d, d] weight
/// nodes (so LoRA-adapted effective weights can be passed in), `heads` must
/// divide d, and `valid` masks key positions. Rows of every softmax sum to 1.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    queries: NodeId,
    keys_values: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    heads: usize,
    valid: Option<Arc<Vec<bool>>>,
) -> NodeId {
    let d = g.value(wq).rows();
    assert_eq!(d % heads, 0, "head split");
    let dh = d / heads;
    let q = g.matmul_nt(queries, wq);
    let k = g.matmul_nt(keys_values, wk);
    let v = g.matmul_nt(keys_values, wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s, valid.clone());
        outs.push(g.matmul(p, vh));
    }
    let merged = g.concat_cols(&outs);
    g.matmul_nt(merged, wo)
}

// ── Optimizer ────────────────────────────────────────────────────────

/// AdamW: adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update over `ids` given accumulated gradients.
    pub fn update(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &crate::graph::GradMap) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in ids {
            let Some(grad) = grads.get(id) else { continue };
            let shape = store.get(id).shape().to_vec();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let w = store.get_mut(id);
            for ((wv, gv), (mv, vv)) in w
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *wv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *wv);
            }
        }
    }

    /// Serialize step counter and moments for the given ids (in id order).
    pub fn snapshot(&self, ids: &[ParamId]) -> OptimState {
        OptimState {
            step: self.step,
            moments: ids
                .iter()
                .map(|id| {
                    (
                        id.0,
                        self.m[id.0].clone().map(|t| (t.shape().to_vec(), t.into_data())),
                        self.v[id.0].clone().map(|t| (t.shape().to_vec(), t.into_data())),
                    )
                })
                .collect(),
        }
    }

    pub fn restore(&mut self, state: &OptimState) {
        self.step = state.step;
        for (idx, m, v) in &state.moments {
            self.m[*idx] = m.clone().map(|(sh, d)| Tensor::new(sh, d));
            self.v[*idx] = v.clone().map(|(sh, d)| Tensor::new(sh, d));
        }
    }
}

/// Serializable optimizer state for resume.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimState {
    pub step: usize,
    #[allow(clippy::type_complexity)]
    pub moments: Vec<(usize, Option<(Vec<usize>, Vec<f64>)>, Option<(Vec<usize>, Vec<f64>)>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Partition;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "nn-test", 0);
        let wq = Linear::new(&mut store, "wq", 8, 8, false, Partition::Backbone, &mut r);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![5, 8], rng::normal_vec(&mut r, 40, 1.0)));
        let w = g.param(wq.w);
        let q = g.matmul_nt(x, w);
        let s = g.matmul_nt(q, q);
        let p = g.softmax_rows(s, None);
        for i in 0..5 {
            let row: f64 = g.value(p).data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((row - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]), Partition::Generator);
        let mut opt = AdamW::new(0.1, 0.0, store.len());
        let mut gm = crate::graph::GradMap::empty(store.len());
        gm.grads[id.0] = Some(Tensor::new(vec![2], vec![1.0, -2.0]));
        opt.update(&mut store, &[id], &gm);
        assert!(store.get(id).data()[0] < 1.0);
        assert!(store.get(id).data()[1] > -1.0);
    }

    #[test]
    fn adamw_snapshot_restore_resumes_identically() {
        let mut s1 = ParamStore::new();
        let id = s1.add("w", Tensor::new(vec![2], vec![0.3, 0.7]), Partition::Generator);
        let mut s2 = s1.clone();
        let mut gm = crate::graph::GradMap::empty(1);
        gm.grads[0] = Some(Tensor::new(vec![2], vec![0.5, -0.25]));

        let mut opt1 = AdamW::new(0.05, 0.01, 1);
        opt1.update(&mut s1, &[id], &gm);
        let snap = opt1.snapshot(&[id]);
        opt1.update(&mut s1, &[id], &gm);

        let mut opt2 = AdamW::new(0.05, 0.01, 1);
        opt2.restore(&snap);
        // reproduce state after step 1, then take step 2
        let mut s2b = {
            let mut tmp = s2.clone();
            let mut warm = AdamW::new(0.05, 0.01, 1);
            warm.update(&mut tmp, &[id], &gm);
            tmp
        };
        opt2.update(&mut s2b, &[id], &gm);
        assert_eq!(s1.get(id).data(), s2b.get(id).data());
        let _ = &mut s2;
    }
}
