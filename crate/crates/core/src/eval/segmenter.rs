//! The downstream inspection model: a small U-Net trained per product on
//! synthesized image-mask pairs, per-pixel sigmoid scores, BCE loss.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{batch_backward, Graph, NodeId, ParamStore, Partition};
use crate::nn::{AdamW, Conv2d};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegmenterConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Random horizontal/vertical flips during training.
    pub augment_flips: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { steps: 1200, lr: 1e-3, batch: 8, seed: 0, augment_flips: true }
    }
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    store: ParamStore,
    enc0: Conv2d,
    enc1: Conv2d,
    enc2: Conv2d,
    mid: Conv2d,
    dec1: Conv2d,
    dec1b: Conv2d,
    dec0: Conv2d,
    dec0b: Conv2d,
    out: Conv2d,
}

impl Segmenter {
    fn build(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "segmenter", 0);
        let p = Partition::Backbone;
        Segmenter {
            enc0: Conv2d::new(&mut store, "e0", 3, 16, 3, 2, 1, p, &mut r),
            enc1: Conv2d::new(&mut store, "e1", 16, 32, 3, 2, 1, p, &mut r),
            enc2: Conv2d::new(&mut store, "e2", 32, 64, 3, 2, 1, p, &mut r),
            mid: Conv2d::new(&mut store, "m", 64, 64, 3, 1, 1, p, &mut r),
            dec1: Conv2d::new(&mut store, "d1", 64, 32, 3, 1, 1, p, &mut r),
            dec1b: Conv2d::new(&mut store, "d1b", 64, 32, 3, 1, 1, p, &mut r),
            dec0: Conv2d::new(&mut store, "d0", 32, 16, 3, 1, 1, p, &mut r),
            dec0b: Conv2d::new(&mut store, "d0b", 32, 16, 3, 1, 1, p, &mut r),
            out: Conv2d::new(&mut store, "out", 16, 1, 3, 1, 1, p, &mut r),
            store,
        }
    }

    fn logits(&self, g: &mut Graph, image: &Tensor) -> NodeId {
        let x = g.input(image.clone());
        let mut h = self.enc0.forward(g, x);
        h = g.gelu(h);
        let s0 = h; // 16 ch, H/2
        h = self.enc1.forward(g, h);
        h = g.gelu(h);
        let s1 = h; // 32 ch, H/4
        h = self.enc2.forward(g, h);
        h = g.gelu(h);
        h = self.mid.forward(g, h);
        h = g.gelu(h);
        h = g.upsample_nearest2(h);
        h = self.dec1.forward(g, h);
        h = g.gelu(h);
        h = g.concat_chan(h, s1);
        h = self.dec1b.forward(g, h);
        h = g.gelu(h);
        h = g.upsample_nearest2(h);
        h = self.dec0.forward(g, h);
        h = g.gelu(h);
        h = g.concat_chan(h, s0);
        h = self.dec0b.forward(g, h);
        h = g.gelu(h);
        h = g.upsample_nearest2(h);
        self.out.forward(g, h)
    }

    /// Per-pixel anomaly scores in [0,1], flattened row-major.
    pub fn predict(&self, image: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let logits = self.logits(&mut g, image);
        let s = g.sigmoid(logits);
        g.value(s).data().to_vec()
    }
}

fn flip_image(img: &Tensor, h_flip: bool, v_flip: bool) -> Tensor {
    let sh = img.shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = if v_flip { h - 1 - y } else { y };
                let sx = if h_flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + x] = img.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(sh, out)
}

fn flip_mask(mask: &[bool], h: usize, w: usize, h_flip: bool, v_flip: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = if v_flip { h - 1 - y } else { y };
            let sx = if h_flip { w - 1 - x } else { x };
            out[y * w + x] = mask[sy * w + sx];
        }
    }
    out
}

/// Train on (image, mask) pairs; deterministic in the config seed. Returns
/// the model and its loss trace.
pub fn train_segmenter(
    pairs: &[(Tensor, Vec<bool>)],
    cfg: &SegmenterConfig,
) -> Result<(Segmenter, Vec<(usize, f64)>)> {
    if pairs.is_empty() {
        return Err(Error::Invalid("segmenter training needs at least one pair".into()));
    }
    let seg = Segmenter::build(cfg.seed);
    let mut seg = seg;
    let ids: Vec<_> = seg.store.iter().map(|(id, _)| id).collect();
    let mut opt = AdamW::new(cfg.lr, 0.0, seg.store.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let side = pairs[0].0.shape()[1];
    let batch = cfg.batch.min(pairs.len().max(1));
    for step in 0..cfg.steps {
        let mut br = rng::stream(cfg.seed, "segmenter/batch", step as u64);
        let picks: Vec<(usize, bool, bool)> = (0..batch)
            .map(|_| {
                let idx = br.random_range(0..pairs.len());
                let (hf, vf) = if cfg.augment_flips { (br.random(), br.random()) } else { (false, false) };
                (idx, hf, vf)
            })
            .collect();
        let (loss, grads) = batch_backward(&seg.store, batch, |i, g| {
            let (idx, hf, vf) = picks[i];
            let (img, mask) = &pairs[idx];
            let img = if hf || vf { flip_image(img, hf, vf) } else { img.clone() };
            let mask = if hf || vf { flip_mask(mask, side, side, hf, vf) } else { mask.clone() };
            let target = Tensor::new(vec![1, side, side], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
            let logits = seg.logits(g, &img);
            g.bce_with_logits(logits, Arc::new(target))
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut seg.store, &ids, &grads);
        trace.push((step, loss));
    }
    Ok((seg, trace))
}
