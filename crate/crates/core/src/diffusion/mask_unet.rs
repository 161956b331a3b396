//! Pixel-space diffusion U-Net for 1-channel anomaly masks.
//!
//! Masks diffuse as +/-1 images; one transformer block at the bottleneck
//! cross-attends to the prompt (a shape-vocabulary embedding during
//! pretraining, the learned mask concept e_m afterwards).

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamId, ParamStore, Partition};
use crate::gsm::PromptCtx;
use crate::nn::{Conv2d, GroupNorm, Mlp};
use crate::tensor::Tensor;

use super::unet::{sinusoidal_embedding, ResBlock, SpatialTransformer};

#[derive(Debug, Clone, Copy)]
pub struct MaskUNetDims {
    pub ch: [usize; 2],
    pub d_v: usize,
    pub heads: usize,
    pub temb: usize,
    pub prompt_dim: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct MaskUNet {
    pub dims: MaskUNetDims,
    time_mlp: Mlp,
    conv_in: Conv2d,
    down1: ResBlock,
    downc1: Conv2d,
    down2: ResBlock,
    downc2: Conv2d,
    mid1: ResBlock,
    tm: SpatialTransformer,
    mid2: ResBlock,
    upc1: Conv2d,
    up1: ResBlock,
    upc2: Conv2d,
    up2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    /// Frozen per-shape embeddings used to condition mask pretraining.
    pub shape_vocab: ParamId,
}

impl MaskUNet {
    pub fn new(store: &mut ParamStore, dims: MaskUNetDims, n_shapes: usize, rng: &mut ChaCha12Rng) -> Self {
        let p = Partition::Backbone;
        let [c0, c1] = dims.ch;
        MaskUNet {
            dims,
            time_mlp: Mlp::new(store, "mask_unet.time", dims.temb, 2 * dims.temb, dims.temb, p, rng),
            conv_in: Conv2d::new(store, "mask_unet.cin", 1, c0, 3, 1, 1, p, rng),
            down1: ResBlock::new(store, "mask_unet.down1", c0, c0, dims.temb, dims.groups, p, rng),
            downc1: Conv2d::new(store, "mask_unet.dc1", c0, c1, 3, 2, 1, p, rng),
            down2: ResBlock::new(store, "mask_unet.down2", c1, c1, dims.temb, dims.groups, p, rng),
            downc2: Conv2d::new(store, "mask_unet.dc2", c1, c1, 3, 2, 1, p, rng),
            mid1: ResBlock::new(store, "mask_unet.mid1", c1, c1, dims.temb, dims.groups, p, rng),
            tm: SpatialTransformer::new(store, "mask_unet.tm", c1, dims.d_v, dims.heads, dims.prompt_dim, p, rng),
            mid2: ResBlock::new(store, "mask_unet.mid2", c1, c1, dims.temb, dims.groups, p, rng),
            upc1: Conv2d::new(store, "mask_unet.uc1", c1, c1, 3, 1, 1, p, rng),
            up1: ResBlock::new(store, "mask_unet.up1", 2 * c1, c1, dims.temb, dims.groups, p, rng),
            upc2: Conv2d::new(store, "mask_unet.uc2", c1, c0, 3, 1, 1, p, rng),
            up2: ResBlock::new(store, "mask_unet.up2", 2 * c0, c0, dims.temb, dims.groups, p, rng),
            norm_out: GroupNorm::new(store, "mask_unet.nout", c0, dims.groups, p),
            conv_out: Conv2d::new(store, "mask_unet.cout", c0, 1, 3, 1, 1, p, rng),
            shape_vocab: store.add(
                "mask_unet.shape_vocab",
                Tensor::new(vec![n_shapes, dims.prompt_dim], crate::rng::normal_vec(rng, n_shapes * dims.prompt_dim, 0.02)),
                p,
            ),
        }
    }

    /// Prompt context holding one shape-vocabulary embedding, zero-padded.
    pub fn shape_prompt(&self, g: &mut Graph, shape_idx: usize, max_len: usize) -> PromptCtx {
        let vocab = g.param(self.shape_vocab);
        let row = g.gather_rows(vocab, Arc::new(vec![shape_idx]));
        let pad = g.input(Tensor::zeros(&[max_len - 1, self.dims.prompt_dim]));
        let emb = g.concat_rows(&[row, pad]);
        let mut valid = vec![false; max_len];
        valid[0] = true;
        (emb, Arc::new(valid))
    }

    pub fn forward(&self, g: &mut Graph, z_t: NodeId, t: usize, prompt: &PromptCtx) -> Result<NodeId> {
        let temb_in = g.input(sinusoidal_embedding(t as f64, self.dims.temb));
        let temb = self.time_mlp.forward(g, temb_in);

        let mut x = self.conv_in.forward(g, z_t);
        x = self.down1.forward(g, x, temb);
        let skip1 = x;
        x = self.downc1.forward(g, x);
        x = self.down2.forward(g, x, temb);
        let skip2 = x;
        x = self.downc2.forward(g, x);

        x = self.mid1.forward(g, x, temb);
        x = self.tm.forward(g, x, None, prompt, None)?;
        x = self.mid2.forward(g, x, temb);

        x = g.upsample_nearest2(x);
        x = self.upc1.forward(g, x);
        x = g.concat_chan(x, skip2);
        x = self.up1.forward(g, x, temb);
        x = g.upsample_nearest2(x);
        x = self.upc2.forward(g, x);
        x = g.concat_chan(x, skip1);
        x = self.up2.forward(g, x, temb);

        x = self.norm_out.forward(g, x);
        x = g.gelu(x);
        Ok(self.conv_out.forward(g, x))
    }
}
