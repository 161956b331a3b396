//! Denoising U-Net: three levels (16^2, 8^2, 4^2 for the default latent),
//! one transformer block per level, residual conv blocks with timestep
//! conditioning.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamStore, Partition};
use crate::gsm::{GsmVariant, PromptCtx, TransformerBlock};
use crate::nn::{Conv2d, GroupNorm, Linear, Mlp};
use crate::tensor::Tensor;

/// sin/cos timestep features of width `dim`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (t * freq).sin();
        data[half + i] = (t * freq).cos();
    }
    Tensor::new(vec![1, dim], data)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb: usize,
        groups: usize,
        partition: Partition,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.n1"), c_in, groups, partition),
            conv1: Conv2d::new(store, &format!("{name}.c1"), c_in, c_out, 3, 1, 1, partition, rng),
            temb_proj: Linear::new(store, &format!("{name}.temb"), temb, c_out, true, partition, rng),
            norm2: GroupNorm::new(store, &format!("{name}.n2"), c_out, groups, partition),
            conv2: Conv2d::new(store, &format!("{name}.c2"), c_out, c_out, 3, 1, 1, partition, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, partition, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, temb: NodeId) -> NodeId {
        let mut h = self.norm1.forward(g, x);
        h = g.gelu(h);
        h = self.conv1.forward(g, h);
        let tb = self.temb_proj.forward(g, temb);
        let c_out = self.conv1.c_out;
        let tb = g.reshape(tb, &[c_out]);
        h = g.add_chan_bias(h, tb);
        h = self.norm2.forward(g, h);
        h = g.gelu(h);
        h = self.conv2.forward(g, h);
        let sk = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(sk, h)
    }
}

/// Transformer block lifted onto a CHW map with 1x1 projections and an outer
/// residual.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    proj_in: Conv2d,
    pub block: TransformerBlock,
    proj_out: Conv2d,
}

impl SpatialTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        d_v: usize,
        heads: usize,
        prompt_dim: usize,
        partition: Partition,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        SpatialTransformer {
            proj_in: Conv2d::new(store, &format!("{name}.pin"), channels, d_v, 1, 1, 0, partition, rng),
            block: TransformerBlock::new(store, &format!("{name}.block"), d_v, heads, prompt_dim, partition, rng),
            proj_out: Conv2d::new(store, &format!("{name}.pout"), d_v, channels, 1, 1, 0, partition, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        cond: Option<NodeId>,
        prompt: &PromptCtx,
        trace: Option<&mut Vec<&'static str>>,
    ) -> Result<NodeId> {
        let sh = g.value(x).shape().to_vec();
        let y = self.proj_in.forward(g, x);
        let tokens = g.chw_to_tokens(y);
        let tokens = self.block.forward(g, tokens, cond, prompt, trace)?;
        let y = g.tokens_to_chw(tokens, sh[1], sh[2]);
        let y = self.proj_out.forward(g, y);
        Ok(g.add(x, y))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UNetDims {
    pub latent_ch: usize,
    pub ch: [usize; 3],
    pub d_v: usize,
    pub heads: usize,
    pub temb: usize,
    pub prompt_dim: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub dims: UNetDims,
    time_mlp: Mlp,
    conv_in: Conv2d,
    down1: ResBlock,
    pub t1: SpatialTransformer,
    downc1: Conv2d,
    down2: ResBlock,
    pub t2: SpatialTransformer,
    downc2: Conv2d,
    mid1: ResBlock,
    pub tm: SpatialTransformer,
    mid2: ResBlock,
    upc1: Conv2d,
    up1: ResBlock,
    upc2: Conv2d,
    up2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: UNetDims, rng: &mut ChaCha12Rng) -> Self {
        let p = Partition::Backbone;
        let [c0, c1, c2] = dims.ch;
        let n = |s: &str| format!("{prefix}.{s}");
        UNet {
            dims,
            time_mlp: Mlp::new(store, &n("time"), dims.temb, 2 * dims.temb, dims.temb, p, rng),
            conv_in: Conv2d::new(store, &n("cin"), dims.latent_ch, c0, 3, 1, 1, p, rng),
            down1: ResBlock::new(store, &n("down1"), c0, c0, dims.temb, dims.groups, p, rng),
            t1: SpatialTransformer::new(store, &n("t1"), c0, dims.d_v, dims.heads, dims.prompt_dim, p, rng),
            downc1: Conv2d::new(store, &n("dc1"), c0, c1, 3, 2, 1, p, rng),
            down2: ResBlock::new(store, &n("down2"), c1, c1, dims.temb, dims.groups, p, rng),
            t2: SpatialTransformer::new(store, &n("t2"), c1, dims.d_v, dims.heads, dims.prompt_dim, p, rng),
            downc2: Conv2d::new(store, &n("dc2"), c1, c2, 3, 2, 1, p, rng),
            mid1: ResBlock::new(store, &n("mid1"), c2, c2, dims.temb, dims.groups, p, rng),
            tm: SpatialTransformer::new(store, &n("tm"), c2, dims.d_v, dims.heads, dims.prompt_dim, p, rng),
            mid2: ResBlock::new(store, &n("mid2"), c2, c2, dims.temb, dims.groups, p, rng),
            upc1: Conv2d::new(store, &n("uc1"), c2, c1, 3, 1, 1, p, rng),
            up1: ResBlock::new(store, &n("up1"), 2 * c1, c1, dims.temb, dims.groups, p, rng),
            upc2: Conv2d::new(store, &n("uc2"), c1, c0, 3, 1, 1, p, rng),
            up2: ResBlock::new(store, &n("up2"), 2 * c0, c0, dims.temb, dims.groups, p, rng),
            norm_out: GroupNorm::new(store, &n("nout"), c0, dims.groups, p),
            conv_out: Conv2d::new(store, &n("cout"), c0, dims.latent_ch, 3, 1, 1, p, rng),
        }
    }

    /// Instrument every transformer block with a gated layer.
    pub fn place_gated_all(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        variant: GsmVariant,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        self.t1.block.place_gated(store, &format!("{prefix}.t1"), variant, rank, alpha, rng)?;
        self.t2.block.place_gated(store, &format!("{prefix}.t2"), variant, rank, alpha, rng)?;
        self.tm.block.place_gated(store, &format!("{prefix}.tm"), variant, rank, alpha, rng)?;
        Ok(())
    }

    pub fn is_instrumented(&self) -> bool {
        self.t1.block.gated.is_some()
    }

    /// Predict the injected noise for `z_t` at timestep `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        t: usize,
        cond: Option<NodeId>,
        prompt: &PromptCtx,
        mut trace: Option<&mut Vec<&'static str>>,
    ) -> Result<NodeId> {
        let temb_in = g.input(sinusoidal_embedding(t as f64, self.dims.temb));
        let temb = self.time_mlp.forward(g, temb_in);

        let mut x = self.conv_in.forward(g, z_t);
        x = self.down1.forward(g, x, temb);
        x = self.t1.forward(g, x, cond, prompt, trace.as_deref_mut())?;
        let skip1 = x;
        x = self.downc1.forward(g, x);
        x = self.down2.forward(g, x, temb);
        x = self.t2.forward(g, x, cond, prompt, trace.as_deref_mut())?;
        let skip2 = x;
        x = self.downc2.forward(g, x);

        x = self.mid1.forward(g, x, temb);
        x = self.tm.forward(g, x, cond, prompt, trace)?;
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
