//! Conditional latent diffusion: noise schedule, the frozen toy backbone
//! (autoencoder + denoising U-Net + mask U-Net), conditioning glue, DDIM
//! samplers with normal-prior initialization, and mask textual inversion.

pub mod autoencoder;
pub mod mask_unet;
pub mod unet;

use std::sync::Arc;

use rand::Rng;

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::graph::{batch_backward, Graph, NodeId, ParamStore, Partition};
use crate::gsm::{GsmVariant, PromptCtx};
use crate::nn::AdamW;
use crate::par;
use crate::rng;
use crate::scm::{Scm, ScmConfig};
use crate::semantic_map::SemanticMap;
use crate::tensor::Tensor;
use crate::token_bank::TokenBank;

use autoencoder::Autoencoder;
use mask_unet::{MaskUNet, MaskUNetDims};
use unet::{UNet, UNetDims};

// ── Noise schedule ───────────────────────────────────────────────────

/// Fixed forward-noising chain: linear betas, cumulative alpha products with
/// alpha_bar(0) = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 || beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end {
            return Err(Error::InvalidSpec(format!(
                "invalid schedule: T={t_max}, beta in [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
        Ok(NoiseSchedule { t_max, betas, alpha_bar })
    }

    pub fn from_parts(t_max: usize, betas: Vec<f64>) -> Result<Self> {
        if betas.len() != t_max {
            return Err(Error::Checkpoint("schedule beta count mismatch".into()));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { t_max, betas, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Invalid(format!("timestep {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }

    /// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
    pub fn forward_noise(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if z0.len() != eps.len() {
            return Err(Error::ShapeMismatch("forward_noise: z0 and eps differ".into()));
        }
        let ab = self.alpha_bar[t];
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| s0 * z + s1 * e).collect())
    }

    /// One-shot estimate of z0 from z_t given the exact noise.
    pub fn invert_exact(&self, z_t: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t];
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z_t.iter().zip(eps).map(|(z, e)| (z - s1 * e) / s0).collect())
    }

    /// Descending timestep grid from `t_start` to 0 with at most `n` update
    /// intervals (fewer when rounding collapses neighbors).
    pub fn timestep_grid(&self, t_start: usize, n: usize) -> Vec<usize> {
        assert!(t_start <= self.t_max);
        if t_start == 0 || n == 0 {
            return vec![0];
        }
        let mut ts: Vec<usize> = (0..=n).rev().map(|k| (t_start as f64 * k as f64 / n as f64).round() as usize).collect();
        ts.dedup();
        ts
    }

    /// Deterministic DDIM update from `t_hi` to `t_lo` given predicted noise.
    pub fn ddim_step(&self, z: &[f64], eps_hat: &[f64], t_hi: usize, t_lo: usize) -> Vec<f64> {
        let ab_hi = self.alpha_bar[t_hi];
        let ab_lo = self.alpha_bar[t_lo];
        let (shi0, shi1) = (ab_hi.sqrt(), (1.0 - ab_hi).sqrt());
        let (slo0, slo1) = (ab_lo.sqrt(), (1.0 - ab_lo).sqrt());
        z.iter()
            .zip(eps_hat)
            .map(|(zv, ev)| {
                let z0 = (zv - shi1 * ev) / shi0;
                slo0 * z0 + slo1 * ev
            })
            .collect()
    }
}

// ── Generation config ────────────────────────────────────────────────

/// How NDI translates t' into denoising iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdiStepRule {
    /// ceil(steps * t' / T) iterations: the t' share of the sampling budget.
    Proportional,
    /// One iteration per raw timestep (t' iterations).
    RawTimesteps,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerationConfig {
    pub steps: usize,
    pub t_prime: usize,
    pub ndi_rule: NdiStepRule,
    pub seed: u64,
    pub count: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { steps: 60, t_prime: 400, ndi_rule: NdiStepRule::Proportional, seed: 0, count: 1 }
    }
}

impl GenerationConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps < 1 || self.steps > t_max {
            return Err(Error::Config(format!("sampling steps {} outside [1, {t_max}]", self.steps)));
        }
        if self.t_prime > t_max {
            return Err(Error::Config(format!("t' = {} outside [0, {t_max}]", self.t_prime)));
        }
        Ok(())
    }

    /// Denoising iterations an NDI run will execute.
    pub fn ndi_iterations(&self, t_max: usize) -> usize {
        match self.ndi_rule {
            NdiStepRule::Proportional => {
                (self.steps as f64 * self.t_prime as f64 / t_max as f64).ceil() as usize
            }
            NdiStepRule::RawTimesteps => self.t_prime,
        }
    }
}

// ── Architecture ─────────────────────────────────────────────────────

/// How conditioning tokens reach the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Gated self-attention layers in every transformer block.
    Gated(GsmVariant),
    /// Conditioning tokens appended to the cross-attention context
    /// (the w/o-GSM ablation).
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub latent_ch: usize,
    pub unet_ch: [usize; 3],
    pub d_v: usize,
    pub heads: usize,
    pub temb: usize,
    pub groups: usize,
    pub d_f: usize,
    pub d_t: usize,
    pub grid: usize,
    pub prompt_max_len: usize,
    pub n_product_tokens: usize,
    pub k_anomaly_tokens: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mask_ch: [usize; 2],
    pub mask_d_v: usize,
    pub mask_heads: usize,
    pub mask_temb: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub init_seed: u64,
    pub num_classes: Option<usize>,
    pub scm_spatial_fusion: bool,
    pub conditioning: Option<ConditioningMode>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            latent_ch: 4,
            unet_ch: [32, 48, 64],
            d_v: 64,
            heads: 4,
            temb: 64,
            groups: 8,
            d_f: 128,
            d_t: 64,
            grid: 8,
            prompt_max_len: 24,
            n_product_tokens: 4,
            k_anomaly_tokens: 4,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            mask_ch: [16, 32],
            mask_d_v: 32,
            mask_heads: 2,
            mask_temb: 32,
            lora_rank: 4,
            lora_alpha: 4.0,
            init_seed: 0,
            num_classes: None,
            scm_spatial_fusion: true,
            conditioning: None,
        }
    }
}

impl ArchConfig {
    /// Paper-scale dimension preset (not intended to run on a desk machine).
    pub fn paper_scale() -> Self {
        ArchConfig { image_size: 256, d_f: 768, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 32 != 0 {
            return Err(Error::InvalidSpec("image size must be divisible by 32".into()));
        }
        if self.image_size / 8 != self.grid {
            return Err(Error::InvalidSpec(format!(
                "SCM grid {} inconsistent with image size {} at encoder stride 8",
                self.grid, self.image_size
            )));
        }
        if self.d_v % self.heads != 0 || self.mask_d_v % self.mask_heads != 0 {
            return Err(Error::InvalidSpec("token width must split across heads".into()));
        }
        Ok(())
    }
}

// ── Model ────────────────────────────────────────────────────────────

/// Finetune-time additions on top of the frozen backbone.
#[derive(Debug, Clone)]
pub struct Generator {
    pub scm: Scm,
    pub bank: TokenBank,
    pub mode: ConditioningMode,
}

/// The full model: frozen backbone plus optional generator parts.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub ae: Autoencoder,
    pub unet: UNet,
    pub mask_unet: MaskUNet,
    pub gen: Option<Generator>,
    pub latent_scale: f64,
}

impl DiffusionModel {
    /// Deterministic construction from the architecture record. When the
    /// record declares generator parts / instrumentation they are rebuilt in
    /// the same order, so checkpoint loading can assign values by name.
    pub fn from_arch(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(arch.init_seed, "model-init", 0);
        let schedule = NoiseSchedule::linear(arch.t_max, arch.beta_start, arch.beta_end)?;
        let ae = Autoencoder::new(&mut store, arch.latent_ch, &mut r);
        let unet = UNet::new(
            &mut store,
            "unet",
            UNetDims {
                latent_ch: arch.latent_ch,
                ch: arch.unet_ch,
                d_v: arch.d_v,
                heads: arch.heads,
                temb: arch.temb,
                prompt_dim: arch.d_t,
                groups: arch.groups,
            },
            &mut r,
        );
        let mask_unet = MaskUNet::new(
            &mut store,
            MaskUNetDims {
                ch: arch.mask_ch,
                d_v: arch.mask_d_v,
                heads: arch.mask_heads,
                temb: arch.mask_temb,
                prompt_dim: arch.d_t,
                groups: arch.groups.min(arch.mask_ch[0]),
            },
            crate::corpus::N_DEFECT_SHAPES,
            &mut r,
        );
        let mut model = DiffusionModel { arch: arch.clone(), store, schedule, ae, unet, mask_unet, gen: None, latent_scale: 1.0 };
        if let Some(c) = arch.num_classes {
            let mode = arch
                .conditioning
                .ok_or_else(|| Error::Checkpoint("generator parts declared without a conditioning mode".into()))?;
            model.attach_generator(c, mode)?;
        }
        Ok(model)
    }

    /// Build SCM, token bank, and (for gated modes) the injection layers for
    /// a product with `num_classes` anomaly classes.
    pub fn attach_generator(&mut self, num_classes: usize, mode: ConditioningMode) -> Result<()> {
        if self.gen.is_some() {
            return Err(Error::AlreadyInstrumented);
        }
        let mut r = rng::stream(self.arch.init_seed, "generator-init", 0);
        let scm = Scm::new(
            &mut self.store,
            ScmConfig {
                d_f: self.arch.d_f,
                d_v: self.arch.d_v,
                grid: self.arch.grid,
                d_t: self.arch.d_t,
                spatial_fusion: self.arch.scm_spatial_fusion,
            },
            num_classes,
            &mut r,
        );
        let bank = TokenBank::init(
            &mut self.store,
            self.arch.n_product_tokens,
            self.arch.k_anomaly_tokens,
            num_classes,
            self.arch.d_t,
            self.arch.prompt_max_len,
            self.arch.init_seed,
        )?;
        if let ConditioningMode::Gated(variant) = mode {
            self.unet.place_gated_all(
                &mut self.store,
                "gated",
                variant,
                self.arch.lora_rank,
                self.arch.lora_alpha,
                &mut r,
            )?;
        }
        self.arch.num_classes = Some(num_classes);
        self.arch.conditioning = Some(mode);
        self.gen = Some(Generator { scm, bank, mode });
        Ok(())
    }

    pub fn generator(&self) -> Result<&Generator> {
        self.gen.as_ref().ok_or_else(|| Error::Invalid("model has no generator parts (finetune not attached)".into()))
    }

    /// E(x) scaled to roughly unit variance; value only, no gradients.
    pub fn encode_to_latent(&self, image: &Tensor) -> Tensor {
        let mut g = Graph::new(&self.store);
        let x = g.input(image.clone());
        let z = self.ae.encode(&mut g, x);
        let mut out = g.value(z).clone();
        out.scale_assign(self.latent_scale);
        out
    }

    /// D(z / latent_scale) clamped to [0, 1]; value only.
    pub fn decode_latent(&self, z: &Tensor) -> Tensor {
        let mut g = Graph::new(&self.store);
        let mut zin = z.clone();
        zin.scale_assign(1.0 / self.latent_scale);
        let zn = g.input(zin);
        let x = self.ae.decode(&mut g, zn);
        g.value(x).map(|v| v.clamp(0.0, 1.0))
    }

    /// Unconditional prompt: zero embeddings with a single valid slot.
    fn zero_prompt(&self, g: &mut Graph) -> PromptCtx {
        let emb = g.input(Tensor::zeros(&[self.arch.prompt_max_len, self.arch.d_t]));
        let mut valid = vec![false; self.arch.prompt_max_len];
        valid[0] = true;
        (emb, Arc::new(valid))
    }

    /// Conditioning tokens and prompt context nodes for one (map, classes)
    /// pair, routed per the conditioning mode.
    pub fn conditioning_nodes(
        &self,
        g: &mut Graph,
        map: &SemanticMap,
        classes: &[usize],
    ) -> Result<(Option<NodeId>, PromptCtx)> {
        let Some(gen) = &self.gen else {
            return Ok((None, self.zero_prompt(g)));
        };
        let prompt_seq = gen.bank.assemble_prompt(classes)?;
        let (emb, valid) = gen.bank.embed_prompt(g, &prompt_seq);
        let cond = gen.scm.conditioning(g, &gen.bank, map, classes)?;
        match gen.mode {
            ConditioningMode::Gated(_) => Ok((Some(cond), (emb, valid))),
            ConditioningMode::CrossAttention => {
                let joined = g.concat_rows(&[emb, cond]);
                let mut v = valid.as_ref().clone();
                v.extend(std::iter::repeat(true).take(self.arch.grid * self.arch.grid));
                Ok((None, (joined, Arc::new(v))))
            }
        }
    }

    /// eps_theta(z_t, t, conditioning(S, classes)).
    pub fn eps_theta(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        t: usize,
        map: &SemanticMap,
        classes: &[usize],
        trace: Option<&mut Vec<&'static str>>,
    ) -> Result<NodeId> {
        let (cond, prompt) = self.conditioning_nodes(g, map, classes)?;
        self.unet.forward(g, z_t, t, cond, &prompt, trace)
    }

    /// Denoising objective (prediction-vs-noise MSE) built into an existing
    /// graph, for batch accumulation.
    pub fn training_loss_into(
        &self,
        g: &mut Graph,
        z0: &Tensor,
        map: &SemanticMap,
        classes: &[usize],
        t: usize,
        eps: &Tensor,
    ) -> Result<NodeId> {
        let z_t = Tensor::new(
            z0.shape().to_vec(),
            self.schedule.forward_noise(z0.data(), t, eps.data())?,
        );
        let zt_node = g.input(z_t);
        let eps_hat = self.eps_theta(g, zt_node, t, map, classes, None)?;
        let eps_node = g.input(eps.clone());
        Ok(g.mse_loss(eps_hat, eps_node))
    }

    /// Eq.-style denoising objective on a prepared latent.
    pub fn training_loss_graph<'a>(
        &'a self,
        z0: &Tensor,
        map: &SemanticMap,
        classes: &[usize],
        t: usize,
        eps: &Tensor,
    ) -> Result<(Graph<'a>, NodeId)> {
        let mut g = Graph::new(&self.store);
        let loss = self.training_loss_into(&mut g, z0, map, classes, t, eps)?;
        Ok((g, loss))
    }

    /// Convenience scalar loss from a raw image.
    pub fn training_loss(
        &self,
        image: &Tensor,
        map: &SemanticMap,
        classes: &[usize],
        t: usize,
        eps: &Tensor,
    ) -> Result<f64> {
        let z0 = self.encode_to_latent(image);
        let (g, loss) = self.training_loss_graph(&z0, map, classes, t, eps)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(v)
    }

    /// Value-level epsilon prediction with precomputed conditioning inputs.
    fn eps_value(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        prompt_emb: &Tensor,
        prompt_valid: &Arc<Vec<bool>>,
    ) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let z = g.input(z_t.clone());
        let c = cond.map(|c| g.input(c.clone()));
        let p = g.input(prompt_emb.clone());
        let out = self.unet.forward(&mut g, z, t, c, &(p, prompt_valid.clone()), None)?;
        Ok(g.value(out).clone())
    }

    /// Precompute conditioning values once per (map, classes); they do not
    /// depend on the timestep.
    fn conditioning_values(
        &self,
        map: &SemanticMap,
        classes: &[usize],
    ) -> Result<(Option<Tensor>, Tensor, Arc<Vec<bool>>)> {
        let mut g = Graph::new(&self.store);
        let (cond, (emb, valid)) = self.conditioning_nodes(&mut g, map, classes)?;
        Ok((cond.map(|c| g.value(c).clone()), g.value(emb).clone(), valid))
    }
}

// ── Sampling ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStats {
    pub denoise_iterations: usize,
}

fn run_ddim<F>(
    schedule: &NoiseSchedule,
    mut z: Vec<f64>,
    shape: &[usize],
    grid: &[usize],
    eps_fn: F,
) -> Result<(Tensor, usize)>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    let mut iterations = 0;
    for w in grid.windows(2) {
        let (t_hi, t_lo) = (w[0], w[1]);
        let zt = Tensor::new(shape.to_vec(), z.clone());
        let eps_hat = eps_fn(&zt, t_hi)?;
        z = schedule.ddim_step(&z, eps_hat.data(), t_hi, t_lo);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent at timestep {t_lo}")));
        }
        iterations += 1;
    }
    Ok((Tensor::new(shape.to_vec(), z), iterations))
}

/// Deterministic DDIM sampling from pure noise; the returned mask is the
/// binarized input map (grounding makes S the mask by construction).
pub fn sample(
    model: &DiffusionModel,
    map: &SemanticMap,
    classes: &[usize],
    cfg: &GenerationConfig,
    instance: u64,
) -> Result<(Tensor, Vec<bool>, SampleStats)> {
    cfg.validate(model.schedule.t_max())?;
    let side = model.arch.image_size / model.ae.stride();
    let shape = vec![model.arch.latent_ch, side, side];
    let numel: usize = shape.iter().product();
    let mut r = rng::stream(cfg.seed, "sample/noise", instance);
    let z_t = rng::normal_vec(&mut r, numel, 1.0);
    let (cond, emb, valid) = model.conditioning_values(map, classes)?;
    let grid = model.schedule.timestep_grid(model.schedule.t_max(), cfg.steps);
    let (z0, iters) = run_ddim(&model.schedule, z_t, &shape, &grid, |zt, t| {
        model.eps_value(zt, t, cond.as_ref(), &emb, &valid)
    })?;
    let image = model.decode_latent(&z0);
    Ok((image, map.to_mask(), SampleStats { denoise_iterations: iters }))
}

/// Normal-prior denoising initialization: start from the partially noised
/// latent of a real normal image and denoise the t' tail conditioned on the
/// target map.
pub fn ndi_sample(
    model: &DiffusionModel,
    normal_image: &Tensor,
    map: &SemanticMap,
    classes: &[usize],
    cfg: &GenerationConfig,
    instance: u64,
) -> Result<(Tensor, Vec<bool>, SampleStats)> {
    cfg.validate(model.schedule.t_max())?;
    let z0 = model.encode_to_latent(normal_image);
    if cfg.t_prime == 0 {
        // pure reconstruction
        let image = model.decode_latent(&z0);
        return Ok((image, map.to_mask(), SampleStats { denoise_iterations: 0 }));
    }
    let mut r = rng::stream(cfg.seed, "ndi/noise", instance);
    let eps = rng::normal_vec(&mut r, z0.numel(), 1.0);
    let z_tp = model.schedule.forward_noise(z0.data(), cfg.t_prime, &eps)?;
    let (cond, emb, valid) = model.conditioning_values(map, classes)?;
    let n_iters = cfg.ndi_iterations(model.schedule.t_max());
    let grid = model.schedule.timestep_grid(cfg.t_prime, n_iters);
    let shape = z0.shape().to_vec();
    let (zf, iters) = run_ddim(&model.schedule, z_tp, &shape, &grid, |zt, t| {
        model.eps_value(zt, t, cond.as_ref(), &emb, &valid)
    })?;
    let image = model.decode_latent(&zf);
    Ok((image, map.to_mask(), SampleStats { denoise_iterations: iters }))
}

// ── Mask diffusion ───────────────────────────────────────────────────

/// Binary mask to the +/-1 pixel-space encoding the mask U-Net diffuses.
pub fn mask_to_pm1(mask: &[bool], side: usize) -> Tensor {
    Tensor::new(vec![1, side, side], mask.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect())
}

/// Decode +/-1-space output to a binary mask: map to [0,1], threshold at 0.5.
pub fn pm1_to_mask(x: &Tensor) -> Vec<bool> {
    x.data().iter().map(|&v| (v + 1.0) / 2.0 >= 0.5).collect()
}

/// Textual inversion of the mask concept token (Eq.-style): only e_m moves.
///
/// Returns the per-step loss trace.
pub fn train_mask_token(
    model: &mut DiffusionModel,
    masks: &[Vec<bool>],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if masks.is_empty() {
        return Err(Error::Invalid("mask token training needs at least one real mask".into()));
    }
    let side = model.arch.image_size;
    let gen = model.generator()?;
    let bank = gen.bank.clone();
    let prompt = bank.mask_prompt();
    let ids = vec![bank.mask_token];
    let mut opt = AdamW::new(lr, 0.0, model.store.len());
    let mut trace = Vec::with_capacity(steps);
    let latents: Vec<Tensor> = masks.iter().map(|m| mask_to_pm1(m, side)).collect();
    for step in 0..steps {
        let mut br = rng::stream(seed, "mask-token/batch", step as u64);
        let picks: Vec<usize> = (0..batch).map(|_| br.random_range(0..latents.len())).collect();
        let (loss, grads) = batch_backward(&model.store, batch, |i, g| {
            let mut nr = rng::stream(seed, "mask-token/noise", (step * batch + i) as u64);
            let t = nr.random_range(1..=model.schedule.t_max());
            let z0 = &latents[picks[i]];
            let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut nr, z0.numel(), 1.0));
            let z_t = Tensor::new(z0.shape().to_vec(), model.schedule.forward_noise(z0.data(), t, eps.data()).unwrap());
            let zt = g.input(z_t);
            let ctx = {
                let (emb, valid) = bank.embed_prompt(g, &prompt);
                (emb, valid)
            };
            let eps_hat = model.mask_unet.forward(g, zt, t, &ctx).expect("mask unet forward");
            let eps_node = g.input(eps);
            g.mse_loss(eps_hat, eps_node)
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut model.store, &ids, &grads);
        trace.push((step, loss));
    }
    Ok(trace)
}

/// Mean diffusion loss of the mask U-Net on the given masks under the mask
/// concept prompt (used by the before/after textual-inversion oracle).
pub fn mask_token_loss(model: &DiffusionModel, masks: &[Vec<bool>], n_draws: usize, seed: u64) -> Result<f64> {
    let side = model.arch.image_size;
    let bank = &model.generator()?.bank;
    let prompt = bank.mask_prompt();
    let losses = par::map_indexed(n_draws, |i| {
        let mut r = rng::stream(seed, "mask-token-eval", i as u64);
        let m = &masks[i % masks.len()];
        let z0 = mask_to_pm1(m, side);
        let t = r.random_range(1..=model.schedule.t_max());
        let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut r, z0.numel(), 1.0));
        let z_t = Tensor::new(z0.shape().to_vec(), model.schedule.forward_noise(z0.data(), t, eps.data()).unwrap());
        let mut g = Graph::new(&model.store);
        let zt = g.input(z_t);
        let ctx = bank.embed_prompt(&mut g, &prompt);
        let eps_hat = model.mask_unet.forward(&mut g, zt, t, &ctx).expect("mask unet forward");
        let eps_node = g.input(eps);
        let loss = g.mse_loss(eps_hat, eps_node);
        g.value(loss).item()
    });
    Ok(losses.iter().sum::<f64>() / n_draws as f64)
}

/// Sample binary masks conditioned on e_m alone. Each mask keeps its largest
/// 4-connected component; empty decodes are resampled up to 10 times.
pub fn sample_masks(
    model: &DiffusionModel,
    count: usize,
    cfg: &GenerationConfig,
) -> Result<Vec<Vec<bool>>> {
    cfg.validate(model.schedule.t_max())?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let side = model.arch.image_size;
    let bank = &model.generator()?.bank;
    let prompt = bank.mask_prompt();
    let (emb, valid) = {
        let mut g = Graph::new(&model.store);
        let (e, v) = bank.embed_prompt(&mut g, &prompt);
        (g.value(e).clone(), v)
    };
    let results = par::map_indexed(count, |i| -> Result<Vec<bool>> {
        for attempt in 0..10u64 {
            let mut r = rng::stream(cfg.seed, "mask-sample", (i as u64) << 8 | attempt);
            let z_t = rng::normal_vec(&mut r, side * side, 1.0);
            let grid = model.schedule.timestep_grid(model.schedule.t_max(), cfg.steps);
            let (x0, _) = run_ddim(&model.schedule, z_t, &[1, side, side], &grid, |zt, t| {
                let mut g = Graph::new(&model.store);
                let z = g.input(zt.clone());
                let p = g.input(emb.clone());
                let out = model.mask_unet.forward(&mut g, z, t, &(p, valid.clone()))?;
                Ok(g.value(out).clone())
            })?;
            let raw = pm1_to_mask(&x0);
            let largest = crate::eval::metrics::largest_component(&raw, side, side);
            if largest.iter().any(|&m| m) {
                return Ok(largest);
            }
        }
        Err(Error::Invalid(format!("mask sampling: 10 attempts for instance {i} all decoded empty")))
    });
    results.into_iter().collect()
}

// ── Pretraining ──────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, lr: 3e-4, batch: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub ae_trace: Vec<(usize, f64)>,
    pub unet_trace: Vec<(usize, f64)>,
    pub mask_trace: Vec<(usize, f64)>,
    pub recon_mse_untrained: f64,
    pub recon_mse_trained: f64,
}

fn reconstruction_mse(model: &DiffusionModel, images: &[&Tensor]) -> f64 {
    let per = par::map_slice(images, |img| {
        let mut g = Graph::new(&model.store);
        let x = g.input((*img).clone());
        let z = model.ae.encode(&mut g, x);
        let y = model.ae.decode(&mut g, z);
        let loss = g.mse_loss(y, x);
        g.value(loss).item()
    });
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

/// Train the frozen base: autoencoder, unconditional denoiser, and the mask
/// prior, `steps` optimization steps each. The result carries the latent
/// scale and is ready to be frozen (every parameter is in the backbone
/// partition).
pub fn pretrain_backbone(
    corpora: &[&Corpus],
    arch: ArchConfig,
    cfg: &PretrainConfig,
) -> Result<(DiffusionModel, PretrainReport)> {
    if corpora.is_empty() || corpora.iter().all(|c| c.normals(Split::Train).is_empty()) {
        return Err(Error::Invalid("pretraining needs at least one normal training image".into()));
    }
    let mut model = DiffusionModel::from_arch(arch)?;
    let mut report = PretrainReport::default();

    let normals: Vec<&Tensor> = corpora
        .iter()
        .flat_map(|c| c.normals(Split::Train).into_iter().map(|s| &s.image))
        .collect();
    report.recon_mse_untrained = reconstruction_mse(&model, &normals);

    let ae_ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, e)| e.name.starts_with("ae."))
        .map(|(id, _)| id)
        .collect();
    let mut opt = AdamW::new(cfg.lr, 0.0, model.store.len());
    for step in 0..cfg.steps {
        let mut br = rng::stream(cfg.seed, "pretrain/ae/batch", step as u64);
        let picks: Vec<usize> = (0..cfg.batch).map(|_| br.random_range(0..normals.len())).collect();
        let (loss, grads) = batch_backward(&model.store, cfg.batch, |i, g| {
            let x = g.input(normals[picks[i]].clone());
            let z = model.ae.encode(g, x);
            let y = model.ae.decode(g, z);
            g.mse_loss(y, x)
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut model.store, &ae_ids, &grads);
        report.ae_trace.push((step, loss));
    }
    report.recon_mse_trained = reconstruction_mse(&model, &normals);

    // latent scale: normalize latent std over a sample of normals
    let sample_n = normals.len().min(64);
    let mut acc = Vec::new();
    for img in normals.iter().take(sample_n) {
        let mut g = Graph::new(&model.store);
        let x = g.input((*img).clone());
        let z = model.ae.encode(&mut g, x);
        acc.extend_from_slice(g.value(z).data());
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let std = (acc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    model.latent_scale = if std > 1e-6 { 1.0 / std } else { 1.0 };

    // unconditional denoiser on frozen-AE latents
    let latents: Vec<Tensor> = normals.iter().map(|img| model.encode_to_latent(img)).collect();
    let unet_ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, e)| e.name.starts_with("unet."))
        .map(|(id, _)| id)
        .collect();
    for step in 0..cfg.steps {
        let mut br = rng::stream(cfg.seed, "pretrain/unet/batch", step as u64);
        let picks: Vec<usize> = (0..cfg.batch).map(|_| br.random_range(0..latents.len())).collect();
        let (loss, grads) = batch_backward(&model.store, cfg.batch, |i, g| {
            let mut nr = rng::stream(cfg.seed, "pretrain/unet/noise", (step * cfg.batch + i) as u64);
            let t = nr.random_range(1..=model.schedule.t_max());
            let z0 = &latents[picks[i]];
            let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut nr, z0.numel(), 1.0));
            let z_t = Tensor::new(
                z0.shape().to_vec(),
                model.schedule.forward_noise(z0.data(), t, eps.data()).unwrap(),
            );
            let zt = g.input(z_t);
            let emb = g.input(Tensor::zeros(&[model.arch.prompt_max_len, model.arch.d_t]));
            let mut valid = vec![false; model.arch.prompt_max_len];
            valid[0] = true;
            let prompt = (emb, Arc::new(valid));
            let eps_hat = model.unet.forward(g, zt, t, None, &prompt, None).expect("unet forward");
            let eps_node = g.input(eps);
            g.mse_loss(eps_hat, eps_node)
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut model.store, &unet_ids, &grads);
        report.unet_trace.push((step, loss));
    }

    // mask prior on procedural defect masks, conditioned on shape vocabulary
    let side = model.arch.image_size;
    let mask_ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, e)| e.name.starts_with("mask_unet."))
        .map(|(id, _)| id)
        .collect();
    for step in 0..cfg.steps {
        let (loss, grads) = batch_backward(&model.store, cfg.batch, |i, g| {
            let mut nr = rng::stream(cfg.seed, "pretrain/mask/noise", (step * cfg.batch + i) as u64);
            let (mask, shape_idx) = crate::corpus::random_defect_mask(side, &mut nr);
            let z0 = mask_to_pm1(&mask, side);
            let t = nr.random_range(1..=model.schedule.t_max());
            let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut nr, z0.numel(), 1.0));
            let z_t = Tensor::new(
                z0.shape().to_vec(),
                model.schedule.forward_noise(z0.data(), t, eps.data()).unwrap(),
            );
            let zt = g.input(z_t);
            let prompt = model.mask_unet.shape_prompt(g, shape_idx, model.arch.prompt_max_len);
            let eps_hat = model.mask_unet.forward(g, zt, t, &prompt).expect("mask unet forward");
            let eps_node = g.input(eps);
            g.mse_loss(eps_hat, eps_node)
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut model.store, &mask_ids, &grads);
        report.mask_trace.push((step, loss));
    }

    debug_assert_eq!(model.store.partition_numel(Partition::Generator), 0);
    Ok((model, report))
}
