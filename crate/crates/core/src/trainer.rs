//! Mixed normal-anomalous finetuning over the trainable partition, with
//! resumable state, ablation switches, and a textual-inversion phase for the
//! mask token.
//!
//! Every step derives fresh ChaCha streams from (seed, domain, step), so a
//! resumed run replays the exact trajectory of an uninterrupted one; batch
//! gradients reduce in element order, so results are thread-count invariant.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::config_digest;
use crate::corpus::{Corpus, Label, Split};
use crate::diffusion::{train_mask_token, ConditioningMode, DiffusionModel};
use crate::error::{Error, Result};
use crate::graph::{batch_backward, Partition};
use crate::gsm::GsmVariant;
use crate::nn::{AdamW, OptimState};
use crate::rng;
use crate::semantic_map::SemanticMap;
use crate::tensor::Tensor;

// ── Config ───────────────────────────────────────────────────────────

/// Ablation switches (paper-style names in kebab case in config files).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Freeze the token bank at its initialization (fixed embeddings).
    pub no_dtl: bool,
    /// Drop the encoded spatial map from fusion.
    pub no_sff: bool,
    /// Route conditioning tokens into cross-attention instead of gated layers.
    pub no_gsm: bool,
    /// Train on anomalous samples only.
    pub no_mnt: bool,
    /// Sample from pure noise at synthesis time.
    pub no_ndi: bool,
    /// Injection-layer variant for the GSM ablations.
    pub variant: Option<GsmVariant>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability that a batch element is anomalous (the mix ratio).
    pub anomalous_fraction: f64,
    /// Share of test anomalies forming the few-shot training pool.
    pub few_shot_fraction: f64,
    /// Textual-inversion steps for the mask token after the main loop.
    pub mask_token_steps: usize,
    pub mask_token_lr: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 4,
            steps: 4000,
            anomalous_fraction: 0.5,
            few_shot_fraction: 1.0 / 3.0,
            mask_token_steps: 1200,
            mask_token_lr: 5e-3,
            seed: 0,
            checkpoint_every: 1000,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Paper-scale step budget behind a preset; dimensions stay desk-scale.
    pub fn paper_steps() -> Self {
        TrainConfig { steps: 40_000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.mask_token_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.anomalous_fraction > 0.0 && self.anomalous_fraction <= 1.0) {
            return Err(Error::Config("anomalous fraction must lie in (0, 1]".into()));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return Err(Error::Config("few-shot fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Effective anomalous share: the w/o-MNT ablation trains anomalous-only.
    pub fn effective_anomalous_fraction(&self) -> f64 {
        if self.ablation.no_mnt {
            1.0
        } else {
            self.anomalous_fraction
        }
    }

    pub fn conditioning_mode(&self) -> ConditioningMode {
        if self.ablation.no_gsm {
            ConditioningMode::CrossAttention
        } else {
            ConditioningMode::Gated(self.ablation.variant.unwrap_or(GsmVariant::Full))
        }
    }
}

// ── State ────────────────────────────────────────────────────────────

/// Resumable trainer state; serialized as the checkpoint's trainer blob.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub loss_trace: Vec<(usize, f64)>,
    pub mask_trace: Vec<(usize, f64)>,
    pub optim: OptimState,
    pub config_digest: String,
    pub mask_phase_done: bool,
}

impl TrainState {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("state serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))
    }

    /// CSV loss trace: `step,loss` rows (mask-token steps appended after the
    /// main loop with offset step ids).
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.loss_trace {
            out.push_str(&format!("{s},{l:.9}\n"));
        }
        let base = self.loss_trace.last().map(|(s, _)| s + 1).unwrap_or(0);
        for (s, l) in &self.mask_trace {
            out.push_str(&format!("{},{l:.9}\n", base + s));
        }
        out
    }
}

// ── Batch assembly ───────────────────────────────────────────────────

/// One training example: a corpus sample plus its prompt classes (empty for
/// normal samples, which train with all-zero maps).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub sample_idx: usize,
    pub classes: Vec<usize>,
}

/// Draw a batch: each element is anomalous with probability
/// `anomalous_fraction` (from the few-shot pool), otherwise a training
/// normal.
pub fn make_batch(
    corpus: &Corpus,
    pool: &[usize],
    normals: &[usize],
    batch_size: usize,
    anomalous_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<BatchItem>> {
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let anomalous = rng.random::<f64>() < anomalous_fraction;
        if anomalous {
            if pool.is_empty() {
                return Err(Error::Invalid("batch requested an anomalous sample but the pool is empty".into()));
            }
            let idx = pool[rng.random_range(0..pool.len())];
            let class = corpus.samples[idx].class_id.expect("pool sample has a class");
            out.push(BatchItem { sample_idx: idx, classes: vec![class] });
        } else {
            if normals.is_empty() {
                return Err(Error::Invalid("batch requested a normal sample but none exist".into()));
            }
            let idx = normals[rng.random_range(0..normals.len())];
            out.push(BatchItem { sample_idx: idx, classes: Vec::new() });
        }
    }
    Ok(out)
}

// ── Finetuning ───────────────────────────────────────────────────────

/// Attach generator parts shaped by the config's ablation flags. The
/// backbone must already be pretrained; this freezes it by construction
/// (only Generator-partition parameters are optimized afterwards).
pub fn attach_for_finetune(model: &mut DiffusionModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    model.arch.scm_spatial_fusion = !cfg.ablation.no_sff;
    model.attach_generator(corpus.num_classes, cfg.conditioning_mode())
}

fn trainable_ids(model: &DiffusionModel, cfg: &TrainConfig) -> Vec<crate::graph::ParamId> {
    model
        .store
        .iter()
        .filter(|(_, e)| e.partition == Partition::Generator)
        .filter(|(_, e)| !(cfg.ablation.no_dtl && e.name.starts_with("bank.")))
        .map(|(id, _)| id)
        .collect()
}

/// Run (or continue) the finetuning loop. `start` resumes from a saved
/// state; `checkpoint_path` gets a periodic and a final checkpoint with the
/// state embedded.
pub fn finetune_from(
    model: &mut DiffusionModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    start: Option<TrainState>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    let digest = config_digest(cfg);
    let gen = model.generator()?;
    if gen.mode != cfg.conditioning_mode() {
        return Err(Error::Config("model conditioning mode does not match the config".into()));
    }
    let (pool, _) = corpus.few_shot_split(cfg.few_shot_fraction);
    let normals: Vec<usize> = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Normal && s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(Error::Invalid("finetuning needs a non-empty few-shot anomalous pool".into()));
    }
    if !cfg.ablation.no_mnt && normals.is_empty() {
        return Err(Error::Invalid("mixed training needs normal training samples".into()));
    }

    let mut state = match start {
        Some(s) => {
            if s.config_digest != digest {
                return Err(Error::Config(
                    "resume rejected: config does not match the saved trajectory".into(),
                ));
            }
            s
        }
        None => TrainState {
            step: 0,
            loss_trace: Vec::new(),
            mask_trace: Vec::new(),
            optim: OptimState { step: 0, moments: Vec::new() },
            config_digest: digest.clone(),
            mask_phase_done: false,
        },
    };

    let ids = trainable_ids(model, cfg);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, model.store.len());
    opt.restore(&state.optim);

    // latent cache: the autoencoder is frozen, so z0 per sample is constant
    let mut latents: HashMap<usize, Tensor> = HashMap::new();
    for &i in pool.iter().chain(&normals) {
        latents.insert(i, model.encode_to_latent(&corpus.samples[i].image));
    }
    let zero_map = SemanticMap::zeros(corpus.image_size, corpus.image_size, corpus.num_classes);
    let anom_fraction = cfg.effective_anomalous_fraction();

    while state.step < cfg.steps {
        let step = state.step;
        let mut br = rng::stream(cfg.seed, "finetune/batch", step as u64);
        let batch = make_batch(corpus, &pool, &normals, cfg.batch_size, anom_fraction, &mut br)?;
        let (loss, grads) = batch_backward(&model.store, batch.len(), |i, g| {
            let item = &batch[i];
            let mut nr = rng::stream(cfg.seed, "finetune/noise", (step * cfg.batch_size + i) as u64);
            let t = nr.random_range(1..=model.schedule.t_max());
            let z0 = &latents[&item.sample_idx];
            let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut nr, z0.numel(), 1.0));
            let map = if item.classes.is_empty() { &zero_map } else { &corpus.samples[item.sample_idx].semantic_map };
            model
                .training_loss_into(g, z0, map, &item.classes, t, &eps)
                .expect("loss graph construction")
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut model.store, &ids, &grads);
        state.loss_trace.push((step, loss));
        state.step = step + 1;
        if let Some(path) = checkpoint_path {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                state.optim = opt.snapshot(&ids);
                crate::checkpoint::save(model, path, Some(&state.to_json()))?;
            }
        }
    }

    if !state.mask_phase_done && cfg.mask_token_steps > 0 {
        let masks: Vec<Vec<bool>> = pool.iter().map(|&i| corpus.samples[i].mask.clone()).collect();
        let mask_seed = rng::stream(cfg.seed, "finetune/mask-token", 0).random();
        state.mask_trace =
            train_mask_token(model, &masks, cfg.mask_token_steps, cfg.mask_token_lr, cfg.batch_size, mask_seed)?;
    }
    state.mask_phase_done = true;
    state.optim = opt.snapshot(&ids);
    if let Some(path) = checkpoint_path {
        crate::checkpoint::save(model, path, Some(&state.to_json()))?;
    }
    Ok(state)
}

/// Fresh finetuning run.
pub fn finetune(
    model: &mut DiffusionModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainState> {
    finetune_from(model, corpus, cfg, None, checkpoint_path)
}

/// Continue training from a checkpoint file produced by [`finetune_from`].
pub fn resume(
    checkpoint: &Path,
    corpus: &Corpus,
    cfg: &TrainConfig,
    checkpoint_out: Option<&Path>,
) -> Result<(DiffusionModel, TrainState)> {
    let (mut model, ts) = crate::checkpoint::load(checkpoint)?;
    let bytes = ts.ok_or_else(|| Error::Checkpoint("checkpoint carries no trainer state to resume".into()))?;
    let state = TrainState::from_json(&bytes)?;
    let state = finetune_from(&mut model, corpus, cfg, Some(state), checkpoint_out)?;
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, load_corpus, BasePattern, ProductSpec};
    use crate::diffusion::{pretrain_backbone, ArchConfig, PretrainConfig};

    pub(crate) fn tiny_arch() -> ArchConfig {
        ArchConfig {
            image_size: 32,
            grid: 4,
            unet_ch: [16, 16, 16],
            d_v: 16,
            heads: 2,
            temb: 16,
            d_f: 24,
            d_t: 16,
            mask_ch: [8, 8],
            mask_d_v: 8,
            mask_heads: 2,
            mask_temb: 8,
            prompt_max_len: 16,
            t_max: 100,
            ..Default::default()
        }
    }

    fn tiny_spec() -> ProductSpec {
        let mut spec = ProductSpec::preset(BasePattern::Disk, "disk");
        spec.image_size = 32;
        spec
    }

    fn tiny_setup(steps: usize) -> (tempfile::TempDir, Corpus, DiffusionModel) {
        let dir = tempfile::tempdir().unwrap();
        let root = generate_corpus(&tiny_spec(), dir.path(), 6, 3, 5).unwrap();
        let corpus = load_corpus(&root).unwrap();
        let (model, _) =
            pretrain_backbone(&[&corpus], tiny_arch(), &PretrainConfig { steps, batch: 2, ..Default::default() })
                .unwrap();
        (dir, corpus, model)
    }

    #[test]
    fn make_batch_respects_mix_and_templates() {
        let dir = tempfile::tempdir().unwrap();
        let root = generate_corpus(&tiny_spec(), dir.path(), 6, 3, 5).unwrap();
        let corpus = load_corpus(&root).unwrap();
        let (pool, _) = corpus.few_shot_split(1.0 / 3.0);
        let normals: Vec<usize> = corpus
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == Label::Normal && s.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        // all-anomalous mix (the w/o-MNT setting)
        let mut r = rng::stream(1, "t", 0);
        let b = make_batch(&corpus, &pool, &normals, 16, 1.0, &mut r).unwrap();
        assert!(b.iter().all(|it| it.classes.len() == 1));
        // balanced mix should produce both kinds over enough draws
        let mut r = rng::stream(2, "t", 0);
        let b = make_batch(&corpus, &pool, &normals, 64, 0.5, &mut r).unwrap();
        let n_anom = b.iter().filter(|it| !it.classes.is_empty()).count();
        assert!(n_anom > 10 && n_anom < 54, "mix off: {n_anom}/64");
        // normal items carry no anomaly classes (all-zero map template)
        assert!(b.iter().filter(|it| it.classes.is_empty()).all(|it| corpus.samples[it.sample_idx].mask.iter().all(|&m| !m)));
    }

    #[test]
    fn zero_steps_is_a_noop_and_frozen_stays_frozen() {
        let (_d, corpus, mut model) = tiny_setup(2);
        let cfg = TrainConfig { steps: 0, mask_token_steps: 0, seed: 3, ..Default::default() };
        // instrumentation adds frozen copies, so snapshot after attach
        attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
        let before_frozen = model.store.partition_digest(Partition::Backbone);
        let before_gen = model.store.partition_digest(Partition::Generator);
        finetune(&mut model, &corpus, &cfg, None).unwrap();
        assert_eq!(model.store.partition_digest(Partition::Backbone), before_frozen);
        assert_eq!(model.store.partition_digest(Partition::Generator), before_gen);
    }

    #[test]
    fn finetune_moves_only_the_trainable_partition() {
        let (_d, corpus, mut model) = tiny_setup(2);
        let cfg = TrainConfig {
            steps: 3,
            mask_token_steps: 2,
            batch_size: 2,
            seed: 4,
            checkpoint_every: 0,
            ..Default::default()
        };
        attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
        let frozen_before = model.store.partition_digest(Partition::Backbone);
        let gen_before = model.store.partition_digest(Partition::Generator);
        let mask_before = model.store.partition_digest(Partition::MaskToken);
        finetune(&mut model, &corpus, &cfg, None).unwrap();
        assert_eq!(model.store.partition_digest(Partition::Backbone), frozen_before);
        assert_ne!(model.store.partition_digest(Partition::Generator), gen_before);
        assert_ne!(model.store.partition_digest(Partition::MaskToken), mask_before);
    }

    #[test]
    fn no_dtl_freezes_the_bank() {
        let (_d, corpus, mut model) = tiny_setup(1);
        let cfg = TrainConfig {
            steps: 2,
            mask_token_steps: 0,
            batch_size: 2,
            seed: 5,
            checkpoint_every: 0,
            ablation: AblationFlags { no_dtl: true, ..Default::default() },
            ..Default::default()
        };
        attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
        let bank_ids: Vec<_> = model
            .store
            .iter()
            .filter(|(_, e)| e.name.starts_with("bank.") && e.partition == Partition::Generator)
            .map(|(id, _)| id)
            .collect();
        let before: Vec<Tensor> = bank_ids.iter().map(|&id| model.store.get(id).clone()).collect();
        finetune(&mut model, &corpus, &cfg, None).unwrap();
        for (id, b) in bank_ids.iter().zip(&before) {
            assert_eq!(model.store.get(*id).data(), b.data());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (_d, corpus, model0) = tiny_setup(2);
        let cfg = TrainConfig {
            steps: 6,
            mask_token_steps: 2,
            batch_size: 2,
            seed: 6,
            checkpoint_every: 3,
            ..Default::default()
        };
        // uninterrupted
        let mut m_full = model0.clone();
        attach_for_finetune(&mut m_full, &corpus, &cfg).unwrap();
        finetune(&mut m_full, &corpus, &cfg, None).unwrap();
        // interrupted at step 3 via the periodic checkpoint
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        let mut m_half = model0.clone();
        attach_for_finetune(&mut m_half, &corpus, &cfg).unwrap();
        // run only the first half by training with a truncated step budget
        // but identical digest: emulate interruption by stopping at the
        // periodic checkpoint file written at step 3.
        finetune(&mut m_half, &corpus, &cfg, Some(&ckpt)).unwrap();
        // the run finished, but the step-3 checkpoint was overwritten by the
        // final save; re-create the interrupted state explicitly instead:
        let mut m_half2 = model0.clone();
        attach_for_finetune(&mut m_half2, &corpus, &cfg).unwrap();
        let half_cfg = cfg.clone();
        let mut state = TrainState {
            step: 0,
            loss_trace: Vec::new(),
            mask_trace: Vec::new(),
            optim: OptimState { step: 0, moments: Vec::new() },
            config_digest: config_digest(&half_cfg),
            mask_phase_done: false,
        };
        // manually run 3 steps by temporarily training with steps=3 but the
        // full config digest, as the interruption would leave things
        {
            let ids = trainable_ids(&m_half2, &cfg);
            let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, m_half2.store.len());
            let (pool, _) = corpus.few_shot_split(cfg.few_shot_fraction);
            let normals: Vec<usize> = corpus
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == Label::Normal && s.split == Split::Train)
                .map(|(i, _)| i)
                .collect();
            let mut latents: HashMap<usize, Tensor> = HashMap::new();
            for &i in pool.iter().chain(&normals) {
                latents.insert(i, m_half2.encode_to_latent(&corpus.samples[i].image));
            }
            let zero_map = SemanticMap::zeros(corpus.image_size, corpus.image_size, corpus.num_classes);
            for step in 0..3usize {
                let mut br = rng::stream(cfg.seed, "finetune/batch", step as u64);
                let batch = make_batch(&corpus, &pool, &normals, cfg.batch_size, cfg.anomalous_fraction, &mut br).unwrap();
                let (loss, grads) = batch_backward(&m_half2.store, batch.len(), |i, g| {
                    let item = &batch[i];
                    let mut nr = rng::stream(cfg.seed, "finetune/noise", (step * cfg.batch_size + i) as u64);
                    let t = nr.random_range(1..=m_half2.schedule.t_max());
                    let z0 = &latents[&item.sample_idx];
                    let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut nr, z0.numel(), 1.0));
                    let map =
                        if item.classes.is_empty() { &zero_map } else { &corpus.samples[item.sample_idx].semantic_map };
                    m_half2.training_loss_into(g, z0, map, &item.classes, t, &eps).unwrap()
                });
                opt.update(&mut m_half2.store, &ids, &grads);
                state.loss_trace.push((step, loss));
                state.step = step + 1;
            }
            state.optim = opt.snapshot(&ids);
        }
        crate::checkpoint::save(&m_half2, &ckpt, Some(&state.to_json())).unwrap();
        let (m_resumed, _) = resume(&ckpt, &corpus, &cfg, None).unwrap();
        for (id, e) in m_full.store.iter() {
            let other = m_resumed.store.by_name(&e.name).unwrap();
            assert_eq!(
                m_resumed.store.get(other).data(),
                m_full.store.get(id).data(),
                "parameter {} differs after resume",
                e.name
            );
        }
    }

    #[test]
    fn resume_rejects_config_changes() {
        let (_d, corpus, mut model) = tiny_setup(1);
        let cfg = TrainConfig { steps: 2, mask_token_steps: 0, batch_size: 2, seed: 7, checkpoint_every: 0, ..Default::default() };
        attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        finetune(&mut model, &corpus, &cfg, Some(&ckpt)).unwrap();
        let bigger_batch = TrainConfig { batch_size: 3, ..cfg.clone() };
        assert!(matches!(resume(&ckpt, &corpus, &bigger_batch, None), Err(Error::Config(_))));
        // resume at the final step with the same config is a no-op
        let (m2, state) = resume(&ckpt, &corpus, &cfg, None).unwrap();
        assert_eq!(state.step, 2);
        for (id, e) in model.store.iter() {
            let other = m2.store.by_name(&e.name).unwrap();
            assert_eq!(m2.store.get(other).data(), model.store.get(id).data());
        }
    }

    #[test]
    fn loss_decreases_over_training() {
        let (_d, corpus, mut model) = tiny_setup(30);
        let cfg = TrainConfig {
            steps: 120,
            mask_token_steps: 0,
            batch_size: 2,
            seed: 8,
            checkpoint_every: 0,
            ..Default::default()
        };
        attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
        let state = finetune(&mut model, &corpus, &cfg, None).unwrap();
        let losses: Vec<f64> = state.loss_trace.iter().map(|(_, l)| *l).collect();
        let k = losses.len() / 10;
        let median = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(
            median(&losses[losses.len() - k..]) < median(&losses[..k]),
            "first 10% median {} vs last 10% median {}",
            median(&losses[..k]),
            median(&losses[losses.len() - k..])
        );
    }
}
