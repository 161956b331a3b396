//! Downstream protocol: synthesize image-mask pairs, train the inspection
//! U-Net on them, score the held-out real test split, and report the metric
//! suite plus generation-quality proxies.

use rand::Rng;

use crate::corpus::{Corpus, Label, Split};
use crate::diffusion::{ndi_sample, sample, sample_masks, DiffusionModel, GenerationConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::semantic_map::SemanticMap;
use crate::tensor::Tensor;

use super::metrics;
use super::proxy::{DefectClassifier, FeatureNet};
use super::segmenter::{train_segmenter, SegmenterConfig};
use super::{MetricSet, ProductEval};

/// Where the conditioning masks for synthesis come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Diffusion sampling conditioned on the learned mask token.
    LearnedToken,
    /// Few-shot real masks with random flips and shifts.
    PerturbedReal,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProtocolConfig {
    pub n_pairs: usize,
    pub mask_source: MaskSource,
    pub generation: GenerationConfig,
    /// Share of test anomalies used as the few-shot pool (rest is evaluated).
    pub few_shot_fraction: f64,
    pub segmenter: SegmenterConfig,
    pub classifier_steps: usize,
    /// Start synthesis from noised normal latents; false is the w/o-NDI path.
    pub use_ndi: bool,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_pairs: 200,
            mask_source: MaskSource::LearnedToken,
            generation: GenerationConfig::default(),
            few_shot_fraction: 1.0 / 3.0,
            segmenter: SegmenterConfig::default(),
            classifier_steps: 400,
            use_ndi: true,
            seed: 0,
        }
    }
}

/// One synthesized training example plus its provenance.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub class_id: usize,
    /// Index of the NDI source sample in the corpus (train normal).
    pub source_idx: usize,
}

fn shift_mask(mask: &[bool], side: usize, dy: i64, dx: i64) -> Vec<bool> {
    let mut out = vec![false; side * side];
    for y in 0..side as i64 {
        for x in 0..side as i64 {
            let (sy, sx) = (y - dy, x - dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side && mask[sy as usize * side + sx as usize]
            {
                out[y as usize * side + x as usize] = true;
            }
        }
    }
    out
}

fn flip_mask(mask: &[bool], side: usize, hf: bool, vf: bool) -> Vec<bool> {
    let mut out = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let sy = if vf { side - 1 - y } else { y };
            let sx = if hf { side - 1 - x } else { x };
            out[y * side + x] = mask[sy * side + sx];
        }
    }
    out
}

/// Conditioning masks with class assignments for `n_pairs` syntheses.
fn conditioning_masks(
    model: &DiffusionModel,
    corpus: &Corpus,
    pool: &[usize],
    cfg: &ProtocolConfig,
) -> Result<Vec<(Vec<bool>, usize)>> {
    let side = corpus.image_size;
    let classes: Vec<usize> = (1..=corpus.num_classes).collect();
    match cfg.mask_source {
        MaskSource::LearnedToken => {
            let gen_cfg = GenerationConfig {
                seed: rng::stream(cfg.seed, "protocol/mask-seed", 0).random(),
                count: cfg.n_pairs,
                ..cfg.generation
            };
            let masks = sample_masks(model, cfg.n_pairs, &gen_cfg)?;
            Ok(masks
                .into_iter()
                .enumerate()
                .map(|(i, m)| (m, classes[i % classes.len()]))
                .collect())
        }
        MaskSource::PerturbedReal => {
            if pool.is_empty() {
                return Err(Error::Invalid("perturbed-real masks need a non-empty few-shot pool".into()));
            }
            Ok((0..cfg.n_pairs)
                .map(|i| {
                    let mut r = rng::stream(cfg.seed, "protocol/perturb", i as u64);
                    let src = pool[r.random_range(0..pool.len())];
                    let sample = &corpus.samples[src];
                    let mut m = flip_mask(&sample.mask, side, r.random(), r.random());
                    let dy = r.random_range(-10..=10);
                    let dx = r.random_range(-10..=10);
                    let shifted = shift_mask(&m, side, dy, dx);
                    if shifted.iter().any(|&b| b) {
                        m = shifted;
                    }
                    (m, sample.class_id.expect("pool sample has class"))
                })
                .collect())
        }
    }
}

/// Synthesize `n_pairs` image-mask pairs from the trained generator.
pub fn synthesize_pairs(model: &DiffusionModel, corpus: &Corpus, cfg: &ProtocolConfig) -> Result<Vec<SynthPair>> {
    cfg.generation.validate(model.schedule.t_max())?;
    let (pool, _) = corpus.few_shot_split(cfg.few_shot_fraction);
    let masks = conditioning_masks(model, corpus, &pool, cfg)?;
    let train_normals: Vec<usize> = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Normal && s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train_normals.is_empty() {
        return Err(Error::Invalid("synthesis needs training normals as NDI sources".into()));
    }
    let side = corpus.image_size;
    let results = par::map_indexed(masks.len(), |i| -> Result<SynthPair> {
        let (mask, class_id) = &masks[i];
        let mut r = rng::stream(cfg.seed, "protocol/source", i as u64);
        let source_idx = train_normals[r.random_range(0..train_normals.len())];
        let map = SemanticMap::from_mask(mask, side, side, *class_id, corpus.num_classes)?;
        let gen_cfg = GenerationConfig { seed: cfg.seed, ..cfg.generation };
        let (image, out_mask, _) = if cfg.use_ndi {
            ndi_sample(model, &corpus.samples[source_idx].image, &map, &[*class_id], &gen_cfg, i as u64)?
        } else {
            sample(model, &map, &[*class_id], &gen_cfg, i as u64)?
        };
        Ok(SynthPair { image, mask: out_mask, class_id: *class_id, source_idx })
    });
    results.into_iter().collect()
}

/// Mean absolute per-pixel difference (over channels) between a synthesized
/// image and its NDI source, split into in-mask and out-of-mask averages.
pub fn defect_energy_split(pair: &SynthPair, source: &Tensor) -> (f64, f64) {
    let sh = source.shape();
    let (h, w) = (sh[1], sh[2]);
    let hw = h * w;
    let mut inside = (0.0, 0usize);
    let mut outside = (0.0, 0usize);
    for p in 0..hw {
        let mut d = 0.0;
        for c in 0..3 {
            d += (pair.image.data()[c * hw + p] - source.data()[c * hw + p]).abs();
        }
        d /= 3.0;
        if pair.mask[p] {
            inside.0 += d;
            inside.1 += 1;
        } else {
            outside.0 += d;
            outside.1 += 1;
        }
    }
    (inside.0 / inside.1.max(1) as f64, outside.0 / outside.1.max(1) as f64)
}

/// Run the full downstream protocol for one product.
pub fn run_protocol(model: &DiffusionModel, corpus: &Corpus, cfg: &ProtocolConfig) -> Result<ProductEval> {
    let (pool, eval_idx) = corpus.few_shot_split(cfg.few_shot_fraction);
    let eval_normals: Vec<usize> = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Normal && s.split == Split::Test)
        .map(|(i, _)| i)
        .collect();
    if eval_idx.is_empty() || eval_normals.is_empty() {
        return Err(Error::Invalid("protocol needs held-out anomalous and normal test samples".into()));
    }

    let pairs = synthesize_pairs(model, corpus, cfg)?;
    let train_pairs: Vec<(Tensor, Vec<bool>)> =
        pairs.iter().map(|p| (p.image.clone(), p.mask.clone())).collect();
    let seg_cfg = SegmenterConfig { seed: rng::stream(cfg.seed, "protocol/seg-seed", 0).random(), ..cfg.segmenter };
    let (segmenter, _) = train_segmenter(&train_pairs, &seg_cfg)?;

    // score the held-out split
    let mut eval_samples: Vec<usize> = eval_normals.clone();
    eval_samples.extend(&eval_idx);
    let scored: Vec<(usize, Vec<f64>)> = par::map_slice(&eval_samples, |&idx| {
        (idx, segmenter.predict(&corpus.samples[idx].image))
    });

    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut img_scores = Vec::new();
    let mut img_labels = Vec::new();
    let mut ious = Vec::new();
    for (idx, scores) in &scored {
        let s = &corpus.samples[*idx];
        pixel_scores.extend_from_slice(scores);
        pixel_labels.extend(s.mask.iter().copied());
        img_scores.push(metrics::image_score(scores));
        img_labels.push(s.label == Label::Anomalous);
        if s.label == Label::Anomalous {
            ious.push(metrics::max_iou(scores, &s.mask)?);
        }
    }

    // generation-quality proxies
    let clf = DefectClassifier::train(corpus, &pool, cfg.classifier_steps, rng::stream(cfg.seed, "protocol/clf-seed", 0).random())?;
    let probs: Vec<Vec<f64>> = par::map_slice(&pairs, |p| clf.probs(&p.image));
    let is_proxy = metrics::is_proxy_from_probs(&probs)?;

    let anchors: Vec<Tensor> = pool.iter().map(|&i| corpus.samples[i].image.clone()).collect();
    let generated: Vec<Tensor> = pairs.iter().map(|p| p.image.clone()).collect();
    let feat = FeatureNet::new(rng::stream(cfg.seed, "protocol/feat-seed", 0).random());
    let icl_proxy = metrics::ic_lpips_proxy(&generated, &anchors, |t| feat.features(t))?;

    let metrics_set = MetricSet {
        auroc_p: metrics::auroc(&pixel_scores, &pixel_labels)?,
        ap_p: metrics::average_precision(&pixel_scores, &pixel_labels)?,
        f1_p: metrics::f1_max(&pixel_scores, &pixel_labels)?,
        ap_i: metrics::average_precision(&img_scores, &img_labels)?,
        max_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        is_proxy,
        icl_proxy,
    };
    metrics_set.validate()?;
    Ok(ProductEval {
        product: corpus.product.clone(),
        metrics: metrics_set,
        n_pairs: pairs.len(),
        n_eval_images: eval_samples.len(),
    })
}
