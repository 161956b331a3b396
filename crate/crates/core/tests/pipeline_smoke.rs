//! End-to-end smoke run at miniature scale: corpus -> pretrain -> finetune
//! -> synthesis -> protocol report. Catches wiring regressions quickly.

use anosynth::corpus::{generate_corpus, load_corpus, BasePattern, ProductSpec};
use anosynth::diffusion::{ndi_sample, pretrain_backbone, ArchConfig, GenerationConfig, PretrainConfig};
use anosynth::eval::protocol::{run_protocol, MaskSource, ProtocolConfig};
use anosynth::eval::segmenter::SegmenterConfig;
use anosynth::semantic_map::SemanticMap;
use anosynth::trainer::{attach_for_finetune, finetune, TrainConfig};

fn tiny_arch() -> ArchConfig {
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

#[test]
fn pipeline_produces_a_valid_report() {
    let mut spec = ProductSpec::preset(BasePattern::Grid, "grid");
    spec.image_size = 32;
    let dir = tempfile::tempdir().unwrap();
    let root = generate_corpus(&spec, dir.path(), 10, 3, 5).unwrap();
    let corpus = load_corpus(&root).unwrap();

    let (mut model, report) =
        pretrain_backbone(&[&corpus], tiny_arch(), &PretrainConfig { steps: 15, batch: 2, seed: 1, ..Default::default() })
            .unwrap();
    assert!(report.recon_mse_trained < report.recon_mse_untrained);

    let cfg = TrainConfig {
        steps: 12,
        mask_token_steps: 6,
        batch_size: 2,
        seed: 2,
        checkpoint_every: 0,
        ..Default::default()
    };
    attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
    finetune(&mut model, &corpus, &cfg, None).unwrap();

    // one NDI synthesis directly
    let gen_cfg = GenerationConfig { steps: 8, t_prime: 40, seed: 3, ..Default::default() };
    let src = &corpus.normals(anosynth::corpus::Split::Train)[0].image;
    let mut mask = vec![false; 32 * 32];
    for y in 10..16 {
        for x in 10..16 {
            mask[y * 32 + x] = true;
        }
    }
    let map = SemanticMap::from_mask(&mask, 32, 32, 1, corpus.num_classes).unwrap();
    let (img, out_mask, stats) = ndi_sample(&model, src, &map, &[1], &gen_cfg, 0).unwrap();
    assert_eq!(img.shape(), [3, 32, 32]);
    assert_eq!(out_mask, mask);
    assert_eq!(stats.denoise_iterations, 4); // ceil(8 * 40 / 100)

    // full protocol on perturbed-real masks (mask diffusion quality is not
    // the point of the smoke test)
    let proto = ProtocolConfig {
        n_pairs: 8,
        mask_source: MaskSource::PerturbedReal,
        generation: gen_cfg,
        segmenter: SegmenterConfig { steps: 20, batch: 4, ..Default::default() },
        classifier_steps: 10,
        seed: 4,
        ..Default::default()
    };
    let eval = run_protocol(&model, &corpus, &proto).unwrap();
    eval.metrics.validate().unwrap();
    assert_eq!(eval.n_pairs, 8);

    // determinism of the whole protocol
    let eval2 = run_protocol(&model, &corpus, &proto).unwrap();
    assert_eq!(eval.metrics, eval2.metrics);
}

#[test]
fn learned_token_masks_flow_through() {
    let mut spec = ProductSpec::preset(BasePattern::Disk, "disk");
    spec.image_size = 32;
    let dir = tempfile::tempdir().unwrap();
    let root = generate_corpus(&spec, dir.path(), 6, 3, 7).unwrap();
    let corpus = load_corpus(&root).unwrap();
    let (mut model, _) =
        pretrain_backbone(&[&corpus], tiny_arch(), &PretrainConfig { steps: 25, batch: 2, seed: 5, ..Default::default() })
            .unwrap();
    let cfg = TrainConfig { steps: 4, mask_token_steps: 10, batch_size: 2, seed: 6, checkpoint_every: 0, ..Default::default() };
    attach_for_finetune(&mut model, &corpus, &cfg).unwrap();
    finetune(&mut model, &corpus, &cfg, None).unwrap();
    let gen_cfg = GenerationConfig { steps: 8, t_prime: 40, seed: 7, ..Default::default() };
    let masks = anosynth::diffusion::sample_masks(&model, 2, &gen_cfg).unwrap();
    assert_eq!(masks.len(), 2);
    for m in &masks {
        assert!(m.iter().any(|&b| b), "sampled mask must be non-empty");
        // single connected component by construction
        let comps = anosynth::eval::metrics::connected_components(m, 32, 32);
        assert_eq!(comps.len(), 1);
    }
}
