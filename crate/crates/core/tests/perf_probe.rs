use anosynth::corpus::{generate_corpus, load_corpus, BasePattern, ProductSpec};
use anosynth::diffusion::{ArchConfig, DiffusionModel};
use anosynth::graph::{batch_backward, Partition};
use anosynth::semantic_map::SemanticMap;
use anosynth::tensor::Tensor;
use anosynth::rng;
use std::time::Instant;

#[test]
#[ignore]
fn time_unet_step() {
    let spec = ProductSpec::preset(BasePattern::Grid, "grid");
    let dir = tempfile::tempdir().unwrap();
    let root = generate_corpus(&spec, dir.path(), 4, 1, 5).unwrap();
    let corpus = load_corpus(&root).unwrap();
    let mut model = DiffusionModel::from_arch(ArchConfig::default()).unwrap();
    model.attach_generator(3, anosynth::diffusion::ConditioningMode::Gated(anosynth::gsm::GsmVariant::Full)).unwrap();
    let z0 = model.encode_to_latent(&corpus.samples[0].image);
    let map = &corpus.samples[corpus.samples.len() - 1].semantic_map;
    let mut r = rng::stream(1, "perf", 0);
    let eps = Tensor::new(z0.shape().to_vec(), rng::normal_vec(&mut r, z0.numel(), 1.0));

    // warm
    let _ = batch_backward(&model.store, 2, |_, g| {
        model.training_loss_into(g, &z0, map, &[3], 500, &eps).unwrap()
    });
    let t = Instant::now();
    let n = 12;
    for _ in 0..n {
        let _ = batch_backward(&model.store, 4, |_, g| {
            model.training_loss_into(g, &z0, map, &[3], 500, &eps).unwrap()
        });
    }
    eprintln!("finetune step (batch 4): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // forward only
    let zero = SemanticMap::zeros(64, 64, 3);
    let t = Instant::now();
    for _ in 0..n {
        let mut g = anosynth::graph::Graph::new(&model.store);
        let zt = g.input(z0.clone());
        let _ = model.eps_theta(&mut g, zt, 500, &zero, &[], None).unwrap();
    }
    eprintln!("unet+scm forward (1 sample): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
    let _ = model.store.partition_numel(Partition::Backbone);
}

#[test]
#[ignore]
fn time_components() {
    let spec = ProductSpec::preset(BasePattern::Grid, "grid");
    let dir = tempfile::tempdir().unwrap();
    let root = generate_corpus(&spec, dir.path(), 4, 1, 5).unwrap();
    let corpus = load_corpus(&root).unwrap();
    let mut model = DiffusionModel::from_arch(ArchConfig::default()).unwrap();
    model.attach_generator(3, anosynth::diffusion::ConditioningMode::Gated(anosynth::gsm::GsmVariant::Full)).unwrap();
    let zero = SemanticMap::zeros(64, 64, 3);
    let gen = model.gen.as_ref().unwrap();

    let n = 40;
    // SCM alone
    let t = Instant::now();
    for _ in 0..n {
        let mut g = anosynth::graph::Graph::new(&model.store);
        let _ = gen.scm.conditioning(&mut g, &gen.bank, &zero, &[]).unwrap();
    }
    eprintln!("scm conditioning: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // autoencoder encode
    let img = &corpus.samples[0].image;
    let t = Instant::now();
    for _ in 0..n {
        let _ = model.encode_to_latent(img);
    }
    eprintln!("ae encode: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // unet alone via sample-path precomputed conditioning
    let z0 = model.encode_to_latent(img);
    let cfg = anosynth::diffusion::GenerationConfig { steps: 5, t_prime: 100, seed: 1, ..Default::default() };
    let t = Instant::now();
    let (_, _, stats) = anosynth::diffusion::ndi_sample(&model, img, &zero, &[], &cfg, 0).unwrap();
    let dt = t.elapsed().as_secs_f64();
    eprintln!("unet fwd (sampling path): {:.1} ms over {} iters", dt * 1000.0 / stats.denoise_iterations as f64, stats.denoise_iterations);
    let _ = z0;
}

#[test]
#[ignore]
fn time_scm_pieces() {
    let mut model = DiffusionModel::from_arch(ArchConfig::default()).unwrap();
    model.attach_generator(3, anosynth::diffusion::ConditioningMode::Gated(anosynth::gsm::GsmVariant::Full)).unwrap();
    let zero = SemanticMap::zeros(64, 64, 3);
    let gen = model.gen.as_ref().unwrap();
    let n = 60;

    let t = Instant::now();
    for _ in 0..n {
        let mut g = anosynth::graph::Graph::new(&model.store);
        let _ = gen.scm.encode_map(&mut g, &zero).unwrap();
    }
    eprintln!("scm encode_map: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let mut g = anosynth::graph::Graph::new(&model.store);
        let _ = gen.scm.project_tokens(&mut g, &gen.bank, &[1, 2]).unwrap();
    }
    eprintln!("scm project_tokens: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let grid = zero.downsample(8, 8).unwrap();
    let t = Instant::now();
    for _ in 0..n {
        let mut g = anosynth::graph::Graph::new(&model.store);
        let (e_pro, e_ano) = gen.scm.project_tokens(&mut g, &gen.bank, &[]).unwrap();
        let ft = gen.scm.broadcast(&mut g, &grid, e_pro, &e_ano).unwrap();
        std::hint::black_box(ft);
    }
    eprintln!("scm proj+broadcast: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
