//! Command line front end: corpus generation, backbone pretraining,
//! finetuning, mask/image synthesis, evaluation, ablation sweeps, and a
//! static gallery. Every command writes its artifact plus a run manifest and
//! is a pure function of (flags, inputs, seed).

mod gallery;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use anosynth::checkpoint;
use anosynth::config::{config_digest, RunManifest};
use anosynth::corpus::{generate_corpus, load_corpus, BasePattern, ProductSpec};
use anosynth::diffusion::{
    pretrain_backbone, sample_masks, ArchConfig, GenerationConfig, NdiStepRule, PretrainConfig,
};
use anosynth::eval::protocol::{run_protocol, synthesize_pairs, MaskSource, ProtocolConfig};
use anosynth::eval::segmenter::SegmenterConfig;
use anosynth::eval::EvalReport;
use anosynth::gsm::GsmVariant;
use anosynth::trainer::{attach_for_finetune, finetune_from, AblationFlags, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "anosynth", version, about = "Semantic-map-grounded few-shot anomaly image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural product corpus in MVTec-style layout.
    Corpus(CorpusArgs),
    /// Pretrain the frozen backbone (autoencoder, denoiser, mask prior).
    Pretrain(PretrainArgs),
    /// Finetune the generator parts on one product.
    Finetune(FinetuneArgs),
    /// Sample anomaly masks from the learned mask token.
    Masks(MasksArgs),
    /// Synthesize image-mask pairs (plus semantic maps) from a checkpoint.
    Synthesize(SynthesizeArgs),
    /// Run the downstream protocol and write the metric report.
    Evaluate(EvaluateArgs),
    /// Train and evaluate ablation variants side by side.
    Ablate(AblateArgs),
    /// Render a contact sheet of (source, map, generated, mask) rows.
    Gallery(GalleryArgs),
}

/// Resolve an output path against ANOSYNTH_OUT when relative.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("ANOSYNTH_OUT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn manifest_path(primary_output: &Path) -> PathBuf {
    if primary_output.extension().is_some() {
        primary_output.with_extension("manifest.json")
    } else {
        primary_output.join("manifest.json")
    }
}

fn finish_manifest(
    mut manifest: RunManifest,
    primary_output: &Path,
    started: Instant,
    extra_outputs: &[&Path],
) -> anyhow::Result<()> {
    manifest.outputs.push(primary_output.display().to_string());
    for o in extra_outputs {
        manifest.outputs.push(o.display().to_string());
    }
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write_atomic(&manifest_path(primary_output))?;
    Ok(())
}

// ── corpus ───────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct CorpusArgs {
    /// Output root; one subdirectory per product.
    #[arg(long)]
    out: PathBuf,
    /// Built-in product presets (comma separated: disk, grid, stripes).
    #[arg(long, value_delimiter = ',', default_value = "grid")]
    presets: Vec<String>,
    /// Product spec TOML file (overrides --presets when given).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    n_normal: usize,
    #[arg(long, default_value_t = 6)]
    n_anom: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_preset(name: &str) -> anyhow::Result<ProductSpec> {
    let pattern = match name {
        "disk" => BasePattern::Disk,
        "grid" => BasePattern::Grid,
        "stripes" => BasePattern::Stripes,
        other => bail!("unknown preset '{other}' (expected disk, grid, or stripes)"),
    };
    Ok(ProductSpec::preset(pattern, name))
}

fn cmd_corpus(args: CorpusArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let specs: Vec<ProductSpec> = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            vec![toml::from_str(&text).context("parsing product spec")?]
        }
        None => args.presets.iter().map(|p| parse_preset(p)).collect::<anyhow::Result<_>>()?,
    };
    let mut manifest = RunManifest::new("corpus", config_digest(&args), args.seed);
    for spec in &specs {
        let dir = generate_corpus(spec, &out, args.n_normal, args.n_anom, args.seed)?;
        manifest.inputs.push(format!("preset:{}", spec.name));
        eprintln!("corpus: wrote {}", dir.display());
    }
    finish_manifest(manifest, &out, started, &[])
}

// ── pretrain ─────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct PretrainArgs {
    /// Product directories (MVTec-style), one or more.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let corpora: Vec<_> = args
        .corpus
        .iter()
        .map(|p| load_corpus(p).map_err(anyhow::Error::from))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<_> = corpora.iter().collect();
    let image_size = corpora[0].image_size;
    let arch = ArchConfig { image_size, grid: image_size / 8, init_seed: args.seed, ..Default::default() };
    let cfg = PretrainConfig { steps: args.steps, lr: args.lr, batch: args.batch, seed: args.seed };
    let (model, report) = pretrain_backbone(&refs, arch, &cfg)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).ok();
    }
    checkpoint::save(&model, &out, None)?;
    eprintln!(
        "pretrain: recon mse {:.5} -> {:.5}, final denoise loss {:.5}",
        report.recon_mse_untrained,
        report.recon_mse_trained,
        report.unet_trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    );
    let mut manifest = RunManifest::new("pretrain", config_digest(&args), args.seed);
    manifest.inputs.extend(args.corpus.iter().map(|p| p.display().to_string()));
    finish_manifest(manifest, &out, started, &[])
}

// ── finetune ─────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Pretrained backbone checkpoint (ignored with --resume-from).
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Continue a run from a checkpoint that embeds trainer state.
    #[arg(long)]
    resume_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// TOML file mirroring the training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = false)]
    no_dtl: bool,
    #[arg(long, default_value_t = false)]
    no_sff: bool,
    #[arg(long, default_value_t = false)]
    no_gsm: bool,
    #[arg(long, default_value_t = false)]
    no_mnt: bool,
    /// Injection variant: full, gcm, dvt, usm, no-lora.
    #[arg(long)]
    variant: Option<String>,
}

fn parse_variant(v: &str) -> anyhow::Result<GsmVariant> {
    Ok(match v {
        "full" => GsmVariant::Full,
        "gcm" => GsmVariant::Gcm,
        "dvt" => GsmVariant::Dvt,
        "usm" => GsmVariant::Usm,
        "no-lora" => GsmVariant::NoLora,
        other => bail!("unknown variant '{other}'"),
    })
}

fn train_config_from(args: &FinetuneArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).context("parsing train config")?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lr {
        cfg.learning_rate = l;
    }
    if let Some(b) = args.batch {
        cfg.batch_size = b;
    }
    cfg.ablation = AblationFlags {
        no_dtl: args.no_dtl || cfg.ablation.no_dtl,
        no_sff: args.no_sff || cfg.ablation.no_sff,
        no_gsm: args.no_gsm || cfg.ablation.no_gsm,
        no_mnt: args.no_mnt || cfg.ablation.no_mnt,
        no_ndi: cfg.ablation.no_ndi,
        variant: match &args.variant {
            Some(v) => Some(parse_variant(v)?),
            None => cfg.ablation.variant,
        },
    };
    Ok(cfg)
}

fn cmd_finetune(args: FinetuneArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let corpus = load_corpus(&args.corpus)?;
    let cfg = train_config_from(&args)?;
    let (mut model, start_state) = match (&args.resume_from, &args.backbone) {
        (Some(ckpt), _) => {
            let (model, ts) = checkpoint::load(ckpt)?;
            let bytes = ts.ok_or_else(|| anyhow::anyhow!("checkpoint {} has no trainer state", ckpt.display()))?;
            (model, Some(TrainState::from_json(&bytes)?))
        }
        (None, Some(backbone)) => {
            let (mut model, _) = checkpoint::load(backbone)?;
            attach_for_finetune(&mut model, &corpus, &cfg)?;
            (model, None)
        }
        (None, None) => bail!("either --backbone or --resume-from is required"),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).ok();
    }
    let state = finetune_from(&mut model, &corpus, &cfg, start_state, Some(&out))?;
    let trace_path = out.with_extension("loss.csv");
    std::fs::write(&trace_path, state.trace_csv())?;
    eprintln!(
        "finetune: {} steps, final loss {:.5}",
        state.step,
        state.loss_trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    );
    let mut manifest = RunManifest::new("finetune", config_digest(&cfg), cfg.seed);
    manifest.inputs.push(args.corpus.display().to_string());
    if let Some(b) = &args.backbone {
        manifest.inputs.push(b.display().to_string());
    }
    finish_manifest(manifest, &out, started, &[&trace_path])
}

// ── masks ────────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct MasksArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    steps: usize,
}

fn cmd_masks(args: MasksArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let cfg = GenerationConfig { steps: args.steps, seed: args.seed, count: args.count, ..Default::default() };
    let masks = sample_masks(&model, args.count, &cfg)?;
    std::fs::create_dir_all(&out)?;
    let side = model.arch.image_size as u32;
    for (i, m) in masks.iter().enumerate() {
        let raw: Vec<u8> = m.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        image::GrayImage::from_raw(side, side, raw)
            .expect("sized buffer")
            .save(out.join(format!("{i:04}_mask.png")))?;
    }
    eprintln!("masks: wrote {} masks to {}", masks.len(), out.display());
    let mut manifest = RunManifest::new("masks", config_digest(&args), args.seed);
    manifest.inputs.push(args.checkpoint.display().to_string());
    finish_manifest(manifest, &out, started, &[])
}

// ── synthesize ───────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from pure noise instead of noised normal latents.
    #[arg(long, default_value_t = false)]
    no_ndi: bool,
    /// Mask source: learned_token or perturbed_real.
    #[arg(long, default_value = "learned_token")]
    mask_source: String,
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long, default_value_t = 400)]
    t_prime: usize,
}

fn parse_mask_source(s: &str) -> anyhow::Result<MaskSource> {
    Ok(match s {
        "learned_token" => MaskSource::LearnedToken,
        "perturbed_real" => MaskSource::PerturbedReal,
        other => bail!("unknown mask source '{other}'"),
    })
}

fn protocol_config(
    n_pairs: usize,
    seed: u64,
    mask_source: MaskSource,
    use_ndi: bool,
    steps: usize,
    t_prime: usize,
) -> ProtocolConfig {
    ProtocolConfig {
        n_pairs,
        mask_source,
        generation: GenerationConfig { steps, t_prime, ndi_rule: NdiStepRule::Proportional, seed, count: n_pairs },
        segmenter: SegmenterConfig::default(),
        use_ndi,
        seed,
        ..Default::default()
    }
}

fn save_rgb_tensor(t: &anosynth::Tensor, path: &Path) -> anyhow::Result<()> {
    let sh = t.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (t.data()[c * h * w + y * w + x] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn cmd_synthesize(args: SynthesizeArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let cfg = protocol_config(
        args.count,
        args.seed,
        parse_mask_source(&args.mask_source)?,
        !args.no_ndi,
        args.steps,
        args.t_prime,
    );
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    std::fs::create_dir_all(out.join("maps"))?;
    let pairs = if args.count > 0 { synthesize_pairs(&model, &corpus, &cfg)? } else { Vec::new() };
    let side = corpus.image_size;
    for (i, p) in pairs.iter().enumerate() {
        save_rgb_tensor(&p.image, &out.join(format!("images/{i:04}.png")))?;
        let raw: Vec<u8> = p.mask.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        image::GrayImage::from_raw(side as u32, side as u32, raw)
            .expect("sized buffer")
            .save(out.join(format!("masks/{i:04}_mask.png")))?;
        let map = anosynth::semantic_map::SemanticMap::from_mask(&p.mask, side, side, p.class_id, corpus.num_classes)?;
        map.save_png(&out.join(format!("maps/{i:04}_map.png")))?;
    }
    eprintln!("synthesize: wrote {} pairs to {}", pairs.len(), out.display());
    let mut manifest = RunManifest::new("synthesize", config_digest(&args), args.seed);
    manifest.inputs.push(args.checkpoint.display().to_string());
    manifest.inputs.push(args.corpus.display().to_string());
    finish_manifest(manifest, &out, started, &[])
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for report.toml / report.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    no_ndi: bool,
    #[arg(long, default_value = "learned_token")]
    mask_source: String,
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long, default_value_t = 400)]
    t_prime: usize,
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let cfg = protocol_config(
        args.pairs,
        args.seed,
        parse_mask_source(&args.mask_source)?,
        !args.no_ndi,
        args.steps,
        args.t_prime,
    );
    let product = run_protocol(&model, &corpus, &cfg)?;
    let report = EvalReport::from_products(vec![product], args.seed, config_digest(&cfg));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.toml"), report.to_toml_string())?;
    std::fs::write(out.join("report.csv"), report.to_csv_string())?;
    eprintln!(
        "evaluate: auroc_p {:.4}, ap_p {:.4}, ap_i {:.4}",
        report.average.auroc_p, report.average.ap_p, report.average.ap_i
    );
    let mut manifest = RunManifest::new("evaluate", config_digest(&cfg), args.seed);
    manifest.inputs.push(args.checkpoint.display().to_string());
    manifest.inputs.push(args.corpus.display().to_string());
    finish_manifest(manifest, &out, started, &[])
}

// ── ablate ───────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Rows to run: full, no-gsm, no-mnt, no-dtl, no-sff, no-ndi, gcm, dvt,
    /// usm, no-lora.
    #[arg(long, value_delimiter = ',', default_value = "full,no-gsm,no-mnt")]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
}

fn ablation_flags(row: &str) -> anyhow::Result<AblationFlags> {
    let mut f = AblationFlags::default();
    match row {
        "full" => {}
        "no-gsm" => f.no_gsm = true,
        "no-mnt" => f.no_mnt = true,
        "no-dtl" => f.no_dtl = true,
        "no-sff" => f.no_sff = true,
        "no-ndi" => f.no_ndi = true,
        "gcm" | "dvt" | "usm" | "no-lora" => f.variant = Some(parse_variant(row)?),
        other => bail!("unknown ablation row '{other}'"),
    }
    Ok(f)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    std::fs::create_dir_all(&out)?;
    let corpus = load_corpus(&args.corpus)?;
    let mut rows = Vec::new();
    let mut full_ap_p = None;
    for row in &args.variants {
        let flags = ablation_flags(row)?;
        let mut ap_ps = Vec::new();
        let mut metrics = Vec::new();
        for &seed in &args.seeds {
            let (mut model, _) = checkpoint::load(&args.backbone)?;
            let cfg = TrainConfig { steps: args.steps, seed, ablation: flags, ..Default::default() };
            attach_for_finetune(&mut model, &corpus, &cfg)?;
            finetune_from(&mut model, &corpus, &cfg, None, None)?;
            let proto = ProtocolConfig {
                n_pairs: args.pairs,
                use_ndi: !flags.no_ndi,
                seed,
                generation: GenerationConfig { seed, count: args.pairs, ..Default::default() },
                ..Default::default()
            };
            let eval = run_protocol(&model, &corpus, &proto)?;
            ap_ps.push(eval.metrics.ap_p);
            metrics.push(eval.metrics);
            eprintln!("ablate: {row} seed {seed}: ap_p {:.4}", metrics.last().unwrap().ap_p);
        }
        let med = median(ap_ps);
        if row == "full" {
            full_ap_p = Some(med);
        }
        rows.push((row.clone(), anosynth::eval::MetricSet::mean_of(&metrics), med));
    }
    let mut csv =
        String::from("row,median_ap_p,delta_ap_p_vs_full,mean_auroc_p,mean_ap_i,mean_is_proxy,mean_icl_proxy\n");
    for (row, mean, med) in &rows {
        let delta = full_ap_p.map(|f| med - f).unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{row},{med:.6},{delta:.6},{:.6},{:.6},{:.6},{:.6}\n",
            mean.auroc_p, mean.ap_i, mean.is_proxy, mean.icl_proxy
        ));
    }
    std::fs::write(out.join("ablation.csv"), &csv)?;
    eprintln!("{csv}");
    let seed0 = args.seeds.first().copied().unwrap_or(0);
    let mut manifest = RunManifest::new("ablate", config_digest(&args), seed0);
    manifest.inputs.push(args.corpus.display().to_string());
    manifest.inputs.push(args.backbone.display().to_string());
    finish_manifest(manifest, &out, started, &[])
}

// ── gallery ──────────────────────────────────────────────────────────

#[derive(Args, serde::Serialize)]
struct GalleryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "learned_token")]
    mask_source: String,
}

fn cmd_gallery(args: GalleryArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let out = resolve_out(&args.out);
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let cfg = protocol_config(args.rows, args.seed, parse_mask_source(&args.mask_source)?, true, 60, 400);
    let pairs = synthesize_pairs(&model, &corpus, &cfg)?;
    gallery::render(&out, &corpus, &pairs)?;
    eprintln!("gallery: wrote {} rows to {}", pairs.len(), out.display());
    let mut manifest = RunManifest::new("gallery", config_digest(&args), args.seed);
    manifest.inputs.push(args.checkpoint.display().to_string());
    manifest.inputs.push(args.corpus.display().to_string());
    finish_manifest(manifest, &out, started, &[])
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus(a) => cmd_corpus(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Masks(a) => cmd_masks(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gallery(a) => cmd_gallery(a),
    };
    if let Err(e) = result {
        // single machine-parsable line
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
