//! Procedural "products with defects" corpus in an MVTec-style layout.
//!
//! Layout per product:
//! `train/good/*.png`, `test/good/*.png`, `test/<class>/*.png`,
//! `ground_truth/<class>/*_mask.png`, with class folders named
//! `<class_id>_<shape>` so class ids are recoverable without a manifest.
//! Everything is a pure function of (spec, seed): identical inputs produce
//! byte-identical trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::semantic_map::SemanticMap;
use crate::tensor::Tensor;

// ── Specs ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePattern {
    Disk,
    Grid,
    Stripes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectShape {
    /// Line segment.
    Scratch,
    /// Ellipse blob.
    Spot,
    /// Random-walk polyline.
    Crack,
    /// Low-frequency patch.
    Stain,
}

impl DefectShape {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefectShape::Scratch => "scratch",
            DefectShape::Spot => "spot",
            DefectShape::Crack => "crack",
            DefectShape::Stain => "stain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scratch" => Some(DefectShape::Scratch),
            "spot" => Some(DefectShape::Spot),
            "crack" => Some(DefectShape::Crack),
            "stain" => Some(DefectShape::Stain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DefectSpec {
    pub class_id: usize,
    pub shape: DefectShape,
    /// Defect area as a fraction of image area, [min, max].
    pub size_range: (f64, f64),
    /// Added to the base color under the defect, per channel.
    pub color_shift: [i16; 3],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProductSpec {
    pub name: String,
    pub base_pattern: BasePattern,
    pub palette: [[u8; 3]; 3],
    pub image_size: usize,
    pub defect_classes: Vec<DefectSpec>,
}

impl ProductSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::InvalidSpec(format!(
                "image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.defect_classes.is_empty() || self.defect_classes.len() > 6 {
            return Err(Error::InvalidSpec("need between 1 and 6 defect classes".into()));
        }
        for (i, d) in self.defect_classes.iter().enumerate() {
            if d.class_id != i + 1 {
                return Err(Error::InvalidSpec(format!(
                    "class ids must be 1..C in list order; position {} has id {}",
                    i, d.class_id
                )));
            }
            let (lo, hi) = d.size_range;
            if !(lo > 0.0 && lo <= hi && hi <= 0.25) {
                return Err(Error::InvalidSpec(format!("size_range {:?} out of (0, 0.25]", d.size_range)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.defect_classes.len()
    }

    pub fn class_dir_name(&self, class_id: usize) -> String {
        let d = &self.defect_classes[class_id - 1];
        format!("{}_{}", d.class_id, d.shape.as_str())
    }

    /// Three-class 64x64 product used by the CLI presets and the test suite.
    pub fn preset(pattern: BasePattern, name: &str) -> ProductSpec {
        let palette = match pattern {
            BasePattern::Disk => [[40, 44, 52], [168, 170, 180], [96, 60, 30]],
            BasePattern::Grid => [[222, 222, 214], [70, 80, 96], [150, 110, 70]],
            BasePattern::Stripes => [[60, 90, 140], [190, 195, 205], [30, 34, 40]],
        };
        ProductSpec {
            name: name.to_string(),
            base_pattern: pattern,
            palette,
            image_size: 64,
            defect_classes: vec![
                DefectSpec {
                    class_id: 1,
                    shape: DefectShape::Scratch,
                    size_range: (0.004, 0.02),
                    color_shift: [95, -60, -60],
                },
                DefectSpec {
                    class_id: 2,
                    shape: DefectShape::Spot,
                    size_range: (0.01, 0.05),
                    color_shift: [-70, 85, -50],
                },
                DefectSpec {
                    class_id: 3,
                    shape: DefectShape::Stain,
                    size_range: (0.02, 0.08),
                    color_shift: [-60, -60, 90],
                },
            ],
        }
    }
}

// ── Samples ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One loaded image with its grounding.
#[derive(Debug, Clone)]
pub struct CorpusSample {
    /// [3, H, W] in [0, 1].
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub semantic_map: SemanticMap,
    pub label: Label,
    pub split: Split,
    pub class_id: Option<usize>,
    /// File stem for deterministic ordering.
    pub stem: String,
}

impl CorpusSample {
    pub fn check_invariants(&self) -> Result<()> {
        let sm_mask = self.semantic_map.to_mask();
        if sm_mask != self.mask {
            return Err(Error::CorpusLayout(format!("sample {}: mask and semantic map disagree", self.stem)));
        }
        match self.label {
            Label::Normal => {
                if self.mask.iter().any(|&m| m) {
                    return Err(Error::CorpusLayout(format!("normal sample {} has mask pixels", self.stem)));
                }
            }
            Label::Anomalous => {
                if !self.mask.iter().any(|&m| m) {
                    return Err(Error::CorpusLayout(format!("anomalous sample {} has empty mask", self.stem)));
                }
            }
        }
        Ok(())
    }
}

/// A loaded product corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub product: String,
    pub image_size: usize,
    pub num_classes: usize,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn normals(&self, split: Split) -> Vec<&CorpusSample> {
        self.samples.iter().filter(|s| s.label == Label::Normal && s.split == split).collect()
    }

    pub fn anomalous(&self) -> Vec<&CorpusSample> {
        self.samples.iter().filter(|s| s.label == Label::Anomalous).collect()
    }

    /// Deterministic few-shot split of test anomalies: per class (by folder
    /// order), the first `ceil(fraction * n)` samples by stem order become the
    /// training pool; the rest are the held-out evaluation set.
    pub fn few_shot_split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label == Label::Anomalous {
                per_class.entry(s.class_id.expect("anomalous has class")).or_default().push(i);
            }
        }
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (_, mut idxs) in per_class {
            idxs.sort_by(|&a, &b| self.samples[a].stem.cmp(&self.samples[b].stem));
            let k = ((fraction * idxs.len() as f64).ceil() as usize).min(idxs.len());
            train.extend_from_slice(&idxs[..k]);
            eval.extend_from_slice(&idxs[k..]);
        }
        (train, eval)
    }
}

// ── Rendering ────────────────────────────────────────────────────────

fn srgb(p: [u8; 3]) -> [f64; 3] {
    [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
}

/// Defect-free render; pure in (spec, rng stream).
fn render_pattern(spec: &ProductSpec, rng: &mut ChaCha12Rng) -> Vec<[f64; 3]> {
    let s = spec.image_size;
    let pal: Vec<[f64; 3]> = spec.palette.iter().map(|&p| srgb(p)).collect();
    let mut img = vec![pal[0]; s * s];
    let brightness = 1.0 + rng.random_range(-0.04..0.04);
    match spec.base_pattern {
        BasePattern::Disk => {
            let cx = s as f64 / 2.0 + rng.random_range(-2.0..2.0);
            let cy = s as f64 / 2.0 + rng.random_range(-2.0..2.0);
            let r = s as f64 * rng.random_range(0.32..0.38);
            let ring = r * rng.random_range(0.55..0.65);
            for y in 0..s {
                for x in 0..s {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    let a_disk = smooth_edge(r - d);
                    let a_ring = smooth_edge(1.4 - (d - ring).abs());
                    let mut px = mix(pal[0], pal[1], a_disk);
                    px = mix(px, pal[2], a_ring);
                    img[y * s + x] = px;
                }
            }
        }
        BasePattern::Grid => {
            let period = rng.random_range(7.0..9.5);
            let phase_x = rng.random_range(0.0..period);
            let phase_y = rng.random_range(0.0..period);
            let lw = rng.random_range(1.1..1.6);
            for y in 0..s {
                for x in 0..s {
                    let fx = (x as f64 + phase_x) % period;
                    let fy = (y as f64 + phase_y) % period;
                    let dx = fx.min(period - fx);
                    let dy = fy.min(period - fy);
                    let a_line = smooth_edge(lw - dx.min(dy));
                    let a_dot = smooth_edge(lw - dx.max(dy));
                    let mut px = mix(pal[0], pal[1], a_line);
                    px = mix(px, pal[2], a_dot);
                    img[y * s + x] = px;
                }
            }
        }
        BasePattern::Stripes => {
            let period = rng.random_range(9.0..12.0);
            let phase = rng.random_range(0.0..period);
            let slope = rng.random_range(0.35..0.55);
            let lw = rng.random_range(1.0..1.5);
            for y in 0..s {
                for x in 0..s {
                    let t = (x as f64 + slope * y as f64 + phase) % period;
                    let a_stripe = if t < period / 2.0 { 1.0 } else { 0.0 };
                    let edge = (t % (period / 2.0)).min(period / 2.0 - t % (period / 2.0));
                    let a_sep = smooth_edge(lw - edge) * 0.6;
                    let mut px = mix(pal[0], pal[1], a_stripe);
                    px = mix(px, pal[2], a_sep);
                    img[y * s + x] = px;
                }
            }
        }
    }
    for px in &mut img {
        for c in px.iter_mut() {
            *c = (*c * brightness).clamp(0.0, 1.0);
        }
    }
    img
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smooth_edge(d: f64) -> f64 {
    d.clamp(0.0, 1.0)
}

/// Coverage in [0,1] per pixel for one defect instance.
fn render_defect_alpha(shape: DefectShape, size_frac: f64, s: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut alpha = vec![0.0f64; s * s];
    let area = size_frac * (s * s) as f64;
    let margin = s as f64 * 0.12;
    let rr = |rng: &mut ChaCha12Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    match shape {
        DefectShape::Scratch => {
            let width = rr(rng, 1.0, 1.8);
            let len = (area / width).clamp(3.0, s as f64 * 1.2);
            let x0 = rr(rng, margin, s as f64 - margin);
            let y0 = rr(rng, margin, s as f64 - margin);
            let ang = rr(rng, 0.0, std::f64::consts::TAU);
            let x1 = (x0 + ang.cos() * len).clamp(1.0, s as f64 - 1.0);
            let y1 = (y0 + ang.sin() * len).clamp(1.0, s as f64 - 1.0);
            stamp_segment(&mut alpha, s, (x0, y0), (x1, y1), width);
        }
        DefectShape::Spot => {
            let ecc = rr(rng, 0.5, 1.0);
            // area = pi * a * b with b = ecc * a
            let a = (area / (std::f64::consts::PI * ecc)).sqrt().max(1.2);
            let b = (ecc * a).max(1.0);
            let cx = rr(rng, margin, s as f64 - margin);
            let cy = rr(rng, margin, s as f64 - margin);
            let theta = rr(rng, 0.0, std::f64::consts::PI);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..s {
                for x in 0..s {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let u = (dx * ct + dy * st) / a;
                    let v = (-dx * st + dy * ct) / b;
                    let q = u * u + v * v;
                    alpha[y * s + x] = ((1.0 - q) * a.min(b)).clamp(0.0, 1.0);
                }
            }
        }
        DefectShape::Crack => {
            let width = rr(rng, 0.9, 1.4);
            let total_len = (area / width).clamp(4.0, s as f64 * 2.0);
            let n_seg = 6;
            let seg = total_len / n_seg as f64;
            let mut x = rr(rng, margin, s as f64 - margin);
            let mut y = rr(rng, margin, s as f64 - margin);
            let mut ang = rr(rng, 0.0, std::f64::consts::TAU);
            for _ in 0..n_seg {
                ang += rr(rng, -0.9, 0.9);
                let nx = (x + ang.cos() * seg).clamp(1.0, s as f64 - 1.0);
                let ny = (y + ang.sin() * seg).clamp(1.0, s as f64 - 1.0);
                stamp_segment(&mut alpha, s, (x, y), (nx, ny), width);
                x = nx;
                y = ny;
            }
        }
        DefectShape::Stain => {
            let r = (area / std::f64::consts::PI).sqrt().max(1.5);
            let cx = rr(rng, margin, s as f64 - margin);
            let cy = rr(rng, margin, s as f64 - margin);
            let n_lobe = 3;
            let lobes: Vec<(f64, f64, f64)> = (0..n_lobe)
                .map(|_| (cx + rr(rng, -r, r) * 0.8, cy + rr(rng, -r, r) * 0.8, r * rr(rng, 0.5, 0.9)))
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let mut v: f64 = 0.0;
                    for &(lx, ly, lr) in &lobes {
                        let d2 = (x as f64 + 0.5 - lx).powi(2) + (y as f64 + 0.5 - ly).powi(2);
                        v += (-d2 / (2.0 * lr * lr)).exp();
                    }
                    alpha[y * s + x] = ((v - 0.55) * 4.0).clamp(0.0, 1.0);
                }
            }
        }
    }
    alpha
}

fn stamp_segment(alpha: &mut [f64], s: usize, p0: (f64, f64), p1: (f64, f64), width: f64) {
    let (x0, y0) = p0;
    let (x1, y1) = p1;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = (dx * dx + dy * dy).max(1e-9);
    let x_lo = (x0.min(x1) - width - 2.0).floor().max(0.0) as usize;
    let x_hi = (x0.max(x1) + width + 2.0).ceil().min(s as f64 - 1.0) as usize;
    let y_lo = (y0.min(y1) - width - 2.0).floor().max(0.0) as usize;
    let y_hi = (y0.max(y1) + width + 2.0).ceil().min(s as f64 - 1.0) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let t = ((px - x0) * dx + (py - y0) * dy) / len2;
            let t = t.clamp(0.0, 1.0);
            let d = ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt();
            let a = (width + 0.5 - d).clamp(0.0, 1.0);
            let cell = &mut alpha[y * s + x];
            *cell = cell.max(a);
        }
    }
}

/// Number of defect shape kinds (the mask prior's conditioning vocabulary).
pub const N_DEFECT_SHAPES: usize = 4;

const ALL_SHAPES: [DefectShape; N_DEFECT_SHAPES] =
    [DefectShape::Scratch, DefectShape::Spot, DefectShape::Crack, DefectShape::Stain];

/// A random defect-shaped binary mask plus its shape index, for the mask
/// prior's pretraining stream. Retries until the thresholded mask is
/// non-empty.
pub fn random_defect_mask(size: usize, rng: &mut ChaCha12Rng) -> (Vec<bool>, usize) {
    loop {
        let shape_idx = rng.random_range(0..N_DEFECT_SHAPES);
        let frac = rng.random_range(0.004..0.08);
        let alpha = render_defect_alpha(ALL_SHAPES[shape_idx], frac, size, rng);
        let mask: Vec<bool> = alpha.iter().map(|&a| a >= 0.5).collect();
        if mask.iter().any(|&m| m) {
            return (mask, shape_idx);
        }
    }
}

fn dilate1(mask: &[bool], s: usize) -> Vec<bool> {
    let mut out = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            if !mask[y * s + x] {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < s && (nx as usize) < s {
                        out[ny as usize * s + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Defect-free render for normal image `index` (the same stream whether the
/// image lands in the train or test split).
pub fn render_normal(spec: &ProductSpec, seed: u64, index: usize) -> Vec<[f64; 3]> {
    let mut r = rng::stream(seed, &format!("corpus/{}/normal", spec.name), index as u64);
    render_pattern(spec, &mut r)
}

/// Defect-free twin of anomalous image `index` of `class_id`.
pub fn render_anomalous_base(spec: &ProductSpec, seed: u64, class_id: usize, index: usize) -> Vec<[f64; 3]> {
    let mut r = rng::stream(seed, &format!("corpus/{}/anom-base/{}", spec.name, class_id), index as u64);
    render_pattern(spec, &mut r)
}

/// Anomalous render: (image, binary mask). The image equals its defect-free
/// twin outside a 1-pixel dilation of the mask by construction: raw defect
/// coverage is zeroed outside that dilation before blending.
pub fn render_anomalous(spec: &ProductSpec, seed: u64, class_id: usize, index: usize) -> (Vec<[f64; 3]>, Vec<bool>) {
    let s = spec.image_size;
    let base = render_anomalous_base(spec, seed, class_id, index);
    let d = &spec.defect_classes[class_id - 1];
    for attempt in 0..16u64 {
        let mut r = rng::stream(
            seed,
            &format!("corpus/{}/anom-defect/{}/{}", spec.name, class_id, index),
            attempt,
        );
        let size = r.random_range(d.size_range.0..=d.size_range.1);
        let alpha = render_defect_alpha(d.shape, size, s, &mut r);
        let mask: Vec<bool> = alpha.iter().map(|&a| a >= 0.5).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let allowed = dilate1(&mask, s);
        let mut img = base.clone();
        for i in 0..s * s {
            let a = if allowed[i] { alpha[i] } else { 0.0 };
            if a > 0.0 {
                let shifted = [
                    (img[i][0] + d.color_shift[0] as f64 / 255.0).clamp(0.0, 1.0),
                    (img[i][1] + d.color_shift[1] as f64 / 255.0).clamp(0.0, 1.0),
                    (img[i][2] + d.color_shift[2] as f64 / 255.0).clamp(0.0, 1.0),
                ];
                img[i] = mix(img[i], shifted, a);
            }
        }
        return (img, mask);
    }
    // With sane size ranges a visible defect appears within a few attempts.
    panic!("could not rasterize a non-empty defect for class {class_id} index {index}");
}

// ── Disk IO ──────────────────────────────────────────────────────────

fn save_rgb(img: &[[f64; 3]], s: usize, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let p = img[y * s + x];
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (p[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (p[2] * 255.0).round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn save_mask(mask: &[bool], s: usize, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(s as u32, s as u32, raw)
        .expect("buffer sized to dimensions")
        .save(path)
        .map_err(|e| Error::image(path, e))
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Number of normals held out into `test/good` (roughly 20%).
pub fn test_normal_count(n_normal: usize) -> usize {
    n_normal / 5
}

/// Generate one product tree under `out_root` and return the product dir.
pub fn generate_corpus(
    spec: &ProductSpec,
    out_root: &Path,
    n_normal: usize,
    n_anom_per_class: usize,
    seed: u64,
) -> Result<PathBuf> {
    spec.validate()?;
    if n_normal < 1 {
        return Err(Error::InvalidSpec("need at least one normal image".into()));
    }
    let root = out_root.join(&spec.name);
    let s = spec.image_size;
    let n_test = test_normal_count(n_normal);
    let n_train = n_normal - n_test;

    mkdirs(&root.join("train/good"))?;
    mkdirs(&root.join("test/good"))?;
    for i in 0..n_normal {
        let img = render_normal(spec, seed, i);
        let path = if i < n_train {
            root.join(format!("train/good/{:03}.png", i))
        } else {
            root.join(format!("test/good/{:03}.png", i - n_train))
        };
        save_rgb(&img, s, &path)?;
    }

    for d in &spec.defect_classes {
        let cls = spec.class_dir_name(d.class_id);
        mkdirs(&root.join("test").join(&cls))?;
        mkdirs(&root.join("ground_truth").join(&cls))?;
        for i in 0..n_anom_per_class {
            let (img, mask) = render_anomalous(spec, seed, d.class_id, i);
            save_rgb(&img, s, &root.join("test").join(&cls).join(format!("{:03}.png", i)))?;
            save_mask(&mask, s, &root.join("ground_truth").join(&cls).join(format!("{:03}_mask.png", i)))?;
        }
    }
    Ok(root)
}

fn load_rgb(path: &Path) -> Result<(Tensor, usize)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::CorpusLayout(format!("{}: images must be square", path.display())));
    }
    let mut chw = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                chw[c * h * w + y * w + x] = p[c] as f64 / 255.0;
            }
        }
    }
    Ok((Tensor::new(vec![3, h, w], chw), h))
}

fn load_mask(path: &Path) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    // 8-bit masks binarize at threshold 127
    Ok(img.into_raw().into_iter().map(|v| v > 127).collect())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().map(|x| x == "png").unwrap_or(false) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Load a product tree generated by [`generate_corpus`] (or hand-assembled in
/// the same layout).
pub fn load_corpus(product_dir: &Path) -> Result<Corpus> {
    let product = product_dir
        .file_name()
        .ok_or_else(|| Error::CorpusLayout("product dir has no name".into()))?
        .to_string_lossy()
        .to_string();

    // Discover class folders first so num_classes is known up front.
    let test_dir = product_dir.join("test");
    let mut class_dirs: Vec<(usize, String)> = Vec::new();
    for e in fs::read_dir(&test_dir).map_err(|e| Error::io(&test_dir, e))? {
        let p = e.map_err(|e| Error::io(&test_dir, e))?.path();
        if !p.is_dir() {
            continue;
        }
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if name == "good" {
            continue;
        }
        let (id_str, shape_str) = name
            .split_once('_')
            .ok_or_else(|| Error::CorpusLayout(format!("unknown class folder '{name}'")))?;
        let id: usize = id_str
            .parse()
            .map_err(|_| Error::CorpusLayout(format!("unknown class folder '{name}'")))?;
        if id == 0 || DefectShape::parse(shape_str).is_none() {
            return Err(Error::CorpusLayout(format!("unknown class folder '{name}'")));
        }
        class_dirs.push((id, name));
    }
    class_dirs.sort();
    let num_classes = class_dirs.iter().map(|(id, _)| *id).max().unwrap_or(0);

    let mut samples = Vec::new();
    let mut image_size = 0usize;

    let mut push_normal = |path: &Path, split: Split, samples: &mut Vec<CorpusSample>| -> Result<()> {
        let (image, h) = load_rgb(path)?;
        image_size = h;
        samples.push(CorpusSample {
            image,
            mask: vec![false; h * h],
            semantic_map: SemanticMap::zeros(h, h, num_classes),
            label: Label::Normal,
            split,
            class_id: None,
            stem: path.file_stem().unwrap().to_string_lossy().to_string(),
        });
        Ok(())
    };

    for p in sorted_pngs(&product_dir.join("train/good"))? {
        push_normal(&p, Split::Train, &mut samples)?;
    }
    for p in sorted_pngs(&product_dir.join("test/good"))? {
        push_normal(&p, Split::Test, &mut samples)?;
    }

    for (class_id, dir_name) in &class_dirs {
        for p in sorted_pngs(&test_dir.join(dir_name))? {
            let stem = p.file_stem().unwrap().to_string_lossy().to_string();
            let (image, h) = load_rgb(&p)?;
            let mask_path = product_dir.join("ground_truth").join(dir_name).join(format!("{stem}_mask.png"));
            if !mask_path.exists() {
                return Err(Error::CorpusLayout(format!(
                    "anomalous image {} has no ground-truth mask at {}",
                    p.display(),
                    mask_path.display()
                )));
            }
            let mask = load_mask(&mask_path)?;
            if mask.len() != h * h {
                return Err(Error::CorpusLayout(format!("mask size mismatch for {}", p.display())));
            }
            let semantic_map = SemanticMap::from_mask(&mask, h, h, *class_id, num_classes)?;
            let sample = CorpusSample {
                image,
                mask,
                semantic_map,
                label: Label::Anomalous,
                split: Split::Test,
                class_id: Some(*class_id),
                stem: format!("{dir_name}/{stem}"),
            };
            sample.check_invariants()?;
            samples.push(sample);
        }
    }

    if samples.is_empty() {
        return Err(Error::CorpusLayout("no samples found".into()));
    }
    Ok(Corpus { product, image_size, num_classes, samples })
}
