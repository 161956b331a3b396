//! Static contact sheet: one row per synthesized pair showing the NDI source
//! image, the colorized semantic map, the generated image, and the mask.

use std::path::Path;

use anosynth::corpus::Corpus;
use anosynth::eval::protocol::SynthPair;
use anosynth::Tensor;

const CLASS_COLORS: [[u8; 3]; 6] =
    [[230, 60, 60], [60, 200, 90], [70, 110, 235], [235, 200, 60], [200, 70, 200], [70, 200, 200]];

fn tensor_to_rgb(t: &Tensor) -> image::RgbImage {
    let sh = t.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (t.data()[c * h * w + y * w + x] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img
}

fn mask_to_rgb(mask: &[bool], side: usize, class_id: usize) -> image::RgbImage {
    let color = CLASS_COLORS[(class_id - 1) % CLASS_COLORS.len()];
    let mut img = image::RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let p = if mask[y * side + x] { color } else { [18, 18, 18] };
            img.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    img
}

fn binary_to_rgb(mask: &[bool], side: usize) -> image::RgbImage {
    let mut img = image::RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let v = if mask[y * side + x] { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Rgb([v, v, v]));
        }
    }
    img
}

/// Write per-row tiles, a combined sheet, and an index.html.
pub fn render(out: &Path, corpus: &Corpus, pairs: &[SynthPair]) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let side = corpus.image_size;
    let pad = 2usize;
    let cols = 4usize;
    let sheet_w = cols * side + (cols + 1) * pad;
    let sheet_h = pairs.len() * side + (pairs.len() + 1) * pad;
    let mut sheet = image::RgbImage::from_pixel(sheet_w as u32, sheet_h.max(side) as u32, image::Rgb([30, 30, 30]));

    let mut html = String::from(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>synthesis gallery</title>\
         <style>body{background:#222;color:#ddd;font-family:monospace}td{padding:2px}img{image-rendering:pixelated;width:128px}</style>\
         </head><body><h1>synthesis gallery</h1>\
         <table><tr><th>row</th><th>source</th><th>semantic map</th><th>generated</th><th>mask</th><th>class</th></tr>\n",
    );

    for (i, pair) in pairs.iter().enumerate() {
        let source = tensor_to_rgb(&corpus.samples[pair.source_idx].image);
        let map = mask_to_rgb(&pair.mask, side, pair.class_id);
        let generated = tensor_to_rgb(&pair.image);
        let mask = binary_to_rgb(&pair.mask, side);
        let tiles = [
            (source, format!("{i:03}_source.png")),
            (map, format!("{i:03}_map.png")),
            (generated, format!("{i:03}_generated.png")),
            (mask, format!("{i:03}_mask.png")),
        ];
        html.push_str(&format!("<tr><td>{i}</td>"));
        for (col, (tile, name)) in tiles.iter().enumerate() {
            tile.save(out.join(name))?;
            let x0 = pad + col * (side + pad);
            let y0 = pad + i * (side + pad);
            for (x, y, p) in tile.enumerate_pixels() {
                sheet.put_pixel(x0 as u32 + x, y0 as u32 + y, *p);
            }
            html.push_str(&format!("<td><img src=\"{name}\"></td>"));
        }
        html.push_str(&format!("<td>{}</td></tr>\n", pair.class_id));
    }
    html.push_str("</table></body></html>\n");
    sheet.save(out.join("sheet.png"))?;
    std::fs::write(out.join("index.html"), html)?;
    Ok(())
}
