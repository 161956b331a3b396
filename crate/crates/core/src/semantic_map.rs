//! Integer semantic maps: the spatial grounding signal.
//!
//! A map stores one class id per pixel (0 = background, 1..=C = anomaly
//! classes). Maps compose additively when supports are disjoint, and pool
//! down to the conditioning grid with anomaly priority so small defects
//! survive coarse resolution.

use std::path::Path;

use crate::error::{Error, Result};

/// Per-pixel class map; values in [0, num_classes].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<u8>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "semantic map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        if let Some(&v) = values.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::UnknownClass(v as usize));
        }
        Ok(SemanticMap { height, width, num_classes, values })
    }

    /// All-background map (normal conditioning).
    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        SemanticMap { height, width, num_classes, values: vec![0; height * width] }
    }

    /// Label `class_id` where `mask` is set, background elsewhere.
    pub fn from_mask(mask: &[bool], height: usize, width: usize, class_id: usize, num_classes: usize) -> Result<Self> {
        if class_id < 1 || class_id > num_classes {
            return Err(Error::UnknownClass(class_id));
        }
        if mask.len() != height * width {
            return Err(Error::ShapeMismatch("mask size".into()));
        }
        let values = mask.iter().map(|&m| if m { class_id as u8 } else { 0 }).collect();
        Ok(SemanticMap { height, width, num_classes, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn is_all_background(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// Binary foreground mask (any nonzero class).
    pub fn to_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0).collect()
    }

    /// Distinct nonzero classes present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes + 1];
        for &v in &self.values {
            seen[v as usize] = true;
        }
        (1..=self.num_classes).filter(|&c| seen[c]).collect()
    }

    /// Elementwise sum of disjoint-support maps.
    ///
    /// Composition is only defined when no pixel is nonzero in both operands;
    /// a sum over overlapping labels would fabricate a class id that neither
    /// operand contains.
    pub fn compose(&self, other: &SemanticMap) -> Result<SemanticMap> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch("compose: map dimensions differ".into()));
        }
        if self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch("compose: class counts differ".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for (i, (&a, &b)) in self.values.iter().zip(&other.values).enumerate() {
            if a > 0 && b > 0 {
                return Err(Error::MapOverlap { x: i % self.width, y: i / self.width, a, b });
            }
            values.push(a + b);
        }
        SemanticMap::new(self.height, self.width, self.num_classes, values)
    }

    /// Pool to an `hf` x `wf` grid with anomaly priority.
    ///
    /// A cell is background only when every covered pixel is background;
    /// otherwise it takes the most frequent nonzero label in the cell, ties
    /// broken by the smallest class id. Nearest-neighbor pooling would erase
    /// defects smaller than a cell.
    pub fn downsample(&self, hf: usize, wf: usize) -> Result<GridMap> {
        if hf == 0 || wf == 0 || self.height % hf != 0 || self.width % wf != 0 {
            return Err(Error::ShapeMismatch(format!(
                "downsample: {}x{} not divisible into {}x{} grid",
                self.height, self.width, hf, wf
            )));
        }
        let (by, bx) = (self.height / hf, self.width / wf);
        let mut values = vec![0u8; hf * wf];
        let mut counts = vec![0usize; self.num_classes + 1];
        for gy in 0..hf {
            for gx in 0..wf {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in gy * by..(gy + 1) * by {
                    for x in gx * bx..(gx + 1) * bx {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let mut best = 0usize;
                let mut best_count = 0usize;
                for l in 1..=self.num_classes {
                    if counts[l] > best_count {
                        best = l;
                        best_count = counts[l];
                    }
                }
                values[gy * wf + gx] = best as u8;
            }
        }
        GridMap::new(hf, wf, self.num_classes, values)
    }

    /// 8-bit single-channel PNG with raw class ids as pixel values.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("buffer sized to dimensions");
        img.save(path).map_err(|e| Error::image(path, e))
    }

    pub fn load_png(path: &Path, num_classes: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        SemanticMap::new(h, w, num_classes, img.into_raw())
    }
}

/// Coarse grid of class labels driving token broadcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<u8>,
}

impl GridMap {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch("grid map size".into()));
        }
        if let Some(&v) = values.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::UnknownClass(v as usize));
        }
        Ok(GridMap { height, width, num_classes, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_map(h: usize, w: usize, c: usize, rect: (usize, usize, usize, usize), label: u8) -> SemanticMap {
        let mut v = vec![0u8; h * w];
        let (y0, x0, y1, x1) = rect;
        for y in y0..y1 {
            for x in x0..x1 {
                v[y * w + x] = label;
            }
        }
        SemanticMap::new(h, w, c, v).unwrap()
    }

    #[test]
    fn from_mask_cases() {
        // empty mask stays background
        let m = SemanticMap::from_mask(&vec![false; 16], 4, 4, 1, 2).unwrap();
        assert!(m.is_all_background());
        // single set pixel takes the class id
        let mut mask = vec![false; 8 * 8];
        mask[3 * 8 + 4] = true;
        let m = SemanticMap::from_mask(&mask, 8, 8, 2, 3).unwrap();
        assert_eq!(m.get(3, 4), 2);
        assert_eq!(m.values().iter().map(|&v| v as usize).sum::<usize>(), 2);
        // full mask becomes a constant map
        let m = SemanticMap::from_mask(&vec![true; 16], 4, 4, 3, 3).unwrap();
        assert!(m.values().iter().all(|&v| v == 3));
        // class id outside [1, C] rejected
        assert!(SemanticMap::from_mask(&vec![false; 16], 4, 4, 0, 2).is_err());
        assert!(SemanticMap::from_mask(&vec![false; 16], 4, 4, 3, 2).is_err());
    }

    #[test]
    fn compose_identity_disjoint_overlap() {
        let z = SemanticMap::zeros(8, 8, 2);
        let a = blob_map(8, 8, 2, (0, 0, 2, 2), 1);
        let b = blob_map(8, 8, 2, (5, 5, 7, 7), 2);
        assert_eq!(z.compose(&b).unwrap(), b);
        let ab = a.compose(&b).unwrap();
        assert_eq!(ab.get(1, 1), 1);
        assert_eq!(ab.get(6, 6), 2);
        let a2 = blob_map(8, 8, 2, (1, 1, 3, 3), 2);
        assert!(matches!(a.compose(&a2), Err(Error::MapOverlap { .. })));
    }

    #[test]
    fn compose_commutes_and_associates_on_disjoint_supports() {
        let a = blob_map(16, 16, 3, (0, 0, 3, 3), 1);
        let b = blob_map(16, 16, 3, (5, 5, 8, 8), 2);
        let c = blob_map(16, 16, 3, (10, 10, 14, 14), 3);
        assert_eq!(a.compose(&b).unwrap(), b.compose(&a).unwrap());
        let left = a.compose(&b).unwrap().compose(&c).unwrap();
        let right = a.compose(&b.compose(&c).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn downsample_trivial_cases() {
        let z = SemanticMap::zeros(64, 64, 3);
        let g = z.downsample(8, 8).unwrap();
        assert!(g.values().iter().all(|&v| v == 0));

        let full = SemanticMap::new(64, 64, 3, vec![2; 64 * 64]).unwrap();
        let g = full.downsample(8, 8).unwrap();
        assert!(g.values().iter().all(|&v| v == 2));
    }

    #[test]
    fn downsample_matches_per_cell_count_oracle() {
        // 16x16 map, one 2x2 block of class 3 at top-left, pooled to 8x8:
        // brute-force counting says exactly cell (0,0) carries the label.
        let m = blob_map(16, 16, 3, (0, 0, 2, 2), 3);
        let g = m.downsample(8, 8).unwrap();
        for gy in 0..8 {
            for gx in 0..8 {
                // independent count over the 2x2 pixel block
                let mut any = 0u8;
                for y in gy * 2..gy * 2 + 2 {
                    for x in gx * 2..gx * 2 + 2 {
                        any = any.max(m.get(y, x));
                    }
                }
                assert_eq!(g.get(gy, gx), any, "cell ({gy},{gx})");
            }
        }
        assert_eq!(g.values().iter().filter(|&&v| v != 0).count(), 1);
        assert_eq!(g.get(0, 0), 3);
    }

    #[test]
    fn downsample_prefers_majority_then_smallest_id() {
        // cell covering 4 pixels: two of class 2, one of class 1 -> majority 2
        let mut v = vec![0u8; 4];
        v[0] = 2;
        v[1] = 2;
        v[2] = 1;
        let m = SemanticMap::new(2, 2, 2, v).unwrap();
        assert_eq!(m.downsample(1, 1).unwrap().get(0, 0), 2);
        // tie 1-vs-1 -> smallest class id
        let m = SemanticMap::new(2, 2, 2, vec![2, 1, 0, 0]).unwrap();
        assert_eq!(m.downsample(1, 1).unwrap().get(0, 0), 1);
    }

    #[test]
    fn downsample_preserves_single_pixel_anomaly() {
        let mut v = vec![0u8; 64 * 64];
        v[37 * 64 + 11] = 1;
        let m = SemanticMap::new(64, 64, 1, v).unwrap();
        let g = m.downsample(8, 8).unwrap();
        assert_eq!(g.values().iter().filter(|&&x| x != 0).count(), 1);
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let m = SemanticMap::zeros(10, 10, 1);
        assert!(m.downsample(3, 3).is_err());
    }

    #[test]
    fn png_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let m = blob_map(16, 16, 3, (2, 3, 6, 9), 2);
        let p = dir.path().join("map.png");
        m.save_png(&p).unwrap();
        let back = SemanticMap::load_png(&p, 3).unwrap();
        assert_eq!(m, back);
    }
}
