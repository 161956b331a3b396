//! Spatial Conditioning Module: encode the semantic map, broadcast projected
//! token embeddings over the conditioning grid, fuse, and emit the H_f*W_f
//! conditioning token sequence.
//!
//! The map encoder is a plain 4-stage conv stack (strides 1,2,2,2, no
//! normalization layers): every grid cell's feature depends only on a 17 px
//! neighborhood of the map, so far-apart composed regions produce exactly the
//! tokens of their single-class maps. The semantic map enters as one-hot
//! class planes; class ids are nominal, not ordinal.

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore, Partition};
use crate::nn::{Conv2d, Mlp};
use crate::semantic_map::{GridMap, SemanticMap};
use crate::tensor::Tensor;
use crate::token_bank::TokenBank;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScmConfig {
    /// Feature width of both the spatial and textual maps.
    pub d_f: usize,
    /// Output conditioning token width (U-Net transformer token dim).
    pub d_v: usize,
    /// Conditioning grid side (H_f = W_f).
    pub grid: usize,
    /// Token embedding width coming from the bank.
    pub d_t: usize,
    /// When false (the w/o-SFF ablation), the encoded spatial map is dropped
    /// and conditioning tokens are projected from the textual map alone.
    pub spatial_fusion: bool,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig { d_f: 128, d_v: 64, grid: 8, d_t: 64, spatial_fusion: true }
    }
}

/// Encoder stages and projection MLPs of the SCM.
#[derive(Debug, Clone)]
pub struct Scm {
    pub conf: ScmConfig,
    pub num_classes: usize,
    encoder: Vec<Conv2d>,
    proj: Mlp,
    fuse: Mlp,
}

impl Scm {
    pub fn new(store: &mut ParamStore, conf: ScmConfig, num_classes: usize, rng: &mut ChaCha12Rng) -> Self {
        let chans = [16usize, 32, 64, conf.d_f];
        let strides = [1usize, 2, 2, 2];
        let mut encoder = Vec::new();
        let mut c_in = num_classes + 1;
        for (i, (&c_out, &s)) in chans.iter().zip(&strides).enumerate() {
            encoder.push(Conv2d::new(store, &format!("scm.enc{i}"), c_in, c_out, 3, s, 1, Partition::Generator, rng));
            c_in = c_out;
        }
        let fuse_in = if conf.spatial_fusion { 2 * conf.d_f } else { conf.d_f };
        Scm {
            conf,
            num_classes,
            proj: Mlp::new(store, "scm.proj", conf.d_t, 2 * conf.d_f, conf.d_f, Partition::Generator, rng),
            fuse: Mlp::new(store, "scm.fuse", fuse_in, 2 * conf.d_v, conf.d_v, Partition::Generator, rng),
            encoder,
        }
    }

    /// Total downsampling factor of the encoder.
    pub fn total_stride(&self) -> usize {
        8
    }

    /// One-hot class planes [C+1, H, W] for the encoder.
    pub fn one_hot(&self, map: &SemanticMap) -> Result<Tensor> {
        if map.num_classes() != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "semantic map declares {} classes, SCM built for {}",
                map.num_classes(),
                self.num_classes
            )));
        }
        let (h, w) = (map.height(), map.width());
        let planes = self.num_classes + 1;
        let mut data = vec![0.0; planes * h * w];
        for (i, &v) in map.values().iter().enumerate() {
            data[v as usize * h * w + i] = 1.0;
        }
        Ok(Tensor::new(vec![planes, h, w], data))
    }

    /// Encode the semantic map into the spatial feature map F_S [D_f, g, g].
    pub fn encode_map(&self, g: &mut Graph, map: &SemanticMap) -> Result<NodeId> {
        let stride = self.total_stride();
        if map.height() % stride != 0 || map.width() % stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "map {}x{} not divisible by encoder stride {stride}",
                map.height(),
                map.width()
            )));
        }
        if map.height() / stride != self.conf.grid || map.width() / stride != self.conf.grid {
            return Err(Error::ShapeMismatch(format!(
                "map downsamples to {}x{}, SCM grid is {}",
                map.height() / stride,
                map.width() / stride,
                self.conf.grid
            )));
        }
        let one_hot = self.one_hot(map)?;
        let mut x = g.input(one_hot);
        let last = self.encoder.len() - 1;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(g, x);
            if i != last {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    /// Project product/anomaly token sets to D_f and reduce each by its mean.
    ///
    /// Returns (product embedding [1, D_f], per-class embeddings in `classes`
    /// order). The mean is the N->1 / K->1 reduction applied before Eq.-5
    /// broadcast.
    pub fn project_tokens(
        &self,
        g: &mut Graph,
        bank: &TokenBank,
        classes: &[usize],
    ) -> Result<(NodeId, Vec<(usize, NodeId)>)> {
        let prod = g.param(bank.product);
        let prod = self.proj.forward(g, prod);
        let e_pro = g.mean_rows(prod);
        let mut e_ano = Vec::with_capacity(classes.len());
        for &c in classes {
            if c < 1 || c > bank.num_classes {
                return Err(Error::UnknownClass(c));
            }
            let tok = g.param(bank.anomaly[c - 1]);
            let tok = self.proj.forward(g, tok);
            e_ano.push((c, g.mean_rows(tok)));
        }
        Ok((e_pro, e_ano))
    }

    /// Per-cell table lookup: cell (i,j) takes the product embedding when the
    /// grid label is 0, otherwise its class embedding. Output is the textual
    /// feature map F_T as [grid*grid, D_f] rows in row-major cell order.
    pub fn broadcast(
        &self,
        g: &mut Graph,
        grid_map: &GridMap,
        e_pro: NodeId,
        e_ano: &[(usize, NodeId)],
    ) -> Result<NodeId> {
        let mut row_of_class = vec![None::<usize>; grid_map.num_classes() + 1];
        row_of_class[0] = Some(0);
        let mut rows = vec![e_pro];
        for (c, node) in e_ano {
            row_of_class[*c] = Some(rows.len());
            rows.push(*node);
        }
        let mut idx = Vec::with_capacity(grid_map.values().len());
        for &v in grid_map.values() {
            match row_of_class[v as usize] {
                Some(r) => idx.push(r),
                None => return Err(Error::UnknownClass(v as usize)),
            }
        }
        let table = g.concat_rows(&rows);
        Ok(g.gather_rows(table, Arc::new(idx)))
    }

    /// Concatenate F_S and F_T per cell, project to D_v, flatten row-major.
    pub fn fuse(&self, g: &mut Graph, f_s: Option<NodeId>, f_t: NodeId) -> Result<NodeId> {
        let cells = self.conf.grid * self.conf.grid;
        assert_eq!(g.value(f_t).rows(), cells, "textual map cell count");
        let fused_in = match (self.conf.spatial_fusion, f_s) {
            (true, Some(fs)) => {
                let fs_tokens = g.chw_to_tokens(fs);
                assert_eq!(g.value(fs_tokens).rows(), cells, "spatial map cell count");
                g.concat_cols(&[fs_tokens, f_t])
            }
            (false, _) => f_t,
            (true, None) => return Err(Error::Invalid("spatial fusion enabled but no encoded map given".into())),
        };
        Ok(self.fuse.forward(g, fused_in))
    }

    /// Full pipeline: S -> grid labels + encoded map -> broadcast -> fused
    /// conditioning tokens [grid*grid, D_v].
    pub fn conditioning(
        &self,
        g: &mut Graph,
        bank: &TokenBank,
        map: &SemanticMap,
        classes: &[usize],
    ) -> Result<NodeId> {
        let grid_map = map.downsample(self.conf.grid, self.conf.grid)?;
        for &c in &grid_map.present_classes() {
            if !classes.contains(&c) {
                return Err(Error::Invalid(format!(
                    "semantic map contains class {c} but the prompt class list {classes:?} does not"
                )));
            }
        }
        let f_s = if self.conf.spatial_fusion { Some(self.encode_map(g, map)?) } else { None };
        let (e_pro, e_ano) = self.project_tokens(g, bank, classes)?;
        let f_t = self.broadcast(g, &grid_map, e_pro, &e_ano)?;
        self.fuse(g, f_s, f_t)
    }
}

impl GridMap {
    /// Distinct nonzero labels present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes() + 1];
        for &v in self.values() {
            seen[v as usize] = true;
        }
        (1..=self.num_classes()).filter(|&c| seen[c]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup(c: usize, spatial: bool) -> (ParamStore, Scm, TokenBank) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(42, "scm-test", 0);
        let conf = ScmConfig { d_f: 32, d_v: 16, grid: 8, d_t: 16, spatial_fusion: spatial };
        let scm = Scm::new(&mut store, conf, c, &mut r);
        let bank = TokenBank::init(&mut store, 4, 4, c, 16, 24, 1).unwrap();
        (store, scm, bank)
    }

    fn blob(h: usize, w: usize, c: usize, rect: (usize, usize, usize, usize), label: u8) -> SemanticMap {
        let mut v = vec![0u8; h * w];
        for y in rect.0..rect.2 {
            for x in rect.1..rect.3 {
                v[y * w + x] = label;
            }
        }
        SemanticMap::new(h, w, c, v).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_grid_shaped() {
        let (store, scm, _) = setup(2, true);
        let m = blob(64, 64, 2, (4, 4, 12, 12), 1);
        let mut g1 = Graph::new(&store);
        let a = scm.encode_map(&mut g1, &m).unwrap();
        let mut g2 = Graph::new(&store);
        let b = scm.encode_map(&mut g2, &m).unwrap();
        assert_eq!(g1.value(a).shape(), [32, 8, 8]);
        assert_eq!(g1.value(a).data(), g2.value(b).data());
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let (store, scm, _) = setup(2, true);
        let m = SemanticMap::zeros(32, 32, 2);
        let mut g = Graph::new(&store);
        assert!(scm.encode_map(&mut g, &m).is_err());
    }

    #[test]
    fn zero_map_and_blob_map_encode_differently() {
        let (store, scm, _) = setup(2, true);
        let z = SemanticMap::zeros(64, 64, 2);
        let m = blob(64, 64, 2, (8, 8, 24, 24), 1);
        let mut g = Graph::new(&store);
        let a = scm.encode_map(&mut g, &z).unwrap();
        let b = scm.encode_map(&mut g, &m).unwrap();
        assert_ne!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn project_tokens_mean_matches_bruteforce() {
        let (store, scm, bank) = setup(3, true);
        let mut g = Graph::new(&store);
        let (e_pro, _) = scm.project_tokens(&mut g, &bank, &[]).unwrap();
        // independent mean: project each token row separately, average values
        let mut g2 = Graph::new(&store);
        let mut acc = vec![0.0; scm.conf.d_f];
        for n in 0..bank.n_product {
            let tok = g2.param(bank.product);
            let row = g2.slice_rows(tok, n, 1);
            let proj = scm.proj.forward(&mut g2, row);
            for (a, b) in acc.iter_mut().zip(g2.value(proj).data()) {
                *a += b / bank.n_product as f64;
            }
        }
        for (a, b) in g.value(e_pro).data().iter().zip(&acc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_is_per_cell_lookup() {
        let (store, scm, bank) = setup(2, true);
        let m = blob(64, 64, 2, (0, 0, 16, 16), 2);
        let grid = m.downsample(8, 8).unwrap();
        let mut g = Graph::new(&store);
        let (e_pro, e_ano) = scm.project_tokens(&mut g, &bank, &[2]).unwrap();
        let ft = scm.broadcast(&mut g, &grid, e_pro, &e_ano).unwrap();
        let d_f = scm.conf.d_f;
        let pro = g.value(e_pro).data().to_vec();
        let ano = g.value(e_ano[0].1).data().to_vec();
        for cell in 0..64 {
            let want = if grid.values()[cell] == 0 { &pro } else { &ano };
            let got = &g.value(ft).data()[cell * d_f..(cell + 1) * d_f];
            assert_eq!(got, want.as_slice(), "cell {cell}");
        }
    }

    #[test]
    fn broadcast_missing_embedding_is_error() {
        let (store, scm, bank) = setup(2, true);
        let m = blob(64, 64, 2, (0, 0, 16, 16), 2);
        let grid = m.downsample(8, 8).unwrap();
        let mut g = Graph::new(&store);
        let (e_pro, e_ano) = scm.project_tokens(&mut g, &bank, &[1]).unwrap();
        assert!(scm.broadcast(&mut g, &grid, e_pro, &e_ano).is_err());
    }

    #[test]
    fn all_zero_map_broadcasts_product_everywhere() {
        let (store, scm, bank) = setup(2, true);
        let grid = SemanticMap::zeros(64, 64, 2).downsample(8, 8).unwrap();
        let mut g = Graph::new(&store);
        let (e_pro, e_ano) = scm.project_tokens(&mut g, &bank, &[]).unwrap();
        let ft = scm.broadcast(&mut g, &grid, e_pro, &e_ano).unwrap();
        let pro = g.value(e_pro).data();
        for cell in 0..64 {
            assert_eq!(&g.value(ft).data()[cell * 32..(cell + 1) * 32], pro);
        }
    }

    #[test]
    fn fuse_emits_grid_many_tokens_and_is_cellwise() {
        let (store, scm, bank) = setup(2, true);
        let m = blob(64, 64, 2, (8, 8, 24, 24), 1);
        let mut g = Graph::new(&store);
        let c = scm.conditioning(&mut g, &bank, &m, &[1]).unwrap();
        assert_eq!(g.value(c).shape(), [64, 16]);

        // permuting two far-apart cells of both inputs permutes the same two
        // output tokens (the fuse MLP has no cross-cell mixing)
        let grid = m.downsample(8, 8).unwrap();
        let mut g1 = Graph::new(&store);
        let fs = scm.encode_map(&mut g1, &m).unwrap();
        let (e_pro, e_ano) = scm.project_tokens(&mut g1, &bank, &[1]).unwrap();
        let ft = scm.broadcast(&mut g1, &grid, e_pro, &e_ano).unwrap();
        let out = scm.fuse(&mut g1, Some(fs), ft).unwrap();

        // swap cells 3 and 60 in raw inputs, rebuild via raw input nodes
        let mut fs_sw = g1.value(fs).clone();
        let d_f = scm.conf.d_f;
        let hw = 64;
        for ch in 0..d_f {
            let base = ch * hw;
            fs_sw.data_mut().swap(base + 3, base + 60);
        }
        let mut ft_sw = g1.value(ft).clone();
        for j in 0..d_f {
            let (a, b) = (3 * d_f + j, 60 * d_f + j);
            ft_sw.data_mut().swap(a, b);
        }
        let mut g2 = Graph::new(&store);
        let fs2 = g2.input(fs_sw);
        let ft2 = g2.input(ft_sw);
        let out2 = scm.fuse(&mut g2, Some(fs2), ft2).unwrap();
        let dv = scm.conf.d_v;
        for cell in 0..64 {
            let mapped = match cell {
                3 => 60,
                60 => 3,
                c => c,
            };
            assert_eq!(
                &g1.value(out).data()[cell * dv..(cell + 1) * dv],
                &g2.value(out2).data()[mapped * dv..(mapped + 1) * dv],
                "cell {cell}"
            );
        }
    }

    #[test]
    fn no_sff_variant_ignores_spatial_map() {
        let (store, scm, bank) = setup(2, false);
        let a = blob(64, 64, 2, (8, 8, 24, 24), 1);
        // same grid labels, different fine structure: labels pool identically
        let b = blob(64, 64, 2, (8, 8, 24, 23), 1);
        let ga = {
            let mut g = Graph::new(&store);
            let c = scm.conditioning(&mut g, &bank, &a, &[1]).unwrap();
            g.value(c).clone()
        };
        let gb = {
            let mut g = Graph::new(&store);
            let c = scm.conditioning(&mut g, &bank, &b, &[1]).unwrap();
            g.value(c).clone()
        };
        assert_eq!(a.downsample(8, 8).unwrap(), b.downsample(8, 8).unwrap());
        assert_eq!(ga.data(), gb.data());
    }

    #[test]
    fn composition_matches_single_class_regions() {
        // two far-apart single-class maps; composed conditioning equals each
        // single-class conditioning at that region's grid cells
        let (store, scm, bank) = setup(2, true);
        let s1 = blob(64, 64, 2, (0, 0, 10, 10), 1);
        let s2 = blob(64, 64, 2, (54, 54, 64, 64), 2);
        let composed = s1.compose(&s2).unwrap();

        let cond = |map: &SemanticMap, classes: &[usize]| {
            let mut g = Graph::new(&store);
            let c = scm.conditioning(&mut g, &bank, map, classes).unwrap();
            g.value(c).clone()
        };
        let c12 = cond(&composed, &[1, 2]);
        let c1 = cond(&s1, &[1]);
        let c2 = cond(&s2, &[2]);
        let grid = composed.downsample(8, 8).unwrap();
        let dv = scm.conf.d_v;
        for cell in 0..64 {
            let label = grid.values()[cell];
            if label == 1 {
                for j in 0..dv {
                    assert!((c12.data()[cell * dv + j] - c1.data()[cell * dv + j]).abs() < 1e-6);
                }
            } else if label == 2 {
                for j in 0..dv {
                    assert!((c12.data()[cell * dv + j] - c2.data()[cell * dv + j]).abs() < 1e-6);
                }
            }
        }
    }
}
