//! Declared stand-ins for the pretrained perceptual networks: a fixed-seed
//! random conv feature extractor (IC-L-proxy distance space) and a small
//! classifier trained on toy defect-class labels (IS-proxy).

use rand::Rng;

use crate::corpus::{Corpus, Label, Split};
use crate::error::{Error, Result};
use crate::graph::{batch_backward, Graph, NodeId, ParamStore, Partition};
use crate::nn::{AdamW, Conv2d, Linear};
use crate::rng;
use crate::tensor::Tensor;

/// Frozen random 3-layer conv net; L2 in its pooled feature space is the
/// LPIPS replacement.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "featnet", 0);
        let convs = vec![
            Conv2d::new(&mut store, "f0", 3, 8, 3, 2, 1, Partition::Backbone, &mut r),
            Conv2d::new(&mut store, "f1", 8, 16, 3, 2, 1, Partition::Backbone, &mut r),
            Conv2d::new(&mut store, "f2", 16, 32, 3, 2, 1, Partition::Backbone, &mut r),
        ];
        FeatureNet { store, convs }
    }

    /// Pooled feature vector (width 32) of an RGB [3,H,W] image.
    pub fn features(&self, image: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let mut x = g.input(image.clone());
        for conv in &self.convs {
            x = conv.forward(&mut g, x);
            x = g.gelu(x);
        }
        let tokens = g.chw_to_tokens(x);
        let pooled = g.mean_rows(tokens);
        g.value(pooled).data().to_vec()
    }
}

/// 4-layer conv classifier over (normal | defect class 1..C) labels.
#[derive(Debug, Clone)]
pub struct DefectClassifier {
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    pub n_classes: usize,
}

impl DefectClassifier {
    fn build(n_classes: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "clfnet", 0);
        let p = Partition::Backbone;
        let convs = vec![
            Conv2d::new(&mut store, "c0", 3, 12, 3, 2, 1, p, &mut r),
            Conv2d::new(&mut store, "c1", 12, 24, 3, 2, 1, p, &mut r),
            Conv2d::new(&mut store, "c2", 24, 48, 3, 2, 1, p, &mut r),
            Conv2d::new(&mut store, "c3", 48, 48, 3, 1, 1, p, &mut r),
        ];
        let head = Linear::new(&mut store, "head", 48, n_classes, true, p, &mut r);
        DefectClassifier { store, convs, head, n_classes }
    }

    fn logits(&self, g: &mut Graph, image: &Tensor) -> NodeId {
        let mut x = g.input(image.clone());
        for conv in &self.convs {
            x = conv.forward(g, x);
            x = g.gelu(x);
        }
        let tokens = g.chw_to_tokens(x);
        let pooled = g.mean_rows(tokens);
        self.head.forward(g, pooled)
    }

    /// Train on the corpus' training pool: normal images are class 0, the
    /// few-shot anomalous pool keeps its defect class id.
    pub fn train(corpus: &Corpus, few_shot_pool: &[usize], steps: usize, seed: u64) -> Result<Self> {
        let mut items: Vec<(usize, usize)> = Vec::new(); // (sample idx, class label)
        for (i, s) in corpus.samples.iter().enumerate() {
            if s.label == Label::Normal && s.split == Split::Train {
                items.push((i, 0));
            }
        }
        for &i in few_shot_pool {
            let c = corpus.samples[i].class_id.ok_or_else(|| Error::Invalid("pool sample lacks a class".into()))?;
            items.push((i, c));
        }
        if items.is_empty() {
            return Err(Error::Invalid("classifier training pool is empty".into()));
        }
        let mut clf = DefectClassifier::build(corpus.num_classes + 1, seed);
        let mut opt = AdamW::new(1e-3, 0.0, clf.store.len());
        let ids: Vec<_> = clf.store.iter().map(|(id, _)| id).collect();
        let batch = 8.min(items.len());
        for step in 0..steps {
            let mut br = rng::stream(seed, "clf/batch", step as u64);
            let picks: Vec<(usize, usize)> = (0..batch).map(|_| items[br.random_range(0..items.len())]).collect();
            let (loss, grads) = batch_backward(&clf.store, batch, |i, g| {
                let (sample_idx, label) = picks[i];
                let logits = clf.logits(g, &corpus.samples[sample_idx].image);
                g.cross_entropy_rows(logits, std::sync::Arc::new(vec![label]))
            });
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.update(&mut clf.store, &ids, &grads);
        }
        Ok(clf)
    }

    /// Softmax class probabilities for one image.
    pub fn probs(&self, image: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let logits = self.logits(&mut g, image);
        let p = g.softmax_rows(logits, None);
        g.value(p).data().to_vec()
    }
}
