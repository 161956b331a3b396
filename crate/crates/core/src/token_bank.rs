//! Learnable embeddings: product tokens, per-class anomaly tokens, the mask
//! concept token, and a small frozen vocabulary for the fixed prompt words.
//!
//! Prompts fill one of three templates: "a photo of {PRODUCT}" for normal
//! conditioning, "a photo of a {PRODUCT} with {ANOMALY}" for one class, and
//! "... with {ANOMALY} and {ANOMALY}" for two. Placeholders expand to all N
//! product / K anomaly tokens.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore, Partition};
use crate::rng;
use crate::tensor::Tensor;

/// Fixed prompt words, in vocabulary order.
pub const VOCAB: [&str; 5] = ["a", "photo", "of", "with", "and"];

const WORD_A: usize = 0;
const WORD_PHOTO: usize = 1;
const WORD_OF: usize = 2;
const WORD_WITH: usize = 3;
const WORD_AND: usize = 4;

/// Where a prompt token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    /// Frozen vocabulary word.
    Word(usize),
    /// n-th product token.
    Product(usize),
    /// k-th token of an anomaly class.
    Anomaly { class: usize, k: usize },
    /// The textual-inversion mask concept.
    MaskConcept,
}

/// An assembled prompt: ordered sources plus the configured maximum length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub tokens: Vec<TokenSource>,
    pub max_len: usize,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Count of learnable (non-vocabulary) tokens.
    pub fn learnable_count(&self) -> usize {
        self.tokens.iter().filter(|t| !matches!(t, TokenSource::Word(_))).count()
    }
}

/// Handles to all embedding parameters of one product model.
#[derive(Debug, Clone)]
pub struct TokenBank {
    pub n_product: usize,
    pub k_anomaly: usize,
    pub num_classes: usize,
    pub d_t: usize,
    pub max_prompt_len: usize,
    pub product: ParamId,
    /// One [K, D_t] table per class, index 0 = class 1.
    pub anomaly: Vec<ParamId>,
    pub mask_token: ParamId,
    pub vocab: ParamId,
}

impl TokenBank {
    /// Fresh bank with Gaussian(0, 0.02) embeddings; deterministic in `seed`.
    pub fn init(
        store: &mut ParamStore,
        n_product: usize,
        k_anomaly: usize,
        num_classes: usize,
        d_t: usize,
        max_prompt_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_product == 0 || k_anomaly == 0 || num_classes == 0 || d_t == 0 {
            return Err(Error::InvalidSpec("token bank sizes must be positive".into()));
        }
        let mut r = rng::stream(seed, "token_bank", 0);
        let std = 0.02;
        let product = store.add(
            "bank.product",
            Tensor::new(vec![n_product, d_t], rng::normal_vec(&mut r, n_product * d_t, std)),
            Partition::Generator,
        );
        let anomaly = (1..=num_classes)
            .map(|c| {
                store.add(
                    format!("bank.anomaly.{c}"),
                    Tensor::new(vec![k_anomaly, d_t], rng::normal_vec(&mut r, k_anomaly * d_t, std)),
                    Partition::Generator,
                )
            })
            .collect();
        let mask_token = store.add(
            "bank.mask_token",
            Tensor::new(vec![1, d_t], rng::normal_vec(&mut r, d_t, std)),
            Partition::MaskToken,
        );
        let vocab = store.add(
            "bank.vocab",
            Tensor::new(vec![VOCAB.len(), d_t], rng::normal_vec(&mut r, VOCAB.len() * d_t, std)),
            Partition::Backbone,
        );
        Ok(TokenBank { n_product, k_anomaly, num_classes, d_t, max_prompt_len, product, anomaly, mask_token, vocab })
    }

    /// Fill the prompt template for the given anomaly classes.
    ///
    /// Zero classes produce the normal template; one or two classes the
    /// anomalous templates. More than two classes, duplicates, and undeclared
    /// ids are rejected.
    pub fn assemble_prompt(&self, classes: &[usize]) -> Result<PromptSequence> {
        if classes.len() > 2 {
            return Err(Error::Invalid(format!("prompt supports at most 2 anomaly classes, got {}", classes.len())));
        }
        for (i, &c) in classes.iter().enumerate() {
            if c < 1 || c > self.num_classes {
                return Err(Error::UnknownClass(c));
            }
            if classes[..i].contains(&c) {
                return Err(Error::Invalid(format!("duplicate anomaly class {c} in prompt")));
            }
        }
        let mut tokens = vec![TokenSource::Word(WORD_A), TokenSource::Word(WORD_PHOTO), TokenSource::Word(WORD_OF)];
        if !classes.is_empty() {
            tokens.push(TokenSource::Word(WORD_A));
        }
        tokens.extend((0..self.n_product).map(TokenSource::Product));
        for (i, &c) in classes.iter().enumerate() {
            tokens.push(TokenSource::Word(if i == 0 { WORD_WITH } else { WORD_AND }));
            tokens.extend((0..self.k_anomaly).map(|k| TokenSource::Anomaly { class: c, k }));
        }
        if tokens.len() > self.max_prompt_len {
            return Err(Error::Invalid(format!(
                "prompt length {} exceeds configured max {}",
                tokens.len(),
                self.max_prompt_len
            )));
        }
        Ok(PromptSequence { tokens, max_len: self.max_prompt_len })
    }

    /// Prompt with the mask concept as the sole conditioning token.
    pub fn mask_prompt(&self) -> PromptSequence {
        PromptSequence { tokens: vec![TokenSource::MaskConcept], max_len: self.max_prompt_len }
    }

    /// Embed a prompt as a zero-padded [max_len, D_t] node plus key-validity mask.
    pub fn embed_prompt(&self, g: &mut Graph, prompt: &PromptSequence) -> (NodeId, Arc<Vec<bool>>) {
        // Stack all tables once, then gather: vocab rows, product rows,
        // per-class anomaly rows, mask token.
        let vocab = g.param(self.vocab);
        let product = g.param(self.product);
        let anomaly: Vec<NodeId> = self.anomaly.iter().map(|&id| g.param(id)).collect();
        let mask_tok = g.param(self.mask_token);
        let mut parts = vec![vocab, product];
        parts.extend(&anomaly);
        parts.push(mask_tok);
        let table = g.concat_rows(&parts);

        let prod_off = VOCAB.len();
        let ano_off = |class: usize| prod_off + self.n_product + (class - 1) * self.k_anomaly;
        let mask_off = prod_off + self.n_product + self.num_classes * self.k_anomaly;
        let idx: Vec<usize> = prompt
            .tokens
            .iter()
            .map(|t| match *t {
                TokenSource::Word(w) => w,
                TokenSource::Product(n) => prod_off + n,
                TokenSource::Anomaly { class, k } => ano_off(class) + k,
                TokenSource::MaskConcept => mask_off,
            })
            .collect();
        let used = g.gather_rows(table, Arc::new(idx));

        let pad = prompt.max_len - prompt.len();
        let emb = if pad > 0 {
            let zeros = g.input(Tensor::zeros(&[pad, self.d_t]));
            g.concat_rows(&[used, zeros])
        } else {
            used
        };
        let mut valid = vec![true; prompt.len()];
        valid.resize(prompt.max_len, false);
        (emb, Arc::new(valid))
    }
}

// ── Standalone serialization ─────────────────────────────────────────

const BANK_MAGIC: [u8; 4] = *b"ASTB";
const BANK_VERSION: u32 = 1;

/// Values of a bank detached from any parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    pub n_product: usize,
    pub k_anomaly: usize,
    pub num_classes: usize,
    pub d_t: usize,
    pub product: Tensor,
    pub anomaly: Vec<Tensor>,
    pub mask_token: Tensor,
}

impl TokenBank {
    pub fn snapshot(&self, store: &ParamStore) -> BankSnapshot {
        BankSnapshot {
            n_product: self.n_product,
            k_anomaly: self.k_anomaly,
            num_classes: self.num_classes,
            d_t: self.d_t,
            product: store.get(self.product).clone(),
            anomaly: self.anomaly.iter().map(|&id| store.get(id).clone()).collect(),
            mask_token: store.get(self.mask_token).clone(),
        }
    }

    /// Install snapshot values; dimension mismatches error at bind time.
    pub fn bind_snapshot(&self, store: &mut ParamStore, snap: &BankSnapshot) -> Result<()> {
        if snap.d_t != self.d_t {
            return Err(Error::ShapeMismatch(format!(
                "bank embedding width {} does not match model width {}",
                snap.d_t, self.d_t
            )));
        }
        if snap.n_product != self.n_product || snap.k_anomaly != self.k_anomaly || snap.num_classes != self.num_classes
        {
            return Err(Error::ShapeMismatch("bank token counts do not match model".into()));
        }
        *store.get_mut(self.product) = snap.product.clone();
        for (id, t) in self.anomaly.iter().zip(&snap.anomaly) {
            *store.get_mut(*id) = t.clone();
        }
        *store.get_mut(self.mask_token) = snap.mask_token.clone();
        Ok(())
    }
}

pub fn save_bank(snap: &BankSnapshot, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    for v in [snap.n_product, snap.k_anomaly, snap.num_classes, snap.d_t] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&snap.product.to_le_bytes());
    for t in &snap.anomaly {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend_from_slice(&snap.mask_token.to_le_bytes());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<BankSnapshot> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || bytes[..4] != BANK_MAGIC {
        return Err(Error::Checkpoint("not a token bank file".into()));
    }
    let ver = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if ver != BANK_VERSION {
        return Err(Error::Checkpoint(format!("token bank version {ver} unsupported")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, k, c, d_t) = (dim(0), dim(1), dim(2), dim(3));
    let need = 24 + 8 * d_t * (n + c * k + 1);
    if bytes.len() != need {
        return Err(Error::Checkpoint(format!("token bank payload is {} bytes, expected {need}", bytes.len())));
    }
    let mut off = 24;
    let mut take = |rows: usize| -> Tensor {
        let len = rows * d_t * 8;
        let t = Tensor::from_le_bytes(vec![rows, d_t], &bytes[off..off + len]).expect("sized above");
        off += len;
        t
    };
    let product = take(n);
    let anomaly = (0..c).map(|_| take(k)).collect();
    let mask_token = take(1);
    Ok(BankSnapshot { n_product: n, k_anomaly: k, num_classes: c, d_t, product, anomaly, mask_token })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(n: usize, k: usize, c: usize, d: usize, seed: u64) -> (ParamStore, TokenBank) {
        let mut store = ParamStore::new();
        let bank = TokenBank::init(&mut store, n, k, c, d, 24, seed).unwrap();
        (store, bank)
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let (s1, _) = bank(4, 4, 3, 64, 1);
        let (s2, _) = bank(4, 4, 3, 64, 1);
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.1.value, b.1.value);
        }
        let (store, b) = bank(1, 1, 1, 8, 5);
        assert_eq!(store.get(b.product).shape(), [1, 8]);
        assert_eq!(b.anomaly.len(), 1);
        assert_eq!(store.get(b.mask_token).shape(), [1, 8]);
    }

    #[test]
    fn init_std_matches_monte_carlo() {
        // >= 10^4 entries of nominal std 0.02 land within 10%
        let mut store = ParamStore::new();
        let b = TokenBank::init(&mut store, 16, 16, 4, 128, 24, 9).unwrap();
        let mut all = Vec::new();
        all.extend_from_slice(store.get(b.product).data());
        for &a in &b.anomaly {
            all.extend_from_slice(store.get(a).data());
        }
        assert!(all.len() >= 10_000);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() / 0.02 < 0.1, "sample std {std}");
    }

    #[test]
    fn normal_prompt_has_only_product_learnables() {
        let (_, b) = bank(4, 4, 3, 64, 1);
        let p = b.assemble_prompt(&[]).unwrap();
        assert_eq!(p.learnable_count(), 4);
        assert!(p.tokens.iter().all(|t| !matches!(t, TokenSource::Anomaly { .. })));
        assert_eq!(p.len(), 3 + 4);
    }

    #[test]
    fn single_class_prompt_counts() {
        let (_, b) = bank(4, 4, 3, 64, 1);
        let p = b.assemble_prompt(&[2]).unwrap();
        // 4 product + 4 anomaly learnable tokens
        assert_eq!(p.learnable_count(), 8);
        let anomaly2 = p
            .tokens
            .iter()
            .filter(|t| matches!(t, TokenSource::Anomaly { class: 2, .. }))
            .count();
        assert_eq!(anomaly2, 4);
        // fixed_words + N + |classes|*(K + connector)
        assert_eq!(p.len(), 4 + 4 + (4 + 1));
    }

    #[test]
    fn two_class_prompt_uses_conjunction() {
        let (_, b) = bank(4, 4, 3, 64, 1);
        let p = b.assemble_prompt(&[1, 3]).unwrap();
        assert_eq!(p.len(), 4 + 4 + 2 * (4 + 1));
        assert!(p.tokens.contains(&TokenSource::Word(WORD_AND)));
    }

    #[test]
    fn prompt_rejects_bad_class_lists() {
        let (_, b) = bank(4, 4, 3, 64, 1);
        assert!(matches!(b.assemble_prompt(&[1, 1]), Err(Error::Invalid(_))));
        assert!(matches!(b.assemble_prompt(&[4]), Err(Error::UnknownClass(4))));
        assert!(matches!(b.assemble_prompt(&[1, 2, 3]), Err(Error::Invalid(_))));
    }

    #[test]
    fn prompt_length_formula_holds() {
        for (n, k) in [(1usize, 1usize), (4, 4), (2, 3)] {
            let (_, b) = bank(n, k, 2, 16, 1);
            assert_eq!(b.assemble_prompt(&[]).unwrap().len(), 3 + n);
            assert_eq!(b.assemble_prompt(&[1]).unwrap().len(), 4 + n + (k + 1));
            assert_eq!(b.assemble_prompt(&[1, 2]).unwrap().len(), 4 + n + 2 * (k + 1));
        }
    }

    #[test]
    fn embed_prompt_pads_and_masks() {
        let (store, b) = bank(2, 2, 2, 16, 3);
        let p = b.assemble_prompt(&[1]).unwrap();
        let mut g = Graph::new(&store);
        let (emb, valid) = b.embed_prompt(&mut g, &p);
        assert_eq!(g.value(emb).shape(), [24, 16]);
        assert_eq!(valid.iter().filter(|&&v| v).count(), p.len());
        // padded rows are zero
        let data = g.value(emb).data();
        for row in p.len()..24 {
            assert!(data[row * 16..(row + 1) * 16].iter().all(|&v| v == 0.0));
        }
        // first product token row equals the stored embedding
        let prod_row = 4; // after "a photo of a"
        assert_eq!(&data[prod_row * 16..prod_row * 16 + 16], &store.get(b.product).data()[..16]);
    }

    #[test]
    fn bank_roundtrips_and_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (store, b) = bank(4, 4, 3, 32, 7);
        let snap = b.snapshot(&store);
        let path = dir.path().join("bank.bin");
        save_bank(&snap, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(snap, back);

        // truncated file
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bind_rejects_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (store32, b32) = bank(4, 4, 3, 32, 7);
        let path = dir.path().join("bank.bin");
        save_bank(&b32.snapshot(&store32), &path).unwrap();
        let snap = load_bank(&path).unwrap();
        let (mut store64, b64) = bank(4, 4, 3, 64, 7);
        assert!(matches!(b64.bind_snapshot(&mut store64, &snap), Err(Error::ShapeMismatch(_))));
    }
}
