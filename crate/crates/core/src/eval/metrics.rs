//! Anomaly metrics with brute-force-checkable definitions: AUROC as the
//! Mann-Whitney statistic, step-interpolated AP, exhaustive-threshold F1-max
//! and maxIoU, global-average-pool image scores, the IS/IC-LPIPS proxies,
//! and connected-component box extraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image-level anomaly confidence: global average pooling of pixel scores.
pub fn image_score(pixel_scores: &[f64]) -> f64 {
    assert!(!pixel_scores.is_empty());
    pixel_scores.iter().sum::<f64>() / pixel_scores.len() as f64
}

/// AUROC via average ranks: P(score+ > score-) + 0.5 P(tie). Requires both
/// classes present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("auroc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Sweep state shared by AP and F1-max: descending thresholds at observed
/// score values, ties grouped.
fn sweep_desc(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut out = Vec::new(); // cumulative (tp, fp) after each tie group
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        out.push((tp, fp));
        i = j + 1;
    }
    out
}

/// Step-interpolated average precision: sum (R_k - R_{k-1}) P_k over
/// descending-score thresholds with ties grouped.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Invalid("average precision needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in sweep_desc(scores, labels) {
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Best F1 over thresholds at observed score values (plus the implicit
/// all-positive threshold below the minimum score).
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Invalid("f1-max needs at least one positive".into()));
    }
    let mut best: f64 = 0.0;
    for (tp, fp) in sweep_desc(scores, labels) {
        if tp == 0 {
            continue;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / n_pos as f64;
        best = best.max(2.0 * p * r / (p + r));
    }
    Ok(best)
}

/// Highest IoU between thresholded prediction and ground truth across
/// segmentation thresholds. Thresholds sit at observed score values with
/// strict binarization (predict where score > threshold), so the degenerate
/// all-positive mask is never a candidate: a binary prediction disjoint from
/// the ground truth scores exactly 0. Computed incrementally: pixels are
/// added in descending score order and IoU is evaluated at every tie-group
/// boundary except the last.
pub fn max_iou(pixel_scores: &[f64], gt: &[bool]) -> Result<f64> {
    assert_eq!(pixel_scores.len(), gt.len());
    let n_gt = gt.iter().filter(|&&m| m).count();
    if n_gt == 0 {
        return Err(Error::Invalid("max-iou needs a non-empty ground-truth mask".into()));
    }
    let mut order: Vec<usize> = (0..pixel_scores.len()).collect();
    order.sort_by(|&a, &b| pixel_scores[b].partial_cmp(&pixel_scores[a]).expect("finite scores"));
    let mut best: f64 = 0.0;
    let mut inter = 0usize;
    let mut pred = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pixel_scores[order[j + 1]] == pixel_scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            pred += 1;
            if gt[idx] {
                inter += 1;
            }
        }
        if j + 1 < order.len() {
            let union = pred + n_gt - inter;
            best = best.max(inter as f64 / union as f64);
        }
        i = j + 1;
    }
    Ok(best)
}

/// exp(E_x KL(p(y|x) || p(y))): the Inception-Score form over explicit class
/// probability rows. Rows must be probability simplices.
pub fn is_proxy_from_probs(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Invalid("is-proxy needs at least one sample".into()));
    }
    let k = probs[0].len();
    for row in probs {
        if row.len() != k || row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(Error::Invalid("classifier output is not a probability simplex".into()));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("classifier row sums to {s}, not 1")));
        }
    }
    let n = probs.len() as f64;
    let mut marginal = vec![0.0; k];
    for row in probs {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / n;
        }
    }
    let mut kl_mean = 0.0;
    for row in probs {
        let mut kl = 0.0;
        for (p, m) in row.iter().zip(&marginal) {
            if *p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
        kl_mean += kl / n;
    }
    Ok(kl_mean.exp())
}

/// Assign each generated image to its nearest anchor in feature space and
/// return the mean distance to the assigned anchor.
pub fn ic_lpips_proxy<F>(generated: &[Tensor], anchors: &[Tensor], feature_fn: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Vec<f64> + Sync,
{
    if anchors.is_empty() {
        return Err(Error::Invalid("ic-lpips proxy needs at least one anchor".into()));
    }
    if generated.is_empty() {
        return Err(Error::Invalid("ic-lpips proxy needs generated images".into()));
    }
    let anchor_feats: Vec<Vec<f64>> = crate::par::map_slice(anchors, &feature_fn);
    let dists = crate::par::map_slice(generated, |img| {
        let f = feature_fn(img);
        anchor_feats
            .iter()
            .map(|a| f.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    });
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

// ── Connected components and boxes ───────────────────────────────────

/// 4-connected components in scan order; each component is a list of flat
/// pixel indices.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), height * width);
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / width, p % width);
            let mut push = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < width {
                push(p + 1);
            }
            if y > 0 {
                push(p - width);
            }
            if y + 1 < height {
                push(p + width);
            }
        }
        comps.push(comp);
    }
    comps
}

/// Keep only the largest 4-connected component (empty mask stays empty).
pub fn largest_component(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let comps = connected_components(mask, height, width);
    let mut out = vec![false; mask.len()];
    if let Some(best) = comps.iter().max_by_key(|c| c.len()) {
        for &p in best {
            out[p] = true;
        }
    }
    out
}

/// Inclusive (x_min, y_min, x_max, y_max) per 4-connected component.
pub fn tight_bbox(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize, usize, usize)> {
    connected_components(mask, height, width)
        .into_iter()
        .map(|comp| {
            let mut x0 = usize::MAX;
            let mut y0 = usize::MAX;
            let mut x1 = 0usize;
            let mut y1 = 0usize;
            for p in comp {
                let (y, x) = (p / width, p % width);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            (x0, y0, x1, y1)
        })
        .collect()
}

// ── Brute-force oracles (test/acceptance reference paths) ────────────

/// O(n^2) pairwise Mann-Whitney reference.
pub fn auroc_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Exhaustive threshold-sweep AP reference (thresholds at distinct scores).
pub fn average_precision_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for th in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= th && **l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= th && !**l).count() as f64;
        let recall = tp / n_pos;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Exhaustive threshold-sweep F1 reference.
pub fn f1_max_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut best: f64 = 0.0;
    for th in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= th && **l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= th && !**l).count() as f64;
        if tp == 0.0 {
            continue;
        }
        let p = tp / (tp + fp);
        let r = tp / n_pos;
        best = best.max(2.0 * p * r / (p + r));
    }
    best
}

/// Exhaustive threshold-sweep IoU reference: strict binarization at every
/// observed score value.
pub fn max_iou_bruteforce(pixel_scores: &[f64], gt: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = pixel_scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_gt = gt.iter().filter(|&&m| m).count() as f64;
    let mut best: f64 = 0.0;
    for th in thresholds {
        let inter = pixel_scores.iter().zip(gt).filter(|(s, m)| **s > th && **m).count() as f64;
        let pred = pixel_scores.iter().filter(|&&s| s > th).count() as f64;
        if pred > 0.0 {
            best = best.max(inter / (pred + n_gt - inter));
        }
    }
    best
}
