//! Downstream evaluation: metric suite, inspection segmenter, generation
//! proxies, and the end-to-end protocol report.

pub mod metrics;
pub mod protocol;
pub mod proxy;
pub mod segmenter;

use crate::error::{Error, Result};

/// The reported metric columns for one product (or the average row).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricSet {
    pub auroc_p: f64,
    pub ap_p: f64,
    pub f1_p: f64,
    pub ap_i: f64,
    pub max_iou: f64,
    pub is_proxy: f64,
    pub icl_proxy: f64,
}

impl MetricSet {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("auroc_p", self.auroc_p),
            ("ap_p", self.ap_p),
            ("f1_p", self.f1_p),
            ("ap_i", self.ap_i),
            ("max_iou", self.max_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.is_proxy < 1.0 - 1e-9 {
            return Err(Error::Invalid(format!("is_proxy = {} below 1", self.is_proxy)));
        }
        if !self.icl_proxy.is_finite() || self.icl_proxy < 0.0 {
            return Err(Error::Invalid(format!("icl_proxy = {} invalid", self.icl_proxy)));
        }
        Ok(())
    }

    pub fn mean_of(sets: &[MetricSet]) -> MetricSet {
        let n = sets.len().max(1) as f64;
        let mut m = MetricSet { auroc_p: 0.0, ap_p: 0.0, f1_p: 0.0, ap_i: 0.0, max_iou: 0.0, is_proxy: 0.0, icl_proxy: 0.0 };
        for s in sets {
            m.auroc_p += s.auroc_p / n;
            m.ap_p += s.ap_p / n;
            m.f1_p += s.f1_p / n;
            m.ap_i += s.ap_i / n;
            m.max_iou += s.max_iou / n;
            m.is_proxy += s.is_proxy / n;
            m.icl_proxy += s.icl_proxy / n;
        }
        m
    }
}

/// Protocol output for one product.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProductEval {
    pub product: String,
    pub metrics: MetricSet,
    pub n_pairs: usize,
    pub n_eval_images: usize,
}

/// The full report: per-product rows plus the averaged row and provenance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub per_product: Vec<ProductEval>,
    pub average: MetricSet,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_products(products: Vec<ProductEval>, seed: u64, config_digest: String) -> Self {
        let average = MetricSet::mean_of(&products.iter().map(|p| p.metrics).collect::<Vec<_>>());
        EvalReport { per_product: products, average, seed, config_digest }
    }

    /// One key per metric, grouped per product plus an `average` table.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("product,auroc_p,ap_p,f1_p,ap_i,max_iou,is_proxy,icl_proxy\n");
        let row = |name: &str, m: &MetricSet| {
            format!(
                "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.auroc_p, m.ap_p, m.f1_p, m.ap_i, m.max_iou, m.is_proxy, m.icl_proxy
            )
        };
        for p in &self.per_product {
            out.push_str(&row(&p.product, &p.metrics));
        }
        out.push_str(&row("average", &self.average));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set(v: f64) -> MetricSet {
        MetricSet { auroc_p: v, ap_p: v, f1_p: v, ap_i: v, max_iou: v, is_proxy: 1.0 + v, icl_proxy: v }
    }

    #[test]
    fn report_serializes_both_ways() {
        let report = EvalReport::from_products(
            vec![
                ProductEval { product: "disk".into(), metrics: sample_set(0.5), n_pairs: 10, n_eval_images: 4 },
                ProductEval { product: "grid".into(), metrics: sample_set(0.7), n_pairs: 10, n_eval_images: 4 },
            ],
            7,
            "digest".into(),
        );
        assert!((report.average.ap_p - 0.6).abs() < 1e-12);
        let toml_text = report.to_toml_string();
        assert!(toml_text.contains("auroc_p"));
        let csv = report.to_csv_string();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("average,"));
    }

    #[test]
    fn metric_ranges_are_enforced() {
        let mut m = sample_set(0.5);
        m.ap_p = 1.2;
        assert!(m.validate().is_err());
        let mut m = sample_set(0.5);
        m.is_proxy = 0.5;
        assert!(m.validate().is_err());
    }
}
