//! Variance-versus-support analysis of learned embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::cohort::Cohort;
use crate::eval::metrics::spearman;
use crate::trainer::NodeEmbeddings;

/// Number of largest variance components averaged per node.
pub const TOP_COMPONENTS: usize = 10;
pub const VISIT_BUCKETS: usize = 20;
pub const CODE_BUCKETS: usize = 10;

/// Mean of the `TOP_COMPONENTS` largest entries of each row.
pub fn node_variance(var: &Mat) -> Vec<f64> {
    var.rows()
        .into_iter()
        .map(|row| {
            let mut v: Vec<f64> = row.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = TOP_COMPONENTS.min(v.len());
            v[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub index: usize,
    /// Lower and upper edge of the bucketed quantity.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    /// Nonempty buckets only, in increasing order.
    pub buckets: Vec<Bucket>,
    /// Spearman correlation of bucket index against mean variance.
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Visits grouped by their patient's visit count.
    pub visits: TrendReport,
    /// Codes grouped by `log10(degree)`.
    pub codes: TrendReport,
}

/// Groups `(key, variance)` pairs into `n` equal-width buckets of `key`.
pub fn bucket_trend(keys: &[f64], values: &[f64], n: usize) -> TrendReport {
    assert_eq!(keys.len(), values.len());
    if keys.is_empty() {
        return TrendReport { buckets: Vec::new(), spearman: 0.0 };
    }
    let lo = keys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = keys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n as f64;
    let mut sums = vec![(0usize, 0.0); n];
    for (&k, &v) in keys.iter().zip(values) {
        let b = if width > 0.0 { (((k - lo) / width) as usize).min(n - 1) } else { 0 };
        sums[b].0 += 1;
        sums[b].1 += v;
    }
    let buckets: Vec<Bucket> = sums
        .iter()
        .enumerate()
        .filter(|(_, (c, _))| *c > 0)
        .map(|(i, &(count, total))| Bucket {
            index: i,
            lo: lo + width * i as f64,
            hi: lo + width * (i + 1) as f64,
            count,
            mean_variance: total / count as f64,
        })
        .collect();
    let idx: Vec<f64> = buckets.iter().map(|b| b.index as f64).collect();
    let means: Vec<f64> = buckets.iter().map(|b| b.mean_variance).collect();
    TrendReport { spearman: spearman(&idx, &means), buckets }
}

/// Bucketed variance trends for the visits and codes of `cohort`, whose
/// node order must match `emb`.
pub fn uncertainty_report(emb: &NodeEmbeddings, cohort: &Cohort) -> UncertaintyReport {
    let visit_var = node_variance(&emb.visit_var);
    let visit_keys: Vec<f64> = (0..cohort.n_visits()).map(|v| cohort.patients[cohort.visit_patient(v)].len() as f64).collect();

    let code_var = node_variance(&emb.code_var);
    let degrees = cohort.graph.code_degrees();
    let (mut code_keys, mut code_vals) = (Vec::new(), Vec::new());
    for (c, &d) in degrees.iter().enumerate() {
        if d > 0 {
            code_keys.push((d as f64).log10());
            code_vals.push(code_var[c]);
        }
    }
    UncertaintyReport {
        visits: bucket_trend(&visit_keys, &visit_var, VISIT_BUCKETS),
        codes: bucket_trend(&code_keys, &code_vals, CODE_BUCKETS),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn short_rows_use_all_components() {
        let var = Array2::from_shape_fn((1, 10), |(_, j)| j as f64);
        assert_eq!(node_variance(&var), vec![4.5]);
        let wide = Array2::from_shape_fn((1, 12), |(_, j)| j as f64);
        assert_eq!(node_variance(&wide), vec![(2..12).sum::<usize>() as f64 / 10.0]);
    }

    #[test]
    fn constant_variance_is_flat() {
        let keys: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = bucket_trend(&keys, &[1.3; 50], 10);
        assert_eq!(r.buckets.len(), 10);
        assert_eq!(r.spearman, 0.0);
    }

    #[test]
    fn decreasing_trend_detected() {
        let keys: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let vals: Vec<f64> = keys.iter().map(|k| 10.0 - k * 0.05).collect();
        let r = bucket_trend(&keys, &vals, 20);
        assert!((r.spearman + 1.0).abs() < 1e-12);
    }
}
