//! Multinomial logistic regression probe for node classes.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 5000;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_fraction: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Unregularised softmax regression fitted by full-batch gradient descent.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Mat,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn with_bias(x: &Mat) -> Mat {
    let ones = Array2::ones((x.nrows(), 1));
    ndarray::concatenate![Axis(1), *x, ones]
}

fn softmax_rows(z: &mut Mat) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Largest eigenvalue of `xᵀx / n` by power iteration.
fn gram_top_eigenvalue(x: &Mat) -> f64 {
    let n = x.nrows().max(1) as f64;
    let mut v = Array1::from_elem(x.ncols(), 1.0 / (x.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = x.t().dot(&x.dot(&v)) / n;
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / norm;
        let converged = (norm - lambda).abs() <= 1e-10 * norm;
        lambda = norm;
        v = next;
        if converged {
            break;
        }
    }
    lambda
}

impl LogisticModel {
    pub fn fit(x: &Mat, y: &[usize], classes: usize) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("nonempty training set");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = with_bias(&((x - &mean) / &scale));
        let n = xs.nrows() as f64;
        let mut onehot = Array2::zeros((xs.nrows(), classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        // Softmax cross-entropy has curvature at most λ_max(XᵀX/n) / 2.
        let step = 2.0 / gram_top_eigenvalue(&xs).max(1e-12);
        let mut weights = Array2::zeros((xs.ncols(), classes));
        let mut grad_norm = f64::INFINITY;
        let mut iterations = 0;
        while iterations < MAX_ITERS {
            let mut p = xs.dot(&weights);
            softmax_rows(&mut p);
            let grad = xs.t().dot(&(p - &onehot)) / n;
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if grad_norm < GRAD_TOL {
                break;
            }
            weights.scaled_add(-step, &grad);
            iterations += 1;
        }
        Self { mean, scale, weights, iterations, grad_norm }
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let xs = with_bias(&((x - &self.mean) / &self.scale));
        xs.dot(&self.weights)
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i).unwrap_or(0))
            .collect()
    }
}

/// `(micro, macro)` F1 for single-label predictions. Macro averages over the
/// classes present in either truth or prediction.
pub fn f1_scores(truth: &[usize], pred: &[usize]) -> (f64, f64) {
    let mut tp = BTreeMap::<usize, usize>::new();
    let mut fp = BTreeMap::<usize, usize>::new();
    let mut fn_ = BTreeMap::<usize, usize>::new();
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            *tp.entry(t).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fn_.entry(t).or_default() += 1;
        }
    }
    let (tps, fps, fns): (usize, usize, usize) = (tp.values().sum(), fp.values().sum(), fn_.values().sum());
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let micro = f1(tps, fps, fns);
    let mut classes: Vec<usize> = truth.iter().chain(pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let macro_ = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| f1(tp.get(c).copied().unwrap_or(0), fp.get(c).copied().unwrap_or(0), fn_.get(c).copied().unwrap_or(0))).sum::<f64>()
            / classes.len() as f64
    };
    (micro, macro_)
}

/// Fits a probe on a seeded random `train_fraction` of the rows and scores the
/// rest.
pub fn logistic_probe(features: &Mat, classes: &[String], train_fraction: f64, seed: u64) -> Result<ProbeReport> {
    if features.nrows() != classes.len() {
        return Err(Error::Dimension(format!("{} feature rows for {} labels", features.nrows(), classes.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut names: Vec<&String> = classes.iter().collect();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(Error::DegenerateLabels("probe needs at least two classes".into()));
    }
    let ids: Vec<usize> = classes.iter().map(|c| names.binary_search(&c).expect("present")).collect();
    let n = classes.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n_train);

    let xtr = features.select(Axis(0), train);
    let ytr: Vec<usize> = train.iter().map(|&i| ids[i]).collect();
    let model = LogisticModel::fit(&xtr, &ytr, names.len());
    let pred = model.predict(&features.select(Axis(0), test));
    let truth: Vec<usize> = test.iter().map(|&i| ids[i]).collect();
    let (micro_f1, macro_f1) = f1_scores(&truth, &pred);
    Ok(ProbeReport { train_fraction, micro_f1, macro_f1, n_train, n_test: test.len() })
}

/// Probe reports for each fraction in `fractions`.
pub fn probe_sweep(features: &Mat, classes: &[String], fractions: &[f64], seed: u64) -> Result<Vec<ProbeReport>> {
    fractions.iter().map(|&f| logistic_probe(features, classes, f, seed)).collect()
}
