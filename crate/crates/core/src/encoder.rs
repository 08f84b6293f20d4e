//! Gaussian node encoder and the Wasserstein structural objective.
//!
//! Visits and codes are projected by type-specific matrices into a shared
//! intermediate space, then by shared mean/variance heads into `L`-dimensional
//! diagonal Gaussians. Weights are applied to row vectors (`x · W`), so every
//! matrix is stored `input × output`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{elu_plus_one, sigmoid, Mat, Tape, Var};
use crate::cohort::{BipartiteGraph, Cohort};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const W_V: &str = "enc.w_v";
pub const W_C: &str = "enc.w_c";
pub const W_MU: &str = "enc.w_mu";
pub const B_MU: &str = "enc.b_mu";
pub const W_SIGMA: &str = "enc.w_sigma";
pub const B_SIGMA: &str = "enc.b_sigma";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Visit,
    Code,
}

impl NodeKind {
    fn projection(self) -> &'static str {
        match self {
            NodeKind::Visit => W_V,
            NodeKind::Code => W_C,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Visit => "visit",
            NodeKind::Code => "code",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub visit_attrs: usize,
    pub code_attrs: usize,
    pub hidden: usize,
    pub embed: usize,
}

pub fn init_encoder<R: Rng>(store: &mut ParamStore, dims: EncoderDims, rng: &mut R) {
    store.insert_glorot(W_V, dims.visit_attrs, dims.hidden, rng);
    store.insert_glorot(W_C, dims.code_attrs, dims.hidden, rng);
    store.insert_glorot(W_MU, dims.hidden, dims.embed, rng);
    store.insert(B_MU, Array2::zeros((1, dims.embed)));
    store.insert_glorot(W_SIGMA, dims.hidden, dims.embed, rng);
    store.insert(B_SIGMA, Array2::zeros((1, dims.embed)));
}

/// Diagonal Gaussian `N(mu, diag(var))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
}

impl GaussianEmbedding {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Array1<f64> {
        self.var.mapv(f64::sqrt)
    }
}

/// Encodes one attribute vector.
pub fn encode(attrs: &[f64], kind: NodeKind, store: &ParamStore) -> Result<GaussianEmbedding> {
    let x = Array2::from_shape_vec((1, attrs.len()), attrs.to_vec()).expect("row shape");
    let (mu, var) = encode_matrix(&x, kind, store)?;
    Ok(GaussianEmbedding { mu: mu.row(0).to_owned(), var: var.row(0).to_owned() })
}

/// Encodes each row of `x`, returning `(mu, var)` matrices.
pub fn encode_matrix(x: &Mat, kind: NodeKind, store: &ParamStore) -> Result<(Mat, Mat)> {
    let w = store.value(kind.projection())?;
    if x.ncols() != w.nrows() {
        return Err(Error::Dimension(format!("{} attributes have length {}, expected {}", kind.as_str(), x.ncols(), w.nrows())));
    }
    let u = x.dot(w);
    let mu = u.dot(store.value(W_MU)?) + store.value(B_MU)?;
    let var = (u.dot(store.value(W_SIGMA)?) + store.value(B_SIGMA)?).mapv(elu_plus_one);
    Ok((mu, var))
}

/// Tape version of [`encode_matrix`]: returns `(mu, var)` nodes.
pub fn encode_on_tape(tape: &mut Tape, store: &ParamStore, kind: NodeKind, x: Var) -> Result<(Var, Var)> {
    let w = tape.param(store, kind.projection())?;
    if tape.shape(x).1 != tape.shape(w).0 {
        return Err(Error::Dimension(format!("{} attributes have length {}, expected {}", kind.as_str(), tape.shape(x).1, tape.shape(w).0)));
    }
    let u = tape.matmul(x, w)?;
    encode_hidden_on_tape(tape, store, u)
}

fn encode_hidden_on_tape(tape: &mut Tape, store: &ParamStore, u: Var) -> Result<(Var, Var)> {
    let w_mu = tape.param(store, W_MU)?;
    let b_mu = tape.param(store, B_MU)?;
    let w_sigma = tape.param(store, W_SIGMA)?;
    let b_sigma = tape.param(store, B_SIGMA)?;
    let m = tape.matmul(u, w_mu)?;
    let mu = tape.add(m, b_mu)?;
    let s = tape.matmul(u, w_sigma)?;
    let s = tape.add(s, b_sigma)?;
    let var = tape.elu_plus_one(s);
    Ok((mu, var))
}

/// 2-Wasserstein distance between diagonal Gaussians:
/// `sqrt(|mu_a − mu_b|² + |sqrt(var_a) − sqrt(var_b)|²)`.
pub fn w2_distance(a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    assert_eq!(a.dim(), b.dim(), "embedding dimensions differ");
    let mean: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let spread: f64 = a.var.iter().zip(&b.var).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    (mean + spread).sqrt()
}

/// Link likelihood `sigmoid(−d)`.
pub fn edge_probability(v: &GaussianEmbedding, c: &GaussianEmbedding) -> f64 {
    sigmoid(-w2_distance(v, c))
}

/// Draws negative codes for a visit from code degree raised to `3/4`.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

pub const NEGATIVE_EXPONENT: f64 = 0.75;

impl NegativeSampler {
    pub fn from_graph(graph: &BipartiteGraph) -> Self {
        Self::from_frequencies(&graph.code_degrees().iter().map(|&d| d as f64).collect::<Vec<_>>())
    }

    pub fn from_frequencies(freq: &[f64]) -> Self {
        let weights: Vec<f64> = freq.iter().map(|f| f.powf(NEGATIVE_EXPONENT)).collect();
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Self { weights, cumulative }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty code set");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.weights.len() - 1)
    }

    /// `k` codes not in `linked` (sorted), for visit `visit`.
    pub fn sample<R: Rng>(&self, rng: &mut R, visit: usize, linked: &[usize], k: usize) -> Result<Vec<usize>> {
        let n = self.weights.len();
        if linked.len() >= n {
            return Err(Error::NoNegatives(visit));
        }
        let is_linked = |c: usize| linked.binary_search(&c).is_ok();
        let total = *self.cumulative.last().unwrap_or(&0.0);
        let excluded: f64 = linked.iter().map(|&c| self.weights[c]).sum();
        let allowed = total - excluded;
        if allowed > 0.5 * total && total > 0.0 {
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                let c = self.draw(rng);
                if !is_linked(c) {
                    out.push(c);
                }
            }
            return Ok(out);
        }
        // Most of the mass is excluded: sample from the restricted table directly.
        let candidates: Vec<usize> = (0..n).filter(|&c| !is_linked(c)).collect();
        let mut weights: Vec<f64> = candidates.iter().map(|&c| self.weights[c]).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let restricted = NegativeSampler {
            cumulative: weights
                .iter()
                .scan(0.0, |acc, w| {
                    *acc += w;
                    Some(*acc)
                })
                .collect(),
            weights,
        };
        Ok((0..k).map(|_| candidates[restricted.draw(rng)]).collect())
    }
}

/// Structural loss over a batch of positive edges with their negatives:
/// `−(1/|batch|) Σ [log σ(−d_pos) + Σ_j log σ(d_neg_j)]`.
pub fn structural_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cohort: &Cohort,
    batch: &[(usize, usize)],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("structural batch is empty".into()));
    }
    if negatives.len() != batch.len() {
        return Err(Error::Dimension(format!("{} negative lists for {} edges", negatives.len(), batch.len())));
    }
    // Local row numbering for the distinct visits and codes in this batch.
    let mut visit_rows = BTreeMap::new();
    let mut code_rows = BTreeMap::new();
    for (&(v, c), negs) in batch.iter().zip(negatives) {
        visit_rows.entry(v).or_insert(0);
        code_rows.entry(c).or_insert(0);
        for &n in negs {
            code_rows.entry(n).or_insert(0);
        }
    }
    for (i, slot) in visit_rows.values_mut().enumerate() {
        *slot = i;
    }
    for (i, slot) in code_rows.values_mut().enumerate() {
        *slot = i;
    }
    let xv = stack_rows(visit_rows.keys().map(|&v| cohort.visit(v).attributes.as_slice()))?;
    let xc = stack_rows(code_rows.keys().map(|&c| cohort.codes()[c].attributes.as_slice()))?;
    let n_visits = visit_rows.len();

    let xv = tape.constant(xv);
    let xc = tape.constant(xc);
    let wv = tape.param(store, W_V)?;
    let wc = tape.param(store, W_C)?;
    if tape.shape(xv).1 != tape.shape(wv).0 || tape.shape(xc).1 != tape.shape(wc).0 {
        return Err(Error::Dimension("attribute widths do not match encoder".into()));
    }
    let uv = tape.matmul(xv, wv)?;
    let uc = tape.matmul(xc, wc)?;
    let u = tape.concat_rows(&[uv, uc])?;
    let (mu, var) = encode_hidden_on_tape(tape, store, u)?;
    let std = tape.sqrt(var);
    let feat = tape.concat_cols(&[mu, std])?;

    let mut pos_v = Vec::with_capacity(batch.len());
    let mut pos_c = Vec::with_capacity(batch.len());
    let mut neg_v = Vec::new();
    let mut neg_c = Vec::new();
    for (&(v, c), negs) in batch.iter().zip(negatives) {
        let vr = visit_rows[&v];
        pos_v.push(vr);
        pos_c.push(n_visits + code_rows[&c]);
        for n in negs {
            neg_v.push(vr);
            neg_c.push(n_visits + code_rows[n]);
        }
    }
    let d_pos = pair_distances(tape, feat, &pos_v, &pos_c)?;
    let neg_d = tape.neg(d_pos);
    let ll_pos = tape.log_sigmoid(neg_d);
    let mut total = tape.sum(ll_pos);
    if !neg_v.is_empty() {
        let d_neg = pair_distances(tape, feat, &neg_v, &neg_c)?;
        let ll_neg = tape.log_sigmoid(d_neg);
        let s = tape.sum(ll_neg);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

fn pair_distances(tape: &mut Tape, feat: Var, left: &[usize], right: &[usize]) -> Result<Var> {
    let a = tape.gather_rows(feat, left)?;
    let b = tape.gather_rows(feat, right)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_cols(sq);
    Ok(tape.sqrt(s))
}

pub(crate) fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Mat> {
    let rows: Vec<&[f64]> = rows.collect();
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Dimension("ragged attribute rows".into()));
    }
    Ok(Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j]))
}
