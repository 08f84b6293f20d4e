//! Named trainable arrays with Adam moment accumulators.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    first: Mat,
    second: Mat,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let shape = value.raw_dim();
        Self { value, first: Array2::zeros(shape), second: Array2::zeros(shape) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), Param::new(value));
    }

    /// Glorot-uniform initialisation.
    pub fn insert_glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Mat> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.params.get_mut(name).map(|p| &mut p.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One bias-corrected Adam update. Parameters missing from `grads` are
    /// treated as having zero gradient, so their moments still decay.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Mat>, lr: f64, cfg: AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if g.raw_dim() != p.value.raw_dim() {
                return Err(Error::Dimension(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let Param { value, first, second } = p;
            match grads.get(name) {
                Some(g) => {
                    ndarray::Zip::from(value).and(first).and(second).and(g).for_each(|w, m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    });
                }
                None => {
                    ndarray::Zip::from(value).and(first).and(second).for_each(|w, m, v| {
                        *m *= cfg.beta1;
                        *v *= cfg.beta2;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    });
                }
            }
        }
        Ok(())
    }
}

/// Adds `src` into `dst` entrywise, creating missing entries.
pub fn accumulate_grads(dst: &mut BTreeMap<String, Mat>, src: BTreeMap<String, Mat>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                dst.insert(name, g);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", array![[x]]);
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Mat> {
        BTreeMap::from([("x".to_string(), array![[g]])])
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = single(1.5);
        s.adam_step(&grad(0.0), 0.001, AdamConfig::default()).unwrap();
        assert_eq!(s.value("x").unwrap()[[0, 0]], 1.5);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut s = single(0.0);
        s.adam_step(&grad(1.0), 0.001, AdamConfig::default()).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.value("x").unwrap()[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = single(5.0);
        for _ in 0..500 {
            let x = s.value("x").unwrap()[[0, 0]];
            s.adam_step(&grad(2.0 * x), 0.1, AdamConfig::default()).unwrap();
        }
        assert!(s.value("x").unwrap()[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(0.0);
        let err = s.adam_step(&grad(f64::NAN), 0.001, AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('x'));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::from([("a".to_string(), array![[3.0, 4.0]])]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g["a"][[0, 0]] - 0.6).abs() < 1e-15);
    }
}
