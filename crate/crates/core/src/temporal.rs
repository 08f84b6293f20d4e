//! Recurrent marked temporal point process over a patient's visits.
//!
//! Each visit contributes a marker vector and a gap feature to a recurrent
//! cell. The hidden state after visit `i` parameterises an exponential-affine
//! intensity `λ(t) = exp(a + w·(t − t_i) + b)` with `a = v·h_i`, whose density
//! has the closed form
//!
//! ```text
//! log f(Δ) = a + wΔ + b − exp(a + b) · expm1(wΔ) / w
//! ```
//!
//! which is continuous through `w = 0` (constant intensity).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{expm1_div, sigmoid, Mat, Tape, Var};
use crate::encoder::GaussianEmbedding;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::quadrature;

pub const W_TV: &str = "tpp.w_tv";
pub const W_G: &str = "tpp.w_g";
pub const W_HH: &str = "tpp.w_hh";
pub const B_H: &str = "tpp.b_h";
pub const LSTM_W_X: &str = "tpp.lstm.w_x";
pub const LSTM_W_H: &str = "tpp.lstm.w_h";
pub const LSTM_B: &str = "tpp.lstm.b";
pub const V_T: &str = "tpp.v_t";
pub const W_T: &str = "tpp.w_t";
pub const B_T: &str = "tpp.b_t";

/// Width of the gap feature vector `(Δ/s, ln(1 + Δ/s))`.
pub const GAP_FEATURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// `h' = relu(e·W_tv + g·W_g + h·W_hh + b_h)`.
    Plain,
    /// LSTM with gate order input, forget, candidate, output.
    #[default]
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarkerNoise {
    /// `e = mu + ε ⊙ var`.
    #[default]
    Variance,
    /// `e = mu + ε ⊙ sqrt(var)`.
    Stddev,
    /// `e = mu`.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub cell: CellKind,
    /// Days per unit in the gap features fed to the cell.
    pub gap_scale: f64,
    /// Feed a gap of 1 to the cell at every step regardless of timestamps.
    pub constant_gaps: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self { cell: CellKind::Gated, gap_scale: 30.0, constant_gaps: false }
    }
}

impl TemporalConfig {
    pub fn gap_features(&self, gap: f64) -> [f64; GAP_FEATURES] {
        let g = if self.constant_gaps { 1.0 } else { gap } / self.gap_scale;
        [g, g.ln_1p()]
    }
}

pub fn init_temporal<R: Rng>(store: &mut ParamStore, embed: usize, hidden: usize, cell: CellKind, base_log_rate: f64, rng: &mut R) {
    match cell {
        CellKind::Plain => {
            store.insert_glorot(W_TV, embed, hidden, rng);
            store.insert_glorot(W_G, GAP_FEATURES, hidden, rng);
            store.insert_glorot(W_HH, hidden, hidden, rng);
            store.insert(B_H, Array2::zeros((1, hidden)));
        }
        CellKind::Gated => {
            store.insert_glorot(LSTM_W_X, embed + GAP_FEATURES, 4 * hidden, rng);
            store.insert_glorot(LSTM_W_H, hidden, 4 * hidden, rng);
            let mut b = Array2::zeros((1, 4 * hidden));
            b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
            store.insert(LSTM_B, b);
        }
    }
    store.insert_glorot(V_T, hidden, 1, rng);
    store.insert(W_T, Array2::zeros((1, 1)));
    store.insert(B_T, Array2::from_elem((1, 1), base_log_rate));
}

/// Hidden state after the most recent visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub h: Array1<f64>,
    /// LSTM memory; unused by the plain cell.
    pub cell: Array1<f64>,
    pub t_last: f64,
}

impl SequenceState {
    pub fn zeros(hidden: usize, t_last: f64) -> Self {
        Self { h: Array1::zeros(hidden), cell: Array1::zeros(hidden), t_last }
    }
}

/// Marker for one visit: the embedding mean perturbed by noise scaled per `mode`.
pub fn event_marker<R: Rng>(z: &GaussianEmbedding, mode: MarkerNoise, rng: &mut R) -> Array1<f64> {
    let eps: Array1<f64> = Array1::from_shape_simple_fn(z.dim(), || StandardNormal.sample(rng));
    marker_with_noise(z, mode, &eps)
}

pub fn marker_with_noise(z: &GaussianEmbedding, mode: MarkerNoise, eps: &Array1<f64>) -> Array1<f64> {
    match mode {
        MarkerNoise::Variance => &z.mu + &(eps * &z.var),
        MarkerNoise::Stddev => &z.mu + &(eps * &z.std()),
        MarkerNoise::Off => z.mu.clone(),
    }
}

fn row(v: &Array1<f64>) -> Mat {
    v.clone().insert_axis(ndarray::Axis(0))
}

/// One recurrent update with plain arrays.
pub fn step(state: &SequenceState, e: &Array1<f64>, gap: f64, t: f64, store: &ParamStore, cfg: &TemporalConfig) -> Result<SequenceState> {
    if gap < 0.0 {
        return Err(Error::NegativeGap { index: 0, gap });
    }
    let g = Array1::from(cfg.gap_features(gap).to_vec());
    let h = row(&state.h);
    match cfg.cell {
        CellKind::Plain => {
            let pre = row(e).dot(store.value(W_TV)?) + row(&g).dot(store.value(W_G)?) + h.dot(store.value(W_HH)?) + store.value(B_H)?;
            let h_new = pre.row(0).mapv(|x| x.max(0.0));
            Ok(SequenceState { cell: state.cell.clone(), h: h_new, t_last: t })
        }
        CellKind::Gated => {
            let m = state.h.len();
            let x = ndarray::concatenate![ndarray::Axis(0), *e, g];
            let z = row(&x).dot(store.value(LSTM_W_X)?) + h.dot(store.value(LSTM_W_H)?) + store.value(LSTM_B)?;
            let z = z.row(0);
            let gate = |k: usize, f: fn(f64) -> f64| z.slice(ndarray::s![k * m..(k + 1) * m]).mapv(f);
            let (i, f, cand, o) = (gate(0, sigmoid), gate(1, sigmoid), gate(2, f64::tanh), gate(3, sigmoid));
            let c = &f * &state.cell + &i * &cand;
            let h_new = &o * &c.mapv(f64::tanh);
            Ok(SequenceState { h: h_new, cell: c, t_last: t })
        }
    }
}

/// Scalar intensity head `(a, w, b)` for a fixed history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityHead {
    /// History term `v·h`.
    pub history: f64,
    pub w: f64,
    pub b: f64,
}

impl IntensityHead {
    pub fn from_state(state: &SequenceState, store: &ParamStore) -> Result<Self> {
        let v = store.value(V_T)?;
        if v.nrows() != state.h.len() {
            return Err(Error::Dimension(format!("hidden state has {} entries, intensity head expects {}", state.h.len(), v.nrows())));
        }
        let history = state.h.iter().zip(v.column(0)).map(|(a, b)| a * b).sum();
        Ok(Self { history, w: store.value(W_T)?[[0, 0]], b: store.value(B_T)?[[0, 0]] })
    }

    pub fn intensity(&self, gap: f64) -> f64 {
        (self.history + self.w * gap + self.b).exp()
    }

    /// Compensator `∫₀^Δ λ`.
    pub fn cumulative(&self, gap: f64) -> f64 {
        (self.history + self.b).exp() * expm1_div(self.w, gap)
    }

    pub fn log_density(&self, gap: f64) -> f64 {
        self.history + self.w * gap + self.b - self.cumulative(gap)
    }

    pub fn density(&self, gap: f64) -> f64 {
        self.log_density(gap).exp()
    }

    /// Mean gap to the next event. Requires an increasing intensity (`w > 0`)
    /// so the density integrates to one.
    pub fn expected_gap(&self) -> Result<f64> {
        if self.w <= 0.0 || !self.w.is_finite() {
            return Err(Error::ImproperDensity(self.w));
        }
        Ok(quadrature::integrate_to_infinity(|d| d * self.density(d), 0.0, 1e-14, 1e-8))
    }

    /// Draws a gap by inverting the compensator.
    pub fn sample_gap<R: Rng>(&self, rng: &mut R) -> f64 {
        let target = -(1.0 - rng.random::<f64>()).ln() / (self.history + self.b).exp();
        if self.w.abs() < 1e-12 {
            return target;
        }
        let arg = self.w * target;
        if arg <= -1.0 {
            // Decreasing intensity with finite total mass: no further event.
            return f64::INFINITY;
        }
        arg.ln_1p() / self.w
    }
}

pub fn intensity(state: &SequenceState, t: f64, store: &ParamStore) -> Result<f64> {
    Ok(IntensityHead::from_state(state, store)?.intensity(t - state.t_last))
}

pub fn log_density(state: &SequenceState, t: f64, store: &ParamStore) -> Result<f64> {
    Ok(IntensityHead::from_state(state, store)?.log_density(t - state.t_last))
}

/// Expected time of the next visit.
pub fn predict_next_time(state: &SequenceState, store: &ParamStore) -> Result<f64> {
    Ok(state.t_last + IntensityHead::from_state(state, store)?.expected_gap()?)
}

/// Runs the recurrent cell over `markers` (`T × L`) with per-visit incoming
/// gaps (`gaps_in[0]` is 0 for the first visit). Returns the stacked hidden
/// states (`T × m'`).
pub fn run_on_tape(tape: &mut Tape, store: &ParamStore, cfg: &TemporalConfig, markers: Var, gaps_in: &[f64]) -> Result<Var> {
    let t_len = tape.shape(markers).0;
    if gaps_in.len() != t_len {
        return Err(Error::Dimension(format!("{} gaps for {} markers", gaps_in.len(), t_len)));
    }
    let g = Array2::from_shape_fn((t_len, GAP_FEATURES), |(i, j)| cfg.gap_features(gaps_in[i])[j]);
    let g = tape.constant(g);
    let mut states = Vec::with_capacity(t_len);
    match cfg.cell {
        CellKind::Plain => {
            let w_tv = tape.param(store, W_TV)?;
            let w_g = tape.param(store, W_G)?;
            let w_hh = tape.param(store, W_HH)?;
            let b_h = tape.param(store, B_H)?;
            let m = tape.shape(w_hh).0;
            let xe = tape.matmul(markers, w_tv)?;
            let xg = tape.matmul(g, w_g)?;
            let x = tape.add(xe, xg)?;
            let x = tape.add(x, b_h)?;
            let mut h = tape.constant(Array2::zeros((1, m)));
            for i in 0..t_len {
                let xi = tape.row(x, i)?;
                let rec = tape.matmul(h, w_hh)?;
                let pre = tape.add(xi, rec)?;
                h = tape.relu(pre);
                states.push(h);
            }
        }
        CellKind::Gated => {
            let w_x = tape.param(store, LSTM_W_X)?;
            let w_h = tape.param(store, LSTM_W_H)?;
            let b = tape.param(store, LSTM_B)?;
            let m = tape.shape(w_h).0;
            let input = tape.concat_cols(&[markers, g])?;
            let x = tape.matmul(input, w_x)?;
            let x = tape.add(x, b)?;
            let mut h = tape.constant(Array2::zeros((1, m)));
            let mut c = tape.constant(Array2::zeros((1, m)));
            for i in 0..t_len {
                let xi = tape.row(x, i)?;
                let rec = tape.matmul(h, w_h)?;
                let z = tape.add(xi, rec)?;
                let zi = tape.slice_cols(z, 0, m)?;
                let zf = tape.slice_cols(z, m, 2 * m)?;
                let zg = tape.slice_cols(z, 2 * m, 3 * m)?;
                let zo = tape.slice_cols(z, 3 * m, 4 * m)?;
                let ig = tape.sigmoid(zi);
                let fg = tape.sigmoid(zf);
                let cand = tape.tanh(zg);
                let og = tape.sigmoid(zo);
                let keep = tape.mul(fg, c)?;
                let write = tape.mul(ig, cand)?;
                c = tape.add(keep, write)?;
                let tc = tape.tanh(c);
                h = tape.mul(og, tc)?;
                states.push(h);
            }
        }
    }
    tape.concat_rows(&states)
}

/// Column of `log f(gap_i | h_i)` for the first `gaps.len()` hidden states.
pub fn log_density_on_tape(tape: &mut Tape, store: &ParamStore, hidden: Var, gaps: &[f64]) -> Result<Var> {
    let rows: Vec<usize> = (0..gaps.len()).collect();
    let h = tape.gather_rows(hidden, &rows)?;
    let v_t = tape.param(store, V_T)?;
    let w_t = tape.param(store, W_T)?;
    let b_t = tape.param(store, B_T)?;
    let a = tape.matmul(h, v_t)?;
    let ab = tape.add(a, b_t)?;
    let d = tape.constant(Array2::from_shape_fn((gaps.len(), 1), |(i, _)| gaps[i]));
    let wd = tape.mul(w_t, d)?;
    let exponent = tape.add(ab, wd)?;
    let base = tape.exp(ab);
    let ratio = tape.expm1_div(w_t, gaps)?;
    let comp = tape.mul(base, ratio)?;
    tape.sub(exponent, comp)
}

/// `−Σ_{i<T} log f(t_{i+1} − t_i | h_i)` given stacked hidden states.
pub fn sequence_nll_on_tape(tape: &mut Tape, store: &ParamStore, hidden: Var, gaps: &[f64]) -> Result<Var> {
    if gaps.is_empty() {
        return Err(Error::InvalidCohort("temporal loss needs at least two visits".into()));
    }
    let ll = log_density_on_tape(tape, store, hidden, gaps)?;
    let s = tape.sum(ll);
    Ok(tape.neg(s))
}

/// Temporal negative log-likelihood of a timestamp sequence given its markers
/// (`T × L`, one row per visit).
pub fn sequence_nll(tape: &mut Tape, store: &ParamStore, cfg: &TemporalConfig, timestamps: &[f64], markers: Var) -> Result<Var> {
    let gaps = crate::cohort::gaps_from_timestamps(timestamps)?;
    let gaps_in: Vec<f64> = std::iter::once(0.0).chain(gaps.iter().copied()).collect();
    let hidden = run_on_tape(tape, store, cfg, markers, &gaps_in)?;
    sequence_nll_on_tape(tape, store, hidden, &gaps)
}
