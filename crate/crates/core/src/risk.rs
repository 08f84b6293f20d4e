//! Supervised risk head on top of the recurrent hidden states.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Stored `m' × s` so that logits are `h · W_s + b_s` for a row `h`.
pub const W_S: &str = "head.w_s";
pub const B_S: &str = "head.b_s";

/// Probabilities are kept inside `[CLIP, 1 − CLIP]` before taking logs.
pub const CLIP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskLossMode {
    /// `−(1/T) Σ yᵀ log ŷ`.
    #[default]
    SoftmaxCe,
    /// `−(1/T) Σ [yᵀ log ŷ + (1 − y)ᵀ log(1 − ŷ)]`.
    PerClassBinary,
}

pub fn init_head<R: Rng>(store: &mut ParamStore, hidden: usize, classes: usize, rng: &mut R) {
    store.insert_glorot(W_S, hidden, classes, rng);
    store.insert(B_S, Array2::zeros((1, classes)));
}

/// `softmax(h · W_s + b_s)`.
pub fn predict(h: &Array1<f64>, store: &ParamStore) -> Result<Array1<f64>> {
    let w = store.value(W_S)?;
    if w.nrows() != h.len() {
        return Err(Error::Dimension(format!("hidden state has {} entries, head expects {}", h.len(), w.nrows())));
    }
    let logits = h.dot(w) + store.value(B_S)?.row(0);
    Ok(softmax(&logits))
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

/// Stacked class probabilities (`T × s`) for stacked hidden states.
pub fn predict_on_tape(tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
    let w = tape.param(store, W_S)?;
    let b = tape.param(store, B_S)?;
    let logits = tape.matmul(hidden, w)?;
    let logits = tape.add(logits, b)?;
    Ok(tape.softmax_rows(logits))
}

/// Cross-entropy over a sequence given stacked predictions and one-hot
/// labels (`T × s`).
pub fn task_loss_on_tape(tape: &mut Tape, predictions: Var, labels: &Array2<f64>, mode: TaskLossMode) -> Result<Var> {
    if tape.shape(predictions) != (labels.nrows(), labels.ncols()) {
        return Err(Error::Shape { op: "task_loss", lhs: tape.shape(predictions), rhs: (labels.nrows(), labels.ncols()) });
    }
    let t_len = labels.nrows() as f64;
    let y = tape.constant(labels.clone());
    let p = tape.clamp(predictions, CLIP, 1.0 - CLIP);
    let logp = tape.log(p);
    let mut ll = tape.mul(y, logp)?;
    if mode == TaskLossMode::PerClassBinary {
        let not_y = tape.constant(labels.mapv(|v| 1.0 - v));
        let q = tape.scale(p, -1.0);
        let q = tape.shift(q, 1.0);
        let logq = tape.log(q);
        let neg = tape.mul(not_y, logq)?;
        ll = tape.add(ll, neg)?;
    }
    let total = tape.sum(ll);
    Ok(tape.scale(total, -1.0 / t_len))
}

/// Label matrix for `task` over a visit sequence.
pub fn label_matrix<'a>(visits: impl Iterator<Item = &'a crate::cohort::Visit>, task: &str) -> Result<Array2<f64>> {
    let mut rows = Vec::new();
    for v in visits {
        let y = v.label(task).ok_or_else(|| Error::MissingLabel { task: task.to_string(), visit: v.id.clone() })?;
        rows.push(y.iter().map(|&b| b as f64).collect::<Vec<_>>());
    }
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Dimension(format!("labels for task {task} have inconsistent widths")));
    }
    Ok(Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j]))
}
