#![allow(dead_code)]

//! Shared toy fixture and plain-loop reference implementations of the losses.

use std::path::Path;

use medgraph::cohort::{load_cohort, Cohort, PatientSequence};
use medgraph::encoder::{B_MU, B_SIGMA, W_C, W_MU, W_SIGMA, W_V};
use medgraph::params::ParamStore;
use medgraph::risk::{TaskLossMode, B_S, W_S};
use medgraph::temporal::{CellKind, MarkerNoise, B_H, B_T, LSTM_B, LSTM_W_H, LSTM_W_X, V_T, W_G, W_HH, W_T, W_TV};
use medgraph::trainer::{init_params, SeqItem, StructBatch, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const CODES_JSONL: &str = r#"{"code_id": "A", "x": [0.5, -1.0, 0.25], "class": "c0"}
{"code_id": "B", "x": [1.5, 0.0, -0.75], "class": "c1"}
{"code_id": "C", "x": [-0.5, 2.0, 1.0], "class": "c0"}
"#;

pub const PATIENTS_JSONL: &str = r#"{"patient_id": "p1", "visits": [{"visit_id": "v1", "t": 0.0, "x": [0.3, -0.2], "codes": ["A", "B"], "y": [1, 0]}, {"visit_id": "v2", "t": 7.0, "x": [1.1, 0.4], "codes": ["A", "B", "C"], "y": [0, 1]}]}
{"patient_id": "p2", "visits": [{"visit_id": "v3", "t": 2.0, "x": [-0.7, 0.9], "codes": ["B"], "y": [0, 1]}, {"visit_id": "v4", "t": 40.0, "x": [0.2, 0.0], "codes": ["A"], "y": [1, 0]}]}
"#;

pub fn write_fixture(dir: &Path) {
    std::fs::write(dir.join("codes.jsonl"), CODES_JSONL).unwrap();
    std::fs::write(dir.join("patients.jsonl"), PATIENTS_JSONL).unwrap();
}

/// 2 patients, 4 visits, 3 codes, 7 edges.
pub fn toy_cohort() -> Cohort {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    load_cohort(&dir.path().join("patients.jsonl"), &dir.path().join("codes.jsonl")).unwrap()
}

pub fn toy_config(cell: CellKind) -> TrainConfig {
    TrainConfig {
        embed_dim: 3,
        hidden_dim: 4,
        rnn_dim: 3,
        negatives: 1,
        task: Some("y".into()),
        cell,
        seed: 11,
        ..Default::default()
    }
}

/// Parameters with every entry redrawn from N(0, 0.5²) so no weight sits at
/// an initialisation special value.
pub fn toy_params(cohort: &Cohort, cfg: &TrainConfig, seed: u64) -> ParamStore {
    let mut store = init_params(cohort, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        store.value_mut(&name).unwrap().mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        });
    }
    // Keep the intensity exponent moderate so every density term is well scaled.
    store.value_mut(B_T).unwrap()[[0, 0]] = -2.0;
    store.value_mut(W_T).unwrap()[[0, 0]] = 0.05;
    store
}

pub fn toy_struct_batch() -> StructBatch {
    // Positive edges with one non-linked code each.
    StructBatch { edges: vec![(0, 0), (0, 1), (2, 1), (3, 0)], negatives: vec![vec![2], vec![2], vec![0], vec![2]] }
}

pub fn toy_sequences(cohort: &Cohort, embed: usize, seed: u64) -> Vec<SeqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cohort.patients.len()).map(|p| SeqItem::sample(cohort, p, embed, &mut rng)).collect()
}

// ---- plain-loop reference arithmetic -------------------------------------

pub fn m(store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    let a = store.value(name).unwrap();
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[[i, j]]).collect()).collect()
}

/// Row vector times matrix.
pub fn vm(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn addv(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn encode_ref(store: &ParamStore, attrs: &[f64], is_visit: bool) -> (Vec<f64>, Vec<f64>) {
    let u = vm(attrs, &m(store, if is_visit { W_V } else { W_C }));
    let mu = addv(&vm(&u, &m(store, W_MU)), &m(store, B_MU)[0]);
    let pre = addv(&vm(&u, &m(store, W_SIGMA)), &m(store, B_SIGMA)[0]);
    let var = pre.iter().map(|&s| if s >= 0.0 { s + 1.0 } else { s.exp() }).collect();
    (mu, var)
}

pub fn w2_ref(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> f64 {
    let mut s = 0.0;
    for i in 0..a.0.len() {
        s += (a.0[i] - b.0[i]).powi(2);
        s += (a.1[i].sqrt() - b.1[i].sqrt()).powi(2);
    }
    s.sqrt()
}

pub fn structural_ref(store: &ParamStore, cohort: &Cohort, batch: &StructBatch) -> f64 {
    let mut total = 0.0;
    for (&(v, c), negs) in batch.edges.iter().zip(&batch.negatives) {
        let zv = encode_ref(store, &cohort.visit(v).attributes, true);
        let zc = encode_ref(store, &cohort.codes()[c].attributes, false);
        total += (sig(-w2_ref(&zv, &zc))).ln();
        for &n in negs {
            let zn = encode_ref(store, &cohort.codes()[n].attributes, false);
            total += (1.0 - sig(-w2_ref(&zv, &zn))).ln();
        }
    }
    -total / batch.edges.len() as f64
}

pub fn gap_features_ref(cfg: &TrainConfig, gap: f64) -> Vec<f64> {
    let g = if cfg.constant_gaps { 1.0 } else { gap } / cfg.gap_scale;
    vec![g, (1.0 + g).ln()]
}

/// Hidden states after each visit, built by explicit loops.
pub fn hidden_ref(store: &ParamStore, cfg: &TrainConfig, seq: &PatientSequence, noise: &Array2<f64>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mprime = cfg.rnn_dim;
    let mut h = vec![0.0; mprime];
    let mut c = vec![0.0; mprime];
    for (i, v) in seq.visits.iter().enumerate() {
        let (mu, var) = encode_ref(store, &v.attributes, true);
        let e: Vec<f64> = (0..mu.len())
            .map(|k| match cfg.marker_noise {
                MarkerNoise::Variance => mu[k] + noise[[i, k]] * var[k],
                MarkerNoise::Stddev => mu[k] + noise[[i, k]] * var[k].sqrt(),
                MarkerNoise::Off => mu[k],
            })
            .collect();
        let gap = if i == 0 { 0.0 } else { v.timestamp - seq.visits[i - 1].timestamp };
        let g = gap_features_ref(cfg, gap);
        match cfg.cell {
            CellKind::Plain => {
                let pre = addv(&addv(&addv(&vm(&e, &m(store, W_TV)), &vm(&g, &m(store, W_G))), &vm(&h, &m(store, W_HH))), &m(store, B_H)[0]);
                h = pre.iter().map(|&x| x.max(0.0)).collect();
            }
            CellKind::Gated => {
                let input: Vec<f64> = e.iter().chain(g.iter()).copied().collect();
                let z = addv(&addv(&vm(&input, &m(store, LSTM_W_X)), &vm(&h, &m(store, LSTM_W_H))), &m(store, LSTM_B)[0]);
                for k in 0..mprime {
                    let ig = sig(z[k]);
                    let fg = sig(z[mprime + k]);
                    let cand = z[2 * mprime + k].tanh();
                    let og = sig(z[3 * mprime + k]);
                    c[k] = fg * c[k] + ig * cand;
                    h[k] = og * c[k].tanh();
                }
            }
        }
        out.push(h.clone());
    }
    out
}

/// `log f(Δ)` written exactly as the closed form, `a + wΔ + b + (e^{a+b} − e^{a+wΔ+b}) / w`.
pub fn log_density_ref(a: f64, w: f64, b: f64, delta: f64) -> f64 {
    a + w * delta + b + ((a + b).exp() - (a + w * delta + b).exp()) / w
}

pub fn sequence_nll_ref(store: &ParamStore, cfg: &TrainConfig, seq: &PatientSequence, noise: &Array2<f64>) -> f64 {
    let hs = hidden_ref(store, cfg, seq, noise);
    let v_t: Vec<f64> = m(store, V_T).iter().map(|r| r[0]).collect();
    let w = m(store, W_T)[0][0];
    let b = m(store, B_T)[0][0];
    let mut nll = 0.0;
    for (h, pair) in hs.iter().zip(seq.visits.windows(2)) {
        let a: f64 = h.iter().zip(&v_t).map(|(x, y)| x * y).sum();
        nll -= log_density_ref(a, w, b, pair[1].timestamp - pair[0].timestamp);
    }
    nll
}

pub fn predictions_ref(store: &ParamStore, hidden: &[Vec<f64>]) -> Vec<Vec<f64>> {
    hidden
        .iter()
        .map(|h| {
            let logits = addv(&vm(h, &m(store, W_S)), &m(store, B_S)[0]);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn task_loss_ref(preds: &[Vec<f64>], labels: &[Vec<f64>], mode: TaskLossMode) -> f64 {
    let clip = |p: f64| p.clamp(1e-9, 1.0 - 1e-9);
    let mut total = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        for k in 0..p.len() {
            total += y[k] * clip(p[k]).ln();
            if mode == TaskLossMode::PerClassBinary {
                total += (1.0 - y[k]) * (1.0 - clip(p[k])).ln();
            }
        }
    }
    -total / preds.len() as f64
}

pub fn labels_of(seq: &PatientSequence, task: &str) -> Vec<Vec<f64>> {
    seq.visits.iter().map(|v| v.label(task).unwrap().iter().map(|&b| b as f64).collect()).collect()
}

/// `α·L_struc + (1/B) Σ_p (β·L_temp + γ·L_tsk)` from the reference pieces.
pub fn unified_ref(store: &ParamStore, cfg: &TrainConfig, cohort: &Cohort, batch: &StructBatch, seqs: &[SeqItem]) -> f64 {
    let mut total = 0.0;
    if cfg.alpha > 0.0 {
        total += cfg.alpha * structural_ref(store, cohort, batch);
    }
    let n = seqs.len() as f64;
    for item in seqs {
        let seq = &cohort.patients[item.patient];
        if cfg.beta > 0.0 {
            total += cfg.beta * sequence_nll_ref(store, cfg, seq, &item.noise) / n;
        }
        if cfg.gamma > 0.0 {
            let hs = hidden_ref(store, cfg, seq, &item.noise);
            let preds = predictions_ref(store, &hs);
            total += cfg.gamma * task_loss_ref(&preds, &labels_of(seq, cfg.task.as_deref().unwrap()), cfg.task_loss) / n;
        }
    }
    total
}

/// All seven nonzero on/off patterns of `(α, β, γ)`.
pub fn coefficient_patterns() -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for mask in 1..8u8 {
        let on = |bit: u8| if mask & bit != 0 { 1.0 } else { 0.0 };
        out.push((on(1), on(2), on(4)));
    }
    out
}
