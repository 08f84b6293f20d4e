mod common;

use common::*;
use medgraph::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, VERSION};
use medgraph::cohort::{Cohort, PatientSequence, Visit};
use medgraph::encoder::{encode, NodeKind, W_C, W_V};
use medgraph::error::Error;
use medgraph::par;
use medgraph::params::{AdamConfig, ParamStore};
use medgraph::synth::{generate, GenConfig};
use medgraph::temporal::{self, CellKind, IntensityHead, MarkerNoise, SequenceState};
use medgraph::trainer::{export_embeddings, init_params, loss_and_grad, train, Model, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

fn small_cohort(seed: u64) -> Cohort {
    generate(&GenConfig { n_patients: 40, n_codes: 40, n_code_classes: 4, visit_attrs: 5, code_attrs: 6, visits_per_patient: (2, 6), seed, ..Default::default() }).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embed_dim: 8,
        hidden_dim: 12,
        rnn_dim: 8,
        negatives: 4,
        lr: 0.01,
        batch_visits: 32,
        batch_seqs: 8,
        epochs: 20,
        seed,
        gamma: 0.0,
        ..Default::default()
    }
}

#[test]
fn unsupervised_loss_decreases() {
    for seed in 0..3 {
        let c = small_cohort(seed);
        let model = train(&c, &small_config(seed)).unwrap();
        let h = &model.history;
        assert_eq!(h.len(), 20);
        assert!(h[19].loss.total < h[0].loss.total, "seed {seed}: {} -> {}", h[0].loss.total, h[19].loss.total);
        assert!(h.iter().all(|r| r.loss.task.is_none() && r.loss.structural.is_some() && r.loss.temporal.is_some()));
    }
}

#[test]
fn training_is_bit_reproducible_for_any_worker_count() {
    let c = small_cohort(5);
    let cfg = TrainConfig { epochs: 3, gamma: 1.0, task: Some("readmit30".into()), ..small_config(5) };
    let a = to_bytes(&par::with_workers(1, || train(&c, &cfg)).unwrap()).unwrap();
    let b = to_bytes(&par::with_workers(3, || train(&c, &cfg)).unwrap()).unwrap();
    let seq = to_bytes(&train(&c, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, seq);
    let other = to_bytes(&train(&c, &TrainConfig { seed: 6, ..cfg }).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn task_only_training() {
    let c = small_cohort(1);
    let cfg = TrainConfig { alpha: 0.0, beta: 0.0, gamma: 1.0, task: Some("readmit30".into()), epochs: 2, ..small_config(1) };
    let init = init_params(&c, &cfg).unwrap();
    let model = train(&c, &cfg).unwrap();
    assert!(model.history.iter().all(|r| r.loss.task.is_some() && r.loss.structural.is_none() && r.loss.temporal.is_none()));
    // Visits feed the hidden state, so their projection moves.
    assert_ne!(model.params.value(W_V).unwrap(), init.value(W_V).unwrap());
    // Codes only enter the structural term, which is switched off.
    assert_eq!(model.params.value(W_C).unwrap(), init.value(W_C).unwrap());
}

#[test]
fn gamma_without_labels_fails() {
    let mut c = small_cohort(2);
    c.patients[3].visits[1].labels.remove("readmit30");
    let cfg = TrainConfig { gamma: 1.0, task: Some("readmit30".into()), epochs: 1, ..small_config(2) };
    assert!(matches!(train(&c, &cfg), Err(Error::MissingLabel { .. })));
}

#[test]
fn scaling_coefficients_scales_loss_and_keeps_update_signs() {
    let c = toy_cohort();
    let cfg = toy_config(CellKind::Gated);
    let store = toy_params(&c, &cfg, 30);
    let batch = toy_struct_batch();
    let seqs = toy_sequences(&c, cfg.embed_dim, 30);
    let scaled = TrainConfig { alpha: 2.5 * cfg.alpha, beta: 2.5 * cfg.beta, gamma: 2.5 * cfg.gamma, ..cfg.clone() };
    let (v1, g1) = loss_and_grad(&store, &cfg, &c, &batch, &seqs).unwrap();
    let (v2, g2) = loss_and_grad(&store, &scaled, &c, &batch, &seqs).unwrap();
    assert!((v2.total - 2.5 * v1.total).abs() < 1e-12 * v1.total.abs().max(1.0));
    let step = |g: &BTreeMap<String, ndarray::Array2<f64>>| {
        let mut s = store.clone();
        s.adam_step(g, 1e-3, AdamConfig::default()).unwrap();
        s
    };
    let (s1, s2) = (step(&g1), step(&g2));
    for (name, before) in store.iter() {
        let d1 = s1.value(name).unwrap() - before;
        let d2 = s2.value(name).unwrap() - before;
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_eq!(a.signum(), b.signum(), "{name}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let c = small_cohort(3);
    let model = train(&c, &TrainConfig { epochs: 2, ..small_config(3) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mgck");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.history, model.history);
    assert_eq!(back.params.step(), model.params.step());
    for (name, v) in model.params.iter() {
        let d = (back.params.value(name).unwrap() - v).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(d < 1e-6, "{name}: {d}");
    }
    // A reloaded model saves to the same bytes.
    assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_rejects_truncation_and_versions() {
    let c = toy_cohort();
    let cfg = toy_config(CellKind::Gated);
    let model = Model { config: cfg.clone(), params: toy_params(&c, &cfg, 0), history: Vec::new() };
    let bytes = to_bytes(&model).unwrap();
    assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
    assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Corrupt(_))));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(from_bytes(&bad), Err(Error::Version { found: 0, expected: VERSION })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(from_bytes(&magic).is_err());
}

#[test]
fn embedding_export() {
    let c = toy_cohort();
    let cfg = TrainConfig { embed_dim: 2, ..toy_config(CellKind::Gated) };
    let model = Model { config: cfg.clone(), params: init_params(&c, &cfg).unwrap(), history: Vec::new() };
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    export_embeddings(&model, &c, &p1).unwrap();
    export_embeddings(&model, &c, &p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "node_id\tkind\tmu_0\tmu_1\tvar_0\tvar_1");
    assert_eq!(lines.len(), 1 + 7);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 2 + 4);
        assert!(cols[4..].iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
    }
    assert!(lines[1].starts_with("v1\tvisit") && lines[7].starts_with("C\tcode"));
}

/// Sequences drawn from a fixed plain-cell model's own density, feeding each
/// sampled gap back through the recurrence.
fn self_generated_cohort(teacher: &ParamStore, cfg: &TrainConfig, n: usize, seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = small_cohort(0);
    let tcfg = cfg.temporal();
    let mut patients = Vec::new();
    for p in 0..n {
        let mut visits = Vec::new();
        let mut state = SequenceState::zeros(cfg.rnn_dim, 0.0);
        let mut t = 0.0;
        for i in 0..6 {
            let x: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            if i > 0 {
                let head = IntensityHead::from_state(&state, teacher).unwrap();
                t += head.sample_gap(&mut rng).min(1e4);
            }
            let z = encode(&x, NodeKind::Visit, teacher).unwrap();
            state = temporal::step(&state, &z.mu, t - state.t_last, t, teacher, &tcfg).unwrap();
            let code = rng.random_range(0..base.codes().len());
            visits.push(Visit { id: format!("s{p}v{i}"), index: 0, timestamp: t, attributes: x, codes: vec![code], labels: BTreeMap::new() });
        }
        patients.push(PatientSequence { patient_id: format!("s{p}"), visits });
    }
    Cohort::new(patients, base.codes().to_vec()).unwrap()
}

#[test]
fn temporal_fit_on_self_generated_sequences() {
    let base = small_cohort(0);
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
        cell: CellKind::Plain,
        marker_noise: MarkerNoise::Off,
        epochs: 15,
        ..small_config(4)
    };
    let mut teacher = init_params(&base, &cfg).unwrap();
    teacher.value_mut(temporal::W_T).unwrap()[[0, 0]] = 0.02;
    teacher.value_mut(temporal::B_T).unwrap()[[0, 0]] = -3.0;
    let cohort = self_generated_cohort(&teacher, &cfg, 60, 8);
    let student = train(&cohort, &TrainConfig { seed: 99, ..cfg }).unwrap();
    let nll: Vec<f64> = student.history.iter().map(|r| r.loss.temporal.unwrap()).collect();
    assert!(nll[nll.len() - 1] < nll[0], "{nll:?}");
}
