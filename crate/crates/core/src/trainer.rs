//! Joint optimisation of the structural, temporal and task objectives.
//!
//! Each step draws a batch of patient sequences plus the edges of a batch of
//! uniformly sampled visits, evaluates
//! `α·L_struc + (1/B) Σ_p (β·L_temp(p) + γ·L_tsk(p))`, and applies one Adam
//! update. The structural term and every sequence are differentiated on their
//! own tapes (possibly in parallel) and their gradients summed in a fixed
//! order, so results do not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::cohort::{gaps_from_timestamps, Cohort, PatientSequence};
use crate::encoder::{self, encode_matrix, encode_on_tape, init_encoder, stack_rows, EncoderDims, NegativeSampler, NodeKind};
use crate::error::{Error, Result};
use crate::par;
use crate::params::{accumulate_grads, clip_global_norm, AdamConfig, ParamStore};
use crate::risk::{self, init_head, TaskLossMode};
use crate::temporal::{self, init_temporal, CellKind, MarkerNoise, SequenceState, TemporalConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Gaussian embedding width `L`.
    pub embed_dim: usize,
    /// Intermediate projection width `m`.
    pub hidden_dim: usize,
    /// Recurrent state width `m'`.
    pub rnn_dim: usize,
    /// Negative codes per positive edge.
    pub negatives: usize,
    pub lr: f64,
    pub batch_visits: usize,
    pub batch_seqs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub cell: CellKind,
    pub marker_noise: MarkerNoise,
    /// Label key used by the task term; required when `gamma > 0`.
    pub task: Option<String>,
    pub task_loss: TaskLossMode,
    pub gap_scale: f64,
    /// Time-series ablation: feed a unit gap to the cell at every visit.
    pub constant_gaps: bool,
    /// Replace code attributes by the identity matrix before training.
    pub identity_code_attrs: bool,
    /// Clip the global gradient norm at this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            embed_dim: 128,
            hidden_dim: 256,
            rnn_dim: 64,
            negatives: 10,
            lr: 0.001,
            batch_visits: 128,
            batch_seqs: 32,
            epochs: 30,
            seed: 0,
            cell: CellKind::Gated,
            marker_noise: MarkerNoise::Variance,
            task: None,
            task_loss: TaskLossMode::SoftmaxCe,
            gap_scale: 30.0,
            constant_gaps: false,
            identity_code_attrs: false,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig { cell: self.cell, gap_scale: self.gap_scale, constant_gaps: self.constant_gaps }
    }

    /// Structure-only variant: no temporal term and uninformative gaps.
    pub fn without_temporal(mut self) -> Self {
        self.beta = 0.0;
        self.constant_gaps = true;
        self
    }

    pub fn without_structure(mut self) -> Self {
        self.alpha = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative finite number")));
            }
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(Error::Config("at least one of alpha, beta, gamma must be positive".into()));
        }
        if self.gamma > 0.0 && self.task.is_none() {
            return Err(Error::Config("gamma > 0 requires a task label key".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.rnn_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.alpha > 0.0 && self.negatives == 0 {
            log::debug!("training structural term without negatives");
        }
        if self.batch_seqs == 0 || self.batch_visits == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.gap_scale > 0.0) {
            return Err(Error::Config("lr and gap_scale must be positive".into()));
        }
        Ok(())
    }

    fn uses_sequences(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0
    }
}

/// Number of label classes `s` for `task` (0 if no visit carries it).
pub fn task_classes(cohort: &Cohort, task: &str) -> usize {
    cohort.visits().find_map(|v| v.label(task)).map(|y| y.len()).unwrap_or(0)
}

fn check_labels(cohort: &Cohort, task: &str) -> Result<usize> {
    let s = task_classes(cohort, task);
    for v in cohort.visits() {
        match v.label(task) {
            Some(y) if y.len() == s => {}
            Some(_) => return Err(Error::Dimension(format!("visit {} label for {task} has the wrong width", v.id))),
            None => return Err(Error::MissingLabel { task: task.to_string(), visit: v.id.clone() }),
        }
    }
    if s < 2 {
        return Err(Error::Config(format!("task {task} needs at least two classes")));
    }
    Ok(s)
}

/// Fresh parameters for `cohort` under `cfg`.
pub fn init_params(cohort: &Cohort, cfg: &TrainConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let dims = EncoderDims {
        visit_attrs: cohort.dims.visit_attrs,
        code_attrs: cohort.dims.code_attrs,
        hidden: cfg.hidden_dim,
        embed: cfg.embed_dim,
    };
    init_encoder(&mut store, dims, &mut rng);
    init_temporal(&mut store, cfg.embed_dim, cfg.rnn_dim, cfg.cell, base_log_rate(cohort), &mut rng);
    if let Some(task) = &cfg.task {
        let s = task_classes(cohort, task);
        if s >= 2 {
            init_head(&mut store, cfg.rnn_dim, s, &mut rng);
        }
    }
    Ok(store)
}

/// `−ln(mean gap)`: the log rate of a homogeneous process fitted to the cohort.
fn base_log_rate(cohort: &Cohort) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for p in &cohort.patients {
        for w in p.visits.windows(2) {
            total += w[1].timestamp - w[0].timestamp;
            n += 1;
        }
    }
    if n == 0 || total <= 0.0 {
        0.0
    } else {
        -(total / n as f64).ln()
    }
}

/// Positive edges with their sampled negative codes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StructBatch {
    pub edges: Vec<(usize, usize)>,
    pub negatives: Vec<Vec<usize>>,
}

impl StructBatch {
    /// All edges of the given visits, each with `k` negatives.
    pub fn for_visits<R: Rng>(cohort: &Cohort, sampler: &NegativeSampler, visits: &[usize], k: usize, rng: &mut R) -> Result<Self> {
        let mut batch = StructBatch::default();
        for &v in visits {
            let linked = &cohort.visit(v).codes;
            for &(vi, c) in cohort.graph.edges_of_visit(v) {
                batch.edges.push((vi, c));
                batch.negatives.push(if k > 0 { sampler.sample(rng, v, linked, k)? } else { Vec::new() });
            }
        }
        Ok(batch)
    }
}

/// One patient sequence in a step, with its marker noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqItem {
    pub patient: usize,
    /// `T × L` standard-normal draws; ignored when marker noise is off.
    pub noise: Mat,
}

impl SeqItem {
    pub fn sample<R: Rng>(cohort: &Cohort, patient: usize, embed_dim: usize, rng: &mut R) -> Self {
        let t_len = cohort.patients[patient].len();
        let noise = Array2::from_shape_simple_fn((t_len, embed_dim), || StandardNormal.sample(rng));
        Self { patient, noise }
    }

    pub fn noiseless(cohort: &Cohort, patient: usize, embed_dim: usize) -> Self {
        Self { patient, noise: Array2::zeros((cohort.patients[patient].len(), embed_dim)) }
    }
}

/// Loss nodes for the terms of one evaluation; absent terms were skipped.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub structural: Option<Var>,
    pub temporal: Option<Var>,
    pub task: Option<Var>,
}

/// Per-term values of one evaluation, already weighted by nothing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structural: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<f64>,
}

fn markers_on_tape(tape: &mut Tape, mode: MarkerNoise, mu: Var, var: Var, noise: &Mat) -> Result<Var> {
    match mode {
        MarkerNoise::Off => Ok(mu),
        MarkerNoise::Variance | MarkerNoise::Stddev => {
            let scale = if mode == MarkerNoise::Variance { var } else { tape.sqrt(var) };
            let eps = tape.constant(noise.clone());
            let jitter = tape.mul(eps, scale)?;
            tape.add(mu, jitter)
        }
    }
}

/// Hidden states (`T × m'`) of one patient's sequence on a tape.
pub fn sequence_hidden(tape: &mut Tape, store: &ParamStore, cfg: &TrainConfig, seq: &PatientSequence, noise: &Mat) -> Result<Var> {
    let x = stack_rows(seq.visits.iter().map(|v| v.attributes.as_slice()))?;
    let x = tape.constant(x);
    let (mu, var) = encode_on_tape(tape, store, NodeKind::Visit, x)?;
    let markers = markers_on_tape(tape, cfg.marker_noise, mu, var, noise)?;
    let gaps = gaps_from_timestamps(&seq.timestamps())?;
    let gaps_in: Vec<f64> = std::iter::once(0.0).chain(gaps.iter().copied()).collect();
    temporal::run_on_tape(tape, store, &cfg.temporal(), markers, &gaps_in)
}

/// Unweighted temporal and task terms for one sequence.
pub fn sequence_terms(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TrainConfig,
    seq: &PatientSequence,
    noise: &Mat,
) -> Result<(Option<Var>, Option<Var>)> {
    let hidden = sequence_hidden(tape, store, cfg, seq, noise)?;
    let temporal = if cfg.beta > 0.0 {
        let gaps = gaps_from_timestamps(&seq.timestamps())?;
        Some(temporal::sequence_nll_on_tape(tape, store, hidden, &gaps)?)
    } else {
        None
    };
    let task = if cfg.gamma > 0.0 {
        let key = cfg.task.as_deref().ok_or_else(|| Error::Config("gamma > 0 requires a task".into()))?;
        let labels = risk::label_matrix(seq.visits.iter(), key)?;
        let preds = risk::predict_on_tape(tape, store, hidden)?;
        Some(risk::task_loss_on_tape(tape, preds, &labels, cfg.task_loss)?)
    } else {
        None
    };
    Ok((temporal, task))
}

fn weighted_sum(tape: &mut Tape, terms: &[(Option<Var>, f64)]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &(term, w) in terms {
        if let Some(t) = term {
            let scaled = tape.scale(t, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(total)
}

/// The full objective on a single tape. Terms with a zero coefficient are not
/// built. The temporal and task values reported are batch means.
pub fn unified_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TrainConfig,
    cohort: &Cohort,
    structural: &StructBatch,
    sequences: &[SeqItem],
) -> Result<LossTerms> {
    cfg.validate()?;
    let s_term = if cfg.alpha > 0.0 {
        Some(encoder::structural_loss(tape, store, cohort, &structural.edges, &structural.negatives)?)
    } else {
        None
    };
    let (mut temps, mut tasks) = (Vec::new(), Vec::new());
    if cfg.uses_sequences() {
        if sequences.is_empty() {
            return Err(Error::Config("sequence batch is empty".into()));
        }
        for item in sequences {
            let (t, k) = sequence_terms(tape, store, cfg, &cohort.patients[item.patient], &item.noise)?;
            temps.push(t);
            tasks.push(k);
        }
    }
    let n = sequences.len().max(1) as f64;
    let mean = |tape: &mut Tape, xs: &[Option<Var>]| -> Result<Option<Var>> {
        let weighted: Vec<(Option<Var>, f64)> = xs.iter().map(|&x| (x, 1.0 / n)).collect();
        weighted_sum(tape, &weighted)
    };
    let t_term = mean(tape, &temps)?;
    let k_term = mean(tape, &tasks)?;
    let total = weighted_sum(tape, &[(s_term, cfg.alpha), (t_term, cfg.beta), (k_term, cfg.gamma)])?
        .ok_or_else(|| Error::Config("no loss term is active".into()))?;
    Ok(LossTerms { total, structural: s_term, temporal: t_term, task: k_term })
}

/// Value and gradient of [`unified_loss`], computed on independent tapes and
/// reduced in a fixed order.
pub fn loss_and_grad(
    store: &ParamStore,
    cfg: &TrainConfig,
    cohort: &Cohort,
    structural: &StructBatch,
    sequences: &[SeqItem],
) -> Result<(TermValues, BTreeMap<String, Mat>)> {
    loss_and_grad_with(par::Exec::default_for_build(), store, cfg, cohort, structural, sequences)
}

/// [`loss_and_grad`] with an explicit execution strategy for the sequence shards.
pub fn loss_and_grad_with(
    exec: par::Exec,
    store: &ParamStore,
    cfg: &TrainConfig,
    cohort: &Cohort,
    structural: &StructBatch,
    sequences: &[SeqItem],
) -> Result<(TermValues, BTreeMap<String, Mat>)> {
    cfg.validate()?;
    let n = sequences.len().max(1) as f64;
    let mut values = TermValues::default();
    let mut grads = BTreeMap::new();

    if cfg.alpha > 0.0 {
        let mut tape = Tape::new();
        let l = encoder::structural_loss(&mut tape, store, cohort, &structural.edges, &structural.negatives)?;
        let v = tape.scalar(l);
        let w = tape.scale(l, cfg.alpha);
        tape.backward(w)?;
        values.structural = Some(v);
        values.total += cfg.alpha * v;
        accumulate_grads(&mut grads, tape.param_grads());
    }

    if cfg.uses_sequences() {
        if sequences.is_empty() {
            return Err(Error::Config("sequence batch is empty".into()));
        }
        let shards = par::map_with(exec, sequences, |item| -> Result<Shard> {
            let mut tape = Tape::new();
            let (t, k) = sequence_terms(&mut tape, store, cfg, &cohort.patients[item.patient], &item.noise)?;
            let tv = t.map(|v| tape.scalar(v));
            let kv = k.map(|v| tape.scalar(v));
            let total = weighted_sum(&mut tape, &[(t, cfg.beta / n), (k, cfg.gamma / n)])?.expect("sequence terms active");
            tape.backward(total)?;
            Ok((tv, kv, tape.param_grads()))
        });
        let (mut temp, mut task) = (0.0, 0.0);
        for shard in shards {
            let (tv, kv, g) = shard?;
            temp += tv.unwrap_or(0.0);
            task += kv.unwrap_or(0.0);
            accumulate_grads(&mut grads, g);
        }
        if cfg.beta > 0.0 {
            values.temporal = Some(temp / n);
            values.total += cfg.beta * temp / n;
        }
        if cfg.gamma > 0.0 {
            values.task = Some(task / n);
            values.total += cfg.gamma * task / n;
        }
    }
    Ok((values, grads))
}

/// Temporal value, task value and gradients from one sequence's tape.
type Shard = (Option<f64>, Option<f64>, BTreeMap<String, Mat>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: TermValues,
}

/// Trained parameters with the configuration and history that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finaliser over the combined words.
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains on every patient of `cohort` for `cfg.epochs` passes.
pub fn train(cohort: &Cohort, cfg: &TrainConfig) -> Result<Model> {
    train_with_progress(cohort, cfg, |_| {})
}

pub fn train_with_progress(cohort: &Cohort, cfg: &TrainConfig, mut progress: impl FnMut(&EpochRecord)) -> Result<Model> {
    cfg.validate()?;
    if cohort.patients.is_empty() {
        return Err(Error::InvalidCohort("cohort has no patients".into()));
    }
    let prepared;
    let cohort = if cfg.identity_code_attrs {
        prepared = cohort.with_identity_code_attrs()?;
        &prepared
    } else {
        cohort
    };
    if cfg.gamma > 0.0 {
        check_labels(cohort, cfg.task.as_deref().expect("validated"))?;
    }
    let mut params = init_params(cohort, cfg)?;
    let sampler = NegativeSampler::from_graph(&cohort.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, 0));
    let mut order: Vec<usize> = (0..cohort.patients.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = TermValues::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_seqs) {
            let step_seed = rng.next_u64();
            let structural = if cfg.alpha > 0.0 {
                let k = cfg.batch_visits.min(cohort.n_visits());
                let visits = rand::seq::index::sample(&mut rng, cohort.n_visits(), k).into_vec();
                StructBatch::for_visits(cohort, &sampler, &visits, cfg.negatives, &mut rng)?
            } else {
                StructBatch::default()
            };
            let sequences: Vec<SeqItem> = if cfg.uses_sequences() {
                chunk
                    .iter()
                    .map(|&p| {
                        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, p as u64, 2));
                        SeqItem::sample(cohort, p, cfg.embed_dim, &mut r)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let (values, mut grads) = loss_and_grad(&params, cfg, cohort, &structural, &sequences)?;
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            params.adam_step(&grads, cfg.lr, AdamConfig::default())?;
            sums.total += values.total;
            for (acc, v) in [(&mut sums.structural, values.structural), (&mut sums.temporal, values.temporal), (&mut sums.task, values.task)] {
                if let Some(v) = v {
                    *acc = Some(acc.unwrap_or(0.0) + v);
                }
            }
            steps += 1;
        }
        let k = steps as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: TermValues {
                total: sums.total / k,
                structural: sums.structural.map(|v| v / k),
                temporal: sums.temporal.map(|v| v / k),
                task: sums.task.map(|v| v / k),
            },
        };
        log::info!("epoch {} loss {:.5}", record.epoch, record.loss.total);
        progress(&record);
        history.push(record);
    }
    Ok(Model { config: cfg.clone(), params, history })
}

/// Per-visit outputs of a trained model on one sequence, with noise-free markers.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutputs {
    pub hidden: Mat,
    /// `T × s` class probabilities, if the model has a task head.
    pub predictions: Option<Mat>,
}

impl Model {
    /// The cohort as the model sees it (identity code attributes if trained so).
    pub fn prepare(&self, cohort: &Cohort) -> Result<Cohort> {
        if self.config.identity_code_attrs {
            cohort.with_identity_code_attrs()
        } else {
            Ok(cohort.clone())
        }
    }

    pub fn sequence_outputs(&self, seq: &PatientSequence) -> Result<SequenceOutputs> {
        let mut cfg = self.config.clone();
        cfg.marker_noise = MarkerNoise::Off;
        let mut tape = Tape::new();
        let noise = Array2::zeros((seq.len(), cfg.embed_dim));
        let hidden = sequence_hidden(&mut tape, &self.params, &cfg, seq, &noise)?;
        let predictions = if self.params.contains(risk::W_S) {
            let p = risk::predict_on_tape(&mut tape, &self.params, hidden)?;
            Some(tape.value(p).clone())
        } else {
            None
        };
        Ok(SequenceOutputs { hidden: tape.value(hidden).clone(), predictions })
    }

    /// Recurrent state after the last visit of `seq`, with noise-free markers.
    pub fn final_state(&self, seq: &PatientSequence) -> Result<SequenceState> {
        let x = stack_rows(seq.visits.iter().map(|v| v.attributes.as_slice()))?;
        let (mu, _) = encode_matrix(&x, NodeKind::Visit, &self.params)?;
        let cfg = self.config.temporal();
        let mut state = SequenceState::zeros(self.config.rnn_dim, seq.visits[0].timestamp);
        for (i, v) in seq.visits.iter().enumerate() {
            let gap = v.timestamp - state.t_last;
            state = temporal::step(&state, &mu.row(i).to_owned(), gap, v.timestamp, &self.params, &cfg)?;
        }
        Ok(state)
    }

    /// Mean and variance for every visit then every code, in index order.
    pub fn embeddings(&self, cohort: &Cohort) -> Result<NodeEmbeddings> {
        let cohort = self.prepare(cohort)?;
        let xv = stack_rows(cohort.visits().map(|v| v.attributes.as_slice()))?;
        let xc = stack_rows(cohort.codes().iter().map(|c| c.attributes.as_slice()))?;
        let (visit_mu, visit_var) = encode_matrix(&xv, NodeKind::Visit, &self.params)?;
        let (code_mu, code_var) = encode_matrix(&xc, NodeKind::Code, &self.params)?;
        Ok(NodeEmbeddings {
            visit_ids: cohort.visits().map(|v| v.id.clone()).collect(),
            code_ids: cohort.codes().iter().map(|c| c.id.clone()).collect(),
            visit_mu,
            visit_var,
            code_mu,
            code_var,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub visit_ids: Vec<String>,
    pub code_ids: Vec<String>,
    pub visit_mu: Mat,
    pub visit_var: Mat,
    pub code_mu: Mat,
    pub code_var: Mat,
}

impl NodeEmbeddings {
    /// Tab-separated rows `node_id kind mu_0.. var_0..` with a header line.
    pub fn to_tsv(&self) -> String {
        let l = self.visit_mu.ncols();
        let mut out = String::from("node_id\tkind");
        for i in 0..l {
            let _ = write!(out, "\tmu_{i}");
        }
        for i in 0..l {
            let _ = write!(out, "\tvar_{i}");
        }
        out.push('\n');
        let mut emit = |id: &str, kind: &str, mu: ndarray::ArrayView1<f64>, var: ndarray::ArrayView1<f64>| {
            out.push_str(id);
            out.push('\t');
            out.push_str(kind);
            for x in mu.iter().chain(var.iter()) {
                let _ = write!(out, "\t{x}");
            }
            out.push('\n');
        };
        for (i, id) in self.visit_ids.iter().enumerate() {
            emit(id, "visit", self.visit_mu.row(i), self.visit_var.row(i));
        }
        for (i, id) in self.code_ids.iter().enumerate() {
            emit(id, "code", self.code_mu.row(i), self.code_var.row(i));
        }
        out
    }
}

pub fn export_embeddings(model: &Model, cohort: &Cohort, path: &Path) -> Result<()> {
    std::fs::write(path, model.embeddings(cohort)?.to_tsv())?;
    Ok(())
}
