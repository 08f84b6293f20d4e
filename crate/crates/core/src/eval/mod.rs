//! Risk-task metrics, code-class probes, uncertainty trends and projections.

pub mod metrics;
pub mod pca;
pub mod probe;
pub mod uncertainty;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::synth::{MORTALITY_TASK, READMIT_TASK};
use crate::trainer::{Model, NodeEmbeddings};

pub use metrics::{auc, average_precision, metric_report, spearman, MetricReport};
pub use pca::{pca_2d, Projection};
pub use probe::{logistic_probe, probe_sweep, ProbeReport};
pub use uncertainty::{uncertainty_report, UncertaintyReport};

/// Train fractions swept by the code-class probe.
pub const PROBE_FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Which visits of a sequence carry a meaningful label for `task`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisitFilter {
    All,
    /// Every visit but the last (the readmission window of the last one is censored).
    NonFinal,
    Final,
}

impl VisitFilter {
    pub fn for_task(task: &str) -> Self {
        match task {
            READMIT_TASK => Self::NonFinal,
            MORTALITY_TASK => Self::Final,
            _ => Self::All,
        }
    }

    fn keeps(self, pos: usize, len: usize) -> bool {
        match self {
            Self::All => true,
            Self::NonFinal => pos + 1 < len,
            Self::Final => pos + 1 == len,
        }
    }
}

/// Seeded split of patient indices into `(train, test)`.
pub fn split_patients(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::Config("need at least two patients to split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Scores the positive class of a binary task on every eligible visit.
pub fn task_scores(model: &Model, cohort: &Cohort, task: &str) -> Result<(Vec<f64>, Vec<bool>)> {
    let cohort = model.prepare(cohort)?;
    let filter = VisitFilter::for_task(task);
    let per_patient = crate::par::map(&cohort.patients, |seq| -> Result<Vec<(f64, bool)>> {
        let out = model.sequence_outputs(seq)?;
        let pred = out.predictions.ok_or_else(|| Error::Config("model has no task head".into()))?;
        if pred.ncols() != 2 {
            return Err(Error::Config(format!("task {task} has {} classes; ranking metrics need 2", pred.ncols())));
        }
        let mut rows = Vec::new();
        for (i, v) in seq.visits.iter().enumerate() {
            if !filter.keeps(i, seq.len()) {
                continue;
            }
            let label = v.label(task).ok_or_else(|| Error::MissingLabel { task: task.to_string(), visit: v.id.clone() })?;
            rows.push((pred[[i, 1]], label.get(1).copied().unwrap_or(0) == 1));
        }
        Ok(rows)
    });
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rows in per_patient {
        for (s, l) in rows? {
            scores.push(s);
            labels.push(l);
        }
    }
    Ok((scores, labels))
}

pub fn evaluate_task(model: &Model, cohort: &Cohort, task: &str) -> Result<MetricReport> {
    let (scores, labels) = task_scores(model, cohort, task)?;
    metric_report(task, &scores, &labels)
}

/// Features handed to the code-class probe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFeatures {
    #[default]
    Mean,
    MeanAndVariance,
}

/// Code feature rows and class names for every code that has a class.
pub fn code_probe_data(emb: &NodeEmbeddings, cohort: &Cohort, features: ProbeFeatures) -> Result<(Mat, Vec<String>)> {
    let idx: Vec<usize> = cohort.codes().iter().filter(|c| c.class.is_some()).map(|c| c.index).collect();
    if idx.is_empty() {
        return Err(Error::DegenerateLabels("no code carries a class".into()));
    }
    let classes = idx.iter().map(|&i| cohort.codes()[i].class.clone().expect("filtered")).collect();
    let mu = emb.code_mu.select(Axis(0), &idx);
    let x = match features {
        ProbeFeatures::Mean => mu,
        ProbeFeatures::MeanAndVariance => concatenate![Axis(1), mu, emb.code_var.select(Axis(0), &idx)],
    };
    Ok((x, classes))
}

/// One model variant's results, tagged for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub metrics: Vec<MetricReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub probes: Vec<ProbeReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub uncertainty: Option<UncertaintyReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<VariantResult>,
}

impl Report {
    /// `variant,seed,task,auc,ap,n_pos,n_neg`
    pub fn auc_csv(&self) -> String {
        let mut out = String::from("variant,seed,task,auc,ap,n_pos,n_neg\n");
        for r in &self.results {
            for m in &r.metrics {
                let _ = writeln!(out, "{},{},{},{},{},{},{}", r.variant, r.seed, m.task, m.auc, m.ap, m.n_pos, m.n_neg);
            }
        }
        out
    }

    /// `variant,seed,train_fraction,micro_f1,macro_f1`
    pub fn probe_csv(&self) -> String {
        let mut out = String::from("variant,seed,train_fraction,micro_f1,macro_f1\n");
        for r in &self.results {
            for p in &r.probes {
                let _ = writeln!(out, "{},{},{},{},{}", r.variant, r.seed, p.train_fraction, p.micro_f1, p.macro_f1);
            }
        }
        out
    }

    /// Bucket means: `variant,seed,kind,bucket,lo,hi,count,mean_variance`
    pub fn uncertainty_csv(&self) -> String {
        let mut out = String::from("variant,seed,kind,bucket,lo,hi,count,mean_variance\n");
        for r in &self.results {
            let Some(u) = &r.uncertainty else { continue };
            for (kind, trend) in [("visit", &u.visits), ("code", &u.codes)] {
                for b in &trend.buckets {
                    let _ = writeln!(out, "{},{},{kind},{},{},{},{},{}", r.variant, r.seed, b.index, b.lo, b.hi, b.count, b.mean_variance);
                }
            }
        }
        out
    }

    /// Writes `report.json`, `auc.csv`, `probe_f1.csv` and `uncertainty_buckets.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("auc.csv"), self.auc_csv())?;
        std::fs::write(dir.join("probe_f1.csv"), self.probe_csv())?;
        std::fs::write(dir.join("uncertainty_buckets.csv"), self.uncertainty_csv())?;
        Ok(())
    }
}

/// Per-node scatter rows `kind,node_id,support,variance`, where support is
/// the patient's visit count for visits and the degree for codes.
pub fn uncertainty_scatter_csv(emb: &NodeEmbeddings, cohort: &Cohort) -> String {
    let mut out = String::from("kind,node_id,support,variance\n");
    let vv = uncertainty::node_variance(&emb.visit_var);
    for (v, var) in vv.iter().enumerate() {
        let support = cohort.patients[cohort.visit_patient(v)].len();
        let _ = writeln!(out, "visit,{},{support},{var}", emb.visit_ids[v]);
    }
    let cv = uncertainty::node_variance(&emb.code_var);
    for ((id, deg), var) in emb.code_ids.iter().zip(cohort.graph.code_degrees()).zip(cv) {
        let _ = writeln!(out, "code,{id},{deg},{var}");
    }
    out
}

/// `kind,node_id,class,pc1,pc2` for the visits and codes projected jointly.
pub fn projection_csv(emb: &NodeEmbeddings, cohort: &Cohort) -> Result<String> {
    let all = concatenate![Axis(0), emb.visit_mu, emb.code_mu];
    let proj = pca_2d(&all)?;
    let mut out = String::from("kind,node_id,class,pc1,pc2\n");
    let nv = emb.visit_ids.len();
    for (i, row) in proj.coords.rows().into_iter().enumerate() {
        let (kind, id, class) = if i < nv {
            ("visit", &emb.visit_ids[i], "")
        } else {
            let c = &cohort.codes()[i - nv];
            ("code", &emb.code_ids[i - nv], c.class.as_deref().unwrap_or(""))
        };
        let _ = writeln!(out, "{kind},{id},{class},{},{}", row[0], row[1]);
    }
    Ok(out)
}

/// Everything measurable about one trained model on `cohort`.
pub fn evaluate_model(model: &Model, cohort: &Cohort, variant: &str, seed: u64, features: ProbeFeatures) -> Result<VariantResult> {
    let mut metrics = Vec::new();
    if let Some(task) = &model.config.task {
        metrics.push(evaluate_task(model, cohort, task)?);
    }
    let emb = model.embeddings(cohort)?;
    let probes = match code_probe_data(&emb, cohort, features) {
        Ok((x, classes)) => probe_sweep(&x, &classes, &PROBE_FRACTIONS, seed)?,
        Err(Error::DegenerateLabels(msg)) => {
            log::warn!("skipping code probe: {msg}");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    Ok(VariantResult { variant: variant.to_string(), seed, metrics, probes, uncertainty: Some(uncertainty_report(&emb, cohort)) })
}
