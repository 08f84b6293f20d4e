//! Visits, codes and the attributed bipartite graph linking them.
//!
//! A [`Cohort`] is built once from two JSONL files and is immutable afterwards.
//! Index assignment follows file order: codes are numbered as they appear in
//! `codes.jsonl`, visits as they appear across all kept patients.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CodeNode {
    pub id: String,
    pub index: usize,
    pub attributes: Vec<f64>,
    /// Optional class tag; only the evaluation probes read it.
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub id: String,
    pub index: usize,
    /// Days since an arbitrary epoch.
    pub timestamp: f64,
    pub attributes: Vec<f64>,
    /// Sorted, deduplicated code indices.
    pub codes: Vec<usize>,
    /// Label vectors keyed by task; the plain `y` field is stored under `"y"`.
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl Visit {
    pub fn label(&self, task: &str) -> Option<&[u8]> {
        self.labels.get(task).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientSequence {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.visits.iter().map(|v| v.timestamp).collect()
    }
}

/// Gaps between consecutive visits.
pub fn time_gaps(p: &PatientSequence) -> Result<Vec<f64>> {
    gaps_from_timestamps(&p.timestamps())
}

pub fn gaps_from_timestamps(ts: &[f64]) -> Result<Vec<f64>> {
    ts.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let gap = w[1] - w[0];
            if gap < 0.0 {
                Err(Error::NegativeGap { index: i, gap })
            } else {
                Ok(gap)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    /// Number of visit nodes; visit data lives in the owning cohort's patients.
    pub n_visits: usize,
    pub codes: Vec<CodeNode>,
    /// `(visit index, code index)` pairs ordered by visit then code.
    pub edges: Vec<(usize, usize)>,
    /// Edge range for each visit inside `edges`.
    visit_edges: Vec<(usize, usize)>,
}

impl BipartiteGraph {
    pub fn n_codes(&self) -> usize {
        self.codes.len()
    }

    pub fn edges_of_visit(&self, visit: usize) -> &[(usize, usize)] {
        let (a, b) = self.visit_edges[visit];
        &self.edges[a..b]
    }

    /// Number of visits each code is linked to.
    pub fn code_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.codes.len()];
        for &(_, c) in &self.edges {
            deg[c] += 1;
        }
        deg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub visit_attrs: usize,
    pub code_attrs: usize,
    /// Width of the `y` label vector; 0 when no visit carries one.
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientSequence>,
    pub graph: BipartiteGraph,
    pub dims: Dims,
    /// `(patient, position)` of each visit index.
    visit_owner: Vec<(usize, usize)>,
}

#[derive(Debug, Deserialize, Serialize)]
struct VisitRecord {
    visit_id: String,
    t: f64,
    x: Vec<f64>,
    codes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct PatientRecord {
    patient_id: String,
    visits: Vec<VisitRecord>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CodeRecord {
    code_id: String,
    x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn check_label(label: &[u8], visit: &str) -> Result<()> {
    if label.is_empty() || label.iter().any(|&b| b > 1) || !label.contains(&1) {
        return Err(Error::InvalidCohort(format!("visit {visit}: label must be a nonempty 0/1 vector with at least one bit set")));
    }
    Ok(())
}

/// Reads and validates `patients.jsonl` + `codes.jsonl`.
pub fn load_cohort(patients_path: &Path, codes_path: &Path) -> Result<Cohort> {
    let code_recs: Vec<(usize, CodeRecord)> = parse_lines(codes_path)?;
    let patient_recs: Vec<(usize, PatientRecord)> = parse_lines(patients_path)?;

    let mut code_index = HashMap::new();
    let mut codes = Vec::with_capacity(code_recs.len());
    for (line, rec) in code_recs {
        if code_index.insert(rec.code_id.clone(), codes.len()).is_some() {
            return Err(Error::Parse { path: codes_path.to_path_buf(), line, msg: format!("duplicate code id {}", rec.code_id) });
        }
        codes.push(CodeNode { id: rec.code_id, index: codes.len(), attributes: rec.x, class: rec.class });
    }

    let mut patients = Vec::with_capacity(patient_recs.len());
    let mut next_visit = 0;
    for (line, rec) in patient_recs {
        if rec.visits.len() < 2 {
            log::warn!("dropping patient {} (line {line}): fewer than two visits", rec.patient_id);
            continue;
        }
        let mut visits = Vec::with_capacity(rec.visits.len());
        for v in rec.visits {
            let mut idx = Vec::with_capacity(v.codes.len());
            for c in &v.codes {
                match code_index.get(c) {
                    Some(&i) => idx.push(i),
                    None => return Err(Error::DanglingCode { visit: v.visit_id, code: c.clone() }),
                }
            }
            idx.sort_unstable();
            idx.dedup();
            let mut labels = v.labels;
            if let Some(y) = v.y {
                labels.insert("y".to_string(), y);
            }
            visits.push(Visit { id: v.visit_id, index: next_visit, timestamp: v.t, attributes: v.x, codes: idx, labels });
            next_visit += 1;
        }
        patients.push(PatientSequence { patient_id: rec.patient_id, visits });
    }
    Cohort::new(patients, codes)
}

/// Loads `patients.jsonl` and `codes.jsonl` from one directory.
pub fn load_dir(dir: &Path) -> Result<Cohort> {
    load_cohort(&dir.join("patients.jsonl"), &dir.join("codes.jsonl"))
}

impl Cohort {
    /// Validates and indexes an in-memory cohort. Visit and code `index`
    /// fields are reassigned to file order.
    pub fn new(mut patients: Vec<PatientSequence>, mut codes: Vec<CodeNode>) -> Result<Self> {
        let code_dim = codes.first().map(|c| c.attributes.len()).unwrap_or(0);
        for (i, c) in codes.iter_mut().enumerate() {
            c.index = i;
            if c.attributes.len() != code_dim || code_dim == 0 {
                return Err(Error::Dimension(format!("code {} has {} attributes, expected {}", c.id, c.attributes.len(), code_dim.max(1))));
            }
            if c.attributes.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidCohort(format!("code {} has non-finite attributes", c.id)));
            }
        }
        let mut code_ids = std::collections::HashSet::new();
        for c in &codes {
            if !code_ids.insert(c.id.as_str()) {
                return Err(Error::InvalidCohort(format!("duplicate code id {}", c.id)));
            }
        }

        let visit_dim = patients.iter().flat_map(|p| p.visits.first()).map(|v| v.attributes.len()).next().unwrap_or(0);
        let mut classes = None;
        let mut edges = Vec::new();
        let mut visit_edges = Vec::new();
        let mut visit_owner = Vec::new();
        let mut visit_ids = std::collections::HashSet::new();
        let mut index = 0;
        for (pi, p) in patients.iter_mut().enumerate() {
            if p.visits.len() < 2 {
                return Err(Error::InvalidCohort(format!("patient {} has fewer than two visits", p.patient_id)));
            }
            for (pos, v) in p.visits.iter_mut().enumerate() {
                v.index = index;
                index += 1;
                if !visit_ids.insert(v.id.clone()) {
                    return Err(Error::InvalidCohort(format!("duplicate visit id {}", v.id)));
                }
                if v.attributes.len() != visit_dim || visit_dim == 0 {
                    return Err(Error::Dimension(format!("visit {} has {} attributes, expected {}", v.id, v.attributes.len(), visit_dim.max(1))));
                }
                if v.attributes.iter().any(|x| !x.is_finite()) || !v.timestamp.is_finite() || v.timestamp < 0.0 {
                    return Err(Error::InvalidCohort(format!("visit {} has non-finite or negative values", v.id)));
                }
                if v.codes.is_empty() {
                    return Err(Error::InvalidCohort(format!("visit {} has no codes", v.id)));
                }
                v.codes.sort_unstable();
                v.codes.dedup();
                if let Some(&bad) = v.codes.iter().find(|&&c| c >= codes.len()) {
                    return Err(Error::DanglingCode { visit: v.id.clone(), code: bad.to_string() });
                }
                for label in v.labels.values() {
                    check_label(label, &v.id)?;
                }
                if let Some(y) = v.labels.get("y") {
                    match classes {
                        None => classes = Some(y.len()),
                        Some(s) if s != y.len() => {
                            return Err(Error::Dimension(format!("visit {} label has {} classes, expected {s}", v.id, y.len())))
                        }
                        _ => {}
                    }
                }
                let start = edges.len();
                edges.extend(v.codes.iter().map(|&c| (v.index, c)));
                visit_edges.push((start, edges.len()));
                visit_owner.push((pi, pos));
            }
            for w in p.visits.windows(2) {
                if w[1].timestamp < w[0].timestamp {
                    return Err(Error::NonMonotone { patient: p.patient_id.clone(), visit: w[1].id.clone() });
                }
            }
        }
        if !patients.is_empty() && edges.is_empty() {
            return Err(Error::InvalidCohort("graph has no edges".into()));
        }
        let dims = Dims { visit_attrs: visit_dim, code_attrs: code_dim, classes: classes.unwrap_or(0) };
        let graph = BipartiteGraph { n_visits: index, codes, edges, visit_edges };
        Ok(Self { patients, graph, dims, visit_owner })
    }

    pub fn n_visits(&self) -> usize {
        self.graph.n_visits
    }

    pub fn codes(&self) -> &[CodeNode] {
        &self.graph.codes
    }

    pub fn visit(&self, index: usize) -> &Visit {
        let (p, pos) = self.visit_owner[index];
        &self.patients[p].visits[pos]
    }

    pub fn visits(&self) -> impl Iterator<Item = &Visit> {
        self.patients.iter().flat_map(|p| p.visits.iter())
    }

    /// Patient index owning each visit.
    pub fn visit_patient(&self, index: usize) -> usize {
        self.visit_owner[index].0
    }

    /// Keeps only the listed patients (in the given order), reindexing visits.
    pub fn subset(&self, patients: &[usize]) -> Result<Cohort> {
        let kept = patients.iter().map(|&i| self.patients[i].clone()).collect();
        Cohort::new(kept, self.graph.codes.clone())
    }

    /// Same visits with each code attribute replaced by a one-hot row of the
    /// identity matrix.
    pub fn with_identity_code_attrs(&self) -> Result<Cohort> {
        let n = self.graph.codes.len();
        let codes = self
            .graph
            .codes
            .iter()
            .map(|c| {
                let mut x = vec![0.0; n];
                x[c.index] = 1.0;
                CodeNode { attributes: x, ..c.clone() }
            })
            .collect();
        Cohort::new(self.patients.clone(), codes)
    }

    pub fn write_jsonl(&self, patients_path: &Path, codes_path: &Path) -> Result<()> {
        let mut out = fs::File::create(codes_path)?;
        for c in &self.graph.codes {
            let rec = CodeRecord { code_id: c.id.clone(), x: c.attributes.clone(), class: c.class.clone() };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        let mut out = fs::File::create(patients_path)?;
        for p in &self.patients {
            let visits = p
                .visits
                .iter()
                .map(|v| {
                    let mut labels = v.labels.clone();
                    let y = labels.remove("y");
                    VisitRecord {
                        visit_id: v.id.clone(),
                        t: v.timestamp,
                        x: v.attributes.clone(),
                        codes: v.codes.iter().map(|&c| self.graph.codes[c].id.clone()).collect(),
                        y,
                        labels,
                    }
                })
                .collect();
            let rec = PatientRecord { patient_id: p.patient_id.clone(), visits };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_jsonl(&dir.join("patients.jsonl"), &dir.join("codes.jsonl"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub patients: usize,
    pub visits: usize,
    pub avg_visits_per_patient: f64,
    pub max_visits_per_patient: usize,
    pub unique_codes: usize,
    pub avg_codes_per_visit: f64,
    pub max_codes_per_visit: usize,
}

pub fn cohort_stats(c: &Cohort) -> StatsReport {
    let patients = c.patients.len();
    let visits = c.n_visits();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut seen = vec![false; c.graph.codes.len()];
    for &(_, code) in &c.graph.edges {
        seen[code] = true;
    }
    StatsReport {
        patients,
        visits,
        avg_visits_per_patient: ratio(visits, patients),
        max_visits_per_patient: c.patients.iter().map(|p| p.len()).max().unwrap_or(0),
        unique_codes: seen.iter().filter(|&&s| s).count(),
        avg_codes_per_visit: ratio(c.graph.edges.len(), visits),
        max_codes_per_visit: c.visits().map(|v| v.codes.len()).max().unwrap_or(0),
    }
}
