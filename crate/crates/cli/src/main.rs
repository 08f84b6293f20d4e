//! `medgraph` command-line driver: generate cohorts, train, evaluate, export
//! embeddings and write figure-ready reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use medgraph::checkpoint::{load_checkpoint, save_checkpoint};
use medgraph::cohort::{cohort_stats, load_dir, Cohort};
use medgraph::eval::{evaluate_model, evaluate_task, projection_csv, split_patients, uncertainty_scatter_csv, ProbeFeatures, Report};
use medgraph::par;
use medgraph::risk::TaskLossMode;
use medgraph::synth::{self, GenConfig};
use medgraph::temporal::{CellKind, MarkerNoise};
use medgraph::trainer::{export_embeddings, train_with_progress, Model, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "medgraph", version, about = "Gaussian visit/code embeddings with a temporal point process over patient sequences")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true, help_heading = "Global options")]
    json: bool,
    /// Seed for every random choice; overrides the seed in --config.
    #[arg(long, global = true, help_heading = "Global options", env = "MEDGRAPH_SEED")]
    seed: Option<u64>,
    /// Worker threads for data-parallel work (0 uses every core).
    #[arg(long, global = true, help_heading = "Global options", default_value_t = 0)]
    workers: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true, help_heading = "Global options")]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted classes and severity.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a risk task with a trained checkpoint.
    Eval(EvalArgs),
    /// Write node embeddings as TSV, optionally with projection and variance tables.
    Export(ExportArgs),
    /// Evaluate several checkpoints and write JSON and CSV reports.
    Report(ReportArgs),
    /// Summarise a cohort directory.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of patients.
    #[arg(long)]
    patients: Option<usize>,
    /// Number of codes.
    #[arg(long)]
    codes: Option<usize>,
    /// Number of planted code classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Width of the visit attribute vectors.
    #[arg(long)]
    visit_attrs: Option<usize>,
    /// Width of the code attribute vectors.
    #[arg(long)]
    code_attrs: Option<usize>,
    /// Spread of code attributes around their class prototype.
    #[arg(long)]
    attr_noise: Option<f64>,
    /// Output directory for patients.jsonl, codes.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory holding patients.jsonl and codes.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Label key for the risk term (required when gamma > 0).
    #[arg(long)]
    task: Option<String>,
    /// Weight of the structural term.
    #[arg(long, conflicts_with = "no_structure")]
    alpha: Option<f64>,
    /// Weight of the temporal term.
    #[arg(long, conflicts_with = "no_temporal")]
    beta: Option<f64>,
    /// Weight of the risk term.
    #[arg(long)]
    gamma: Option<f64>,
    /// Passes over all training patients.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Gaussian embedding width.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Width of the attribute projection.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Width of the recurrent state.
    #[arg(long)]
    rnn_dim: Option<usize>,
    /// Negative codes per observed edge.
    #[arg(long)]
    negatives: Option<usize>,
    /// Visits per structural mini-batch.
    #[arg(long)]
    batch_visits: Option<usize>,
    /// Sequences per mini-batch.
    #[arg(long)]
    batch_seqs: Option<usize>,
    /// Recurrent cell: gated or plain.
    #[arg(long, value_parser = serde_value::<CellKind>)]
    cell: Option<CellKind>,
    /// Noise on event markers: variance, stddev or off.
    #[arg(long, value_parser = serde_value::<MarkerNoise>)]
    marker_noise: Option<MarkerNoise>,
    /// Risk loss form: softmax-ce or per-class-binary.
    #[arg(long, value_parser = serde_value::<TaskLossMode>)]
    task_loss: Option<TaskLossMode>,
    /// Clip the global gradient norm at this value.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Hold out this fraction of patients (drawn with the training seed).
    #[arg(long)]
    holdout: Option<f64>,
    /// Drop the structural term.
    #[arg(long)]
    no_structure: bool,
    /// Drop the temporal term and feed uniform gaps.
    #[arg(long)]
    no_temporal: bool,
    /// Replace code attributes with one-hot identities.
    #[arg(long)]
    no_code_attrs: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding patients.jsonl and codes.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Label key to score; defaults to the task the model was trained on.
    #[arg(long)]
    task: Option<String>,
    /// Score only the held-out patients of this split.
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding patients.jsonl and codes.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Embedding TSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write a 2-D PCA projection of all node means as CSV.
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Also write per-node variance against visit count or degree as CSV.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Checkpoint to include, as NAME=PATH; repeat for each variant.
    #[arg(long = "model", required = true, value_parser = named_path)]
    models: Vec<(String, PathBuf)>,
    /// Directory holding patients.jsonl and codes.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Compute task metrics on the held-out patients of this split.
    #[arg(long)]
    holdout: Option<f64>,
    /// Probe features: mean or mean-and-variance.
    #[arg(long, value_parser = serde_value::<ProbeFeatures>, default_value = "mean")]
    probe_features: ProbeFeatures,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Directory holding patients.jsonl and codes.jsonl.
    #[arg(long)]
    data: PathBuf,
}

/// Invalid input detected before any work: exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

fn check_dir(dir: &Path) -> anyhow::Result<()> {
    for f in ["patients.jsonl", "codes.jsonl"] {
        if !dir.join(f).is_file() {
            return Err(invalid(format!("{} has no {f}", dir.display())));
        }
    }
    Ok(())
}

fn check_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

fn check_fraction(f: Option<f64>) -> anyhow::Result<()> {
    match f {
        Some(x) if !(x > 0.0 && x < 1.0) => Err(invalid(format!("--holdout {x} must lie in (0, 1)"))),
        _ => Ok(()),
    }
}

fn load(dir: &Path) -> anyhow::Result<Cohort> {
    load_dir(dir).with_context(|| format!("loading cohort from {}", dir.display()))
}

/// `(train, test)` cohorts for an optional holdout fraction.
fn split(cohort: Cohort, holdout: Option<f64>, seed: u64) -> anyhow::Result<(Cohort, Option<Cohort>)> {
    let Some(f) = holdout else { return Ok((cohort, None)) };
    let (tr, te) = split_patients(cohort.patients.len(), f, seed)?;
    Ok((cohort.subset(&tr)?, Some(cohort.subset(&te)?)))
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn generate(cli: &Cli, a: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg: GenConfig = read_config(a.config.as_deref())?;
    cfg.n_patients = a.patients.unwrap_or(cfg.n_patients);
    cfg.n_codes = a.codes.unwrap_or(cfg.n_codes);
    cfg.n_code_classes = a.classes.unwrap_or(cfg.n_code_classes);
    cfg.visit_attrs = a.visit_attrs.unwrap_or(cfg.visit_attrs);
    cfg.code_attrs = a.code_attrs.unwrap_or(cfg.code_attrs);
    cfg.attr_noise = a.attr_noise.unwrap_or(cfg.attr_noise);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let cohort = synth::generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let manifest = synth::write_cohort(&cfg, &cohort, &a.out)?;
    emit(cli.json, &manifest, || {
        format!(
            "wrote {} patients, {} visits, {} codes to {} (readmit30 prevalence {:.3})",
            manifest.stats.patients,
            manifest.stats.visits,
            cohort.codes().len(),
            a.out.display(),
            manifest.readmit30_prevalence
        )
    })
}

fn train_config(cli: &Cli, a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field.clone() { cfg.$field = v; } )* };
    }
    set!(alpha, beta, gamma, epochs, lr, embed_dim, hidden_dim, rnn_dim, negatives, batch_visits, batch_seqs, cell, marker_noise, task_loss);
    if a.task.is_some() {
        cfg.task = a.task.clone();
    }
    if a.clip_norm.is_some() {
        cfg.clip_norm = a.clip_norm;
    }
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    if a.no_structure {
        cfg = cfg.without_structure();
    }
    if a.no_temporal {
        cfg = cfg.without_temporal();
    }
    cfg.identity_code_attrs |= a.no_code_attrs;
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a Path,
    train_patients: usize,
    epochs: usize,
    final_loss: Option<&'a medgraph::trainer::EpochRecord>,
}

fn train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(cli, a)?;
    check_fraction(a.holdout)?;
    check_dir(&a.data)?;
    let (cohort, _) = split(load(&a.data)?, a.holdout, cfg.seed)?;
    let model = train_with_progress(&cohort, &cfg, |r| log::info!("epoch {} loss {:.6}", r.epoch, r.loss.total))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&model, &a.out)?;
    let summary = TrainSummary { checkpoint: &a.out, train_patients: cohort.patients.len(), epochs: cfg.epochs, final_loss: model.history.last() };
    emit(cli.json, &summary, || {
        let loss = model.history.last().map_or(f64::NAN, |r| r.loss.total);
        format!("trained {} epochs on {} patients, final loss {loss:.6}; wrote {}", cfg.epochs, cohort.patients.len(), a.out.display())
    })
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    check_file(path)?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    check_fraction(a.holdout)?;
    check_dir(&a.data)?;
    let model = load_model(&a.ckpt)?;
    let task = a.task.clone().or_else(|| model.config.task.clone()).ok_or_else(|| invalid("model has no task; pass --task"))?;
    let (train, test) = split(load(&a.data)?, a.holdout, model.config.seed)?;
    let report = evaluate_task(&model, test.as_ref().unwrap_or(&train), &task)?;
    emit(cli.json, &report, || format!("{}: auc {:.4}, ap {:.4} ({} positive, {} negative)", report.task, report.auc, report.ap, report.n_pos, report.n_neg))
}

fn export(cli: &Cli, a: &ExportArgs) -> anyhow::Result<()> {
    check_dir(&a.data)?;
    let model = load_model(&a.ckpt)?;
    let cohort = load(&a.data)?;
    export_embeddings(&model, &cohort, &a.out)?;
    let mut written = vec![a.out.clone()];
    if a.projection.is_some() || a.scatter.is_some() {
        let prepared = model.prepare(&cohort)?;
        let emb = model.embeddings(&cohort)?;
        if let Some(p) = &a.projection {
            fs::write(p, projection_csv(&emb, &prepared)?)?;
            written.push(p.clone());
        }
        if let Some(p) = &a.scatter {
            fs::write(p, uncertainty_scatter_csv(&emb, &prepared))?;
            written.push(p.clone());
        }
    }
    emit(cli.json, &written, || written.iter().map(|p| format!("wrote {}", p.display())).collect::<Vec<_>>().join("\n"))
}

fn report(cli: &Cli, a: &ReportArgs) -> anyhow::Result<()> {
    check_fraction(a.holdout)?;
    check_dir(&a.data)?;
    let mut names: Vec<&str> = a.models.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("variant names must be unique"));
    }
    let models = a.models.iter().map(|(name, path)| Ok((name, load_model(path)?))).collect::<anyhow::Result<Vec<_>>>()?;
    let cohort = load(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut report = Report::default();
    for (name, model) in &models {
        let mut result = evaluate_model(model, &cohort, name, model.config.seed, a.probe_features)?;
        if let (Some(task), Some(f)) = (&model.config.task, a.holdout) {
            let (_, test) = split(cohort.clone(), Some(f), model.config.seed)?;
            result.metrics = vec![evaluate_task(model, test.as_ref().expect("holdout set"), task)?];
        }
        let prepared = model.prepare(&cohort)?;
        let emb = model.embeddings(&cohort)?;
        fs::write(a.out.join(format!("uncertainty_scatter_{name}.csv")), uncertainty_scatter_csv(&emb, &prepared))?;
        fs::write(a.out.join(format!("projection_{name}.csv")), projection_csv(&emb, &prepared)?)?;
        report.results.push(result);
    }
    report.write_dir(&a.out)?;
    emit(cli.json, &report, || {
        let mut lines = vec![format!("wrote report for {} variants to {}", report.results.len(), a.out.display())];
        for r in &report.results {
            let auc = r.metrics.iter().map(|m| format!("{} auc {:.4}", m.task, m.auc)).collect::<Vec<_>>().join(", ");
            let probe = r.probes.iter().find(|p| (p.train_fraction - 0.5).abs() < 1e-9).map_or(String::new(), |p| format!("probe micro-F1@0.5 {:.3}", p.micro_f1));
            lines.push(format!("  {}: {auc} {probe}", r.variant));
        }
        lines.join("\n")
    })
}

fn stats(cli: &Cli, a: &StatsArgs) -> anyhow::Result<()> {
    check_dir(&a.data)?;
    let s = cohort_stats(&load(&a.data)?);
    emit(cli.json, &s, || {
        format!(
            "patients {}\nvisits {}\navg visits/patient {:.3}\nmax visits/patient {}\nunique codes {}\navg codes/visit {:.3}\nmax codes/visit {}",
            s.patients, s.visits, s.avg_visits_per_patient, s.max_visits_per_patient, s.unique_codes, s.avg_codes_per_visit, s.max_codes_per_visit
        )
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Export(a) => export(cli, a),
        Command::Report(a) => report(cli, a),
        Command::Stats(a) => stats(cli, a),
    }
}

/// Input problems map to 1, everything else to 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    use medgraph::Error as E;
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parse { .. }
                | E::Dimension(_)
                | E::DanglingCode { .. }
                | E::NonMonotone { .. }
                | E::NegativeGap { .. }
                | E::InvalidCohort(_)
                | E::Config(_)
                | E::MissingLabel { .. }
                | E::DegenerateLabels(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match par::with_workers(cli.workers, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_paths() {
        assert_eq!(named_path("full=a/b.mgck").unwrap(), ("full".to_string(), PathBuf::from("a/b.mgck")));
        assert!(named_path("nopath").is_err());
        assert!(named_path("=x").is_err());
    }

    #[test]
    fn enum_flags_use_config_spelling() {
        assert_eq!(serde_value::<CellKind>("plain").unwrap(), CellKind::Plain);
        assert_eq!(serde_value::<TaskLossMode>("per-class-binary").unwrap(), TaskLossMode::PerClassBinary);
        assert!(serde_value::<MarkerNoise>("loud").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_has_help() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        for sub in std::iter::once(&cmd).chain(cmd.get_subcommands()) {
            for arg in sub.get_arguments() {
                assert!(arg.get_help().is_some(), "{} --{}", sub.get_name(), arg.get_id());
            }
        }
    }
}
