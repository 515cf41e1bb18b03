use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use sclvm::dataio::{load_csv, read_binary, read_features, write_csv, LabelColumn, SyntheticGenerator};
use sclvm::metrics::binary_metrics;
use sclvm::persist;
use sclvm::trainer::{empirical_log_priors, InferOptions, Predictor, Termination};
use sclvm::{CategoryLabel, Dataset, FitOptions, FittedModel, LatentConfig, OptimizerKind};

use crate::manifest::{csv_bytes, manifest_path, write_atomic, FileDigest, RunManifest};
use crate::Failure;

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Training data: CSV with a header row, or an SCLD binary container (.scld).
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the label column (or its 0-based index).
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long, default_value_t = 5)]
    pub q_shared: usize,
    /// Private dimensions; 0 gives the label-blind Bayesian GPLVM.
    #[arg(long, default_value_t = 5)]
    pub q_private: usize,
    #[arg(long, default_value_t = 50)]
    pub n_inducing: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = 1e-2)]
    pub step_size: f64,
    /// Relative ELBO change that counts as stalled (ten in a row stop the fit).
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// ELBO trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Optimizer {
    Adam,
    Lbfgs,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of rows to classify; the model's label column is ignored if present.
    #[arg(long)]
    pub data: PathBuf,
    /// `empirical` (training frequencies), `uniform`, or comma-separated
    /// positive weights in category order.
    #[arg(long, default_value = "empirical")]
    pub priors: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Output of `sclvm classify`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// CSV holding the true labels.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value = "label")]
    pub truth_column: String,
    /// Label value treated as the positive class.
    #[arg(long)]
    pub positive: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Category name as it appeared in the training labels.
    #[arg(long)]
    pub class: String,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_major: usize,
    #[arg(long, default_value_t = 25)]
    pub n_minor: usize,
    #[arg(long, default_value_t = 2)]
    pub q_shared: usize,
    #[arg(long, default_value_t = 2)]
    pub q_private: usize,
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    /// Separation of the category centres along the first private axis.
    #[arg(long, default_value_t = 2.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional held-out sample from the same generator.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub test_major: usize,
    #[arg(long, default_value_t = 25)]
    pub test_minor: usize,
}

fn label_column(s: &str) -> LabelColumn {
    match s.parse::<usize>() {
        Ok(i) => LabelColumn::Index(i),
        Err(_) => LabelColumn::Name(s.to_string()),
    }
}

fn load_dataset(path: &Path, label: &str) -> Result<Dataset, Failure> {
    if path.extension().is_some_and(|e| e == "scld") {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(read_binary(fs::File::open(path)?, &name)?)
    } else {
        Ok(load_csv(path, &label_column(label))?)
    }
}

fn load_model(path: &Path) -> Result<FittedModel, Failure> {
    Ok(persist::load(path)?)
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn write_manifest(
    primary: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
    summary: serde_json::Value,
) -> Result<(), Failure> {
    let m = RunManifest {
        command: command.to_string(),
        config,
        seed,
        inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
        outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        summary,
    };
    write_atomic(&manifest_path(primary), &serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let data = load_dataset(&a.data, &a.label_column)?;
    let config = LatentConfig::new(a.q_shared, a.q_private, a.n_inducing)?;
    let opts = FitOptions {
        max_iters: a.iters,
        optimizer: match a.optimizer {
            Optimizer::Adam => OptimizerKind::Adam,
            Optimizer::Lbfgs => OptimizerKind::Lbfgs,
        },
        step_size: a.step_size,
        convergence_tol: a.tol,
        seed: a.seed,
        fixed_inducing_labels: true,
    };
    info!("fitting {}x{} data with {:?}", data.n(), data.d(), config);
    let out = sclvm::fit(&data, config, &opts)?;

    write_atomic(&a.out, &persist::to_bytes(&out.model)?)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".trace.csv");
        PathBuf::from(s)
    });
    let rows = out.trace.iter().enumerate().map(|(i, v)| vec![i.to_string(), fmt(*v)]);
    write_atomic(&trace_path, &csv_bytes(&["iter".into(), "elbo".into()], rows)?)?;

    let termination = match &out.termination {
        Termination::MaxIters => "max_iters".to_string(),
        Termination::Converged => "converged".to_string(),
        Termination::NumericalFailure(m) => format!("numerical_failure: {m}"),
    };
    println!(
        "final ELBO {:.6} after {} iterations ({termination})",
        out.model.elbo,
        out.trace.len()
    );
    write_manifest(
        &a.out,
        "fit",
        json!({
            "label_column": a.label_column,
            "q_shared": a.q_shared,
            "q_private": a.q_private,
            "n_inducing": a.n_inducing,
            "iters": a.iters,
            "optimizer": format!("{:?}", a.optimizer).to_lowercase(),
            "step_size": a.step_size,
            "tol": a.tol,
            "label_blind": config.is_label_blind(),
        }),
        Some(a.seed),
        &[&a.data],
        &[&a.out, &trace_path],
        started,
        json!({
            "final_elbo": out.model.elbo,
            "initial_elbo": out.initial_elbo(),
            "iterations": out.trace.len(),
            "termination": termination,
            "mode": if config.is_label_blind() { "bgplvm" } else { "sclvm" },
        }),
    )
}

fn parse_priors(arg: &str, model: &FittedModel) -> Result<Vec<f64>, Failure> {
    let c = model.state.data.category_count;
    match arg {
        "empirical" => Ok(empirical_log_priors(model)),
        "uniform" => Ok(vec![0.0; c]),
        other => {
            let w: Vec<f64> = other
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Failure::usage(format!("cannot parse priors '{other}'")))?;
            if w.len() != c || w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Failure::usage(format!("priors need {c} positive weights")));
            }
            Ok(w.iter().map(|v| v.ln()).collect())
        }
    }
}

pub fn classify(a: ClassifyArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let model = load_model(&a.model)?;
    let priors = parse_priors(&a.priors, &model)?;
    let label_col = model.state.data.label_column.clone().map(LabelColumn::Name);
    let table = read_features(fs::File::open(&a.data)?, label_col.as_ref())?;
    if table.y.ncols() != model.d() {
        return Err(Failure::data(format!(
            "{} has {} feature columns, model expects {}",
            a.data.display(),
            table.y.ncols(),
            model.d()
        )));
    }
    let predictor = Predictor::new(&model)?;
    let opts = InferOptions::default();
    let results: Vec<Vec<sclvm::ClassScore>> = (0..table.y.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = table.y.row(i).iter().copied().collect();
            predictor.classify(&row, &priors, &opts)
        })
        .collect::<Result<_, _>>()?;

    let labels = model.category_labels();
    let name = |c: CategoryLabel| model.state.data.label_name(c);
    let mut header = vec!["row".to_string(), "predicted".to_string()];
    header.extend(labels.iter().map(|c| format!("p_{}", name(*c))));
    header.extend(labels.iter().map(|c| format!("delta_{}", name(*c))));
    let rows = results.iter().enumerate().map(|(i, scores)| {
        let find = |c: CategoryLabel| scores.iter().find(|s| s.label == c).expect("score per category");
        let mut r = vec![i.to_string(), name(scores[0].label)];
        r.extend(labels.iter().map(|c| fmt(find(*c).posterior_prob)));
        r.extend(labels.iter().map(|c| fmt(find(*c).bound)));
        r
    });
    write_atomic(&a.out, &csv_bytes(&header, rows)?)?;
    println!("classified {} rows", results.len());
    write_manifest(
        &a.out,
        "classify",
        json!({ "priors": a.priors, "log_priors": priors }),
        None,
        &[&a.model, &a.data],
        &[&a.out],
        started,
        json!({ "rows": results.len() }),
    )
}

fn read_column(path: &Path, column: &str) -> Result<Vec<String>, Failure> {
    let mut rdr = csv::Reader::from_path(path)?;
    let idx = rdr
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| Failure::data(format!("{} has no '{column}' column", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        out.push(rec?.get(idx).unwrap_or_default().trim().to_string());
    }
    Ok(out)
}

pub fn metrics(a: MetricsArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let predicted = read_column(&a.predictions, "predicted")?;
    let truth = read_column(&a.truth, &a.truth_column)?;
    if predicted.len() != truth.len() {
        return Err(Failure::data(format!(
            "{} predictions but {} truth rows",
            predicted.len(),
            truth.len()
        )));
    }
    let as_label = |v: &Vec<String>| -> Vec<CategoryLabel> {
        v.iter().map(|s| CategoryLabel(if *s == a.positive { 1 } else { 2 })).collect()
    };
    let m = binary_metrics(&as_label(&truth), &as_label(&predicted), CategoryLabel(1))?;
    println!("precision {:.6}  recall {:.6}  F1 {:.6}", m.precision, m.recall, m.f1);
    let header: Vec<String> = ["precision", "recall", "f1", "tp", "fp", "fn", "tn"].map(String::from).to_vec();
    let row = vec![
        fmt(m.precision),
        fmt(m.recall),
        fmt(m.f1),
        m.tp.to_string(),
        m.fp.to_string(),
        m.fn_.to_string(),
        m.tn.to_string(),
    ];
    write_atomic(&a.out, &csv_bytes(&header, [row])?)?;
    write_manifest(
        &a.out,
        "metrics",
        json!({ "positive": a.positive, "truth_column": a.truth_column }),
        None,
        &[&a.predictions, &a.truth],
        &[&a.out],
        started,
        serde_json::to_value(m)?,
    )
}

fn resolve_class(model: &FittedModel, class: &str) -> Result<CategoryLabel, Failure> {
    model
        .state
        .data
        .label_for_name(class)
        .ok_or_else(|| Failure::data(format!("unknown class '{class}'")))
}

pub fn sample(a: SampleArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let model = load_model(&a.model)?;
    let label = resolve_class(&model, &a.class)?;
    let y = sclvm::generate(&model, label, a.n, a.seed)?;
    let header = model.state.data.feature_names.clone();
    let rows = (0..y.nrows()).map(|i| y.row(i).iter().map(|v| fmt(*v)).collect());
    write_atomic(&a.out, &csv_bytes(&header, rows)?)?;
    println!("wrote {} samples of class '{}'", a.n, a.class);
    write_manifest(
        &a.out,
        "sample",
        json!({ "class": a.class, "n": a.n }),
        Some(a.seed),
        &[&a.model],
        &[&a.out],
        started,
        json!({ "rows": a.n }),
    )
}

pub fn export_latent(a: ExportArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let model = load_model(&a.model)?;
    let s = &model.state;
    let (qs, qp) = (s.config.q_shared, s.config.q_private);
    let names: Vec<String> = (1..=qs).map(|j| format!("s{j}")).chain((1..=qp).map(|j| format!("p{j}"))).collect();
    let mut header = names.clone();
    header.extend(names.iter().map(|n| format!("{n}_var")));
    header.push("label".into());
    let rows = (0..s.n_points()).map(|i| {
        let mut r: Vec<String> = s.q.means.row(i).iter().map(|v| fmt(*v)).collect();
        r.extend(s.q.variances.row(i).iter().map(|v| fmt(*v)));
        r.push(s.data.label_name(s.labels[i]));
        r
    });
    write_atomic(&a.out, &csv_bytes(&header, rows)?)?;
    write_manifest(
        &a.out,
        "export-latent",
        json!({}),
        None,
        &[&a.model],
        &[&a.out],
        started,
        json!({ "rows": s.n_points(), "columns": header.len() }),
    )
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let started = Instant::now();
    if a.n_major == 0 || a.n_minor == 0 || a.d == 0 || a.q_shared + a.q_private == 0 {
        return Err(Failure::usage("sizes and dimensions must be positive"));
    }
    let generator = SyntheticGenerator::new(a.q_shared, a.q_private, a.d, a.offset, a.seed);
    let train = generator.sample(a.n_major, a.n_minor, a.seed.wrapping_add(1)).dataset;
    let mut buf = Vec::new();
    write_csv(&train, &mut buf)?;
    write_atomic(&a.out, &buf)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(t) = &a.test_out {
        let test = generator.sample(a.test_major, a.test_minor, a.seed.wrapping_add(2)).dataset;
        let mut buf = Vec::new();
        write_csv(&test, &mut buf)?;
        write_atomic(t, &buf)?;
        outputs.push(t);
    }
    println!("wrote {} rows ({} major, {} minor)", a.n_major + a.n_minor, a.n_major, a.n_minor);
    write_manifest(
        &a.out,
        "synth",
        json!({
            "n_major": a.n_major, "n_minor": a.n_minor, "q_shared": a.q_shared,
            "q_private": a.q_private, "d": a.d, "offset": a.offset,
            "test_major": a.test_major, "test_minor": a.test_minor,
        }),
        Some(a.seed),
        &[],
        &outputs,
        started,
        json!({ "rows": a.n_major + a.n_minor }),
    )
}
