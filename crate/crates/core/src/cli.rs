//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration or validation errors, 1 for
//! runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::benchmark::{self, default_grid, generate, parse_cells, run_experiment, sweep_grid};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, read_json, save_dataset, write_json, Dataset};
use crate::error::{Error, Result};
use crate::prototypes::{pseudo_labels, select_prototypes, AnomalyLabelPool, PrototypeKind, PrototypeSet};
use crate::trainer::{adjust_labels, preliminary_train, train, write_loss_trace, AdjustedLabels, ClassifierHead, Supervision};

/// File written by `gen` next to the dataset with the planted anomaly flags.
pub const ANOMALIES_FILE: &str = "anomalies.json";

#[derive(Debug, Parser)]
#[command(name = "embproto", version, about = "Prototype selection, label adjustment and head training on embeddings")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset.
    Gen(GenArgs),
    /// Compute metrics and select prototypes.
    Select(SelectArgs),
    /// Replace noisy labels with prototype-consistent labels.
    Adjust(AdjustArgs),
    /// Train the classifier head.
    Train(TrainArgs),
    /// Evaluate a trained head.
    Eval(EvalArgs),
    /// Run a comparison grid on synthetic data.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args, Default)]
pub struct SynthFlags {
    #[arg(long)]
    pub classes: Option<usize>,
    /// Samples per class.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Centroid separation in units of sigma.
    #[arg(long)]
    pub centroid_distance: Option<f64>,
    #[arg(long)]
    pub anomaly_frac: Option<f64>,
    /// Symmetric label-flip probability.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct SelectionFlags {
    #[arg(long)]
    pub s_c_percentile: Option<f64>,
    #[arg(long)]
    pub subsample_q: Option<usize>,
    #[arg(long)]
    pub protos_per_class: Option<usize>,
    #[arg(long, value_enum)]
    pub anomaly_label_pool: Option<PoolArg>,
    #[arg(long)]
    pub difficult_proximity_quantile: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub preliminary_epochs: Option<usize>,
    #[arg(long)]
    pub adjust_margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolArg {
    Anomaly,
    Union,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthFlags,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<data>/prototypes.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train a preliminary head for this many epochs to obtain logits.
    #[arg(long)]
    pub preliminary_epochs: Option<usize>,
    #[command(flatten)]
    pub selection: SelectionFlags,
}

#[derive(Debug, Args)]
pub struct AdjustArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prototypes: PathBuf,
    /// Defaults to `<data>/labels_adjusted.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub adjust_margin: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prototypes: PathBuf,
    /// Output directory for head.json and loss_trace.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Labels file to train on (labels_adjusted.json layout).
    #[arg(long, conflicts_with = "adjust")]
    pub labels: Option<PathBuf>,
    /// Adjust labels from the prototypes before training.
    #[arg(long)]
    pub adjust: bool,
    #[arg(long, value_enum)]
    pub anomaly_label_pool: Option<PoolArg>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum TruthArg {
    /// Clean labels when present, noisy otherwise.
    #[default]
    Auto,
    Clean,
    Noisy,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// Defaults to `metrics.json` next to the head.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    pub truth: TruthArg,
    /// Adjusted labels to score against the clean labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `default`, `sweep`, or a list of `alpha:beta:on|off` cells.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SynthFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.synth;
        set(&mut s.classes, self.classes);
        set(&mut s.n_per_class, self.n);
        set(&mut s.dim, self.dim);
        set(&mut s.cluster_sigma, self.sigma);
        set(&mut s.centroid_distance, self.centroid_distance);
        set(&mut s.anomaly_frac, self.anomaly_frac);
        set(&mut s.noise_rate, self.noise);
    }
}

impl From<PoolArg> for AnomalyLabelPool {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Anomaly => AnomalyLabelPool::Anomaly,
            PoolArg::Union => AnomalyLabelPool::Union,
        }
    }
}

impl SelectionFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.selection;
        set(&mut s.s_c_percentile, self.s_c_percentile);
        if self.subsample_q.is_some() {
            s.subsample_q = self.subsample_q;
        }
        if self.protos_per_class.is_some() {
            s.protos_per_class = self.protos_per_class;
        }
        set(&mut s.anomaly_label_pool, self.anomaly_label_pool.map(Into::into));
        set(&mut s.difficult_proximity_quantile, self.difficult_proximity_quantile);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.alpha, self.alpha);
        set(&mut t.beta, self.beta);
        set(&mut t.lr, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.preliminary_epochs, self.preliminary_epochs);
        set(&mut t.adjust_margin, self.adjust_margin);
    }
}

fn path_string(p: &Path) -> Option<String> {
    Some(p.to_string_lossy().into_owned())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses arguments and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cfg.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    cfg.propagate_seed();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gen(args) => cmd_gen(cfg, args),
        Command::Select(args) => cmd_select(cfg, args),
        Command::Adjust(args) => cmd_adjust(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::Experiment(args) => cmd_experiment(cfg, args),
    })
}

#[derive(Serialize, serde::Deserialize)]
struct AnomalyFlags {
    anomaly: Vec<bool>,
}

fn cmd_gen(mut cfg: RunConfig, args: GenArgs) -> Result<()> {
    args.synth.apply(&mut cfg);
    cfg.synth.validate()?;
    cfg.paths.out = path_string(&args.out);
    let synth = generate(&cfg.synth)?;
    save_dataset(&synth.dataset, &args.out)?;
    write_json(
        &args.out.join(ANOMALIES_FILE),
        &AnomalyFlags {
            anomaly: synth.is_anomaly,
        },
    )?;
    cfg.save(&args.out.join("gen_config.json"))?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {}",
        synth.dataset.n,
        synth.dataset.classes,
        synth.dataset.dim,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClassSelectionMetrics {
    ids: Vec<usize>,
    s_c: f64,
    proximity: Vec<i64>,
    confidence: Vec<f64>,
}

fn output_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_select(mut cfg: RunConfig, args: SelectArgs) -> Result<()> {
    args.selection.apply(&mut cfg);
    set(&mut cfg.train.preliminary_epochs, args.preliminary_epochs);
    cfg.selection.validate()?;
    cfg.train.validate()?;
    let mut ds = load_dataset(&args.data)?;
    if args.preliminary_epochs.is_some() {
        let rows: Vec<usize> = (0..ds.n).collect();
        ds.logits = Some(preliminary_train(&ds, &rows, &cfg.train)?);
    } else if ds.logits.is_none() {
        return Err(Error::Config(
            "dataset has no logits; pass --preliminary-epochs to compute them".into(),
        ));
    }
    let out = args.out.unwrap_or_else(|| args.data.join("prototypes.json"));
    let dir = output_dir(&out);
    ensure_dir(&dir)?;
    cfg.paths.data = path_string(&args.data);
    cfg.paths.out = path_string(&out);

    let outcome = select_prototypes(&ds, None, &cfg.selection, cfg.seed)?;
    outcome.prototypes.save(&out)?;
    let sidecar: Vec<Option<ClassSelectionMetrics>> = outcome
        .metrics
        .iter()
        .map(|m| {
            m.as_ref().map(|m| ClassSelectionMetrics {
                ids: m.ids().to_vec(),
                s_c: m.s_c,
                proximity: m.proximity.clone(),
                confidence: m.confidence.clone(),
            })
        })
        .collect();
    write_json(&dir.join("selection_metrics.json"), &sidecar)?;
    cfg.save(&dir.join("select_config.json"))?;
    for (c, cp) in outcome.prototypes.classes.iter().enumerate() {
        println!(
            "class {c}: {} difficult, {} anomaly prototypes",
            cp.difficult.len(),
            cp.anomaly.len()
        );
    }
    Ok(())
}

fn load_prototypes(path: &Path, ds: &Dataset) -> Result<PrototypeSet> {
    let set = PrototypeSet::load(path, ds.classes)?;
    set.validate(ds)?;
    Ok(set)
}

fn read_anomaly_flags(data: &Path, n: usize) -> Option<Vec<bool>> {
    let flags: AnomalyFlags = read_json(&data.join(ANOMALIES_FILE)).ok()?;
    (flags.anomaly.len() == n).then_some(flags.anomaly)
}

fn label_accuracy(labels: &[usize], clean: &[usize], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| keep(i)).collect();
    if rows.is_empty() {
        return None;
    }
    let hits = rows.iter().filter(|&&i| labels[i] == clean[i]).count();
    Some(hits as f64 / rows.len() as f64)
}

fn cmd_adjust(mut cfg: RunConfig, args: AdjustArgs) -> Result<()> {
    set(&mut cfg.train.adjust_margin, args.adjust_margin);
    cfg.train.validate()?;
    let ds = load_dataset(&args.data)?;
    let protos = load_prototypes(&args.prototypes, &ds)?;
    let out = args.out.unwrap_or_else(|| args.data.join("labels_adjusted.json"));
    let dir = output_dir(&out);
    ensure_dir(&dir)?;
    cfg.paths.data = path_string(&args.data);
    cfg.paths.prototypes = path_string(&args.prototypes);
    cfg.paths.out = path_string(&out);

    let adjusted = adjust_labels(&ds, &protos, cfg.train.adjust_margin)?;
    adjusted.save(&out, ds.clean_labels.as_deref())?;
    cfg.save(&dir.join("adjust_config.json"))?;
    println!("changed {} of {} labels", adjusted.changed_count(), ds.n);
    if let Some(clean) = &ds.clean_labels {
        if let Some(acc) = label_accuracy(&adjusted.labels, clean, |_| true) {
            println!("adj_label_acc={acc:.4}");
        }
        if let Some(flags) = read_anomaly_flags(&args.data, ds.n) {
            if let Some(acc) = label_accuracy(&adjusted.labels, clean, |i| !flags[i]) {
                println!("adj_label_acc_non_anomaly={acc:.4}");
            }
        }
    }
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    args.train.apply(&mut cfg);
    set(&mut cfg.selection.anomaly_label_pool, args.anomaly_label_pool.map(Into::into));
    cfg.train.adjust_labels = args.adjust;
    cfg.train.validate()?;
    let ds = load_dataset(&args.data)?;
    let protos = load_prototypes(&args.prototypes, &ds)?;
    ensure_dir(&args.out)?;
    cfg.paths.data = path_string(&args.data);
    cfg.paths.prototypes = path_string(&args.prototypes);
    cfg.paths.labels = args.labels.as_deref().and_then(path_string);
    cfg.paths.out = path_string(&args.out);

    let labels = if let Some(path) = &args.labels {
        AdjustedLabels::load_labels(path, ds.n, ds.classes)?
    } else if args.adjust {
        adjust_labels(&ds, &protos, cfg.train.adjust_margin)?.labels
    } else {
        ds.noisy_labels.clone()
    };
    let rows: Vec<usize> = (0..ds.n).collect();
    let pool = cfg.selection.anomaly_label_pool;
    let zc = pseudo_labels(&ds, &rows, &protos, PrototypeKind::Difficult, pool)?;
    let za = match pseudo_labels(&ds, &rows, &protos, PrototypeKind::Anomaly, pool) {
        Ok(z) => z,
        Err(_) if cfg.train.beta == 0.0 => zc.clone(),
        Err(e) => return Err(e),
    };
    let sup: Vec<Supervision> = rows
        .iter()
        .map(|&i| Supervision {
            label: labels[i],
            difficult: zc[i],
            anomaly: za[i],
        })
        .collect();
    let outcome = train(&ds, &rows, &sup, &cfg.train)?;
    outcome.head.save(&args.out.join("head.json"))?;
    write_loss_trace(&args.out.join("loss_trace.csv"), &outcome.trace)?;
    cfg.save(&args.out.join("train_config.json"))?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "trained {} epochs: total {:.6}, ce {:.6}, proto {:.6}",
            outcome.trace.len(),
            last.total,
            last.ce,
            last.proto
        );
    }
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, args: EvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let head = ClassifierHead::load(&args.head)?;
    if head.dim != ds.dim || head.classes != ds.classes {
        return Err(Error::Invalid(format!(
            "head is {}x{}, dataset is {}x{}",
            head.dim, head.classes, ds.dim, ds.classes
        )));
    }
    let truth = match args.truth {
        TruthArg::Auto => ds.clean_labels.as_ref().unwrap_or(&ds.noisy_labels),
        TruthArg::Noisy => &ds.noisy_labels,
        TruthArg::Clean => ds
            .clean_labels
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no clean labels".into()))?,
    };
    let out = args.out.unwrap_or_else(|| output_dir(&args.head).join("metrics.json"));
    let dir = output_dir(&out);
    ensure_dir(&dir)?;
    cfg.paths.data = path_string(&args.data);
    cfg.paths.head = path_string(&args.head);
    cfg.paths.labels = args.labels.as_deref().and_then(path_string);
    cfg.paths.out = path_string(&out);

    let preds: Vec<usize> = (0..ds.n).map(|i| head.predict(ds.embedding(i))).collect();
    let mut report = benchmark::evaluate(&preds, truth, ds.classes)?;
    if let (Some(path), Some(clean)) = (&args.labels, &ds.clean_labels) {
        let adjusted = AdjustedLabels::load_labels(path, ds.n, ds.classes)?;
        report.label_adjustment_accuracy = label_accuracy(&adjusted, clean, |_| true);
    }
    write_json(&out, &report)?;
    cfg.save(&dir.join("eval_config.json"))?;
    println!(
        "accuracy {:.4}, macro_f1 {:.4}, macro_recall {:.4}",
        report.accuracy, report.macro_f1, report.macro_recall
    );
    Ok(())
}

fn cmd_experiment(mut cfg: RunConfig, args: ExperimentArgs) -> Result<()> {
    args.synth.apply(&mut cfg);
    args.selection.apply(&mut cfg);
    args.train.apply(&mut cfg);
    cfg.validate()?;
    let cells = match args.grid.as_str() {
        "default" => default_grid(),
        "sweep" => sweep_grid(true),
        other => parse_cells(other)?,
    };
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|k| cfg.seed.wrapping_add(k)).collect();
    ensure_dir(&args.out)?;
    cfg.paths.out = path_string(&args.out);

    let report = run_experiment(&cfg.synth, &cells, &seeds, &cfg.selection, &cfg.train)?;
    write_text(&args.out.join("report.csv"), &report.to_csv())?;
    write_text(&args.out.join("surface.csv"), &report.surface_csv())?;
    cfg.save(&args.out.join("experiment_config.json"))?;
    for cell in &cells {
        if let Some(acc) = report.mean_accuracy(*cell, "test") {
            println!(
                "alpha {} beta {} adjust {}: mean test accuracy {:.4}",
                cell.alpha,
                cell.beta,
                if cell.adjust { "on" } else { "off" },
                acc
            );
        }
    }
    Ok(())
}
