//! Synthetic planted datasets, evaluation metrics and the end-to-end
//! experiment runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::prototypes::{pseudo_labels, select_prototypes, PrototypeKind, PrototypeSet, SelectionConfig};
use crate::trainer::{adjust_labels, preliminary_train, train, AdjustedLabels, Supervision, TrainConfig};

/// Parameters of a planted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Samples per class, anomalies included.
    pub n_per_class: usize,
    pub dim: usize,
    pub classes: usize,
    pub cluster_sigma: f64,
    /// Distance between any two class centroids, in units of `cluster_sigma`.
    pub centroid_distance: f64,
    /// Fraction of each class placed on the far anomaly shell.
    pub anomaly_frac: f64,
    /// Probability of flipping a label to a uniformly drawn other class.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            dim: 16,
            classes: 3,
            cluster_sigma: 1.0,
            centroid_distance: 6.0,
            anomaly_frac: 0.1,
            noise_rate: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_per_class == 0 {
            return fail("n per class must be at least 1".into());
        }
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.classes > self.dim {
            return fail(format!(
                "classes ({}) must not exceed dim ({})",
                self.classes, self.dim
            ));
        }
        if !(self.cluster_sigma > 0.0 && self.cluster_sigma.is_finite()) {
            return fail(format!("cluster sigma must be positive, got {}", self.cluster_sigma));
        }
        if !(self.centroid_distance > 0.0 && self.centroid_distance.is_finite()) {
            return fail(format!(
                "centroid distance must be positive, got {}",
                self.centroid_distance
            ));
        }
        if !(0.0..1.0).contains(&self.anomaly_frac) {
            return fail(format!(
                "anomaly fraction must lie in [0, 1), got {}",
                self.anomaly_frac
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise rate must lie in [0, 1), got {}", self.noise_rate));
        }
        Ok(())
    }

    pub fn anomalies_per_class(&self) -> usize {
        (self.anomaly_frac * self.n_per_class as f64).round() as usize
    }
}

/// A generated dataset plus the planted ground truth.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub is_anomaly: Vec<bool>,
    pub centroids: Vec<Vec<f64>>,
}

/// Class centroids at the vertices of a regular simplex centred on the
/// origin, pairwise `centroid_distance * cluster_sigma` apart.
pub fn centroids(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let scale = spec.centroid_distance * spec.cluster_sigma / 2f64.sqrt();
    let shift = scale / spec.classes as f64;
    (0..spec.classes)
        .map(|c| {
            let mut mu = vec![0.0; spec.dim];
            for (k, v) in mu.iter_mut().enumerate().take(spec.classes) {
                *v = if k == c { scale - shift } else { -shift };
            }
            mu
        })
        .collect()
}

/// Draws a planted dataset.
///
/// Each class gets Gaussian samples around its centroid followed by its
/// anomalies. Anomalies point in uniformly random directions at a radius that
/// keeps them at least three centroid distances from every centroid.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mus = centroids(spec);
    let sep = spec.centroid_distance * spec.cluster_sigma;
    let max_norm = mus
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let shell_inner = 3.0 * sep + max_norm;
    let n_anom = spec.anomalies_per_class();
    let n_total = spec.classes * spec.n_per_class;

    let mut embeddings = Vec::with_capacity(n_total * spec.dim);
    let mut clean = Vec::with_capacity(n_total);
    let mut is_anomaly = Vec::with_capacity(n_total);
    for (c, mu) in mus.iter().enumerate() {
        for k in 0..spec.n_per_class {
            let anomalous = k >= spec.n_per_class - n_anom;
            if anomalous {
                let dir: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let radius = shell_inner + sep * rng.random::<f64>();
                embeddings.extend(dir.iter().map(|v| (v / norm * radius) as f32));
            } else {
                embeddings.extend(mu.iter().map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + spec.cluster_sigma * z) as f32
                }));
            }
            clean.push(c);
            is_anomaly.push(anomalous);
        }
    }
    let noisy: Vec<usize> = clean
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < spec.noise_rate {
                let other = rng.random_range(0..spec.classes - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();
    let dataset = Dataset::new(spec.dim, spec.classes, embeddings, noisy, Some(clean), None, None)?;
    Ok(Synthetic {
        dataset,
        is_anomaly,
        centroids: mus,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_adjustment_accuracy: Option<f64>,
}

/// Accuracy plus macro-averaged recall and F1 over `classes` classes.
pub fn evaluate(preds: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    if preds.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "prediction count {} differs from truth count {}",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty prediction set".into()));
    }
    if let Some(&bad) = preds.iter().chain(truth).find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in preds.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassScores> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let k = classes as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
        per_class,
        confusion,
        label_adjustment_accuracy: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 split stratified by clean label (noisy when clean is absent).
pub fn stratified_split(ds: &Dataset, seed: u64) -> Split {
    let strata = ds.clean_labels.as_ref().unwrap_or(&ds.noisy_labels);
    let mut groups = vec![Vec::new(); ds.classes];
    for (i, &y) in strata.iter().enumerate() {
        groups[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut g in groups {
        g.shuffle(&mut rng);
        let tenth = (g.len() as f64 * 0.1).round() as usize;
        let (val, rest) = g.split_at(tenth);
        let (test, train) = rest.split_at(tenth.min(rest.len()));
        split.val.extend_from_slice(val);
        split.test.extend_from_slice(test);
        split.train.extend_from_slice(train);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// One configuration of the comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub alpha: f64,
    pub beta: f64,
    pub adjust: bool,
}

impl Cell {
    pub fn new(alpha: f64, beta: f64, adjust: bool) -> Self {
        Self { alpha, beta, adjust }
    }
}

/// Baseline and the weighted configuration, each with and without label
/// adjustment.
pub fn default_grid() -> Vec<Cell> {
    vec![
        Cell::new(0.0, 0.0, false),
        Cell::new(0.0, 0.0, true),
        Cell::new(0.2, 0.3, false),
        Cell::new(0.2, 0.3, true),
    ]
}

/// Every `alpha, beta` in `{0, 0.1, ..., 0.9}` with `alpha + beta < 1`.
pub fn sweep_grid(adjust: bool) -> Vec<Cell> {
    let mut cells = Vec::new();
    for a in 0..10u32 {
        for b in 0..(10 - a) {
            cells.push(Cell::new(a as f64 / 10.0, b as f64 / 10.0, adjust));
        }
    }
    cells
}

/// Parses `alpha:beta:on|off` entries separated by commas.
pub fn parse_cells(text: &str) -> Result<Vec<Cell>> {
    text.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let bad = || Error::Config(format!("bad grid cell {item:?}, expected alpha:beta:on|off"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let alpha: f64 = parts[0].parse().map_err(|_| bad())?;
            let beta: f64 = parts[1].parse().map_err(|_| bad())?;
            let adjust = match parts[2] {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                _ => return Err(bad()),
            };
            Ok(Cell::new(alpha, beta, adjust))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub alpha: f64,
    pub beta: f64,
    pub adjust: bool,
    pub seed: u64,
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    pub adj_label_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("alpha,beta,adjust,seed,split,accuracy,macro_f1,macro_recall,adj_label_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.alpha, r.beta, r.adjust, r.seed, r.split, r.accuracy, r.macro_f1, r.macro_recall, r.adj_label_acc
            );
        }
        out
    }

    /// Mean accuracy over seeds for `cell` on `split`.
    pub fn mean_accuracy(&self, cell: Cell, split: &str) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.alpha == cell.alpha && r.beta == cell.beta && r.adjust == cell.adjust && r.split == split)
            .map(|r| r.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Seed-mean accuracy per cell and split, as CSV.
    pub fn surface_csv(&self) -> String {
        let mut groups: BTreeMap<(u64, u64, bool, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.alpha.to_bits(), r.beta.to_bits(), r.adjust, r.split.clone()))
                .or_default()
                .push(r.accuracy);
        }
        let mut out = String::from("alpha,beta,adjust,split,mean_accuracy,seeds\n");
        let mut keys: Vec<_> = groups.keys().cloned().collect();
        keys.sort_by(|a, b| {
            f64::from_bits(a.0)
                .total_cmp(&f64::from_bits(b.0))
                .then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1)))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        for key in keys {
            let accs = &groups[&key];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                f64::from_bits(key.0),
                f64::from_bits(key.1),
                key.2,
                key.3,
                accs.iter().sum::<f64>() / accs.len() as f64,
                accs.len()
            );
        }
        out
    }
}

/// Everything a seed shares across grid cells: data, split, prototypes and
/// the label sets.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub seed: u64,
    pub synthetic: Synthetic,
    pub split: Split,
    pub prototypes: PrototypeSet,
    pub adjusted: AdjustedLabels,
    /// Difficult and anomaly pseudo-labels, parallel to `split.train`.
    pub difficult_labels: Vec<usize>,
    pub anomaly_labels: Vec<usize>,
}

impl PreparedRun {
    pub fn dataset(&self) -> &Dataset {
        &self.synthetic.dataset
    }

    /// Fraction of training rows whose training label equals the clean label.
    pub fn label_accuracy(&self, adjust: bool) -> f64 {
        let ds = self.dataset();
        let clean = ds.clean_labels.as_ref().expect("synthetic data has clean labels");
        let labels = if adjust { &self.adjusted.labels } else { &ds.noisy_labels };
        let hits = self.split.train.iter().filter(|&&i| labels[i] == clean[i]).count();
        hits as f64 / self.split.train.len() as f64
    }
}

/// Generates the data for one seed, trains the preliminary head for logits,
/// selects prototypes on the training split and derives every label set.
pub fn prepare_run(spec: &SynthSpec, sel: &SelectionConfig, cfg: &TrainConfig, seed: u64) -> Result<PreparedRun> {
    let mut synthetic = generate(&SynthSpec { seed, ..spec.clone() })?;
    let split = stratified_split(&synthetic.dataset, seed);
    let prelim_cfg = TrainConfig { seed, ..cfg.clone() };
    let logits = preliminary_train(&synthetic.dataset, &split.train, &prelim_cfg)?;
    synthetic.dataset.logits = Some(logits);
    let ds = &synthetic.dataset;
    let selection = select_prototypes(ds, Some(&split.train), sel, seed)?;
    let prototypes = selection.prototypes;
    let adjusted = adjust_labels(ds, &prototypes, cfg.adjust_margin)?;
    let difficult_labels = pseudo_labels(
        ds,
        &split.train,
        &prototypes,
        PrototypeKind::Difficult,
        sel.anomaly_label_pool,
    )?;
    let anomaly_labels = match pseudo_labels(
        ds,
        &split.train,
        &prototypes,
        PrototypeKind::Anomaly,
        sel.anomaly_label_pool,
    ) {
        Ok(z) => z,
        // no class has anomaly prototypes; the difficult labels stand in
        Err(_) => difficult_labels.clone(),
    };
    Ok(PreparedRun {
        seed,
        synthetic,
        split,
        prototypes,
        adjusted,
        difficult_labels,
        anomaly_labels,
    })
}

/// Derives a per-cell training seed from the run seed and the cell index.
pub fn cell_seed(seed: u64, cell_index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell_index as u64 + 1);
    rng.random()
}

/// Trains one cell on a prepared run and evaluates it on validation and test.
pub fn run_cell(run: &PreparedRun, cell: Cell, cfg: &TrainConfig, train_seed: u64) -> Result<Vec<ReportRow>> {
    let ds = run.dataset();
    let labels = if cell.adjust { &run.adjusted.labels } else { &ds.noisy_labels };
    let sup: Vec<Supervision> = run
        .split
        .train
        .iter()
        .enumerate()
        .map(|(k, &i)| Supervision {
            label: labels[i],
            difficult: run.difficult_labels[k],
            anomaly: run.anomaly_labels[k],
        })
        .collect();
    let cell_cfg = TrainConfig {
        alpha: cell.alpha,
        beta: cell.beta,
        adjust_labels: cell.adjust,
        seed: train_seed,
        ..cfg.clone()
    };
    let head = train(ds, &run.split.train, &sup, &cell_cfg)?.head;
    let truth = ds.clean_labels.as_ref().unwrap_or(&ds.noisy_labels);
    let adj_label_acc = run.label_accuracy(cell.adjust);
    [("val", &run.split.val), ("test", &run.split.test)]
        .into_iter()
        .map(|(name, rows)| {
            let preds: Vec<usize> = rows.iter().map(|&i| head.predict(ds.embedding(i))).collect();
            let gold: Vec<usize> = rows.iter().map(|&i| truth[i]).collect();
            let m = evaluate(&preds, &gold, ds.classes)?;
            Ok(ReportRow {
                alpha: cell.alpha,
                beta: cell.beta,
                adjust: cell.adjust,
                seed: run.seed,
                split: name.to_string(),
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
                macro_recall: m.macro_recall,
                adj_label_acc,
            })
        })
        .collect()
}

/// Runs every cell for every seed. Rows come out ordered by cell, then seed,
/// then split, whatever the thread count.
pub fn run_experiment(
    spec: &SynthSpec,
    cells: &[Cell],
    seeds: &[u64],
    sel: &SelectionConfig,
    cfg: &TrainConfig,
) -> Result<ExperimentReport> {
    spec.validate()?;
    sel.validate()?;
    for cell in cells {
        TrainConfig {
            alpha: cell.alpha,
            beta: cell.beta,
            ..cfg.clone()
        }
        .validate()?;
    }
    let runs: Vec<PreparedRun> = seeds
        .par_iter()
        .map(|&seed| prepare_run(spec, sel, cfg, seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let per_job: Vec<Vec<ReportRow>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            run_cell(&runs[s], cells[c], cfg, cell_seed(seeds[s], c))
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentReport {
        rows: per_job.into_iter().flatten().collect(),
    })
}
