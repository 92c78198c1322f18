//! Softmax classifier head trained on fixed embeddings.
//!
//! Each training sample carries three targets: its label (noisy or adjusted),
//! the difficult-prototype pseudo-label and the anomaly-prototype
//! pseudo-label. The loss mixes their cross-entropies with weights
//! `1 - (alpha + beta)`, `alpha` and `beta`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json, Dataset};
use crate::error::{Error, Result};
use crate::prototypes::{argmax_scores, class_similarities, AnomalyLabelPool, PrototypeKind, PrototypeSet};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub preliminary_epochs: usize,
    pub adjust_labels: bool,
    /// Minimum lead of the best class over the runner-up for a label to be
    /// replaced. Zero replaces every label.
    pub adjust_margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.3,
            lr: 0.1,
            weight_decay: 5e-5,
            batch_size: 32,
            epochs: 20,
            preliminary_epochs: 5,
            adjust_labels: false,
            adjust_margin: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be non-negative (alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta >= 1.0 {
            return Err(Error::Config(format!(
                "alpha + beta must be < 1 (α+β < 1), got {} + {}",
                self.alpha, self.beta
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.adjust_margin.is_nan() || self.adjust_margin < 0.0 {
            return Err(Error::Config("adjust margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear layer plus softmax. `weights` is `dim x classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub dim: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadFile {
    dim: usize,
    classes: usize,
    #[serde(rename = "W")]
    weights: Vec<Vec<f64>>,
    #[serde(rename = "b")]
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            weights: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Pre-softmax outputs `W^T x + b`.
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (d, &xd) in x.iter().enumerate() {
            let xd = xd as f64;
            let row = &self.weights[d * self.classes..(d + 1) * self.classes];
            for (zk, &w) in z.iter_mut().zip(row) {
                *zk += xd * w;
            }
        }
        z
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let z = self.logits(x);
        let scores: Vec<Option<f64>> = z.into_iter().map(Some).collect();
        argmax_scores(&scores).expect("at least two classes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = HeadFile {
            dim: self.dim,
            classes: self.classes,
            weights: self.weights.chunks(self.classes).map(<[f64]>::to_vec).collect(),
            bias: self.bias.clone(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: HeadFile = read_json(path)?;
        if file.weights.len() != file.dim
            || file.weights.iter().any(|r| r.len() != file.classes)
            || file.bias.len() != file.classes
        {
            return Err(Error::Invalid(format!(
                "head file shape does not match dim {} x classes {}",
                file.dim, file.classes
            )));
        }
        let head = ClassifierHead {
            dim: file.dim,
            classes: file.classes,
            weights: file.weights.into_iter().flatten().collect(),
            bias: file.bias,
        };
        if !head.is_finite() {
            return Err(Error::Invalid("head file contains non-finite parameters".into()));
        }
        Ok(head)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities for one embedding.
pub fn forward(head: &ClassifierHead, x: &[f32]) -> Result<Vec<f64>> {
    if !head.is_finite() {
        return Err(Error::Invalid("head has non-finite parameters".into()));
    }
    if x.len() != head.dim {
        return Err(Error::Invalid(format!(
            "embedding has {} entries, head expects {}",
            x.len(),
            head.dim
        )));
    }
    Ok(softmax(&head.logits(x)))
}

pub fn ce_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// The three targets of one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Supervision {
    pub label: usize,
    pub difficult: usize,
    pub anomaly: usize,
}

impl Supervision {
    /// Same class for all three targets.
    pub fn plain(label: usize) -> Self {
        Self {
            label,
            difficult: label,
            anomaly: label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted mean cross-entropy against the labels.
    pub ce: f64,
    /// Weighted prototype term.
    pub proto: f64,
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta < 1.0) {
        return Err(Error::Config(format!(
            "need alpha, beta >= 0 and alpha + beta < 1, got {alpha} and {beta}"
        )));
    }
    Ok(())
}

/// Batch loss `(1 - (α+β)) · mean CE(label) + mean[α · CE(z_c) + β · CE(z_a)]`.
///
/// `rows[k]` is supervised by `sup[k]`.
pub fn total_loss(
    head: &ClassifierHead,
    ds: &Dataset,
    rows: &[usize],
    sup: &[Supervision],
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    check_weights(alpha, beta)?;
    if rows.len() != sup.len() || rows.is_empty() {
        return Err(Error::Invalid("batch rows and supervision must be equal and nonempty".into()));
    }
    let m = rows.len() as f64;
    let mut ce_sum = 0.0;
    let mut proto_sum = 0.0;
    for (&i, s) in rows.iter().zip(sup) {
        let p = forward(head, ds.embedding(i))?;
        ce_sum += ce_loss(&p, s.label);
        proto_sum += alpha * ce_loss(&p, s.difficult) + beta * ce_loss(&p, s.anomaly);
    }
    let ce = ce_sum / m;
    let proto = proto_sum / m;
    Ok(LossBreakdown {
        total: (1.0 - (alpha + beta)) * ce + proto,
        ce,
        proto,
    })
}

/// Analytic gradient of [`total_loss`] with respect to weights and bias.
///
/// Each sample's targets combine into one distribution `t` summing to one,
/// so the logit gradient is `p - t`.
pub fn loss_gradient(
    head: &ClassifierHead,
    ds: &Dataset,
    rows: &[usize],
    sup: &[Supervision],
    alpha: f64,
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_weights(alpha, beta)?;
    if rows.len() != sup.len() || rows.is_empty() {
        return Err(Error::Invalid("batch rows and supervision must be equal and nonempty".into()));
    }
    let c = head.classes;
    let label_weight = 1.0 - (alpha + beta);
    let mut gw = vec![0.0; head.dim * c];
    let mut gb = vec![0.0; c];
    let mut delta = vec![0.0; c];
    for (&i, s) in rows.iter().zip(sup) {
        let x = ds.embedding(i);
        delta.copy_from_slice(&softmax(&head.logits(x)));
        delta[s.label] -= label_weight;
        delta[s.difficult] -= alpha;
        delta[s.anomaly] -= beta;
        for (d, &xd) in x.iter().enumerate() {
            let xd = xd as f64;
            for (g, &dk) in gw[d * c..(d + 1) * c].iter_mut().zip(&delta) {
                *g += xd * dk;
            }
        }
        for (g, &dk) in gb.iter_mut().zip(&delta) {
            *g += dk;
        }
    }
    let m = rows.len() as f64;
    gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g /= m);
    Ok((gw, gb))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ClassifierHead,
    /// Full-set loss after each epoch.
    pub trace: Vec<LossBreakdown>,
}

/// Mini-batch gradient descent from a zero-initialised head.
///
/// Samples are reshuffled every epoch from a generator seeded with
/// `cfg.seed`. Weight decay is applied to the weights, not the bias.
pub fn train(ds: &Dataset, rows: &[usize], sup: &[Supervision], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if rows.len() != sup.len() {
        return Err(Error::Invalid("rows and supervision differ in length".into()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut head = ClassifierHead::zeros(ds.dim, ds.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch_rows = Vec::with_capacity(cfg.batch_size);
    let mut batch_sup = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch_rows.clear();
            batch_sup.clear();
            batch_rows.extend(chunk.iter().map(|&k| rows[k]));
            batch_sup.extend(chunk.iter().map(|&k| sup[k]));
            let (gw, gb) = loss_gradient(&head, ds, &batch_rows, &batch_sup, cfg.alpha, cfg.beta)?;
            for (w, g) in head.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g + cfg.weight_decay * *w);
            }
            for (b, g) in head.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g;
            }
            if !head.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite parameters after update".into(),
                });
            }
        }
        let loss = total_loss(&head, ds, rows, sup, cfg.alpha, cfg.beta)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("loss is {}", loss.total),
            });
        }
        trace.push(loss);
    }
    Ok(TrainOutcome { head, trace })
}

/// Trains on the noisy labels of `rows` alone for `cfg.preliminary_epochs`
/// and returns `n x classes` logits for every sample of the dataset.
pub fn preliminary_train(ds: &Dataset, rows: &[usize], cfg: &TrainConfig) -> Result<Vec<f32>> {
    let plain = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        epochs: cfg.preliminary_epochs,
        ..cfg.clone()
    };
    let sup: Vec<Supervision> = rows.iter().map(|&i| Supervision::plain(ds.noisy_labels[i])).collect();
    let outcome = train(ds, rows, &sup, &plain)?;
    let mut logits = Vec::with_capacity(ds.n * ds.classes);
    for i in 0..ds.n {
        logits.extend(outcome.head.logits(ds.embedding(i)).into_iter().map(|v| v as f32));
    }
    Ok(logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedLabels {
    pub labels: Vec<usize>,
    pub changed: Vec<bool>,
    /// Per sample, mean similarity to each class's difficult prototypes.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdjustedLabelsFile {
    noisy: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clean: Option<Vec<usize>>,
    changed: Vec<bool>,
}

impl AdjustedLabels {
    pub fn changed_count(&self) -> usize {
        self.changed.iter().filter(|&&c| c).count()
    }

    /// Writes `labels_adjusted.json`: the labels file layout with the
    /// adjusted labels in `noisy`, plus a `changed` array.
    pub fn save(&self, path: &Path, clean: Option<&[usize]>) -> Result<()> {
        write_json(
            path,
            &AdjustedLabelsFile {
                noisy: self.labels.clone(),
                clean: clean.map(<[usize]>::to_vec),
                changed: self.changed.clone(),
            },
        )
    }

    /// Reads the adjusted label array and `changed` flags back.
    pub fn load_labels(path: &Path, n: usize, classes: usize) -> Result<Vec<usize>> {
        let file: AdjustedLabelsFile = read_json(path)?;
        if file.noisy.len() != n || file.changed.len() != n {
            return Err(Error::Invalid(format!(
                "adjusted labels file covers {} samples, dataset has {n}",
                file.noisy.len()
            )));
        }
        if file.noisy.iter().any(|&y| y >= classes) {
            return Err(Error::Invalid("adjusted label out of range".into()));
        }
        Ok(file.noisy)
    }
}

/// Replaces each label with the class whose difficult prototypes are most
/// similar on average. With `margin > 0`, a label is only replaced when the
/// best class leads the runner-up by at least `margin`.
pub fn adjust_labels(ds: &Dataset, prototypes: &PrototypeSet, margin: f64) -> Result<AdjustedLabels> {
    if prototypes.classes.len() != ds.classes {
        return Err(Error::Invalid("prototype set does not match dataset classes".into()));
    }
    if let Some(c) = prototypes.classes.iter().position(|cp| cp.difficult.is_empty()) {
        return Err(Error::Invalid(format!("class {c} has no difficult prototypes")));
    }
    let per_sample: Vec<(usize, Vec<f64>)> = {
        use rayon::prelude::*;
        (0..ds.n)
            .into_par_iter()
            .map(|i| -> Result<_> {
                let scores = class_similarities(
                    ds,
                    i,
                    prototypes,
                    PrototypeKind::Difficult,
                    AnomalyLabelPool::Anomaly,
                )?;
                let best = argmax_scores(&scores).expect("every class has prototypes");
                let scores: Vec<f64> = scores.into_iter().map(|s| s.unwrap_or(f64::NAN)).collect();
                let label = if margin > 0.0 {
                    let runner_up = scores
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| c != best)
                        .map(|(_, &s)| s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    if scores[best] - runner_up >= margin {
                        best
                    } else {
                        ds.noisy_labels[i]
                    }
                } else {
                    best
                };
                Ok((label, scores))
            })
            .collect::<Result<_>>()?
    };
    let mut out = AdjustedLabels {
        labels: Vec::with_capacity(ds.n),
        changed: Vec::with_capacity(ds.n),
        scores: Vec::with_capacity(ds.n),
    };
    for (i, (label, scores)) in per_sample.into_iter().enumerate() {
        out.changed.push(label != ds.noisy_labels[i]);
        out.labels.push(label);
        out.scores.push(scores);
    }
    Ok(out)
}

/// Writes `loss_trace.csv` with one row per epoch.
pub fn write_loss_trace(path: &Path, trace: &[LossBreakdown]) -> Result<()> {
    let mut text = String::from("epoch,total,ce,proto\n");
    for (epoch, l) in trace.iter().enumerate() {
        let _ = writeln!(text, "{},{},{},{}", epoch + 1, l.total, l.ce, l.proto);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
