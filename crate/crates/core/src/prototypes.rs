//! Difficult-class and anomaly prototype selection, and the pseudo-labels
//! derived from prototype similarity.
//!
//! Selection happens per class (by noisy label) in rounds. Each round picks
//! one sample; the number of rounds is logarithmic in the class size unless
//! overridden.
//!
//! Difficult prototypes: the first pick has the lowest confidence, then the
//! highest proximity. Later picks rank remaining candidates by confidence,
//! then by average similarity to the prototypes already picked (lower is
//! better), then by proximity.
//!
//! Anomaly prototypes: the first pick has the lowest proximity among samples
//! that are not difficult prototypes. Later picks minimise the average
//! similarity to every prototype of the class picked so far, difficult and
//! anomaly alike.
//!
//! Every ranking ends with ascending sample id, so selection is deterministic.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, subsample_members, write_json, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{cosine_similarity, ClassMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    Difficult,
    Anomaly,
}

/// Which prototypes the anomaly pseudo-label averages over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyLabelPool {
    /// The class's anomaly prototypes only.
    #[default]
    Anomaly,
    /// Difficult and anomaly prototypes of the class together.
    Union,
}

/// Why a sample was picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickTrace {
    pub kind: PrototypeKind,
    /// `None` records that the candidate pool was empty.
    #[serde(default)]
    pub id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proximity: Option<i64>,
    /// Average similarity to the prototypes picked before this one. Absent
    /// for first picks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_similarity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub ids: Vec<usize>,
    pub trace: Vec<PickTrace>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub difficult: Vec<usize>,
    pub anomaly: Vec<usize>,
    #[serde(default)]
    pub trace: Vec<PickTrace>,
}

impl ClassPrototypes {
    pub fn of_kind(&self, kind: PrototypeKind) -> &[usize] {
        match kind {
            PrototypeKind::Difficult => &self.difficult,
            PrototypeKind::Anomaly => &self.anomaly,
        }
    }
}

/// Prototypes for every class, indexed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<ClassPrototypes>,
}

/// `max(1, floor(log2(class_size)))`.
pub fn logsparse_budget(class_size: usize) -> usize {
    if class_size <= 1 {
        1
    } else {
        (class_size.ilog2() as usize).max(1)
    }
}

fn running_average(sums: &[f64], pos: usize, count: usize) -> f64 {
    sums[pos] / count as f64
}

fn add_similarities(sums: &mut [f64], metrics: &ClassMetrics, picked: usize) {
    for (p, s) in sums.iter_mut().enumerate() {
        *s += metrics.matrix.get(p, picked);
    }
}

/// Picks up to `budget` difficult prototypes from the samples covered by
/// `metrics`. Returns dataset ids in pick order.
pub fn select_difficult(metrics: &ClassMetrics, budget: usize) -> Result<Selection> {
    select_difficult_gated(metrics, budget, 0.0)
}

/// Proximity a sample must reach to be a difficult-prototype candidate:
/// the nearest-rank `quantile` of the class's proximities. Zero admits all.
pub fn proximity_gate(proximity: &[i64], quantile: f64) -> i64 {
    if quantile <= 0.0 || proximity.is_empty() {
        return i64::MIN;
    }
    let mut sorted = proximity.to_vec();
    sorted.sort_unstable();
    let rank = (quantile * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// [`select_difficult`] restricted to samples whose proximity reaches the
/// given class quantile.
pub fn select_difficult_gated(metrics: &ClassMetrics, budget: usize, quantile: f64) -> Result<Selection> {
    let m = metrics.len();
    if m == 0 {
        return Err(Error::Invalid("cannot select prototypes from an empty class".into()));
    }
    let ids = metrics.ids();
    let conf = &metrics.confidence;
    let prox = &metrics.proximity;
    let gate = proximity_gate(prox, quantile);
    let mut taken: Vec<bool> = prox.iter().map(|&p| p < gate).collect();
    let eligible = taken.iter().filter(|&&t| !t).count();
    let mut sums = vec![0.0; m];
    let mut out = Selection::default();

    for round in 0..budget.min(eligible) {
        let candidates = (0..m).filter(|&p| !taken[p]);
        let pick = if round == 0 {
            candidates.min_by(|&a, &b| {
                conf[a]
                    .total_cmp(&conf[b])
                    .then(prox[b].cmp(&prox[a]))
                    .then(ids[a].cmp(&ids[b]))
            })
        } else {
            candidates.min_by(|&a, &b| {
                conf[a]
                    .total_cmp(&conf[b])
                    .then(running_average(&sums, a, round).total_cmp(&running_average(&sums, b, round)))
                    .then(prox[b].cmp(&prox[a]))
                    .then(ids[a].cmp(&ids[b]))
            })
        }
        .expect("round count bounded by class size");
        out.trace.push(PickTrace {
            kind: PrototypeKind::Difficult,
            id: Some(ids[pick]),
            confidence: Some(conf[pick]),
            proximity: Some(prox[pick]),
            avg_similarity: (round > 0).then(|| running_average(&sums, pick, round)),
        });
        out.ids.push(ids[pick]);
        taken[pick] = true;
        add_similarities(&mut sums, metrics, pick);
    }
    Ok(out)
}

/// Picks up to `budget` anomaly prototypes among the samples covered by
/// `metrics` that are not in `already` (the class's difficult prototypes).
pub fn select_anomaly(metrics: &ClassMetrics, already: &[usize], budget: usize) -> Result<Selection> {
    let m = metrics.len();
    if m == 0 {
        return Err(Error::Invalid("cannot select prototypes from an empty class".into()));
    }
    let ids = metrics.ids();
    let conf = &metrics.confidence;
    let prox = &metrics.proximity;
    let mut taken = vec![false; m];
    let mut sums = vec![0.0; m];
    let mut picked = 0usize;
    for &id in already {
        let pos = ids.iter().position(|&x| x == id).ok_or_else(|| {
            Error::Invalid(format!("prototype {id} is not covered by the class metrics"))
        })?;
        if !taken[pos] {
            taken[pos] = true;
            add_similarities(&mut sums, metrics, pos);
            picked += 1;
        }
    }

    let mut out = Selection::default();
    if taken.iter().all(|&t| t) {
        out.trace.push(PickTrace {
            kind: PrototypeKind::Anomaly,
            id: None,
            confidence: None,
            proximity: None,
            avg_similarity: None,
        });
        return Ok(out);
    }

    let available = m - picked;
    for round in 0..budget.min(available) {
        let candidates = (0..m).filter(|&p| !taken[p]);
        let pick = if round == 0 {
            candidates.min_by(|&a, &b| {
                prox[a]
                    .cmp(&prox[b])
                    .then(conf[a].total_cmp(&conf[b]))
                    .then(ids[a].cmp(&ids[b]))
            })
        } else {
            candidates.min_by(|&a, &b| {
                running_average(&sums, a, picked)
                    .total_cmp(&running_average(&sums, b, picked))
                    .then(prox[a].cmp(&prox[b]))
                    .then(conf[a].total_cmp(&conf[b]))
                    .then(ids[a].cmp(&ids[b]))
            })
        }
        .expect("round count bounded by candidate count");
        out.trace.push(PickTrace {
            kind: PrototypeKind::Anomaly,
            id: Some(ids[pick]),
            confidence: Some(conf[pick]),
            proximity: Some(prox[pick]),
            avg_similarity: (round > 0).then(|| running_average(&sums, pick, picked)),
        });
        out.ids.push(ids[pick]);
        taken[pick] = true;
        add_similarities(&mut sums, metrics, pick);
        picked += 1;
    }
    Ok(out)
}

/// Mean cosine similarity between sample `sample` and each id in `set`.
pub fn prototype_similarity(ds: &Dataset, sample: usize, set: &[usize]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Invalid("prototype set is empty".into()));
    }
    let x = ds.embedding(sample);
    let mut sum = 0.0;
    for &p in set {
        sum += cosine_similarity(x, ds.embedding(p))?;
    }
    Ok(sum / set.len() as f64)
}

/// Per-class mean similarities of `sample` to the requested prototype lists.
/// Classes whose list is empty get `None`.
pub fn class_similarities(
    ds: &Dataset,
    sample: usize,
    sets: &PrototypeSet,
    kind: PrototypeKind,
    pool: AnomalyLabelPool,
) -> Result<Vec<Option<f64>>> {
    sets.classes
        .iter()
        .map(|cp| {
            let list: Vec<usize> = match (kind, pool) {
                (PrototypeKind::Difficult, _) => cp.difficult.clone(),
                (PrototypeKind::Anomaly, AnomalyLabelPool::Anomaly) => cp.anomaly.clone(),
                (PrototypeKind::Anomaly, AnomalyLabelPool::Union) => {
                    cp.difficult.iter().chain(&cp.anomaly).copied().collect()
                }
            };
            if list.is_empty() {
                Ok(None)
            } else {
                prototype_similarity(ds, sample, &list).map(Some)
            }
        })
        .collect()
}

/// Index of the largest score, ties to the lowest index; `None` entries are
/// skipped.
pub fn argmax_scores(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            match best {
                Some((_, b)) if s.total_cmp(&b) != Ordering::Greater => {}
                _ => best = Some((c, s)),
            }
        }
    }
    best.map(|(c, _)| c)
}

/// Class whose prototypes of the given kind are most similar on average.
pub fn pseudo_label(
    ds: &Dataset,
    sample: usize,
    sets: &PrototypeSet,
    kind: PrototypeKind,
    pool: AnomalyLabelPool,
) -> Result<usize> {
    let scores = class_similarities(ds, sample, sets, kind, pool)?;
    argmax_scores(&scores).ok_or_else(|| {
        Error::Invalid(format!("no class has {kind:?} prototypes").to_lowercase())
    })
}

/// Pseudo-labels of one kind for each of `rows`.
pub fn pseudo_labels(
    ds: &Dataset,
    rows: &[usize],
    sets: &PrototypeSet,
    kind: PrototypeKind,
    pool: AnomalyLabelPool,
) -> Result<Vec<usize>> {
    rows.par_iter()
        .map(|&i| pseudo_label(ds, i, sets, kind, pool))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub s_c_percentile: f64,
    /// Per-class subsample size for the similarity matrix.
    pub subsample_q: Option<usize>,
    /// Overrides the logarithmic per-class budget.
    pub protos_per_class: Option<usize>,
    pub anomaly_label_pool: AnomalyLabelPool,
    /// Difficult prototypes are drawn only from samples whose proximity
    /// reaches this quantile of their class. Zero disables the gate.
    pub difficult_proximity_quantile: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            s_c_percentile: crate::metrics::DEFAULT_S_C_PERCENTILE,
            subsample_q: None,
            protos_per_class: None,
            anomaly_label_pool: AnomalyLabelPool::Anomaly,
            difficult_proximity_quantile: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_c_percentile > 0.0 && self.s_c_percentile < 100.0) {
            return Err(Error::Config(format!(
                "s_c percentile must lie in (0, 100), got {}",
                self.s_c_percentile
            )));
        }
        if !(0.0..1.0).contains(&self.difficult_proximity_quantile) {
            return Err(Error::Config(format!(
                "difficult proximity quantile must lie in [0, 1), got {}",
                self.difficult_proximity_quantile
            )));
        }
        if self.subsample_q == Some(0) {
            return Err(Error::Config("subsample q must be at least 1".into()));
        }
        if self.protos_per_class == Some(0) {
            return Err(Error::Config("protos per class must be at least 1".into()));
        }
        Ok(())
    }
}

/// Prototype selection for every class plus the metrics it was based on.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub prototypes: PrototypeSet,
    /// `None` for classes without members.
    pub metrics: Vec<Option<ClassMetrics>>,
}

/// Runs metrics and selection for every class. Candidates are the samples in
/// `rows` (all samples when `None`), grouped by noisy label.
pub fn select_prototypes(
    ds: &Dataset,
    rows: Option<&[usize]>,
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<SelectionOutcome> {
    cfg.validate()?;
    let members = ds.class_members(rows);
    let covered = match cfg.subsample_q {
        Some(q) => subsample_members(&members, q, seed),
        None => members.clone(),
    };
    let per_class: Vec<(ClassPrototypes, Option<ClassMetrics>)> = covered
        .par_iter()
        .zip(members.par_iter())
        .map(|(ids, all)| -> Result<_> {
            if ids.is_empty() {
                return Ok((ClassPrototypes::default(), None));
            }
            let budget = cfg.protos_per_class.unwrap_or_else(|| logsparse_budget(all.len()));
            let metrics = ClassMetrics::compute(ds, ids, cfg.s_c_percentile)?;
            let difficult = select_difficult_gated(&metrics, budget, cfg.difficult_proximity_quantile)?;
            let anomaly = select_anomaly(&metrics, &difficult.ids, budget)?;
            let mut trace = difficult.trace;
            trace.extend(anomaly.trace);
            Ok((
                ClassPrototypes {
                    difficult: difficult.ids,
                    anomaly: anomaly.ids,
                    trace,
                },
                Some(metrics),
            ))
        })
        .collect::<Result<_>>()?;
    let (classes, metrics) = per_class.into_iter().unzip();
    Ok(SelectionOutcome {
        prototypes: PrototypeSet { classes },
        metrics,
    })
}

impl PrototypeSet {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.classes.len() != ds.classes {
            return Err(Error::Invalid(format!(
                "prototype set has {} classes, dataset has {}",
                self.classes.len(),
                ds.classes
            )));
        }
        for (c, cp) in self.classes.iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            for &id in cp.difficult.iter().chain(&cp.anomaly) {
                if id >= ds.n {
                    return Err(Error::Invalid(format!("prototype id {id} out of range")));
                }
                if ds.noisy_labels[id] != c {
                    return Err(Error::Invalid(format!(
                        "prototype {id} listed for class {c} has noisy label {}",
                        ds.noisy_labels[id]
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::Invalid(format!(
                        "prototype {id} appears twice in class {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, &ClassPrototypes> = self
            .classes
            .iter()
            .enumerate()
            .map(|(c, cp)| (c.to_string(), cp))
            .collect();
        write_json(path, &map)
    }

    /// Reads `prototypes.json`; classes absent from the file get empty lists.
    pub fn load(path: &Path, classes: usize) -> Result<Self> {
        let map: BTreeMap<String, ClassPrototypes> = read_json(path)?;
        let mut out = vec![ClassPrototypes::default(); classes];
        for (key, cp) in map {
            let c: usize = key
                .parse()
                .map_err(|_| Error::Invalid(format!("bad class key {key:?} in prototypes file")))?;
            if c >= classes {
                return Err(Error::Invalid(format!("class {c} out of range in prototypes file")));
            }
            out[c] = cp;
        }
        Ok(PrototypeSet { classes: out })
    }
}
