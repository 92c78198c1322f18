//! In-memory dataset model and its on-disk directory format.
//!
//! A dataset directory holds:
//!
//! * `meta.json` with `n`, `dim`, `classes`, `has_logits`, `has_clean_labels`
//!   and `class_names`;
//! * `embeddings.bin`, `n * dim` little-endian `f32` values, sample-major;
//! * `logits.bin` (only when `has_logits`), `n * classes` values, same encoding;
//! * `labels.json` with a `noisy` array and an optional `clean` array.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const LOGITS_FILE: &str = "logits.bin";
pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub has_logits: bool,
    pub has_clean_labels: bool,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub noisy: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<Vec<usize>>,
}

/// Embeddings plus labels for `n` samples.
///
/// Embeddings and logits are stored row-major as `f32`, exactly as they sit on
/// disk. All arithmetic downstream widens to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub embeddings: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        dim: usize,
        classes: usize,
        embeddings: Vec<f32>,
        noisy_labels: Vec<usize>,
        clean_labels: Option<Vec<usize>>,
        logits: Option<Vec<f32>>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = noisy_labels.len();
        let class_names =
            class_names.unwrap_or_else(|| (0..classes).map(|c| format!("class_{c}")).collect());
        let ds = Dataset {
            n,
            dim,
            classes,
            embeddings,
            logits,
            noisy_labels,
            clean_labels,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.dim == 0 {
            return Err(Error::Invalid("dim must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Invalid(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        if self.class_names.len() != self.classes {
            return Err(Error::Invalid(format!(
                "expected {} class names, got {}",
                self.classes,
                self.class_names.len()
            )));
        }
        if self.embeddings.len() != self.n * self.dim {
            return Err(Error::Invalid(format!(
                "embedding matrix has {} values, expected {}",
                self.embeddings.len(),
                self.n * self.dim
            )));
        }
        if self.noisy_labels.len() != self.n {
            return Err(Error::Invalid("noisy label count differs from n".into()));
        }
        check_labels("noisy", &self.noisy_labels, self.classes)?;
        if let Some(clean) = &self.clean_labels {
            if clean.len() != self.n {
                return Err(Error::Invalid("clean label count differs from n".into()));
            }
            check_labels("clean", clean, self.classes)?;
        }
        for i in 0..self.n {
            let row = self.embedding(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite value in embedding row {i}")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("zero-norm embedding row {i}")));
            }
        }
        if let Some(logits) = &self.logits {
            if logits.len() != self.n * self.classes {
                return Err(Error::Invalid(format!(
                    "logit matrix has {} values, expected {}",
                    logits.len(),
                    self.n * self.classes
                )));
            }
            if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "non-finite logit for sample {}",
                    pos / self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn logit_row(&self, i: usize) -> Option<&[f32]> {
        self.logits
            .as_ref()
            .map(|l| &l[i * self.classes..(i + 1) * self.classes])
    }

    /// Sample ids per class according to the noisy labels, restricted to
    /// `rows` when given. Ids within a class are in ascending order of
    /// appearance in `rows`.
    pub fn class_members(&self, rows: Option<&[usize]>) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.classes];
        match rows {
            Some(rows) => {
                for &i in rows {
                    members[self.noisy_labels[i]].push(i);
                }
            }
            None => {
                for (i, &y) in self.noisy_labels.iter().enumerate() {
                    members[y].push(i);
                }
            }
        }
        members
    }

    pub fn meta(&self) -> Meta {
        Meta {
            n: self.n,
            dim: self.dim,
            classes: self.classes,
            has_logits: self.logits.is_some(),
            has_clean_labels: self.clean_labels.is_some(),
            class_names: self.class_names.clone(),
        }
    }
}

fn check_labels(kind: &str, labels: &[usize], classes: usize) -> Result<()> {
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Invalid(format!(
            "{kind} label {y} of sample {i} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// One-hot class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelVector {
    pub class_index: usize,
    pub classes: usize,
}

impl LabelVector {
    pub fn new(class_index: usize, classes: usize) -> Result<Self> {
        if class_index >= classes {
            return Err(Error::Invalid(format!(
                "class index {class_index} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            class_index,
            classes,
        })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.class_index] = 1.0;
        v
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_blob(dir: &Path, name: &str, count: usize) -> Result<Vec<f32>> {
    let path = dir.join(name);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let expected = count * 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            file: name.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(decode_f32_le(&bytes))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: Meta = read_json(&dir.join(META_FILE))?;
    if meta.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let embeddings = read_blob(dir, EMBEDDINGS_FILE, meta.n * meta.dim)?;
    let logits = if meta.has_logits {
        Some(read_blob(dir, LOGITS_FILE, meta.n * meta.classes)?)
    } else {
        None
    };
    let labels: LabelsFile = read_json(&dir.join(LABELS_FILE))?;
    if labels.noisy.len() != meta.n {
        return Err(Error::Invalid(format!(
            "labels.json has {} noisy labels, meta says n = {}",
            labels.noisy.len(),
            meta.n
        )));
    }
    if meta.has_clean_labels != labels.clean.is_some() {
        return Err(Error::Invalid(
            "has_clean_labels disagrees with labels.json".into(),
        ));
    }
    let ds = Dataset {
        n: meta.n,
        dim: meta.dim,
        classes: meta.classes,
        embeddings,
        logits,
        noisy_labels: labels.noisy,
        clean_labels: labels.clean,
        class_names: meta.class_names,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(META_FILE), &ds.meta())?;
    let path = dir.join(EMBEDDINGS_FILE);
    fs::write(&path, encode_f32_le(&ds.embeddings)).map_err(|e| Error::io(&path, e))?;
    let logits_path = dir.join(LOGITS_FILE);
    match &ds.logits {
        Some(l) => fs::write(&logits_path, encode_f32_le(l)).map_err(|e| Error::io(&logits_path, e))?,
        None => {
            if logits_path.exists() {
                fs::remove_file(&logits_path).map_err(|e| Error::io(&logits_path, e))?;
            }
        }
    }
    write_json(
        &dir.join(LABELS_FILE),
        &LabelsFile {
            noisy: ds.noisy_labels.clone(),
            clean: ds.clean_labels.clone(),
        },
    )
}

/// Draws up to `q` ids per class uniformly without replacement.
///
/// `members` holds the candidate ids of each class. Classes no larger than `q`
/// are returned whole. Output ids are sorted ascending.
pub fn subsample_members(members: &[Vec<usize>], q: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    members
        .iter()
        .map(|ids| {
            if ids.len() <= q {
                return ids.clone();
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, ids.len(), q)
                .into_iter()
                .map(|k| ids[k])
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// Per-class subsample of at most `q` ids, classes taken from noisy labels.
pub fn subsample(ds: &Dataset, q: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if q == 0 {
        return Err(Error::Config("subsample size q must be at least 1".into()));
    }
    Ok(subsample_members(&ds.class_members(None), q, seed))
}
