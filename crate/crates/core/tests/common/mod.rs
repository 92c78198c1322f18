#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use embproto::benchmark::{generate, SynthSpec, Synthetic};
use embproto::dataset::Dataset;
use embproto::prototypes::{select_prototypes, SelectionConfig, SelectionOutcome};
use embproto::trainer::{preliminary_train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Double-precision cosine written as a plain loop.
pub fn brute_cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        let (x, y) = (a[k] as f64, b[k] as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Dataset {
    let embeddings: Vec<f32> = (0..n).flat_map(|_| random_vector(rng, dim)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(dim, classes, embeddings, labels, None, None, None).unwrap()
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian matrix, row-major.
pub fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    rows.into_iter().flatten().collect()
}

pub fn rotate(v: &[f32], rot: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| (0..d).map(|j| rot[i * d + j] * v[j] as f64).sum())
        .collect()
}

/// Applies `x -> scale * R x` to every embedding. Labels and logits are kept.
pub fn transform_dataset(ds: &Dataset, rot: Option<&[f64]>, scale: f64) -> Dataset {
    let mut out = ds.clone();
    for i in 0..ds.n {
        let x = ds.embedding(i);
        let y: Vec<f64> = match rot {
            Some(r) => rotate(x, r),
            None => x.iter().map(|&v| v as f64).collect(),
        };
        for (k, v) in y.into_iter().enumerate() {
            out.embeddings[i * ds.dim + k] = (scale * v) as f32;
        }
    }
    out
}

/// The planted benchmark setting: 3 classes, 200 per class, d = 16,
/// sigma = 1, separation 6 sigma, 10% anomalies.
pub fn planted_spec(noise: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        n_per_class: 200,
        dim: 16,
        classes: 3,
        cluster_sigma: 1.0,
        centroid_distance: 6.0,
        anomaly_frac: 0.1,
        noise_rate: noise,
        seed,
    }
}

/// Generates planted data, fills logits with a preliminary head trained on
/// all samples, and selects prototypes over the whole dataset.
pub fn planted_pipeline(spec: &SynthSpec) -> (Synthetic, SelectionOutcome) {
    let mut synth = generate(spec).unwrap();
    let rows: Vec<usize> = (0..synth.dataset.n).collect();
    let cfg = TrainConfig {
        seed: spec.seed,
        ..Default::default()
    };
    synth.dataset.logits = Some(preliminary_train(&synth.dataset, &rows, &cfg).unwrap());
    let sel = select_prototypes(&synth.dataset, None, &SelectionConfig::default(), spec.seed).unwrap();
    (synth, sel)
}

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli(cwd: &Path, args: &[&str]) -> CliOutput {
    let out = Command::new(env!("CARGO_BIN_EXE_embproto"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// All regular files under `dir` as (relative path, bytes), sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
