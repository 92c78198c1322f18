use std::fs;

use embproto::dataset::{
    load_dataset, save_dataset, subsample_members, Dataset, EMBEDDINGS_FILE, LABELS_FILE, LOGITS_FILE, META_FILE,
};
use embproto::Error;
use proptest::prelude::*;

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..12, 1usize..6, 2usize..5, any::<bool>(), any::<bool>()).prop_flat_map(
        |(n, dim, classes, with_logits, with_clean)| {
            let nonzero = prop_oneof![-1e6f32..-1e-6f32, 1e-6f32..1e6f32];
            (
                prop::collection::vec(nonzero, n * dim),
                prop::collection::vec(0..classes, n),
                prop::collection::vec(0..classes, n),
                prop::collection::vec(-50f32..50f32, n * classes),
            )
                .prop_map(move |(emb, noisy, clean, logits)| {
                    Dataset::new(
                        dim,
                        classes,
                        emb,
                        noisy,
                        with_clean.then_some(clean),
                        with_logits.then_some(logits),
                        None,
                    )
                    .unwrap()
                })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(
            back.embeddings.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ds.embeddings.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn truncated_or_padded_blobs_rejected(ds in dataset_strategy(), cut in 1usize..8, pad in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let name = if ds.logits.is_some() && cut % 2 == 0 { LOGITS_FILE } else { EMBEDDINGS_FILE };
        let path = dir.path().join(name);
        let mut bytes = fs::read(&path).unwrap();
        if pad {
            bytes.extend(std::iter::repeat_n(0u8, cut));
        } else {
            bytes.truncate(bytes.len().saturating_sub(cut));
        }
        fs::write(&path, bytes).unwrap();
        let is_size_mismatch = matches!(load_dataset(dir.path()), Err(Error::SizeMismatch { .. }));
        prop_assert!(is_size_mismatch);
    }

    #[test]
    fn corrupted_values_rejected(ds in dataset_strategy(), row in 0usize..12, nan in any::<bool>()) {
        let row = row % ds.n;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(EMBEDDINGS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let start = row * ds.dim * 4;
        for k in 0..ds.dim {
            let v = if nan { f32::NAN } else { 0.0 };
            bytes[start + 4 * k..start + 4 * k + 4].copy_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let expected = if nan { "non-finite" } else { "zero-norm" };
        prop_assert!(err.to_string().contains(expected), "{}", err);
    }
}

fn saved_toy() -> tempfile::TempDir {
    let ds = Dataset::new(
        2,
        3,
        vec![1.0, 2.0, -1.0, 0.5, 0.25, 0.25],
        vec![0, 2, 1],
        Some(vec![0, 1, 1]),
        Some(vec![0.0; 9]),
        Some(vec!["a".into(), "b".into(), "c".into()]),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    dir
}

#[test]
fn meta_layout_is_exact() {
    let dir = saved_toy();
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(META_FILE)).unwrap()).unwrap();
    assert_eq!(meta["n"], 3);
    assert_eq!(meta["dim"], 2);
    assert_eq!(meta["classes"], 3);
    assert_eq!(meta["has_logits"], true);
    assert_eq!(meta["has_clean_labels"], true);
    assert_eq!(meta["class_names"], serde_json::json!(["a", "b", "c"]));
    let labels: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap()).unwrap();
    assert_eq!(labels["noisy"], serde_json::json!([0, 2, 1]));
    assert_eq!(labels["clean"], serde_json::json!([0, 1, 1]));
    let emb = fs::read(dir.path().join(EMBEDDINGS_FILE)).unwrap();
    assert_eq!(&emb[..8], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40]);
    assert_eq!(fs::read(dir.path().join(LOGITS_FILE)).unwrap().len(), 36);
}

#[test]
fn label_out_of_range_rejected() {
    let dir = saved_toy();
    fs::write(dir.path().join(LABELS_FILE), r#"{"noisy":[0,3,1],"clean":[0,1,1]}"#).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn label_count_mismatch_rejected() {
    let dir = saved_toy();
    fs::write(dir.path().join(LABELS_FILE), r#"{"noisy":[0,1],"clean":[0,1,1]}"#).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn missing_logits_blob_rejected() {
    let dir = saved_toy();
    fs::remove_file(dir.path().join(LOGITS_FILE)).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn zero_n_meta_rejected() {
    let dir = saved_toy();
    fs::write(
        dir.path().join(META_FILE),
        r#"{"n":0,"dim":2,"classes":3,"has_logits":false,"has_clean_labels":false,"class_names":["a","b","c"]}"#,
    )
    .unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset)));
}

#[test]
fn subsample_is_uniform_across_seeds() {
    // 10k seeds, q = 5 of a 20-member class; chi-squared with 19 degrees of
    // freedom must stay below the p = 0.001 critical value 43.82.
    let members = vec![(100..120).collect::<Vec<usize>>()];
    let mut counts = [0usize; 20];
    for seed in 0..10_000u64 {
        let picked = subsample_members(&members, 5, seed);
        assert_eq!(picked[0].len(), 5);
        for &i in &picked[0] {
            counts[i - 100] += 1;
        }
    }
    let expected = 10_000.0 * 5.0 / 20.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 43.82, "chi2 = {chi2}");
}
