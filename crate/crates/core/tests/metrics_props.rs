mod common;

use common::{brute_cosine, random_dataset, random_rotation, random_vector, rng, rotate};
use embproto::dataset::Dataset;
use embproto::metrics::{
    confidence, cosine_similarity, proximity, scale_logits, similarity_matrix, threshold_s_c, ClassMetrics,
};
use proptest::prelude::*;

fn vec_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1usize..32).prop_flat_map(|d| {
        let v = prop::collection::vec(-100f32..100f32, d)
            .prop_filter("nonzero", |v| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() > 1e-6);
        (v.clone(), v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cosine_matches_brute_force((a, b) in vec_pair()) {
        let s = cosine_similarity(&a, &b).unwrap();
        prop_assert!((s - brute_cosine(&a, &b)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn cosine_is_scale_invariant((a, b) in vec_pair(), k in 1e-3f64..1e3, neg in any::<bool>()) {
        let k = if neg { -k } else { k };
        let scaled: Vec<f32> = a.iter().map(|&x| (x as f64 * k) as f32).collect();
        prop_assume!(scaled.iter().any(|&x| x != 0.0));
        let s = cosine_similarity(&a, &b).unwrap();
        let t = cosine_similarity(&scaled, &b).unwrap();
        let expected = if neg { -s } else { s };
        prop_assert!((t - expected).abs() < 1e-6, "{} vs {}", t, expected);
    }

    #[test]
    fn cosine_is_rotation_invariant(seed in any::<u64>(), d in 2usize..24) {
        let mut r = rng(seed);
        let a = random_vector(&mut r, d);
        let b = random_vector(&mut r, d);
        let rot = random_rotation(&mut r, d);
        let ra: Vec<f32> = rotate(&a, &rot).into_iter().map(|v| v as f32).collect();
        let rb: Vec<f32> = rotate(&b, &rot).into_iter().map(|v| v as f32).collect();
        let s = cosine_similarity(&a, &b).unwrap();
        let t = cosine_similarity(&ra, &rb).unwrap();
        prop_assert!((s - t).abs() < 1e-5, "{} vs {}", s, t);
    }

    #[test]
    fn proximity_is_antitone_in_threshold(seed in any::<u64>(), m in 2usize..40, t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
        let ds = random_dataset(&mut rng(seed), m, 5, 2);
        let ids: Vec<usize> = (0..m).collect();
        let mat = similarity_matrix(&ds, &ids).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let p_lo = proximity(&mat, lo);
        let p_hi = proximity(&mat, hi);
        for i in 0..m {
            prop_assert!(p_lo[i] >= p_hi[i]);
            prop_assert!(p_lo[i].unsigned_abs() as usize <= m);
        }
    }

    #[test]
    fn confidence_ignores_logit_order(raw in prop::collection::vec(-20f64..20.0, 2..10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = raw.clone();
        shuffled.shuffle(&mut rng(seed));
        let a = confidence(&scale_logits(&raw).unwrap()).unwrap();
        let b = confidence(&scale_logits(&shuffled).unwrap()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn confidence_matches_sort_oracle(raw in prop::collection::vec(-20f64..20.0, 2..10)) {
        let scaled = scale_logits(&raw).unwrap();
        let mut sorted = scaled.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(confidence(&scaled).unwrap(), sorted[0] - sorted[1]);
        let min = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if raw.iter().all(|&v| v == raw[0]) {
            prop_assert!(scaled.iter().all(|&v| v == 0.5));
        } else {
            prop_assert_eq!((min, max), (0.0, 1.0));
        }
    }

    #[test]
    fn threshold_matches_sort_oracle(seed in any::<u64>(), m in 2usize..30, p in 0.5f64..99.5) {
        let ds = random_dataset(&mut rng(seed), m, 4, 2);
        let ids: Vec<usize> = (0..m).collect();
        let mat = similarity_matrix(&ds, &ids).unwrap();
        let mut upper = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                upper.push(mat.get(i, j));
            }
        }
        upper.sort_by(f64::total_cmp);
        let k = upper.len();
        // Smallest value with at least p% of entries at or below it.
        let oracle = *upper
            .iter()
            .find(|&&v| upper.iter().filter(|&&u| u <= v).count() as f64 >= p / 100.0 * k as f64)
            .unwrap();
        prop_assert_eq!(threshold_s_c(&mat, p).unwrap(), oracle);
    }
}

#[test]
fn matrix_matches_brute_force_up_to_200() {
    let mut r = rng(11);
    for &m in &[2usize, 3, 17, 64, 200] {
        let ds = random_dataset(&mut r, m, 12, 3);
        let ids: Vec<usize> = (0..m).rev().collect();
        let mat = similarity_matrix(&ds, &ids).unwrap();
        assert_eq!(mat.len(), m);
        for a in 0..m {
            assert_eq!(mat.get(a, a), 1.0);
            for b in 0..m {
                assert_eq!(mat.get(a, b), mat.get(b, a));
                if a != b {
                    let want = brute_cosine(ds.embedding(ids[a]), ds.embedding(ids[b]));
                    assert!((mat.get(a, b) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn threshold_worked_example() {
    // Upper triangle of a 3x3 matrix is [0.1, 0.5, 0.9]; the 20th percentile
    // by nearest rank is the first entry, the 50th is the second.
    let ds = Dataset::new(
        2,
        2,
        vec![1.0, 0.0, 0.1, (1.0f32 - 0.01).sqrt(), 0.9, (1.0f32 - 0.81).sqrt()],
        vec![0, 0, 0],
        None,
        None,
        None,
    )
    .unwrap();
    let mat = similarity_matrix(&ds, &[0, 1, 2]).unwrap();
    let upper = mat.upper_triangle();
    let mut sorted = upper.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(threshold_s_c(&mat, 20.0).unwrap(), sorted[0]);
    assert_eq!(threshold_s_c(&mat, 50.0).unwrap(), sorted[1]);
    assert_eq!(threshold_s_c(&mat, 99.0).unwrap(), sorted[2]);
    assert!(threshold_s_c(&mat, 0.0).is_err());
    assert!(threshold_s_c(&mat, 100.0).is_err());
}

#[test]
fn proximity_worked_example() {
    // Four samples: two pairs of near-duplicates pointing in opposite
    // directions. With s_c = 0 each sample has itself and its twin above and
    // the other pair below, so every proximity is 2 - 2 = 0.
    let ds = Dataset::new(
        2,
        2,
        vec![1.0, 0.1, 1.0, -0.1, -1.0, 0.1, -1.0, -0.1],
        vec![0, 0, 0, 0],
        None,
        None,
        None,
    )
    .unwrap();
    let mat = similarity_matrix(&ds, &[0, 1, 2, 3]).unwrap();
    assert_eq!(proximity(&mat, 0.0), vec![0, 0, 0, 0]);
    assert_eq!(proximity(&mat, -1.5), vec![4, 4, 4, 4]);
    assert_eq!(proximity(&mat, 1.0), vec![-3, -3, -3, -3]);
}

#[test]
fn matrix_needs_two_samples() {
    let ds = random_dataset(&mut rng(0), 3, 3, 2);
    assert!(similarity_matrix(&ds, &[1]).is_err());
    assert!(similarity_matrix(&ds, &[0, 7]).is_err());
}

#[test]
fn results_identical_across_thread_counts() {
    let mut r = rng(5);
    let mut ds = random_dataset(&mut r, 150, 10, 3);
    ds.logits = Some((0..150 * 3).map(|k| ((k * 37 % 101) as f32) / 10.0).collect());
    let ids: Vec<usize> = (0..150).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| ClassMetrics::compute(&ds, &ids, 20.0).unwrap())
    };
    let one = run(1);
    for t in [2, 4, 7] {
        let other = run(t);
        assert_eq!(one.matrix, other.matrix);
        assert_eq!(one.s_c.to_bits(), other.s_c.to_bits());
        assert_eq!(one.proximity, other.proximity);
        assert_eq!(one.confidence, other.confidence);
    }
}
