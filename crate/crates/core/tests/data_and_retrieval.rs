mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use metric_distill::data::{
    degrade, export_csv_dataset, gen_synthetic_clusters, gen_synthetic_grids, load_csv_dataset, split_classes_half,
    DegradationSpec, SyntheticSpec,
};
use metric_distill::eval::recall_at_k;
use metric_distill::sampling::{make_batch, mine_hard_negatives, ClassPool};
use metric_distill::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Points on a small integer lattice so that distance ties are common.
fn lattice_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(0..4) as f64).collect()).collect()
}

/// Labels with every class holding at least two members.
fn paired_labels(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i / 2) as u32 % classes).collect();
    for l in labels.iter_mut().skip(2 * classes as usize) {
        *l = rng.random_range(0..classes);
    }
    labels
}

#[test]
fn recall_matches_sorting_oracle_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ks = [1, 2, 3, 5, 8, 16, 50, 400];
    for trial in 0..100 {
        let n = rng.random_range(4..=200);
        let classes = rng.random_range(2..=(n as u32 / 2).min(12));
        let d = rng.random_range(1..4);
        let emb = if trial % 2 == 0 { lattice_rows(&mut rng, n, d) } else { random_rows(&mut rng, n, d, 1.0) };
        let labels = paired_labels(&mut rng, n, classes);
        let report = recall_at_k(&tensor_of(&emb), &labels, &ks).unwrap();
        let mut previous = 0.0;
        for &k in &ks {
            let got = report.recall(k).unwrap();
            assert_eq!(got, recall_oracle(&emb, &labels, k), "trial {trial} k {k}");
            assert!(got >= previous);
            previous = got;
        }
        assert_eq!(report.recall(400), Some(1.0));
    }
}

#[test]
fn mining_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let n = rng.random_range(4..24);
        let classes = rng.random_range(2..=(n as u32 / 2).min(6));
        let d = rng.random_range(1..4);
        let emb = lattice_rows(&mut rng, n, d);
        let labels = paired_labels(&mut rng, n, classes);
        let got: Vec<(usize, usize, usize)> = mine_hard_negatives(&tensor_of(&emb), &labels)
            .unwrap()
            .into_iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect();
        assert_eq!(got, mining_oracle(&emb, &labels));
    }
}

proptest! {
    #[test]
    fn balanced_batches_hold_their_composition(
        classes in 8u32..20,
        per_class in 4usize..12,
        seed in any::<u64>()
    ) {
        let labels: Vec<u32> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let all: Vec<usize> = (0..labels.len()).collect();
        let pool = ClassPool::new(&labels, &all);
        let batch = make_batch(&pool, 32, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &batch {
            *counts.entry(labels[i]).or_default() += 1;
        }
        prop_assert_eq!(counts.len(), 8);
        prop_assert!(counts.values().all(|&c| c == 4));
        prop_assert_eq!(batch.iter().collect::<BTreeSet<_>>().len(), 32);
    }

    #[test]
    fn class_split_is_disjoint_and_covering(classes in 2usize..30, per_class in 2usize..15, seed in any::<u64>()) {
        let labels: Vec<u32> = (0..classes as u32).flat_map(|c| std::iter::repeat_n(c * 3, per_class)).collect();
        let features = Tensor::zeros(&[labels.len(), 1]);
        let ds = metric_distill::data::Dataset::new("p", features, labels.clone()).unwrap();
        let split_ds = split_classes_half(&ds, seed).unwrap();
        let split = split_ds.split().unwrap();
        let train: BTreeSet<u32> = split.train_classes.iter().copied().collect();
        let test: BTreeSet<u32> = split.test_classes.iter().copied().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), classes);
        prop_assert_eq!(train.len(), classes.div_ceil(2));
        prop_assert!(train.iter().all(|t| test.iter().all(|s| t < s)));
        let mut seen: Vec<usize> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
        prop_assert!(split.test.iter().all(|&i| test.contains(&labels[i])));
        prop_assert!(split.train.iter().chain(&split.validation).all(|&i| train.contains(&labels[i])));
    }
}

#[test]
fn sample_spread_follows_chi_distribution() {
    for (intra_std, dim) in [(0.5, 32), (3.0, 32), (1.0, 8)] {
        let per_class = 400;
        let ds = gen_synthetic_clusters(&SyntheticSpec {
            num_classes: 4,
            per_class,
            input_dim: dim,
            intra_std,
            inter_scale: 5.0,
            seed: 3,
        })
        .unwrap();
        let rows = rows_of(ds.features());
        let mut mean_dist = 0.0;
        for class in 0..4 {
            let members = &rows[class * per_class..(class + 1) * per_class];
            let centre: Vec<f64> = (0..dim)
                .map(|k| members.iter().map(|r| r[k]).sum::<f64>() / per_class as f64)
                .collect();
            mean_dist += members.iter().map(|r| dist(r, &centre)).sum::<f64>();
        }
        mean_dist /= (4 * per_class) as f64;
        let expected = intra_std * (dim as f64).sqrt();
        assert!((mean_dist / expected - 1.0).abs() < 0.1, "{mean_dist} vs {expected}");
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let spec = SyntheticSpec { seed: 42, ..Default::default() };
    assert_eq!(gen_synthetic_clusters(&spec).unwrap(), gen_synthetic_clusters(&spec).unwrap());
    assert_ne!(
        gen_synthetic_clusters(&spec).unwrap().features(),
        gen_synthetic_clusters(&SyntheticSpec { seed: 43, ..spec }).unwrap().features()
    );
    let a = gen_synthetic_grids(4, 3, (2, 4, 4), 0.3, 7).unwrap();
    assert_eq!(a, gen_synthetic_grids(4, 3, (2, 4, 4), 0.3, 7).unwrap());
    assert_eq!(a.sample_shape(), &[2, 4, 4]);
}

#[test]
fn degradations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random_tensor(&mut rng, &[3, 6, 4], 2.0);
    let low = DegradationSpec::LowRes { factor: 2 };
    let once = degrade(&grid, &low, 0).unwrap();
    assert_eq!(degrade(&once, &low, 99).unwrap(), once);
    assert_eq!(once.shape(), grid.shape());
    assert!(degrade(&grid, &DegradationSpec::LowRes { factor: 4 }, 0).is_err());
    assert!(degrade(&Tensor::zeros(&[8]), &low, 0).is_err());

    let v = random_tensor(&mut rng, &[32], 2.0);
    let tiny = degrade(&v, &DegradationSpec::Noise { sigma: 1e-15 }, 5).unwrap();
    assert!(tiny.data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    let noisy = DegradationSpec::Noise { sigma: 0.5 };
    assert_eq!(degrade(&v, &noisy, 5).unwrap(), degrade(&v, &noisy, 5).unwrap());
    assert_ne!(degrade(&v, &noisy, 5).unwrap(), degrade(&v, &noisy, 6).unwrap());

    let masked = degrade(&v, &DegradationSpec::Mask { fraction: 0.25 }, 1).unwrap();
    assert_eq!(masked.data().iter().filter(|&&x| x == 0.0).count(), 8);
    assert!(masked.data().iter().zip(v.data()).all(|(m, x)| *m == 0.0 || m == x));
    for bad in [
        DegradationSpec::LowRes { factor: 1 },
        DegradationSpec::Noise { sigma: 0.0 },
        DegradationSpec::Mask { fraction: 1.0 },
        DegradationSpec::Mask { fraction: 0.0 },
    ] {
        assert!(degrade(&v, &bad, 0).is_err(), "{bad:?}");
    }
}

#[test]
fn degradation_specs_round_trip_as_text() {
    for spec in [
        DegradationSpec::LowRes { factor: 3 },
        DegradationSpec::Noise { sigma: 0.125 },
        DegradationSpec::Mask { fraction: 0.3 },
    ] {
        assert_eq!(spec.to_string().parse::<DegradationSpec>().unwrap(), spec);
    }
    assert!("blur:2".parse::<DegradationSpec>().is_err());
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut ds = gen_synthetic_clusters(&SyntheticSpec { num_classes: 5, per_class: 4, input_dim: 3, ..Default::default() }).unwrap();
    ds.name = "roundtrip".into();
    export_csv_dataset(&ds, &path).unwrap();
    let back = load_csv_dataset(&path).unwrap();
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.labels(), ds.labels());
}

#[test]
fn csv_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let ragged = write("ragged.csv", "# label,f0,f1\n0,1.0,2.0\n0,1.5,2.5\n1,3.0\n1,3.0,4.0\n");
    let err = load_csv_dataset(&ragged).unwrap_err().to_string();
    assert!(err.contains(".csv:4:"), "{err}");

    let text = write("text.csv", "0,1.0\n0,x\n1,2\n1,3\n");
    let err = load_csv_dataset(&text).unwrap_err().to_string();
    assert!(err.contains(".csv:2:"), "{err}");

    let singleton = write("single.csv", "0,1.0\n0,1.0\n1,2.0\n");
    let err = load_csv_dataset(&singleton).unwrap_err().to_string();
    assert!(err.contains(".csv:3:") && err.contains("class 1"), "{err}");

    assert!(load_csv_dataset(dir.path().join("missing.csv")).is_err());
}
