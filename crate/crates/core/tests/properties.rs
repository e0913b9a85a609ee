use octclass_core::augment::*;
use octclass_core::data::{make_splits, Batch, DatasetManifest, ManifestEntry, Split};
use octclass_core::metrics::{per_class_metrics, ConfusionMatrix, EvaluationReport};
use octclass_core::nn::ops::softmax_row;
use octclass_core::train::categorical_crossentropy;
use octclass_core::xai::min_max_normalize;
use octclass_core::{ClassLabel, IMAGE_LEN, NUM_CLASSES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n * IMAGE_LEN).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n)
        .flat_map(|_| ClassLabel::ALL[rng.random_range(0..NUM_CLASSES)].one_hot())
        .collect();
    Batch::new(images, labels).unwrap()
}

fn check_labels(b: &Batch) -> Result<(), TestCaseError> {
    for i in 0..b.len() {
        let row = b.label(i);
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmented_labels_are_distributions(n in 1usize..4, seed in any::<u64>(), p in 0.0f64..=1.0) {
        let b = batch(n, seed);
        let params = MixParams { apply_probability: p, ..MixParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        check_labels(&augment_batch(&b, &params, &mut rng).unwrap().batch)?;
        check_labels(&mixup_batch(&b, &params, &mut rng).unwrap().batch)?;
        check_labels(&cutmix_batch(&b, &params, &mut rng).unwrap().batch)?;
    }

    #[test]
    fn cutmix_area_accounting_is_exact(lambda in 0.0f64..=1.0, cx in 0usize..224, cy in 0usize..224, seed in any::<u64>()) {
        let b = batch(2, seed);
        let cut = cutmix_box_at(224, 224, lambda, cx, cy);
        prop_assert!(cut.x0 <= cut.x1 && cut.x1 <= 224 && cut.y0 <= cut.y1 && cut.y1 <= 224);
        let m = cutmix_with(&b, &[1, 0], cut).unwrap();
        let lam = m.provenance[0].lambda;
        prop_assert_eq!((lam * 50176.0).round() as usize + cut.area(), 50176);
        prop_assert_eq!(lam, (50176 - cut.area()) as f64 / 50176.0);
    }

    #[test]
    fn mixup_stays_between_sources(lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let b = batch(2, seed);
        let m = mixup_with(&b, &[1, 0], lambda).unwrap();
        for (i, j) in [(0usize, 1usize), (1, 0)] {
            for ((&v, &a), &c) in m.batch.image(i).iter().zip(b.image(i)).zip(b.image(j)) {
                prop_assert!(a.min(c) <= v && v <= a.max(c));
            }
        }
    }

    #[test]
    fn augmentation_is_deterministic(seed in any::<u64>()) {
        let b = batch(3, seed);
        let params = MixParams { apply_probability: 1.0, ..MixParams::default() };
        let run = || augment_batch(&b, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn zero_probability_is_identity(seed in any::<u64>()) {
        let b = batch(2, seed);
        let params = MixParams { apply_probability: 0.0, ..MixParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(&augment_batch(&b, &params, &mut rng).unwrap().batch, &b);
    }
}

fn confusion_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..50, NUM_CLASSES), NUM_CLASSES)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn f1_identity_and_support(counts in confusion_strategy()) {
        let cm = ConfusionMatrix::from_counts(counts.clone()).unwrap();
        let names: Vec<&str> = ClassLabel::ALL.iter().map(|c| c.name()).collect();
        for (c, m) in per_class_metrics(&cm, &names).unwrap().iter().enumerate() {
            prop_assert!(m.precision.is_finite() && m.recall.is_finite() && m.f1.is_finite());
            let expected = if m.precision + m.recall > 0.0 {
                2.0 * m.precision * m.recall / (m.precision + m.recall)
            } else {
                0.0
            };
            prop_assert!((m.f1 - expected).abs() < 1e-12);
            prop_assert_eq!(m.support, counts[c].iter().sum::<u64>());
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}

proptest! {
    #[test]
    fn accuracy_two_ways(pairs in prop::collection::vec((0usize..8, 0usize..8), 1..200)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = EvaluationReport::from_predictions("m", &t, &p, 8).unwrap();
        let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
        prop_assert_eq!(r.overall_accuracy, correct as f64 / t.len() as f64);
        prop_assert_eq!(r.confusion.iter().flatten().sum::<u64>() as usize, t.len());
    }

    #[test]
    fn metrics_follow_relabeling(
        pairs in prop::collection::vec((0usize..8, 0usize..8), 1..200),
        perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let a = EvaluationReport::from_predictions("m", &t, &p, 8).unwrap();
        let t2: Vec<usize> = t.iter().map(|&i| perm[i]).collect();
        let p2: Vec<usize> = p.iter().map(|&i| perm[i]).collect();
        let b = EvaluationReport::from_predictions("m", &t2, &p2, 8).unwrap();
        prop_assert_eq!(a.overall_accuracy, b.overall_accuracy);
        for c in 0..8 {
            let (x, y) = (&a.classes[c], &b.classes[perm[c]]);
            prop_assert_eq!((x.precision, x.recall, x.f1, x.support), (y.precision, y.recall, y.f1, y.support));
        }
    }

    #[test]
    fn softmax_rows_normalise(logits in prop::collection::vec(-500.0f64..500.0, 2..9)) {
        let p = softmax_row(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn crossentropy_is_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 8), target in 0usize..8) {
        let p = softmax_row(&logits);
        let mut t = vec![0.0; 8];
        t[target] = 1.0;
        let loss = categorical_crossentropy(&[p], &[t]).unwrap();
        prop_assert!(loss >= 0.0 && loss <= -(1e-7f64).ln() + 1e-9);
    }

    #[test]
    fn normalised_maps_are_unit_range(raw in prop::collection::vec(-1e3f64..1e3, 1..300)) {
        let m = min_max_normalize(&raw);
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        let constant = vec![raw[0]; raw.len()];
        prop_assert!(min_max_normalize(&constant).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn splits_partition_every_class(sizes in prop::collection::vec(3usize..40, 8), seed in any::<u64>()) {
        let entries = ClassLabel::ALL
            .iter()
            .zip(&sizes)
            .flat_map(|(&c, &n)| (0..n).map(move |i| ManifestEntry {
                path: format!("{c}/{i}.png").into(),
                class: c,
                split: None,
            }))
            .collect();
        let m = make_splits(&DatasetManifest::from_entries(entries), (0.8, 0.1, 0.1), seed).unwrap();
        prop_assert!(m.entries.iter().all(|e| e.split.is_some()));
        for (c, &n) in ClassLabel::ALL.iter().zip(&sizes) {
            let counts: Vec<usize> = Split::ALL
                .iter()
                .map(|&s| m.entries.iter().filter(|e| e.class == *c && e.split == Some(s)).count())
                .collect();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            prop_assert!(counts.iter().all(|&k| k >= 1));
        }
    }
}
