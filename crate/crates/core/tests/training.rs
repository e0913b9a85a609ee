use octclass_core::data::{Batch, Split};
use octclass_core::models::{build_model, Architecture, ModelConfig};
use octclass_core::synthetic::{generate_dataset, SyntheticConfig};
use octclass_core::train::{evaluate_split, fit, TrainConfig, TrainHistory, Trainer};
use octclass_core::{ClassLabel, Error, IMAGE_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dark images are AMD, bright ones CNV.
fn blob_batches(n_batches: usize, per_batch: usize, seed: u64) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_batches)
        .map(|_| {
            let mut images = Vec::with_capacity(per_batch * IMAGE_LEN);
            let mut labels = Vec::new();
            for _ in 0..per_batch {
                let bright = rng.random_bool(0.5);
                let level = if bright { 0.7 } else { 0.3 };
                images.extend((0..IMAGE_LEN).map(|_| (level + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)));
                let c = if bright { ClassLabel::Cnv } else { ClassLabel::Amd };
                labels.extend(c.one_hot());
            }
            Batch::new(images, labels).unwrap()
        })
        .collect()
}

#[test]
fn separable_two_class_task_is_learned() {
    let mut cfg = ModelConfig::new(Architecture::TinyCnn).with_seed(3);
    cfg.num_classes = 2;
    let mut model = build_model(&cfg).unwrap();
    let mut trainer = Trainer::new(TrainConfig {
        learning_rate: 1e-2,
        augment: false,
        ..TrainConfig::default()
    })
    .unwrap();
    let data = blob_batches(8, 8, 11);
    let mut acc = 0.0;
    let mut losses = Vec::new();
    for epoch in 1..=5 {
        let (loss, a) = trainer.train_epoch(&mut model, data.iter().cloned().map(Ok), epoch).unwrap();
        losses.push(loss);
        acc = a;
    }
    assert!(acc >= 0.95, "train accuracy {acc}, losses {losses:?}");
    assert!(losses[4] < losses[0]);
}

#[test]
fn labels_outside_the_model_classes_are_rejected() {
    let mut cfg = ModelConfig::new(Architecture::TinyCnn);
    cfg.num_classes = 2;
    let mut model = build_model(&cfg).unwrap();
    let batch = Batch::new(vec![0.5; IMAGE_LEN], ClassLabel::Normal.one_hot().to_vec()).unwrap();
    let mut trainer = Trainer::new(TrainConfig::default()).unwrap();
    assert!(matches!(trainer.step(&mut model, &batch), Err(Error::ShapeMismatch(_))));
}

fn strip_time(h: &TrainHistory) -> TrainHistory {
    let mut h = h.clone();
    h.records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
    h
}

#[test]
fn fit_is_deterministic_and_restores_best() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(
        dir.path(),
        &SyntheticConfig {
            train: 32,
            val: 16,
            test: 8,
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 3,
        batch_size: 8,
        mix_params: octclass_core::augment::MixParams {
            apply_probability: 1.0,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig::new(Architecture::TinyCnn).with_seed(cfg.seeds.model);
    let run = || fit(build_model(&model_cfg).unwrap(), &manifest, &cfg).unwrap();
    let (model_a, hist_a) = run();
    let (model_b, hist_b) = run();
    assert_eq!(strip_time(&hist_a), strip_time(&hist_b));
    assert_eq!(model_a.network().params(), model_b.network().params());
    assert_eq!(hist_a.records.len(), 3);

    let best = hist_a.best().unwrap();
    let again = evaluate_split(&model_a, &manifest, Split::Val, 5).unwrap();
    assert!((again.loss - best.val_loss).abs() < 1e-6);
    assert!((again.accuracy - best.val_acc).abs() < 1e-12);
}

#[test]
fn fit_requires_train_and_val() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(
        dir.path(),
        &SyntheticConfig {
            train: 8,
            val: 0,
            test: 0,
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let model = build_model(&ModelConfig::new(Architecture::TinyCnn)).unwrap();
    assert!(matches!(fit(model, &manifest, &TrainConfig::default()), Err(Error::EmptySplit(s)) if s == "val"));
}
