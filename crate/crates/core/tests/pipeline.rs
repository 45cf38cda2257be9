use gzsl::autodiff::Scalar;
use gzsl::dataset::{generate_synthetic, Dataset, SyntheticSpec};
use gzsl::eval::{evaluate, report_csv, score};
use gzsl::model::{Checkpoint, Model, ModelConfig};
use gzsl::trainer::{fit_thresholds, train, Precision, TrainConfig};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        seed: 11,
        seen_classes: 4,
        unseen_classes: 2,
        train_per_class: 12,
        test_per_class: 5,
        sequence_length: 20,
        ..SyntheticSpec::default()
    }
}

fn small_model<S: Scalar>(ds: &Dataset) -> Model<S> {
    let config = ModelConfig {
        input_width: ds.manifest.frame_width,
        sequence_length: 20,
        hidden: 12,
        layers: 1,
        prototype_dim: 6,
        seen_classes: 4,
        sae_hidden: 12,
        attributes: ds.table.width(),
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, 2).unwrap();
    model.normalization = ds.manifest.normalization.clone();
    model
}

fn run<S: Scalar>(precision: Precision) {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let (train_view, test) = ds.split_views();
    let config = TrainConfig {
        epochs: 25,
        learning_rate: 0.01,
        precision,
        ..TrainConfig::default()
    };
    let mut model = small_model::<S>(&ds);
    let history = train(&mut model, &train_view, &ds.table, &config).unwrap();
    let (first, last) = (history[0].total, history.last().unwrap().total);
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(history.iter().all(|e| e.total.is_finite()));

    model.thresholds = Some(
        fit_thresholds(&model, &train_view, &ds.table, &config)
            .unwrap()
            .thresholds,
    );
    let report = evaluate(&model, &test, &ds.table).unwrap();
    assert_eq!(report.seen_samples, 20);
    assert_eq!(report.unseen_samples, 10);
    let seen_test: Vec<_> = test
        .iter()
        .copied()
        .filter(|s| ds.table.is_seen(s.class))
        .collect();
    let scored = score(&model, &seen_test).unwrap();
    let hits = scored
        .nearest
        .iter()
        .zip(&scored.truth)
        .filter(|(n, &y)| n.class == y)
        .count();
    // closed-set accuracy; chance is 1/4
    assert!(hits >= 16, "{hits}/20");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.to_checkpoint(Some(&config)).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.train.as_ref(), Some(&config));
    let loaded = Model::<S>::from_checkpoint(&ck).unwrap();
    assert_eq!(loaded.params.checksum(), model.params.checksum());
    let again = evaluate(&loaded, &test, &ds.table).unwrap();
    assert_eq!(report_csv(&[("m", &report)]), report_csv(&[("m", &again)]));
}

#[test]
fn short_training_run_in_f32() {
    run::<f32>(Precision::F32);
}

#[test]
fn short_training_run_in_f64() {
    run::<f64>(Precision::F64);
}

#[test]
fn dataset_survives_save_and_load() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.table, ds.table);
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic(&small_spec()).unwrap();
    let b = generate_synthetic(&small_spec()).unwrap();
    assert_eq!(a.train, b.train);
    let c = generate_synthetic(&SyntheticSpec {
        seed: 12,
        ..small_spec()
    })
    .unwrap();
    assert_ne!(a.train, c.train);
}
