use geoshift::checkpoint::encode_checkpoint;
use geoshift::dataset::{generate, samples_to_matrix, truths, GeneratorConfig, SplitKind};
use geoshift::metrics::mean_f2;
use geoshift::model::ModelConfig;
use geoshift::optimize::{train_base, train_base_on, TrainConfig};

fn small_bundle(seed: u64) -> geoshift::dataset::DatasetBundle {
    generate(&GeneratorConfig {
        split_sizes: [600, 200, 100, 100, 100],
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

#[test]
fn fifty_samples_can_be_memorized() {
    let bundle = small_bundle(1);
    let train = &bundle.split(SplitKind::SourceTrain)[..50];
    let model = ModelConfig::new(bundle.input_dim(), bundle.num_classes());
    let cfg = TrainConfig {
        batch_size: 25,
        max_epochs: 300,
        lr: 0.01,
        early_stop_patience: 300,
        ..TrainConfig::default()
    };
    let out = train_base_on(&model, train, train, &cfg).unwrap();
    let f2 = mean_f2(&out.params.predict(&samples_to_matrix(train).unwrap()).unwrap(), &truths(train), 0.5).unwrap();
    assert!(f2 >= 0.95, "train F2 {f2}");
}

#[test]
fn desk_training_loss_trends_down() {
    let bundle = generate(&GeneratorConfig::default()).unwrap();
    let model = ModelConfig::new(bundle.input_dim(), bundle.num_classes());
    let out = train_base(&model, &bundle, &TrainConfig::default()).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
    assert!(losses.len() >= 20, "stopped after {} epochs", losses.len());
    assert!(losses.iter().all(|l| l.is_finite()));
    let avg: Vec<f64> = losses[..20].windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, pair) in avg.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "moving average rose at window {i}: {avg:?}");
    }
    let best = out.history[out.best_epoch - 1].val_f2;
    assert!(out.history.iter().all(|r| r.val_f2 <= best));
    assert!(best > 0.5, "validation F2 {best}");
}

#[test]
fn training_is_deterministic() {
    let bundle = small_bundle(2);
    let model = ModelConfig::new(bundle.input_dim(), bundle.num_classes());
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train_base(&model, &bundle, &cfg).unwrap();
    let b = train_base(&model, &bundle, &cfg).unwrap();
    assert_eq!(encode_checkpoint(&a.params), encode_checkpoint(&b.params));
    assert_eq!(a.history, b.history);
    let c = train_base(&model, &bundle, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(encode_checkpoint(&a.params), encode_checkpoint(&c.params));
}
