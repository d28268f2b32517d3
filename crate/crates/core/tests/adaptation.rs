use geoshift::adapt::{adapt_all, adapt_fold, folds_for, predict_fold_averaged, AdaptConfig, FoldModels};
use geoshift::dataset::{generate, samples_to_matrix, truths, DatasetBundle, GeneratorConfig, Sample, SplitKind};
use geoshift::metrics::mean_f2;
use geoshift::model::{apply_dropout, bce_with_logits, ModelConfig, Parameters};
use geoshift::optimize::{label_matrix, train_base, AdamState, TrainConfig};
use geoshift::{Matrix, Rng};

fn f2(p: &Parameters, samples: &[Sample]) -> f64 {
    mean_f2(&p.predict(&samples_to_matrix(samples).unwrap()).unwrap(), &truths(samples), 0.5).unwrap()
}

fn reduced(seed: u64) -> (DatasetBundle, Parameters) {
    let bundle = generate(&GeneratorConfig {
        split_sizes: [2000, 500, 500, 500, 500],
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let model = ModelConfig::new(bundle.input_dim(), bundle.num_classes());
    let cfg = TrainConfig {
        max_epochs: 15,
        seed,
        ..TrainConfig::default()
    };
    let base = train_base(&model, &bundle, &cfg).unwrap().params;
    (bundle, base)
}

fn quick_adapt(alpha: f64, seed: u64) -> AdaptConfig {
    AdaptConfig {
        alpha,
        k: 5,
        epochs: 4,
        batches_per_epoch: 25,
        seed,
        ..AdaptConfig::default()
    }
}

#[test]
fn alpha_zero_beats_base_on_the_held_out_fold() {
    let bundle = generate(&GeneratorConfig::default()).unwrap();
    let model = ModelConfig::new(bundle.input_dim(), bundle.num_classes());
    let base = train_base(&model, &bundle, &TrainConfig::default()).unwrap().params;
    let cfg = AdaptConfig::default();
    let folds = folds_for(&bundle, &cfg).unwrap();
    let tuning = bundle.split(SplitKind::TargetTuning);
    let held: Vec<Sample> = folds.fold(0).iter().map(|&i| tuning[i].clone()).collect();
    let adapted = adapt_fold(&base, 0, &folds, &bundle, &cfg).unwrap();
    let (a, b) = (f2(&adapted, &held), f2(&base, &held));
    assert!(a > b, "adapted {a} vs base {b}");
}

#[test]
fn only_head_and_running_stats_change() {
    let (bundle, base) = reduced(1);
    let folds = folds_for(&bundle, &quick_adapt(0.3, 1)).unwrap();
    let frozen = adapt_fold(&base, 1, &folds, &bundle, &AdaptConfig {
        recompute_bn: false,
        ..quick_adapt(0.3, 1)
    })
    .unwrap();
    assert_eq!(frozen.layers, base.layers);
    assert_ne!(frozen.head, base.head);

    let refreshed = adapt_fold(&base, 1, &folds, &bundle, &quick_adapt(0.3, 1)).unwrap();
    for (a, b) in refreshed.layers.iter().zip(&base.layers) {
        assert_eq!(a.weight, b.weight);
        assert_eq!((&a.bias, &a.bn_gamma, &a.bn_beta), (&b.bias, &b.bn_gamma, &b.bn_beta));
        assert_ne!(a.running_mean, b.running_mean);
    }
}

#[test]
fn parallel_folds_equal_sequential_and_survive_disk() {
    let (bundle, base) = reduced(2);
    let cfg = AdaptConfig {
        epochs: 2,
        batches_per_epoch: 5,
        ..quick_adapt(0.5, 2)
    };
    let seq = adapt_all(&base, &bundle, &cfg, 1).unwrap();
    let par = adapt_all(&base, &bundle, &cfg, 3).unwrap();
    assert_eq!(seq, par);
    let dir = tempfile::tempdir().unwrap();
    seq.save(dir.path()).unwrap();
    assert_eq!(FoldModels::load(dir.path()).unwrap(), seq);
}

#[test]
fn fold_average_matches_naive_mean() {
    let cfg = ModelConfig {
        hidden_dims: vec![6],
        ..ModelConfig::new(5, 4)
    };
    let mut rng = Rng::new(3);
    let models: Vec<Parameters> = (0..10).map(|_| Parameters::init(&cfg, &mut rng).unwrap()).collect();
    let x = Matrix::from_vec(7, 5, (0..35).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
    let fm = FoldModels {
        alpha: 0.0,
        seed: 0,
        base_crc: 0,
        models: models.clone(),
    };
    let got = predict_fold_averaged(&fm, &x).unwrap();
    let each: Vec<Matrix> = models.iter().map(|m| m.predict(&x).unwrap()).collect();
    for i in 0..got.data().len() {
        let mean = each.iter().map(|s| s.data()[i]).sum::<f64>() / 10.0;
        assert!((got.data()[i] - mean).abs() <= 1e-15);
        assert!(got.data()[i] > 0.0 && got.data()[i] < 1.0);
    }
    let same = FoldModels {
        models: vec![models[0].clone(); 3],
        ..fm
    };
    assert!(predict_fold_averaged(&same, &x).unwrap().max_abs_diff(&each[0]) <= 1e-15);
}

/// Head fine-tuned on source_train only: no tuning labels, no augmentation.
fn source_head_baseline(base: &Parameters, bundle: &DatasetBundle, steps: usize, seed: u64) -> Parameters {
    let train = bundle.split(SplitKind::SourceTrain);
    let mut p = base.clone();
    let mut rng = Rng::new(seed);
    let mut adam = AdamState::for_arrays(0.001, &p.head_mut());
    for _ in 0..steps {
        let idx: Vec<usize> = (0..64).map(|_| rng.index_below(train.len())).collect();
        let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
        let mut feats = p.features(&samples_to_matrix(&batch).unwrap()).unwrap();
        apply_dropout(&mut feats, p.config.dropout_p, &mut rng);
        let y = label_matrix(&truths(&batch), p.config.num_classes);
        let (_, g) = bce_with_logits(&p.head.logits(&feats).unwrap(), &y).unwrap();
        let (gw, gb) = p.head.gradients(&feats, &g).unwrap();
        adam.apply(&mut p.head_mut(), &[gw.data(), &gb]).unwrap();
    }
    p
}

#[test]
fn alpha_one_matches_a_source_retrained_head() {
    let mut diffs = Vec::new();
    for seed in 0..5 {
        let (bundle, base) = reduced(10 + seed);
        let cfg = quick_adapt(1.0, seed);
        let adapted = adapt_all(&base, &bundle, &cfg, 1).unwrap();
        let eval = bundle.split(SplitKind::TargetEval);
        let x = samples_to_matrix(eval).unwrap();
        let a = mean_f2(&adapted.predict(&x).unwrap(), &truths(eval), 0.5).unwrap();
        let baseline = source_head_baseline(&base, &bundle, cfg.epochs * cfg.batches_per_epoch, seed);
        let b = f2(&baseline, eval);
        diffs.push(a - b);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean.abs() <= 0.05, "alpha=1 minus baseline: {diffs:?}");
}
