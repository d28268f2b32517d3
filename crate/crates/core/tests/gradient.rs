mod support;

use geoshift::model::{bce_with_logits, ModelConfig, Parameters};
use geoshift::Rng;

#[test]
fn backprop_matches_central_differences() {
    for (i, (cfg, rows)) in support::toy_configs().into_iter().enumerate() {
        let (worst, checked) = support::gradient_check(&cfg, rows, 100 + i as u64);
        assert!(checked > 0);
        assert!(worst <= 1e-4, "config {i} {cfg:?}: relative error {worst}");
    }
}

#[test]
fn dropout_off_and_default_shapes() {
    let cfg = ModelConfig {
        dropout_p: 0.0,
        hidden_dims: vec![5],
        ..ModelConfig::new(4, 3)
    };
    let (worst, _) = support::gradient_check(&cfg, 6, 7);
    assert!(worst <= 1e-4, "{worst}");
    let (worst, _) = support::gradient_check(&ModelConfig::new(3, 2), 4, 8);
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn linear_bias_before_batchnorm_gets_no_gradient() {
    let cfg = ModelConfig {
        hidden_dims: vec![4],
        ..ModelConfig::new(3, 2)
    };
    let mut rng = Rng::new(3);
    let mut p = Parameters::init(&cfg, &mut rng).unwrap();
    let x = support::random_matrix(5, 3, &mut rng);
    let y = geoshift::Matrix::filled(5, 2, 1.0);
    let (out, cache) = p.forward_train(&x, &mut rng).unwrap();
    let (_, g) = bce_with_logits(&out.logits, &y).unwrap();
    let grads = p.backward(&cache, &g).unwrap();
    assert!(grads.layers[0].bias.iter().all(|v| v.abs() < 1e-12));
}
