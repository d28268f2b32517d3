mod support;

use geoshift::augment::{
    apply_pipeline, apply_pipeline_traced, hsv_to_rgb, median_blur3, rgb_to_hsv, rotate, rotate90, scale, shift,
    AugmentConfig, TransformKind,
};
use geoshift::Rng;

#[test]
fn median_blur_matches_brute_force() {
    let mut rng = Rng::new(11);
    for i in 0..20 {
        let h = 3 + rng.index_below(8);
        let w = 3 + rng.index_below(8);
        let c = if i % 2 == 0 { 3 } else { 1 };
        let mut img = support::random_image(h, w, c, &mut rng);
        if i % 4 == 1 {
            // Repeated values exercise ties.
            for v in img.data_mut() {
                *v = (*v * 4.0).round() / 4.0;
            }
        }
        assert_eq!(median_blur3(&img).unwrap(), support::brute_median3(&img), "image {i} ({h}x{w}x{c})");
    }
}

#[test]
fn hsv_roundtrip_is_tight() {
    let mut rng = Rng::new(12);
    for _ in 0..50 {
        let img = support::random_image(6, 5, 3, &mut rng);
        let back = hsv_to_rgb(&rgb_to_hsv(&img).unwrap()).unwrap();
        let err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "{err}");
    }
}

#[test]
fn shift_is_inverted_on_the_interior() {
    let mut rng = Rng::new(13);
    for _ in 0..30 {
        let (h, w) = (6 + rng.index_below(6), 6 + rng.index_below(6));
        let img = support::random_image(h, w, 3, &mut rng);
        let dx = rng.index_below(3) as i64 - 1;
        let dy = rng.index_below(3) as i64 - 1;
        let back = shift(&shift(&img, dx, dy), -dx, -dy);
        let m = 2;
        for y in m..h - m {
            for x in m..w - m {
                for c in 0..3 {
                    assert_eq!(back.get(y, x, c), img.get(y, x, c));
                }
            }
        }
    }
}

#[test]
fn quarter_rotation_agrees_with_rot90() {
    let img = support::random_image(7, 7, 3, &mut Rng::new(14));
    assert_eq!(rotate(&img, 90.0), rotate90(&img, 1));
    assert_eq!(rotate(&img, 0.0), img);
    assert_eq!(scale(&img, 1.0), img);
}

#[test]
fn pipeline_rates_follow_probabilities() {
    let cfg = AugmentConfig::default();
    let img = support::random_image(8, 8, 3, &mut Rng::new(15));
    let mut rng = Rng::new(16);
    let trials = 10_000;
    let mut counts = [0usize; 10];
    for _ in 0..trials {
        let (out, fired) = apply_pipeline_traced(&img, &cfg, &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (c, f) in counts.iter_mut().zip(fired) {
            *c += f as usize;
        }
    }
    for (kind, &c) in TransformKind::ALL.iter().zip(&counts) {
        let p = kind.default_probability();
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        let rate = c as f64 / trials as f64;
        assert!((rate - p).abs() <= 3.0 * sd, "{kind}: {rate} vs {p}");
    }
}

#[test]
fn pipeline_keeps_shape_on_awkward_images() {
    let mut rng = Rng::new(17);
    let cfg = AugmentConfig::default();
    for (h, w, c) in [(5, 9, 3), (9, 5, 1), (3, 3, 1), (4, 4, 3)] {
        let img = support::random_image(h, w, c, &mut rng);
        for _ in 0..200 {
            assert_eq!(apply_pipeline(&img, &cfg, &mut rng).unwrap().shape(), (h, w, c));
        }
    }
    let img = support::random_image(6, 6, 3, &mut rng);
    assert_eq!(apply_pipeline(&img, &AugmentConfig::disabled(), &mut rng).unwrap(), img);
}
