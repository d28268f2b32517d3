//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use geoshift::model::{bce_with_logits, ModelConfig, Parameters};
use geoshift::{ImageTensor, LabelSet, Matrix, Rng};

/// Per-sample F2 written straight from the definition.
pub fn naive_f2(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let tp = pred.iter().filter(|c| truth.contains(c)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / pred.len() as f64;
    let r = tp / truth.len() as f64;
    5.0 * p * r / (4.0 * p + r)
}

/// Mean F2 with predictions `score >= threshold`, one sample at a time.
pub fn naive_mean_f2(scores: &Matrix, truths: &[LabelSet], threshold: f64) -> f64 {
    let mut total = 0.0;
    for (r, truth) in truths.iter().enumerate() {
        let mut pred = Vec::new();
        for c in 0..scores.cols() {
            if scores.get(r, c) >= threshold {
                pred.push(c);
            }
        }
        total += naive_f2(&pred, truth.as_slice());
    }
    total / truths.len() as f64
}

/// Learning rate after each score under the plateau rule, simulated from
/// its textual definition.
pub fn simulate_plateau(scores: &[f64], lr0: f64, factor: f64, patience: u32, cooldown: u32, floor: f64) -> Vec<f64> {
    let mut lr = lr0;
    let mut best = f64::NEG_INFINITY;
    let mut bad = 0u32;
    let mut cool = 0u32;
    let mut out = Vec::new();
    for &s in scores {
        let in_cooldown = cool > 0;
        if s > best + 1e-8 {
            best = s;
            bad = 0;
        } else if !in_cooldown {
            bad += 1;
        }
        if in_cooldown {
            cool -= 1;
        }
        if bad > patience {
            lr = f64::max(lr * factor, floor);
            bad = 0;
            cool = cooldown;
        }
        out.push(lr);
    }
    out
}

fn reflect101(i: i64, n: i64) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// 3x3 median by collecting and fully sorting every window.
pub fn brute_median3(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.shape();
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = Vec::new();
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        v.push(img.get(reflect101(y as i64 + dy, h as i64), reflect101(x as i64 + dx, w as i64), ch));
                    }
                }
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.set(y, x, ch, v[4]);
            }
        }
    }
    out
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> ImageTensor {
    ImageTensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.next_f64() as f32).collect()).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// Worst relative error between analytic and central-difference gradients
/// over every trainable scalar, with a fixed dropout mask.
pub fn gradient_check(cfg: &ModelConfig, rows: usize, seed: u64) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let params = Parameters::init(cfg, &mut rng).unwrap();
    let x = random_matrix(rows, cfg.input_dim, &mut rng);
    let targets: Vec<f64> = (0..rows * cfg.num_classes).map(|_| f64::from(rng.bernoulli(0.4) as u8)).collect();
    let y = Matrix::from_vec(rows, cfg.num_classes, targets).unwrap();
    let dropout_seed = rng.next_u64();

    let loss = |p: &Parameters| {
        let mut p = p.clone();
        let (out, _) = p.forward_train(&x, &mut Rng::new(dropout_seed)).unwrap();
        bce_with_logits(&out.logits, &y).unwrap().0
    };
    let mut work = params.clone();
    let (out, cache) = work.forward_train(&x, &mut Rng::new(dropout_seed)).unwrap();
    let (_, grad_logits) = bce_with_logits(&out.logits, &y).unwrap();
    let grads = params.backward(&cache, &grad_logits).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (a, g) in analytic.iter().enumerate() {
        for (i, &ga) in g.iter().enumerate() {
            let mut plus = params.clone();
            plus.trainable_mut()[a][i] += h;
            let mut minus = params.clone();
            minus.trainable_mut()[a][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

/// The ten small model shapes used for gradient checks.
pub fn toy_configs() -> Vec<(ModelConfig, usize)> {
    let mut rng = Rng::new(0x5eed);
    (0..10)
        .map(|_| {
            let input = 2 + rng.index_below(6);
            let depth = 1 + rng.index_below(2);
            let hidden: Vec<usize> = (0..depth).map(|_| 2 + rng.index_below(5)).collect();
            let classes = 1 + rng.index_below(4);
            let cfg = ModelConfig {
                hidden_dims: hidden,
                ..ModelConfig::new(input, classes)
            };
            (cfg, 3 + rng.index_below(6))
        })
        .collect()
}
