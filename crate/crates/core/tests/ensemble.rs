mod support;

use geoshift::ensemble::{
    combine_scores, search_weights_on_scores, validate_weights, WeightSearchConfig, DEFAULT_GROUP_WEIGHTS,
};
use geoshift::{LabelSet, Matrix};

fn m(v: &[f64]) -> Matrix {
    Matrix::from_vec(v.len() / 2, 2, v.to_vec()).unwrap()
}

fn sets(v: &[&[usize]]) -> Vec<LabelSet> {
    v.iter().map(|s| LabelSet::new(s.to_vec())).collect()
}

#[test]
fn two_groups_half_step_matches_exhaustive_oracle() {
    let truth1 = sets(&[&[0], &[1], &[0, 1]]);
    let truth2 = sets(&[&[1], &[0], &[1]]);
    let s1 = [m(&[0.9, 0.1, 0.2, 0.8, 0.7, 0.6]), m(&[0.4, 0.3, 0.6, 0.2, 0.1, 0.45])];
    let lv = [m(&[0.2, 0.9, 0.6, 0.1, 0.3, 0.7]), m(&[0.1, 0.2, 0.9, 0.3, 0.2, 0.4])];
    for eps in [0.0, 0.002, 0.2, f64::INFINITY] {
        let cfg = WeightSearchConfig {
            grid_step: 0.5,
            epsilon: eps,
            ..WeightSearchConfig::default()
        };
        let res = search_weights_on_scores(&s1, &truth1, &lv, &truth2, &cfg).unwrap();

        // Oracle: the three grid points, scored with the naive metric loop.
        let grid = [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]];
        let mut scored = Vec::new();
        for w in grid {
            let a = combine_scores(&s1, &w).unwrap();
            let b = combine_scores(&lv, &w).unwrap();
            scored.push((w, support::naive_mean_f2(&a, &truth1, 0.5), support::naive_mean_f2(&b, &truth2, 0.5)));
        }
        let top = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let mut pick: Option<([f64; 2], f64, f64)> = None;
        for &s in &scored {
            if s.1 < top - eps {
                continue;
            }
            pick = match pick {
                Some(p) if p.2 > s.2 || (p.2 == s.2 && p.1 >= s.1) => Some(p),
                _ => Some(s),
            };
        }
        let pick = pick.unwrap();
        assert_eq!(res.points.len(), 3);
        assert_eq!(res.best().weights, pick.0.to_vec(), "eps {eps}");
        assert!((res.best().local_f2 - pick.2).abs() < 1e-12);
    }
}

#[test]
fn dominant_group_takes_all_weight() {
    let truth = sets(&[&[0], &[1], &[0]]);
    let good = m(&[0.9, 0.1, 0.1, 0.9, 0.8, 0.2]);
    let bad = m(&[0.1, 0.9, 0.9, 0.1, 0.2, 0.8]);
    let res = search_weights_on_scores(
        &[bad.clone(), good.clone()],
        &truth,
        &[bad, good],
        &truth,
        &WeightSearchConfig::default(),
    )
    .unwrap();
    assert_eq!(res.best().weights, vec![0.0, 1.0]);
}

#[test]
fn default_weights_form_a_valid_spec() {
    validate_weights(&DEFAULT_GROUP_WEIGHTS, 4).unwrap();
    assert!((DEFAULT_GROUP_WEIGHTS.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}
