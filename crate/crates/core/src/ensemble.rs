//! Group averaging and constrained ensemble-weight search.
//!
//! Models inside a group are averaged with equal weights. Groups are then
//! mixed with per-group weights found by exhaustive search over a simplex
//! grid: keep the weight vectors whose stage-1 F2 is within `epsilon` of
//! the best achievable, and among those take the best local-validation F2.

use std::fmt::Write as _;

use crate::adapt::FoldModels;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::metrics::{mean_f2, DEFAULT_THRESHOLD};
use crate::model::Parameters;
use crate::tensor::{mean_of, Matrix};

/// Default weights for the untuned, alpha = 0, 0.5 and 0.9 groups.
pub const DEFAULT_GROUP_WEIGHTS: [f64; 4] = [0.05, 0.6, 0.3, 0.05];

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Member {
    Base(Parameters),
    Folds(FoldModels),
}

impl Member {
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        match self {
            Member::Base(p) => p.predict(batch),
            Member::Folds(f) => f.predict(batch),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Member::Base(_) => None,
            Member::Folds(f) => Some(f.alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    /// `None` for untuned models.
    pub alpha: Option<f64>,
    pub members: Vec<Member>,
}

impl Group {
    pub fn new(name: impl Into<String>, members: Vec<Member>) -> Result<Self> {
        let name = name.into();
        let first = members
            .first()
            .ok_or_else(|| Error::Config(format!("group {name} has no members")))?;
        let alpha = first.alpha();
        if members.iter().any(|m| m.alpha() != alpha) {
            return Err(Error::Config(format!("group {name} mixes members with different alpha")));
        }
        Ok(Group { name, alpha, members })
    }
}

pub fn group_scores(group: &Group, batch: &Matrix) -> Result<Matrix> {
    if group.members.is_empty() {
        return Err(Error::Config(format!("group {} has no members", group.name)));
    }
    let scores = group
        .members
        .iter()
        .map(|m| m.predict(batch))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&scores)
}

pub fn validate_weights(weights: &[f64], groups: usize) -> Result<()> {
    if weights.len() != groups {
        return Err(Error::Config(format!("{} weights for {groups} groups", weights.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("ensemble weights must be finite and nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::Config(format!("ensemble weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `sum_i w_i * scores_i`, accumulated in group order.
pub fn combine_scores(scores: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    validate_weights(weights, scores.len())?;
    let first = &scores[0];
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (s, &w) in scores.iter().zip(weights) {
        if s.shape() != first.shape() {
            return Err(Error::Shape(format!("group scores {:?} vs {:?}", s.shape(), first.shape())));
        }
        for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub groups: Vec<Group>,
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    pub fn new(groups: Vec<Group>, weights: Vec<f64>) -> Result<Self> {
        validate_weights(&weights, groups.len())?;
        Ok(EnsembleSpec { groups, weights })
    }
}

pub fn weighted_scores(spec: &EnsembleSpec, batch: &Matrix) -> Result<Matrix> {
    let scores = spec
        .groups
        .iter()
        .map(|g| group_scores(g, batch))
        .collect::<Result<Vec<_>>>()?;
    combine_scores(&scores, &spec.weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearchConfig {
    pub grid_step: f64,
    /// Allowed stage-1 shortfall from the best grid point.
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for WeightSearchConfig {
    fn default() -> Self {
        WeightSearchConfig {
            grid_step: 0.05,
            epsilon: 0.002,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub weights: Vec<f64>,
    pub stage1_f2: f64,
    pub local_f2: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearch {
    pub points: Vec<GridPoint>,
    pub chosen: usize,
    pub best_stage1: f64,
}

impl WeightSearch {
    pub fn best(&self) -> &GridPoint {
        &self.points[self.chosen]
    }

    /// `w1..wk,stage1_f2,local_f2,feasible`, one row per grid point.
    pub fn report_csv(&self) -> String {
        let k = self.points.first().map_or(0, |p| p.weights.len());
        let mut out = String::new();
        for i in 1..=k {
            let _ = write!(out, "w{i},");
        }
        out.push_str("stage1_f2,local_f2,feasible\n");
        for p in &self.points {
            for w in &p.weights {
                let _ = write!(out, "{w},");
            }
            let _ = writeln!(out, "{},{},{}", p.stage1_f2, p.local_f2, p.feasible);
        }
        out
    }
}

/// Integer compositions of `total` into `parts` nonnegative parts, in
/// lexicographic order.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=remaining {
            prefix.push(first);
            rec(remaining - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    }
    out
}

/// Every weight vector on the simplex grid with spacing `step`, lexicographic.
pub fn simplex_grid(groups: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step} outside (0, 1]")));
    }
    let units = (1.0 / step).round();
    if (units * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    let units = units as usize;
    let grid: Vec<Vec<f64>> = compositions(units, groups)
        .into_iter()
        .map(|c| c.into_iter().map(|u| u as f64 / units as f64).collect())
        .collect();
    if grid.is_empty() {
        return Err(Error::Config("empty weight grid".into()));
    }
    Ok(grid)
}

/// Searches group weights from precomputed per-group score matrices.
pub fn search_weights_on_scores(
    stage1_scores: &[Matrix],
    stage1_truth: &[LabelSet],
    local_scores: &[Matrix],
    local_truth: &[LabelSet],
    cfg: &WeightSearchConfig,
) -> Result<WeightSearch> {
    let g = stage1_scores.len();
    if g < 2 || local_scores.len() != g {
        return Err(Error::Config(format!(
            "weight search needs at least two groups scored on both splits ({g} / {})",
            local_scores.len()
        )));
    }
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::Config("epsilon must be nonnegative".into()));
    }
    let mut points = Vec::new();
    for weights in simplex_grid(g, cfg.grid_step)? {
        let s1 = mean_f2(&combine_scores(stage1_scores, &weights)?, stage1_truth, cfg.threshold)?;
        let local = mean_f2(&combine_scores(local_scores, &weights)?, local_truth, cfg.threshold)?;
        points.push(GridPoint {
            weights,
            stage1_f2: s1,
            local_f2: local,
            feasible: false,
        });
    }
    let best_stage1 = points.iter().map(|p| p.stage1_f2).fold(f64::NEG_INFINITY, f64::max);
    let floor = best_stage1 - cfg.epsilon;
    let mut chosen: Option<usize> = None;
    for i in 0..points.len() {
        points[i].feasible = points[i].stage1_f2 >= floor;
        if !points[i].feasible {
            continue;
        }
        let better = match chosen {
            None => true,
            Some(c) => {
                let (p, q) = (&points[i], &points[c]);
                p.local_f2 > q.local_f2 || (p.local_f2 == q.local_f2 && p.stage1_f2 > q.stage1_f2)
            }
        };
        if better {
            chosen = Some(i);
        }
    }
    Ok(WeightSearch {
        points,
        chosen: chosen.expect("the stage-1 maximizer is always feasible"),
        best_stage1,
    })
}

/// Scores every group on both splits, then runs the grid search.
pub fn search_weights(
    groups: Vec<Group>,
    stage1: (&Matrix, &[LabelSet]),
    local: (&Matrix, &[LabelSet]),
    cfg: &WeightSearchConfig,
) -> Result<(EnsembleSpec, WeightSearch)> {
    let s1 = groups
        .iter()
        .map(|g| group_scores(g, stage1.0))
        .collect::<Result<Vec<_>>>()?;
    let lv = groups
        .iter()
        .map(|g| group_scores(g, local.0))
        .collect::<Result<Vec<_>>>()?;
    let search = search_weights_on_scores(&s1, stage1.1, &lv, local.1, cfg)?;
    let spec = EnsembleSpec::new(groups, search.best().weights.clone())?;
    Ok((spec, search))
}

/// Text form of an ensemble: `group.<name>.weight = <w>` plus one
/// `group.<name>.member = <path>` line per member.
pub fn spec_text(entries: &[(String, f64, Vec<String>)]) -> String {
    let mut out = String::new();
    for (name, weight, members) in entries {
        let _ = writeln!(out, "group.{name}.weight = {weight}");
        for m in members {
            let _ = writeln!(out, "group.{name}.member = {m}");
        }
    }
    out
}

/// Inverse of [`spec_text`]; groups keep their order of first appearance.
pub fn parse_spec_text(text: &str) -> Result<Vec<(String, f64, Vec<String>)>> {
    let mut entries: Vec<(String, Option<f64>, Vec<String>)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("ensemble line {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let rest = key
            .strip_prefix("group.")
            .ok_or_else(|| Error::Format(format!("ensemble key {key:?}")))?;
        let (name, field) = rest
            .rsplit_once('.')
            .ok_or_else(|| Error::Format(format!("ensemble key {key:?}")))?;
        let idx = match entries.iter().position(|e| e.0 == name) {
            Some(i) => i,
            None => {
                entries.push((name.to_string(), None, Vec::new()));
                entries.len() - 1
            }
        };
        match field {
            "weight" => {
                let w = value
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("weight {value:?}")))?;
                entries[idx].1 = Some(w);
            }
            "member" => entries[idx].2.push(value.to_string()),
            other => return Err(Error::Format(format!("unknown ensemble field {other:?}"))),
        }
    }
    let out = entries
        .into_iter()
        .map(|(n, w, m)| {
            w.map(|w| (n.clone(), w, m))
                .ok_or_else(|| Error::Format(format!("group {n} has no weight")))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = out.iter().map(|e| e.1).collect();
    validate_weights(&weights, out.len())?;
    Ok(out)
}
