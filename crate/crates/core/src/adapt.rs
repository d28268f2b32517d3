//! Last-layer adaptation to the target distribution.
//!
//! The tuning set is dealt into `k` folds. For each fold a copy of the base
//! model gets a fresh head that is trained on the remaining folds mixed with
//! source-validation samples (each batch slot comes from source with
//! probability `alpha`). Trunk weights never change; batchnorm statistics
//! can be re-estimated on the same mixture first. The head kept for each
//! fold is the one with the best F2 on that fold's held-out samples, and
//! predictions average the `k` models.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::augment::{apply_pipeline, AugmentConfig};
use crate::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use crate::dataset::{samples_to_matrix, truths, DatasetBundle, Sample, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::{mean_f2, DEFAULT_THRESHOLD};
use crate::model::{apply_dropout, bce_with_logits, Parameters};
use crate::optimize::{label_matrix, AdamState, MixedSampler};
use crate::rng::Rng;
use crate::tensor::{images_to_matrix, mean_of, Matrix};

/// Partition of the tuning set, as indices into the tuning split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuningFolds {
    folds: Vec<Vec<usize>>,
    total: usize,
}

impl TuningFolds {
    /// Checks the folds are disjoint, cover `0..total` and differ in size by at most one.
    pub fn new(folds: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(total);
        for &i in folds.iter().flatten() {
            if i >= total || !seen.insert(i) {
                return Err(Error::Config(format!("fold index {i} repeated or out of range")));
            }
        }
        if seen.len() != total {
            return Err(Error::Config("folds do not cover the tuning set".into()));
        }
        let min = folds.iter().map(Vec::len).min().unwrap_or(0);
        let max = folds.iter().map(Vec::len).max().unwrap_or(0);
        if max - min > 1 {
            return Err(Error::Config(format!("fold sizes range from {min} to {max}")));
        }
        Ok(TuningFolds { folds, total })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, i: usize) -> &[usize] {
        &self.folds[i]
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    /// Indices outside fold `i`, ascending.
    pub fn training_indices(&self, i: usize) -> Vec<usize> {
        let held: HashSet<usize> = self.folds[i].iter().copied().collect();
        (0..self.total).filter(|j| !held.contains(j)).collect()
    }

    pub fn sample_ids<'a>(&self, i: usize, tuning: &'a [Sample]) -> Vec<&'a str> {
        self.folds[i].iter().map(|&j| tuning[j].sample_id.as_str()).collect()
    }
}

/// Shuffles the tuning indices and deals them round-robin into `k` folds.
pub fn make_folds(n: usize, k: usize, rng: &mut Rng) -> Result<TuningFolds> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("{k} folds for {n} tuning samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    TuningFolds::new(folds, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub k: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reinit_head: bool,
    pub recompute_bn: bool,
    /// Mixed batches drawn to re-estimate batchnorm statistics.
    pub bn_batches: usize,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.0,
            k: 10,
            epochs: 8,
            batches_per_epoch: 50,
            batch_size: 64,
            lr: 0.001,
            reinit_head: false,
            recompute_bn: true,
            bn_batches: 16,
            augment: Some(AugmentConfig::default()),
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("adaptation epochs and batch sizes must be positive".into()));
        }
        if self.recompute_bn && self.bn_batches == 0 {
            return Err(Error::Config("batchnorm re-estimation needs at least one batch".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("adaptation learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Streams derived from the adaptation seed: one for fold assignment and a
/// parent draw from which fold `i` derives its own generator.
fn seed_streams(seed: u64) -> (Rng, u64) {
    let mut root = Rng::new(seed);
    let folds = root.split(0);
    (folds, root.next_u64())
}

pub fn folds_for(bundle: &DatasetBundle, cfg: &AdaptConfig) -> Result<TuningFolds> {
    let (mut rng, _) = seed_streams(cfg.seed);
    make_folds(bundle.split(SplitKind::TargetTuning).len(), cfg.k, &mut rng)
}

/// Draws one mixed batch and returns its (possibly augmented) inputs and labels.
fn mixed_batch(
    sampler: &mut MixedSampler<'_, Sample>,
    augment: Option<&AugmentConfig>,
    num_classes: usize,
) -> Result<(Matrix, Matrix)> {
    let draw = sampler.draw_u64();
    let batch = sampler.next_batch();
    let x = match augment {
        Some(aug) => {
            let images = batch
                .iter()
                .enumerate()
                .map(|(slot, s)| apply_pipeline(&s.image, aug, &mut Rng::derive(draw, slot as u64)))
                .collect::<Result<Vec<_>>>()?;
            images_to_matrix(&images)?
        }
        None => images_to_matrix(batch.iter().map(|s| &s.image))?,
    };
    let labels: Vec<_> = batch.iter().map(|s| s.labels.clone()).collect();
    Ok((x, label_matrix(&labels, num_classes)))
}

/// Adapts `base` on every tuning fold except `fold_index`.
pub fn adapt_fold(
    base: &Parameters,
    fold_index: usize,
    folds: &TuningFolds,
    bundle: &DatasetBundle,
    cfg: &AdaptConfig,
) -> Result<Parameters> {
    cfg.validate()?;
    if fold_index >= folds.k() {
        return Err(Error::Config(format!("fold {fold_index} of {}", folds.k())));
    }
    let tuning = bundle.split(SplitKind::TargetTuning);
    let source = bundle.split(SplitKind::SourceVal);
    let pool: Vec<Sample> = folds
        .training_indices(fold_index)
        .into_iter()
        .map(|i| tuning[i].clone())
        .collect();
    let held: Vec<Sample> = folds.fold(fold_index).iter().map(|&i| tuning[i].clone()).collect();
    let num_classes = base.config.num_classes;

    let (_, parent) = seed_streams(cfg.seed);
    let mut rng = Rng::derive(parent, fold_index as u64);
    let mut params = if cfg.reinit_head {
        base.reinit_head(&mut rng.split(0))
    } else {
        base.clone()
    };

    // Trunk weights are frozen, so the statistics depend only on the input
    // mixture and can be settled before the head sees any batch.
    if cfg.recompute_bn {
        let mut sampler = MixedSampler::new(cfg.alpha, source, &pool, cfg.batch_size, rng.split(1))?;
        let stream = (0..cfg.bn_batches)
            .map(|_| mixed_batch(&mut sampler, cfg.augment.as_ref(), num_classes).map(|(x, _)| x))
            .collect::<Result<Vec<_>>>()?;
        params = params.recompute_bn_stats(stream)?;
    }

    let held_features = params.features(&samples_to_matrix(&held)?)?;
    let held_truth = truths(&held);
    let mut sampler = MixedSampler::new(cfg.alpha, source, &pool, cfg.batch_size, rng.split(2))?;
    let mut dropout_rng = rng.split(3);
    let mut adam = AdamState::for_arrays(cfg.lr, &params.head_mut());
    let mut best: Option<(f64, crate::model::Head)> = None;

    for _ in 0..cfg.epochs {
        for _ in 0..cfg.batches_per_epoch {
            let (x, y) = mixed_batch(&mut sampler, cfg.augment.as_ref(), num_classes)?;
            let mut features = params.features(&x)?;
            apply_dropout(&mut features, params.config.dropout_p, &mut dropout_rng);
            let logits = params.head.logits(&features)?;
            let (loss, grad) = bce_with_logits(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric("non-finite adaptation loss".into()));
            }
            let (gw, gb) = params.head.gradients(&features, &grad)?;
            adam.apply(&mut params.head_mut(), &[gw.data(), &gb])?;
        }
        let scores = params.head.logits(&held_features)?.map(crate::model::sigmoid);
        let f2 = mean_f2(&scores, &held_truth, cfg.threshold)?;
        if best.as_ref().is_none_or(|(b, _)| f2 > *b) {
            best = Some((f2, params.head.clone()));
        }
    }
    params.head = best.expect("at least one epoch").1;
    Ok(params)
}

/// The `k` adapted models obtained from one base model and one `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldModels {
    pub alpha: f64,
    pub seed: u64,
    pub base_crc: u32,
    pub models: Vec<Parameters>,
}

/// Runs [`adapt_fold`] for every fold, on up to `jobs` threads. The result
/// does not depend on `jobs`.
pub fn adapt_all(base: &Parameters, bundle: &DatasetBundle, cfg: &AdaptConfig, jobs: usize) -> Result<FoldModels> {
    cfg.validate()?;
    let folds = folds_for(bundle, cfg)?;
    let k = folds.k();
    let jobs = jobs.clamp(1, k);
    let mut results: Vec<Option<Result<Parameters>>> = (0..k).map(|_| None).collect();
    if jobs == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(adapt_fold(base, i, &folds, bundle, cfg));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let folds = &folds;
                    scope.spawn(move || {
                        (w..k)
                            .step_by(jobs)
                            .map(|i| (i, adapt_fold(base, i, folds, bundle, cfg)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("fold worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let models = results
        .into_iter()
        .map(|r| r.expect("every fold assigned"))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldModels {
        alpha: cfg.alpha,
        seed: cfg.seed,
        base_crc: crc32fast::hash(&encode_checkpoint(base)),
        models,
    })
}

/// Mean of the fold models' eval-mode scores.
pub fn predict_fold_averaged(fm: &FoldModels, batch: &Matrix) -> Result<Matrix> {
    if fm.models.is_empty() {
        return Err(Error::EmptyInput("no fold models".into()));
    }
    let scores = fm
        .models
        .iter()
        .map(|m| m.predict(batch))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&scores)
}

impl FoldModels {
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        predict_fold_averaged(self, batch)
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k = {}", self.models.len());
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "base_crc = {:08x}", self.base_crc);
        out
    }

    /// Writes `fold_<i>.gsck` files and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.models.iter().enumerate() {
            save_checkpoint(m, &dir.join(format!("fold_{i}.gsck")))?;
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut k = None;
        let mut alpha = None;
        let mut seed = None;
        let mut base_crc = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {line:?}")))?;
            let value = value.trim();
            let bad = || Error::Format(format!("manifest value {value:?} for {}", key.trim()));
            match key.trim() {
                "k" => k = Some(value.parse::<usize>().map_err(|_| bad())?),
                "alpha" => alpha = Some(value.parse::<f64>().map_err(|_| bad())?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                "base_crc" => base_crc = Some(u32::from_str_radix(value, 16).map_err(|_| bad())?),
                other => return Err(Error::Format(format!("unknown manifest key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Format(format!("manifest lacks {what}"));
        let k = k.ok_or_else(|| missing("k"))?;
        let models = (0..k)
            .map(|i| load_checkpoint(&dir.join(format!("fold_{i}.gsck"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(FoldModels {
            alpha: alpha.ok_or_else(|| missing("alpha"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            base_crc: base_crc.ok_or_else(|| missing("base_crc"))?,
            models,
        })
    }
}
