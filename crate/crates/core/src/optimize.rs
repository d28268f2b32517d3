//! Adam, reduce-on-plateau scheduling, the mixed-pool minibatch sampler
//! and the base training loop.

use std::fmt::Write as _;

use crate::dataset::{samples_to_matrix, truths, DatasetBundle, Sample, SplitKind};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::metrics::{mean_f2, DEFAULT_THRESHOLD};
use crate::model::{bce_with_logits, ModelConfig, Parameters};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Adam with bias correction over a fixed list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, lengths: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_arrays(lr: f64, arrays: &[&mut [f64]]) -> Self {
        let lengths: Vec<usize> = arrays.iter().map(|a| a.len()).collect();
        AdamState::new(lr, &lengths)
    }

    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} arrays, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(format!(
                    "adam array of {} with param {} / grad {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrDecision {
    Keep,
    Reduced { lr: f64 },
}

/// Reduce-on-plateau for a score that should increase.
///
/// A score counts as an improvement when it beats the best so far by more
/// than `threshold`. While cooling down after a reduction the bad-epoch
/// counter is frozen. Once it exceeds `patience`, the rate is multiplied by
/// `factor` (not below `min_lr`) and a cooldown starts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u32,
    pub cooldown: u32,
    pub threshold: f64,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    bad_epochs: u32,
    cooldown_remaining: u32,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: u32, cooldown: u32, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {factor} outside (0, 1)")));
        }
        if !(lr > 0.0) || min_lr < 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(PlateauScheduler {
            factor,
            patience,
            cooldown,
            threshold: 1e-8,
            min_lr,
            lr,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
            cooldown_remaining: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> u32 {
        self.bad_epochs
    }

    pub fn cooldown_remaining(&self) -> u32 {
        self.cooldown_remaining
    }

    pub fn update(&mut self, score: f64) -> LrDecision {
        let improved = score > self.best + self.threshold;
        if improved {
            self.best = score;
            self.bad_epochs = 0;
        }
        if self.cooldown_remaining > 0 {
            self.cooldown_remaining -= 1;
        } else if !improved {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            self.cooldown_remaining = self.cooldown;
            let next = (self.lr * self.factor).max(self.min_lr);
            if next < self.lr {
                self.lr = next;
                return LrDecision::Reduced { lr: next };
            }
        }
        LrDecision::Keep
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    pub plateau_cooldown: u32,
    /// Epochs without a new best validation F2 before stopping.
    pub early_stop_patience: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 30,
            lr: 0.001,
            lr_floor: 1e-6,
            plateau_factor: 0.5,
            plateau_patience: 2,
            plateau_cooldown: 2,
            early_stop_patience: 10,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batchnorm".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f2: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,val_f2,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.val_f2, r.lr);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation F2.
    pub params: Parameters,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn label_matrix(labels: &[LabelSet], num_classes: usize) -> Matrix {
    let mut data = Vec::with_capacity(labels.len() * num_classes);
    for l in labels {
        data.extend(l.to_indicator(num_classes));
    }
    Matrix::from_vec_unchecked(labels.len(), num_classes, data)
}

pub fn train_base(model: &ModelConfig, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_base_on(
        model,
        bundle.split(SplitKind::SourceTrain),
        bundle.split(SplitKind::SourceVal),
        cfg,
    )
}

/// Shuffled-minibatch Adam on `train` with BCE loss, scheduled and
/// early-stopped on the validation F2.
pub fn train_base_on(model: &ModelConfig, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::EmptyInput("base training needs training and validation samples".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut params = Parameters::init(model, &mut rng.split(0))?;
    let mut batch_rng = rng.split(1);

    let x = samples_to_matrix(train)?;
    let y = label_matrix(&truths(train), model.num_classes);
    let x_val = samples_to_matrix(val)?;
    let val_truth = truths(val);

    let mut adam = AdamState::for_arrays(cfg.lr, &params.trainable_mut());
    let mut sched = PlateauScheduler::new(
        cfg.lr,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.plateau_cooldown,
        cfg.lr_floor,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        adam.lr = lr;
        batch_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select_rows(chunk);
            let yb = y.select_rows(chunk);
            let (out, cache) = params.forward_train(&xb, &mut batch_rng)?;
            let (loss, grad) = bce_with_logits(&out.logits, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = params.backward(&cache, &grad)?;
            adam.apply(&mut params.trainable_mut(), &grads.slices())?;
            loss_sum += loss;
            batches += 1;
        }
        let val_f2 = mean_f2(&params.predict(&x_val)?, &val_truth, cfg.threshold)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            val_f2,
            lr,
        });
        if best.as_ref().is_none_or(|(f, _, _)| val_f2 > *f) {
            best = Some((val_f2, epoch, params.clone()));
        }
        sched.update(val_f2);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Source,
    Tuning,
}

/// Builds minibatches whose every slot independently comes from the
/// source pool with probability `alpha`, otherwise from the tuning pool,
/// picking uniformly with replacement within the pool.
#[derive(Debug, Clone)]
pub struct MixedSampler<'a, T> {
    alpha: f64,
    source: &'a [T],
    tuning: &'a [T],
    batch_size: usize,
    rng: Rng,
}

impl<'a, T> MixedSampler<'a, T> {
    pub fn new(alpha: f64, source: &'a [T], tuning: &'a [T], batch_size: usize, rng: Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Sampler(format!("alpha {alpha} outside [0, 1]")));
        }
        if batch_size == 0 {
            return Err(Error::Sampler("batch size must be positive".into()));
        }
        if alpha > 0.0 && source.is_empty() {
            return Err(Error::Sampler(format!("alpha = {alpha} but the source pool is empty")));
        }
        if alpha < 1.0 && tuning.is_empty() {
            return Err(Error::Sampler(format!("alpha = {alpha} but the tuning pool is empty")));
        }
        Ok(MixedSampler {
            alpha,
            source,
            tuning,
            batch_size,
            rng,
        })
    }

    pub fn next_tagged(&mut self) -> Vec<(Pool, &'a T)> {
        (0..self.batch_size)
            .map(|_| {
                if self.rng.bernoulli(self.alpha) {
                    (Pool::Source, &self.source[self.rng.index_below(self.source.len())])
                } else {
                    (Pool::Tuning, &self.tuning[self.rng.index_below(self.tuning.len())])
                }
            })
            .collect()
    }

    pub fn next_batch(&mut self) -> Vec<&'a T> {
        self.next_tagged().into_iter().map(|(_, s)| s).collect()
    }

    /// Draws one value from the sampler's stream, for deriving per-sample generators.
    pub fn draw_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step() {
        let mut theta = vec![0.0];
        let mut adam = AdamState::new(0.001, &[1]);
        adam.apply(&mut [&mut theta], &[&[1.0]]).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((theta[0] - expected).abs() < 1e-18);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient() {
        let mut theta = vec![0.3, -2.0];
        let mut adam = AdamState::new(0.001, &[2]);
        adam.apply(&mut [&mut theta], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(theta, vec![0.3, -2.0]);
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        // Independent scalar transcription of the update equations.
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.001 * mh / (vh.sqrt() + 1e-8);
            oracle.push(th);
        }
        let mut theta = vec![1.0];
        let mut adam = AdamState::new(0.001, &[1]);
        for expected in oracle {
            let g = [2.0 * theta[0]];
            adam.apply(&mut [&mut theta], &[&g]).unwrap();
            assert!((theta[0] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut theta = vec![0.0; 3];
        let mut adam = AdamState::new(0.001, &[2]);
        assert!(matches!(adam.apply(&mut [&mut theta], &[&[0.0; 3]]), Err(Error::Shape(_))));
    }

    #[test]
    fn plateau_flat_sequence() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 2, 2, 0.0).unwrap();
        let decisions: Vec<LrDecision> = [0.5; 4].iter().map(|&x| s.update(x)).collect();
        assert_eq!(&decisions[..3], &[LrDecision::Keep; 3]);
        assert_eq!(decisions[3], LrDecision::Reduced { lr: 0.0005 });
        assert_eq!(s.cooldown_remaining(), 2);
    }

    #[test]
    fn plateau_increasing_never_reduces() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 2, 2, 0.0).unwrap();
        for i in 0..50 {
            assert_eq!(s.update(i as f64 * 0.01), LrDecision::Keep);
        }
        assert_eq!(s.lr(), 0.001);
    }

    #[test]
    fn plateau_floor() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 0, 0, 0.0004).unwrap();
        for _ in 0..10 {
            s.update(0.1);
        }
        assert_eq!(s.lr(), 0.0004);
        assert!(PlateauScheduler::new(0.001, 1.0, 2, 2, 0.0).is_err());
    }

    #[test]
    fn sampler_extremes() {
        let src = [0u32; 5];
        let tun = [1u32; 7];
        let mut s = MixedSampler::new(0.0, &src, &tun, 64, Rng::new(1)).unwrap();
        assert!(s.next_tagged().iter().all(|(p, &v)| *p == Pool::Tuning && v == 1));
        let mut s = MixedSampler::new(1.0, &src, &tun, 64, Rng::new(1)).unwrap();
        assert!(s.next_tagged().iter().all(|(p, &v)| *p == Pool::Source && v == 0));
    }

    #[test]
    fn sampler_rate() {
        // Binomial sd at n = 1e5, p = 0.5 is 0.0016; +-0.02 is over 12 sd.
        let src = [0u32; 3];
        let tun = [1u32; 3];
        let mut s = MixedSampler::new(0.5, &src, &tun, 1000, Rng::new(9)).unwrap();
        let mut from_source = 0;
        for _ in 0..100 {
            from_source += s.next_tagged().iter().filter(|(p, _)| *p == Pool::Source).count();
        }
        let frac = from_source as f64 / 1e5;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn sampler_empty_pools() {
        let empty: [u32; 0] = [];
        let full = [1u32];
        assert!(matches!(MixedSampler::new(0.5, &empty, &full, 4, Rng::new(0)), Err(Error::Sampler(_))));
        assert!(matches!(MixedSampler::new(0.5, &full, &empty, 4, Rng::new(0)), Err(Error::Sampler(_))));
        assert!(MixedSampler::new(0.0, &empty, &full, 4, Rng::new(0)).is_ok());
        assert!(MixedSampler::new(1.0, &full, &empty, 4, Rng::new(0)).is_ok());
    }
}
