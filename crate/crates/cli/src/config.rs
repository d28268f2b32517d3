//! Flat `key = value` experiment configuration.
//!
//! Values resolve as defaults, then the config file, then `--set`
//! overrides. Unknown keys are rejected at every layer.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use geoshift::adapt::AdaptConfig;
use geoshift::augment::{AugmentConfig, TransformKind};
use geoshift::dataset::{default_priors, GeneratorConfig};
use geoshift::ensemble::WeightSearchConfig;
use geoshift::model::ModelConfig;
use geoshift::optimize::TrainConfig;
use geoshift::{Error, Result};
use sha2::{Digest, Sha256};

/// `(key, default, description)` for every fixed key. Augmentation
/// probabilities (`aug.<kind>.prob`) are added from the transform table.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed shared by generation, training and adaptation"),
    ("gen.height", "16", "image height"),
    ("gen.width", "16", "image width"),
    ("gen.channels", "3", "image channels (1 or 3)"),
    ("gen.num_classes", "20", "vocabulary size"),
    ("gen.source_train", "5000", "source_train size"),
    ("gen.source_val", "1000", "source_val size"),
    ("gen.target_tuning", "1000", "target_tuning size"),
    ("gen.target_eval", "1000", "target_eval size"),
    ("gen.target_hidden", "1000", "target_hidden size"),
    ("gen.source_prior", "", "comma-separated per-class priors; empty for the built-in pattern"),
    ("gen.target_prior", "", "comma-separated per-class priors; empty for the built-in pattern"),
    ("gen.hidden_mix", "0.2", "share of the source prior in the hidden region's prior"),
    ("gen.patches_per_class", "2", "patches per class prototype"),
    ("gen.patch_size", "3", "patch side length"),
    ("gen.prototype_amplitude", "0.35", "maximum prototype intensity per channel"),
    ("gen.symmetric_prototypes", "true", "mirror prototype patches across the frame"),
    ("gen.prototype_sigma", "0.15", "per-sample prototype gain jitter"),
    ("gen.background_sigma", "0.35", "Gaussian background noise"),
    ("gen.min_shift", "0.3", "minimum total-variation distance between source and target priors"),
    ("gen.allow_empty_labels", "false", "keep samples that drew no label"),
    ("model.hidden_dims", "64,32", "trunk widths"),
    ("model.dropout", "0.3", "dropout before the head"),
    ("model.bn_momentum", "0.1", "batchnorm running-stat momentum"),
    ("model.bn_epsilon", "1e-5", "batchnorm epsilon"),
    ("train.batch_size", "128", "base training batch size"),
    ("train.max_epochs", "30", "base training epoch cap"),
    ("train.lr", "0.001", "initial Adam learning rate"),
    ("train.lr_floor", "1e-6", "lower bound for the scheduled learning rate"),
    ("train.early_stop_patience", "10", "epochs without a new best before stopping"),
    ("sched.factor", "0.5", "plateau reduction factor"),
    ("sched.patience", "2", "plateau patience"),
    ("sched.cooldown", "2", "plateau cooldown"),
    ("adapt.alphas", "0,0.5,0.9", "mixing coefficients for sweeps and ensemble groups"),
    ("adapt.k", "10", "tuning folds"),
    ("adapt.epochs", "8", "adaptation epochs"),
    ("adapt.batches_per_epoch", "50", "batches per adaptation epoch"),
    ("adapt.batch_size", "64", "adaptation batch size"),
    ("adapt.lr", "0.001", "adaptation Adam learning rate"),
    ("adapt.reinit_head", "false", "start the head from fresh weights instead of the base head"),
    ("adapt.recompute_bn", "true", "re-estimate batchnorm statistics on the mixture"),
    ("adapt.bn_batches", "16", "batches used for batchnorm re-estimation"),
    ("adapt.augment", "true", "augment adaptation batches"),
    ("ensemble.grid_step", "0.05", "weight grid spacing"),
    ("ensemble.epsilon", "0.002", "allowed stage-1 shortfall from the best grid point"),
    ("ensemble.weights", "0.05,0.6,0.3,0.05", "group weights used by `ensemble --fixed`"),
    ("metrics.threshold", "0.5", "score threshold for predictions"),
];

fn aug_key(kind: TransformKind) -> String {
    format!("aug.{}.prob", kind.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        for kind in TransformKind::ALL {
            values.insert(aug_key(kind), kind.default_probability().to_string());
        }
        ExperimentConfig { values }
    }
}

fn parse_line(line: &str) -> Result<Option<(String, String)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("expected key = value, got {line:?}")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            if let Some((k, v)) = parse_line(line)? {
                self.set(&k, &v)?;
            }
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` (each `key=value`).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            match parse_line(o)? {
                Some((k, v)) => cfg.set(&k, &v)?,
                None => return Err(Error::Usage(format!("empty --set {o:?}"))),
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("missing key {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Usage(format!("{key} = {v:?} is not a valid value")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("{key}: bad list item {s:?}")))
            })
            .collect()
    }

    /// Canonical text: every key in sorted order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn threshold(&self) -> Result<f64> {
        self.parse("metrics.threshold")
    }

    pub fn alphas(&self) -> Result<Vec<f64>> {
        self.list("adapt.alphas")
    }

    pub fn fixed_weights(&self) -> Result<Vec<f64>> {
        self.list("ensemble.weights")
    }

    /// Builds every typed section once so bad values surface before any work.
    fn check(&self) -> Result<()> {
        self.generator()?;
        self.train()?;
        self.adapt(0.0)?;
        self.search()?;
        self.alphas()?;
        self.fixed_weights()?;
        self.parse::<usize>("gen.num_classes")?;
        self.model_dims()?;
        Ok(())
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let num_classes: usize = self.parse("gen.num_classes")?;
        let (src, tgt) = default_priors(num_classes);
        let source_prior = self.list("gen.source_prior")?;
        let target_prior = self.list("gen.target_prior")?;
        let cfg = GeneratorConfig {
            height: self.parse("gen.height")?,
            width: self.parse("gen.width")?,
            channels: self.parse("gen.channels")?,
            num_classes,
            split_sizes: [
                self.parse("gen.source_train")?,
                self.parse("gen.source_val")?,
                self.parse("gen.target_tuning")?,
                self.parse("gen.target_eval")?,
                self.parse("gen.target_hidden")?,
            ],
            source_prior: if source_prior.is_empty() { src } else { source_prior },
            target_prior: if target_prior.is_empty() { tgt } else { target_prior },
            hidden_mix: self.parse("gen.hidden_mix")?,
            patches_per_class: self.parse("gen.patches_per_class")?,
            patch_size: self.parse("gen.patch_size")?,
            prototype_amplitude: self.parse("gen.prototype_amplitude")?,
            symmetric_prototypes: self.parse("gen.symmetric_prototypes")?,
            prototype_sigma: self.parse("gen.prototype_sigma")?,
            background_sigma: self.parse("gen.background_sigma")?,
            min_shift: self.parse("gen.min_shift")?,
            allow_empty_labels: self.parse("gen.allow_empty_labels")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn model_dims(&self) -> Result<Vec<usize>> {
        self.list("model.hidden_dims")
    }

    pub fn model(&self, input_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            input_dim,
            hidden_dims: self.model_dims()?,
            num_classes,
            dropout_p: self.parse("model.dropout")?,
            bn_momentum: self.parse("model.bn_momentum")?,
            bn_epsilon: self.parse("model.bn_epsilon")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.parse("train.batch_size")?,
            max_epochs: self.parse("train.max_epochs")?,
            lr: self.parse("train.lr")?,
            lr_floor: self.parse("train.lr_floor")?,
            plateau_factor: self.parse("sched.factor")?,
            plateau_patience: self.parse("sched.patience")?,
            plateau_cooldown: self.parse("sched.cooldown")?,
            early_stop_patience: self.parse("train.early_stop_patience")?,
            threshold: self.threshold()?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let mut aug = AugmentConfig::default();
        for kind in TransformKind::ALL {
            aug.set_probability(kind, self.parse(&aug_key(kind))?)?;
        }
        Ok(aug)
    }

    pub fn adapt(&self, alpha: f64) -> Result<AdaptConfig> {
        let augment: bool = self.parse("adapt.augment")?;
        let cfg = AdaptConfig {
            alpha,
            k: self.parse("adapt.k")?,
            epochs: self.parse("adapt.epochs")?,
            batches_per_epoch: self.parse("adapt.batches_per_epoch")?,
            batch_size: self.parse("adapt.batch_size")?,
            lr: self.parse("adapt.lr")?,
            reinit_head: self.parse("adapt.reinit_head")?,
            recompute_bn: self.parse("adapt.recompute_bn")?,
            bn_batches: self.parse("adapt.bn_batches")?,
            augment: if augment { Some(self.augment()?) } else { None },
            threshold: self.threshold()?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn search(&self) -> Result<WeightSearchConfig> {
        Ok(WeightSearchConfig {
            grid_step: self.parse("ensemble.grid_step")?,
            epsilon: self.parse("ensemble.epsilon")?,
            threshold: self.threshold()?,
        })
    }
}

/// One line per key with its default and description.
pub fn describe_keys() -> String {
    let mut out = String::new();
    for (k, v, d) in KEYS {
        out.push_str(&format!("{k} = {v}    # {d}\n"));
    }
    for kind in TransformKind::ALL {
        out.push_str(&format!(
            "{} = {}    # application probability\n",
            aug_key(kind),
            kind.default_probability()
        ));
    }
    out
}
