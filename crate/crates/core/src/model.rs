//! Dense multilabel classifier with batch normalization.
//!
//! Each trunk layer is `linear -> batchnorm -> relu`. The last hidden
//! activation goes through inverted dropout (train mode only) into a
//! linear head whose logits are squashed by an elementwise sigmoid.
//! Gradients are derived by hand, including the path through the batch
//! mean and variance.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![64, 32],
            num_classes,
            dropout_p: 0.3,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "model needs positive input/class counts and at least one hidden layer".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("hidden layer of width 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", self.dropout_p)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("batchnorm momentum must be in [0, 1] and epsilon positive".into()));
        }
        Ok(())
    }

    pub fn last_hidden(&self) -> usize {
        *self.hidden_dims.last().expect("validated config has hidden layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkLayer {
    /// `fan_in x fan_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `last_hidden x num_classes`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layers: Vec<TrunkLayer>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    /// Same order as [`Parameters::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([l.weight.data(), &l.bias, &l.bn_gamma, &l.bn_beta]);
        }
        out.extend([self.head_weight.data(), self.head_bias.as_slice()]);
        out
    }

    pub fn all_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    normalized: Matrix,
    inv_std: Vec<f64>,
    output: Matrix,
}

/// Intermediate values of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    /// `0` or `1 / (1 - p)` per element of the last hidden activation.
    dropout_mask: Vec<f64>,
    head_input: Matrix,
}

impl ForwardCache {
    /// Batch-normalized pre-activations of trunk layer `layer`, before the affine step.
    pub fn normalized(&self, layer: usize) -> &Matrix {
        &self.layers[layer].normalized
    }

    pub fn dropout_mask(&self) -> &[f64] {
        &self.dropout_mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub scores: Matrix,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn he_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let sd = (2.0 / rows as f64).sqrt();
    Matrix::from_vec_unchecked(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, sd)).collect())
}

fn linear(input: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let mut out = input.matmul(weight)?;
    out.add_row_vector(bias)?;
    Ok(out)
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Per-column mean and biased variance.
fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mean: Vec<f64> = m.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((v, x), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            let d = x - mu;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

impl TrunkLayer {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        TrunkLayer {
            weight: he_matrix(fan_in, fan_out, rng),
            bias: vec![0.0; fan_out],
            bn_gamma: vec![1.0; fan_out],
            bn_beta: vec![0.0; fan_out],
            running_mean: vec![0.0; fan_out],
            running_var: vec![1.0; fan_out],
        }
    }

    /// Batchnorm with running statistics, then relu, in place.
    fn normalize_eval(&self, pre: &mut Matrix, eps: f64) {
        let cols = pre.cols();
        let scale: Vec<f64> = self
            .bn_gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + eps).sqrt())
            .collect();
        for row in pre.data_mut().chunks_exact_mut(cols) {
            for (j, x) in row.iter_mut().enumerate() {
                let y = (*x - self.running_mean[j]) * scale[j] + self.bn_beta[j];
                *x = if y > 0.0 { y } else { 0.0 };
            }
        }
    }
}

impl Head {
    fn init(fan_in: usize, classes: usize, rng: &mut Rng) -> Self {
        Head {
            weight: he_matrix(fan_in, classes, rng),
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        linear(features, &self.weight, &self.bias)
    }

    /// Gradients of weight and bias given the head input and `dL/dlogits`.
    pub fn gradients(&self, input: &Matrix, grad_logits: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let gw = input.transpose().matmul(grad_logits)?;
        Ok((gw, grad_logits.column_sums()))
    }
}

/// Draws an inverted-dropout mask and applies it in place.
pub fn apply_dropout(m: &mut Matrix, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..m.data().len())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep_scale })
        .collect();
    for (v, k) in m.data_mut().iter_mut().zip(&mask) {
        *v *= k;
    }
    mask
}

pub fn scores_from_logits(logits: &Matrix) -> Matrix {
    logits.map(sigmoid)
}

impl Parameters {
    /// He-normal weights, zero biases, identity batchnorm.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden_dims.len());
        let mut fan_in = config.input_dim;
        for &width in &config.hidden_dims {
            layers.push(TrunkLayer::init(fan_in, width, rng));
            fan_in = width;
        }
        let head = Head::init(fan_in, config.num_classes, rng);
        Ok(Parameters {
            config: config.clone(),
            layers,
            head,
        })
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Eval-mode trunk output (last hidden activation, no dropout).
    pub fn features(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_batch(batch)?;
        let eps = self.config.bn_epsilon;
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut pre = linear(&x, &layer.weight, &layer.bias)?;
            layer.normalize_eval(&mut pre, eps);
            x = pre;
        }
        Ok(x)
    }

    pub fn forward_eval(&self, batch: &Matrix) -> Result<ForwardOutput> {
        let features = self.features(batch)?;
        let logits = self.head.logits(&features)?;
        Ok(ForwardOutput {
            scores: scores_from_logits(&logits),
            logits,
        })
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_eval(batch)?.scores)
    }

    /// Train-mode forward: batch statistics (running statistics are
    /// updated with momentum) and dropout before the head.
    pub fn forward_train(&mut self, batch: &Matrix, rng: &mut Rng) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_batch(batch)?;
        if batch.rows() < 2 {
            return Err(Error::Shape("train-mode batchnorm needs at least 2 rows".into()));
        }
        let eps = self.config.bn_epsilon;
        let momentum = self.config.bn_momentum;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let pre = linear(&x, &layer.weight, &layer.bias)?;
            let (mean, var) = column_stats(&pre);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let cols = pre.cols();
            let mut normalized = pre;
            for row in normalized.data_mut().chunks_exact_mut(cols) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
            let mut output = normalized.clone();
            for row in output.data_mut().chunks_exact_mut(cols) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = layer.bn_gamma[j] * *v + layer.bn_beta[j];
                }
            }
            relu_in_place(&mut output);
            for j in 0..cols {
                layer.running_mean[j] = (1.0 - momentum) * layer.running_mean[j] + momentum * mean[j];
                layer.running_var[j] = (1.0 - momentum) * layer.running_var[j] + momentum * var[j];
            }
            let input = std::mem::replace(&mut x, output.clone());
            caches.push(LayerCache {
                input,
                normalized,
                inv_std,
                output,
            });
        }
        let dropout_mask = apply_dropout(&mut x, self.config.dropout_p, rng);
        let logits = self.head.logits(&x)?;
        let out = ForwardOutput {
            scores: scores_from_logits(&logits),
            logits,
        };
        Ok((
            out,
            ForwardCache {
                layers: caches,
                dropout_mask,
                head_input: x,
            },
        ))
    }

    /// Exact gradients of the loss given `dL/dlogits` and a train-mode cache.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        if cache.layers.len() != self.layers.len()
            || cache.head_input.cols() != self.head.weight.rows()
            || cache.layers.iter().zip(&self.layers).any(|(c, l)| c.input.cols() != l.weight.rows() || c.output.cols() != l.weight.cols())
        {
            return Err(Error::Usage("forward cache does not belong to these parameters".into()));
        }
        if grad_logits.shape() != (cache.head_input.rows(), self.config.num_classes) {
            return Err(Error::Usage(format!(
                "gradient of shape {:?} for a cached batch of {} rows",
                grad_logits.shape(),
                cache.head_input.rows()
            )));
        }
        let (head_weight, head_bias) = self.head.gradients(&cache.head_input, grad_logits)?;
        let mut upstream = grad_logits.matmul(&self.head.weight.transpose())?;
        for (g, m) in upstream.data_mut().iter_mut().zip(&cache.dropout_mask) {
            *g *= m;
        }

        let batch = grad_logits.rows() as f64;
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (idx, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let cols = lc.output.cols();
            // Through relu, then the affine batchnorm step.
            let mut d_norm = upstream;
            let mut d_gamma = vec![0.0; cols];
            let mut d_beta = vec![0.0; cols];
            for r in 0..lc.output.rows() {
                let out_row = lc.output.row(r);
                let norm_row = lc.normalized.row(r);
                let d_row = d_norm.row_mut(r);
                for j in 0..cols {
                    let dy = if out_row[j] > 0.0 { d_row[j] } else { 0.0 };
                    d_beta[j] += dy;
                    d_gamma[j] += dy * norm_row[j];
                    d_row[j] = dy * layer.bn_gamma[j];
                }
            }
            // Through the batch mean and variance.
            let sum_d = d_norm.column_sums();
            let mut sum_dx = vec![0.0; cols];
            for r in 0..d_norm.rows() {
                for ((s, d), x) in sum_dx.iter_mut().zip(d_norm.row(r)).zip(lc.normalized.row(r)) {
                    *s += d * x;
                }
            }
            let mut d_pre = d_norm;
            for r in 0..d_pre.rows() {
                let norm_row = lc.normalized.row(r);
                let d_row = d_pre.row_mut(r);
                for j in 0..cols {
                    d_row[j] = lc.inv_std[j] / batch * (batch * d_row[j] - sum_d[j] - norm_row[j] * sum_dx[j]);
                }
            }
            let d_weight = lc.input.transpose().matmul(&d_pre)?;
            let d_bias = d_pre.column_sums();
            upstream = if idx > 0 {
                d_pre.matmul(&layer.weight.transpose())?
            } else {
                Matrix::zeros(0, 0)
            };
            layer_grads.push(LayerGradients {
                weight: d_weight,
                bias: d_bias,
                bn_gamma: d_gamma,
                bn_beta: d_beta,
            });
        }
        layer_grads.reverse();
        Ok(Gradients {
            layers: layer_grads,
            head_weight,
            head_bias,
        })
    }

    /// Trainable arrays (running statistics excluded), trunk first.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
            out.push(&mut l.bn_gamma);
            out.push(&mut l.bn_beta);
        }
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        out
    }

    pub fn head_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.head.weight.data_mut(), &mut self.head.bias]
    }

    /// Same parameters with a freshly initialized head.
    pub fn reinit_head(&self, rng: &mut Rng) -> Parameters {
        let mut out = self.clone();
        out.head = Head::init(self.config.last_hidden(), self.config.num_classes, rng);
        out
    }

    /// Replaces every layer's running statistics with the exact mean and
    /// variance of its pre-normalization input over all rows of `batches`.
    ///
    /// Layers are processed in order, so each layer's statistics are
    /// measured on inputs produced with the already-updated layers before it.
    pub fn recompute_bn_stats<I>(&self, batches: I) -> Result<Parameters>
    where
        I: IntoIterator<Item = Matrix>,
    {
        let mut acts: Vec<Matrix> = batches.into_iter().collect();
        if acts.iter().all(|b| b.rows() == 0) {
            return Err(Error::EmptyInput("no rows to estimate batchnorm statistics".into()));
        }
        for b in &acts {
            self.check_batch(b)?;
        }
        let mut out = self.clone();
        let eps = self.config.bn_epsilon;
        for layer in &mut out.layers {
            let width = layer.weight.cols();
            let mut count = 0.0;
            let mut mean = vec![0.0; width];
            let mut m2 = vec![0.0; width];
            for a in &mut acts {
                let pre = linear(a, &layer.weight, &layer.bias)?;
                for r in 0..pre.rows() {
                    count += 1.0;
                    for (j, &x) in pre.row(r).iter().enumerate() {
                        let delta = x - mean[j];
                        mean[j] += delta / count;
                        m2[j] += delta * (x - mean[j]);
                    }
                }
                *a = pre;
            }
            layer.running_mean = mean;
            layer.running_var = m2.into_iter().map(|s| s / count).collect();
            for a in &mut acts {
                layer.normalize_eval(a, eps);
            }
        }
        Ok(out)
    }
}

/// Mean binary cross-entropy over all entries, from logits, and its
/// gradient with respect to the logits.
pub fn bce_with_logits(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.data().len());
    for (&z, &y) in logits.data().iter().zip(targets.data()) {
        // max(z, 0) - z*y + ln(1 + e^{-|z|})
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / n);
    }
    Ok((loss / n, Matrix::from_vec_unchecked(logits.rows(), logits.cols(), grad)))
}
