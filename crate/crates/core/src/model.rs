//! Softmax head over a fixed feature map: prediction, mean cross-entropy,
//! its analytic gradient and mini-batch SGD.
//!
//! All arithmetic is `f64`. Every function here is pure: the input model is
//! never mutated and the result depends only on the arguments (seeds
//! included).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the uniform distribution used by [`init_model`].
pub const INIT_SCALE: f64 = 0.05;

/// Parameters of a single dense layer followed by softmax.
///
/// `weights` is stored row-major with shape `feature_dim x num_classes`, so
/// the logit of class `c` is `biases[c] + sum_f x[f] * weights[f * C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    feature_dim: usize,
    num_classes: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Result<Self> {
        check_dims(feature_dim, num_classes)?;
        Ok(Self {
            feature_dim,
            num_classes,
            weights: vec![0.0; feature_dim * num_classes],
            biases: vec![0.0; num_classes],
        })
    }

    pub fn from_parts(feature_dim: usize, num_classes: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        check_dims(feature_dim, num_classes)?;
        if weights.len() != feature_dim * num_classes || biases.len() != num_classes {
            return Err(Error::Contract(format!(
                "parameter lengths ({}, {}) do not match shape {feature_dim}x{num_classes}",
                weights.len(),
                biases.len()
            )));
        }
        let model = Self {
            feature_dim,
            num_classes,
            weights,
            biases,
        };
        model.ensure_finite()?;
        Ok(model)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.weights[feature * self.num_classes + class]
    }

    /// Number of scalar parameters (weights followed by biases).
    pub fn len(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters, weights first, then biases.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.feature_dim == other.feature_dim && self.num_classes == other.num_classes
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Rebuild a model of this shape from a flat parameter vector laid out as
    /// [`ModelParams::iter`] produces it.
    pub(crate) fn with_flat(&self, flat: Vec<f64>) -> Result<ModelParams> {
        let split = self.weights.len();
        let mut weights = flat;
        let biases = weights.split_off(split);
        ModelParams::from_parts(self.feature_dim, self.num_classes, weights, biases)
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        if self.iter().all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::Contract("model parameters are not finite".into()))
        }
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::Contract(format!(
                "feature vector has length {}, model expects {}",
                features.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, batch: &LabeledBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Contract("batch is empty".into()));
        }
        if batch.dim() != self.feature_dim {
            return Err(Error::Contract(format!(
                "batch feature dimension {} does not match model {}",
                batch.dim(),
                self.feature_dim
            )));
        }
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Writes the logits for `x` into `out`.
    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.biases);
        let c = self.num_classes;
        for (xf, row) in x.iter().zip(self.weights.chunks_exact(c)) {
            if *xf == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xf * w;
            }
        }
    }
}

fn check_dims(feature_dim: usize, num_classes: usize) -> Result<()> {
    if feature_dim == 0 {
        return Err(Error::Config("feature_dim must be at least 1".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    Ok(())
}

/// Gradient of the mean cross-entropy, together with the number of samples
/// it was computed on and the loss at the evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
    pub sample_count: u64,
    pub loss_at_point: f64,
}

impl GradientVector {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            d_weights: vec![0.0; model.weights.len()],
            d_biases: vec![0.0; model.biases.len()],
            sample_count: 0,
            loss_at_point: 0.0,
        }
    }

    pub fn matches(&self, model: &ModelParams) -> bool {
        self.d_weights.len() == model.weights.len() && self.d_biases.len() == model.biases.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.d_weights.iter().chain(self.d_biases.iter()).copied()
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Feature vectors with class labels, stored as one flat row-major buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(dim * rows.len());
        for row in &rows {
            if row.len() != dim {
                return Err(Error::Contract("feature rows have differing lengths".into()));
            }
            features.extend_from_slice(row);
        }
        Ok(Self { dim, features, labels })
    }

    pub fn from_flat(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(Error::Contract(format!(
                "flat buffer of {} values cannot hold {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Appends `other` to this batch. An empty batch adopts `other`'s width.
    pub fn extend(&mut self, other: &LabeledBatch) -> Result<()> {
        if self.is_empty() && self.features.is_empty() {
            self.dim = other.dim;
        }
        if !other.is_empty() && other.dim != self.dim {
            return Err(Error::Contract(format!(
                "cannot append rows of width {} to a batch of width {}",
                other.dim, self.dim
            )));
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn push(&mut self, row: &[f64], label: usize) -> Result<()> {
        if self.is_empty() && self.features.is_empty() {
            self.dim = row.len();
        }
        if row.len() != self.dim {
            return Err(Error::Contract("row width mismatch".into()));
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    /// Sub-batch with the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledBatch {
            dim: self.dim,
            features,
            labels,
        }
    }
}

/// Local optimisation settings: `epochs` passes of mini-batch SGD with
/// batches of `batch_size` at a fixed `learning_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Seeded initial parameters: weights uniform in `[-INIT_SCALE, INIT_SCALE]`,
/// biases zero.
pub fn init_model(feature_dim: usize, num_classes: usize, seed: u64) -> Result<ModelParams> {
    let mut model = ModelParams::zeros(feature_dim, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in model.weights_mut() {
        *w = rng.random_range(-INIT_SCALE..=INIT_SCALE);
    }
    Ok(model)
}

/// Numerically stable softmax (max-subtracted) over `logits`, in place.
fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// Class probabilities for one feature vector.
pub fn predict(model: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    model.check_input(features)?;
    let mut out = vec![0.0; model.num_classes];
    model.logits_into(features, &mut out);
    softmax_in_place(&mut out);
    Ok(out)
}

/// Index of the most probable class; ties go to the lowest index.
pub fn predict_class(model: &ModelParams, features: &[f64]) -> Result<usize> {
    model.check_input(features)?;
    let mut logits = vec![0.0; model.num_classes];
    model.logits_into(features, &mut logits);
    Ok(argmax(&logits))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of the model on `batch`.
pub fn loss(model: &ModelParams, batch: &LabeledBatch) -> Result<f64> {
    model.check_batch(batch)?;
    let mut logits = vec![0.0; model.num_classes];
    let mut total = 0.0;
    for (x, &y) in batch.rows().zip(batch.labels()) {
        model.logits_into(x, &mut logits);
        total += sample_nll(&logits, y);
    }
    Ok(total / batch.len() as f64)
}

/// `logsumexp(z) - z[y]`, never negative.
fn sample_nll(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    (max + sum.ln() - logits[label]).max(0.0)
}

/// Reusable buffers for gradient evaluation on index subsets.
pub(crate) struct GradScratch {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
    probs: Vec<f64>,
}

impl GradScratch {
    pub fn new(model: &ModelParams) -> Self {
        Self {
            d_weights: vec![0.0; model.weights.len()],
            d_biases: vec![0.0; model.num_classes],
            probs: vec![0.0; model.num_classes],
        }
    }

    /// Mean gradient over `batch[indices]`, left in `d_weights`/`d_biases`.
    /// Rows are accumulated in the order given. Returns the mean loss.
    pub fn compute(&mut self, model: &ModelParams, batch: &LabeledBatch, indices: &[usize]) -> f64 {
        let c = model.num_classes;
        self.d_weights.fill(0.0);
        self.d_biases.fill(0.0);
        let mut total_loss = 0.0;
        for &i in indices {
            let x = batch.row(i);
            let y = batch.label(i);
            model.logits_into(x, &mut self.probs);
            total_loss += sample_nll(&self.probs, y);
            softmax_in_place(&mut self.probs);
            self.probs[y] -= 1.0;
            for (db, d) in self.d_biases.iter_mut().zip(&self.probs) {
                *db += d;
            }
            for (xf, row) in x.iter().zip(self.d_weights.chunks_exact_mut(c)) {
                if *xf == 0.0 {
                    continue;
                }
                for (g, d) in row.iter_mut().zip(&self.probs) {
                    *g += xf * d;
                }
            }
        }
        let n = indices.len() as f64;
        for g in self.d_weights.iter_mut().chain(self.d_biases.iter_mut()) {
            *g /= n;
        }
        total_loss / n
    }

    pub fn to_gradient(&self, sample_count: u64, loss_at_point: f64) -> GradientVector {
        GradientVector {
            d_weights: self.d_weights.clone(),
            d_biases: self.d_biases.clone(),
            sample_count,
            loss_at_point,
        }
    }
}

/// Exact analytic gradient of the mean cross-entropy on `batch`.
pub fn gradient(model: &ModelParams, batch: &LabeledBatch) -> Result<GradientVector> {
    model.check_batch(batch)?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    let mut scratch = GradScratch::new(model);
    let loss = scratch.compute(model, batch, &indices);
    Ok(scratch.to_gradient(batch.len() as u64, loss))
}

/// `model - learning_rate * grad`, element-wise.
pub fn sgd_step(model: &ModelParams, grad: &GradientVector, learning_rate: f64) -> Result<ModelParams> {
    if !grad.matches(model) {
        return Err(Error::Contract("gradient shape does not match model".into()));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive and finite".into()));
    }
    let mut next = model.clone();
    apply_step(&mut next, &grad.d_weights, &grad.d_biases, learning_rate);
    next.ensure_finite()?;
    Ok(next)
}

pub(crate) fn apply_step(model: &mut ModelParams, d_weights: &[f64], d_biases: &[f64], learning_rate: f64) {
    for (w, g) in model.weights.iter_mut().zip(d_weights) {
        *w -= learning_rate * g;
    }
    for (b, g) in model.biases.iter_mut().zip(d_biases) {
        *b -= learning_rate * g;
    }
}

/// Generator driving the mini-batch order. Stream 0 is the one
/// [`local_train`] uses; other streams give independent orders under the
/// same seed.
pub(crate) fn batch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reshuffles `order` and cuts it into batches of at most `batch_size`.
/// Indices inside each batch are sorted so that the accumulation order of a
/// batch does not depend on the shuffle.
pub(crate) fn epoch_batches(order: &mut [usize], rng: &mut ChaCha8Rng, batch_size: usize) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            batch
        })
        .collect()
}

/// `epochs` passes of mini-batch SGD over `dataset` starting from `model`.
///
/// Each epoch reshuffles the sample order with a generator seeded from
/// `config.seed` and takes one step per batch. The final partial batch is
/// kept.
pub fn local_train(model: &ModelParams, dataset: &LabeledBatch, config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    model.check_batch(dataset)?;
    let mut current = model.clone();
    let mut scratch = GradScratch::new(model);
    let mut rng = batch_rng(config.seed, 0);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        for batch in epoch_batches(&mut order, &mut rng, config.batch_size) {
            scratch.compute(&current, dataset, &batch);
            apply_step(
                &mut current,
                &scratch.d_weights,
                &scratch.d_biases,
                config.learning_rate,
            );
        }
    }
    current.ensure_finite()?;
    Ok(current)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(model: &ModelParams, test_set: &LabeledBatch) -> Result<f64> {
    model.check_batch(test_set)?;
    let mut logits = vec![0.0; model.num_classes];
    let mut correct = 0usize;
    for (x, &y) in test_set.rows().zip(test_set.labels()) {
        model.logits_into(x, &mut logits);
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}
