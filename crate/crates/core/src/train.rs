//! Cross-entropy training with Adam under the two-session protocol.

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{stack, Sample};
use crate::model::{ModelError, NestNet};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("sample {0} has no session tag")]
    MissingSession(usize),
    #[error("sample {index} has session tag {session}; expected 1 or 2")]
    BadSession { index: usize, session: u8 },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("label {label} is outside the model's {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch_size must be positive")]
    ZeroBatch,
    #[error("adam: {0}")]
    Adam(String),
    #[error("non-finite value in epoch {epoch}, batch {batch}: first offending layer `{layer}`")]
    NonFinite { epoch: usize, batch: usize, layer: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lengths: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let lengths: Vec<usize> = lengths.into_iter().collect();
        Self {
            m: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Adam(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TrainError::Adam(format!(
                "tensor {i}: parameter {} vs gradient {} vs state {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let corr1 = T::of(1.0 - c.beta1.powi(t));
    let corr2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SessionSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_labels: BTreeSet<usize>,
    pub test_labels: BTreeSet<usize>,
}

/// Session 1 trains, session 2 tests.
pub fn split_sessions(samples: &[Sample]) -> Result<SessionSplit, TrainError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match s.session {
            None => return Err(TrainError::MissingSession(i)),
            Some(1) => train.push(s.clone()),
            Some(2) => test.push(s.clone()),
            Some(other) => return Err(TrainError::BadSession { index: i, session: other }),
        }
    }
    if test.is_empty() {
        warn!("no session-2 samples: the test set is empty");
    }
    let train_labels = train.iter().map(|s| s.identity).collect();
    let test_labels = test.iter().map(|s| s.identity).collect();
    Ok(SessionSplit { train, test, train_labels, test_labels })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, adam: AdamConfig::default(), seed: 42 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Mean cross-entropy of each epoch, averaged over samples.
    pub epoch_losses: Vec<f64>,
    /// Fraction of samples classified correctly during each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub model: NestNet<f32>,
    pub options: TrainOptions,
}

/// Train `model` on `samples`, whose identities must already be dense class
/// indices. The shuffle order depends only on `options.seed`.
pub fn train(model: NestNet<f32>, samples: &[Sample], options: TrainOptions) -> Result<TrainRun, TrainError> {
    train_observed(model, samples, options, |_, _, _| {})
}

/// [`train`] with a callback invoked after every epoch as
/// `(epoch, mean_loss, accuracy)`.
pub fn train_observed(
    mut model: NestNet<f32>,
    samples: &[Sample],
    options: TrainOptions,
    on_epoch: impl FnMut(usize, f64, f64),
) -> Result<TrainRun, TrainError> {
    let (epoch_losses, epoch_accuracy) = train_with(&mut model, samples, options, on_epoch)?;
    Ok(TrainRun { epoch_losses, epoch_accuracy, model, options })
}

fn train_with(
    model: &mut NestNet<f32>,
    samples: &[Sample],
    options: TrainOptions,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if options.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }
    let classes = model.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.identity >= classes) {
        return Err(TrainError::LabelOutOfRange { label: s.identity, classes });
    }
    let mut state = AdamState::<f32>::new(model.parameters().iter().map(|(_, t)| t.len()), options.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(options.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    let mut accuracy = Vec::new();
    for epoch in 0..options.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, chunk) in order.chunks(options.batch_size).enumerate() {
            let images = stack(chunk.iter().map(|&i| &samples[i]));
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].identity).collect();
            let (loss, hits) = step(model, &mut state, images, &labels).map_err(|e| match e {
                StepError::NonFinite(layer) => TrainError::NonFinite { epoch: epoch + 1, batch: batch + 1, layer },
                StepError::Other(e) => e,
            })?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let mean = loss_sum / samples.len() as f64;
        let acc = correct as f64 / samples.len() as f64;
        info!("epoch {:>3}: loss {mean:.6} accuracy {acc:.4}", epoch + 1);
        on_epoch(epoch + 1, mean, acc);
        losses.push(mean);
        accuracy.push(acc);
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        if last > first {
            warn!("final epoch loss {last:.6} exceeds first epoch loss {first:.6}");
        }
    }
    Ok((losses, accuracy))
}

enum StepError {
    NonFinite(String),
    Other(TrainError),
}

impl<E: Into<TrainError>> From<E> for StepError {
    fn from(e: E) -> Self {
        StepError::Other(e.into())
    }
}

/// One optimizer step; returns the batch loss and the number of correct
/// predictions made before the update.
fn step(
    model: &mut NestNet<f32>,
    state: &mut AdamState<f32>,
    images: Tensor<f32>,
    labels: &[usize],
) -> Result<(f64, usize), StepError> {
    let mut g = Graph::<f32>::new();
    let x = g.input(images, false);
    let out = model.forward(&mut g, x, true)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).values()[0];
    if !value.is_finite() {
        let layer = g.first_non_finite().map_or_else(|| "loss".to_string(), |(_, name)| name);
        return Err(StepError::NonFinite(layer));
    }
    let k = model.config().num_classes;
    let hits = g
        .value(out.logits)
        .values()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    g.backward(loss)?;
    // parameters unreachable from the loss get a zero gradient
    let zero: Vec<Vec<f32>> = out
        .params
        .iter()
        .zip(model.parameters())
        .map(|(id, (_, t))| if g.grad(*id).is_none() { vec![0.0; t.len()] } else { Vec::new() })
        .collect();
    let mut grads: Vec<&[f32]> = Vec::with_capacity(out.params.len());
    for (i, id) in out.params.iter().enumerate() {
        let grad = g.grad(*id).unwrap_or(&zero[i]);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(StepError::NonFinite(format!("{} (gradient)", model.parameters()[i].0)));
        }
        grads.push(grad);
    }
    let mut params = model.parameters_mut();
    let mut slices: Vec<&mut [f32]> = params.iter_mut().map(|t| t.values_mut()).collect();
    adam_step(&mut slices, &grads, state)?;
    Ok((value as f64, hits))
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `samples` whose arg-max logit equals their identity.
pub fn accuracy(model: &NestNet<f32>, samples: &[Sample], batch_size: usize) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let k = model.config().num_classes;
    let mut correct = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (logits, _) = model.infer(&stack(chunk))?;
        correct += logits.values().chunks(k).zip(chunk).filter(|(row, s)| argmax(row) == s.identity).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}
