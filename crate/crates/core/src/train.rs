//! Training loop, evaluation and per-epoch metrics.

use serde::{Deserialize, Serialize};

use crate::data::{augment_cifar, Dataset};
use crate::decorrelation::{self, RegularizerConfig, Similarity, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamKind};
use crate::loss::softmax_xent;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{streams, Rng};
use crate::tensor::{Reduction, Tensor};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `None` trains without the decorrelation term at all.
    pub regularizer: Option<RegularizerConfig>,
    /// Random pad-crop-flip on each training batch (CIFAR-10 only).
    pub augment: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub train_loss: f64,
    /// Dictionary penalty of the codebook at the end of the epoch.
    pub penalty: Option<f64>,
    /// Mean off-diagonal squared correlation of the codebook at epoch end.
    pub mean_sq_corr: Option<f64>,
    /// Validation error, percent.
    pub val_error: f64,
    /// Test error, percent.
    pub test_error: Option<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Index into `epochs` of the lowest validation error (earliest on ties).
    /// The model holds this epoch's parameters when `train` returns.
    pub best: usize,
}

impl TrainOutcome {
    pub fn best_metrics(&self) -> &EpochMetrics {
        &self.epochs[self.best]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub task: f64,
    /// Raw (unweighted) penalty, when a regularizer is active.
    pub penalty: Option<f64>,
}

/// Forward and backward for one batch, leaving fresh gradients in every
/// parameter slot. The regularizer adds `beta * dPenalty/dCenters` to the
/// codebook centers' gradient and touches nothing else.
pub fn compute_gradients(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    regularizer: Option<&RegularizerConfig>,
) -> Result<StepLoss> {
    model.zero_grad();
    let logits = model.forward(images, Mode::Training)?;
    let (task, grad) = softmax_xent(&logits, labels)?;
    model.backward(&grad)?;
    let mut penalty = None;
    if let Some(reg) = regularizer {
        let cb = model
            .codebook_mut()
            .ok_or_else(|| Error::config("the decorrelation penalty needs a BoF codebook"))?;
        let centers = &cb.centers.value;
        penalty = Some(decorrelation::penalty_with(centers, reg.epsilon, reg.similarity)?);
        let g = decorrelation::penalty_backward_with(centers, reg.epsilon, reg.similarity)?;
        for (slot, gv) in cb.centers.grad.data_mut().iter_mut().zip(g.data()) {
            *slot += reg.beta * gv;
        }
    }
    Ok(StepLoss { task, penalty })
}

/// One optimizer step on one batch. Codebook widths are clamped afterwards.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    images: &Tensor,
    labels: &[usize],
    regularizer: Option<&RegularizerConfig>,
) -> Result<StepLoss> {
    let loss = compute_gradients(model, images, labels, regularizer)?;
    adam.step(&mut model.params_mut())?;
    if let Some(cb) = model.codebook_mut() {
        cb.clamp_scales();
    }
    Ok(loss)
}

/// Argmax class per row (lowest index on ties), inference mode.
pub fn predict(model: &mut Model, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let logits = model.forward(&images.slice_outer(start, end)?, Mode::Inference)?;
        let am = logits.reduce(1, Reduction::ArgMax)?;
        out.extend(am.data().iter().map(|&v| v as usize));
        start = end;
    }
    Ok(out)
}

/// Percentage of misclassified samples.
pub fn evaluate(model: &mut Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let pred = predict(model, &dataset.images)?;
    Ok(error_rate(&pred, &dataset.labels))
}

pub fn error_rate(pred: &[usize], labels: &[usize]) -> f64 {
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Trains for `config.epochs`, evaluating validation (and test, if given)
/// after every epoch, and leaves the best-validation parameters in `model`.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.epochs == 0 {
        return Err(Error::config("epochs must be >= 1"));
    }
    if let Some(reg) = &config.regularizer {
        reg.validate()?;
        if model.codebook().is_none() {
            return Err(Error::config("the decorrelation penalty needs bof pooling"));
        }
    }
    let expect = &[model.spec().in_channels];
    if train_set.image_shape()[..1] != *expect || val_set.image_shape() != train_set.image_shape() {
        return Err(Error::config(format!(
            "dataset images {:?} do not fit a model with {} input channels",
            train_set.image_shape(),
            expect[0]
        )));
    }
    let mut adam = Adam::new(config.adam)?;
    let mut shuffle = Rng::with_stream(config.seed, streams::SHUFFLE);
    let mut augment = Rng::with_stream(config.seed, streams::AUGMENT);
    let (epsilon, similarity) = config
        .regularizer
        .map(|r| (r.epsilon, r.similarity))
        .unwrap_or((DEFAULT_EPSILON, Similarity::Pearson));

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in train_set.batches(config.batch_size, &mut shuffle)? {
            let (mut images, labels) = batch?;
            if config.augment {
                images = augment_cifar(&images, &mut augment)?;
            }
            let step = train_step(model, &mut adam, &images, &labels, config.regularizer.as_ref())?;
            loss_sum += step.task;
            batches += 1;
        }
        let (penalty, mean_sq_corr) = match model.codebook() {
            Some(cb) => (
                Some(decorrelation::penalty_with(&cb.centers.value, epsilon, similarity)?),
                Some(decorrelation::mean_offdiag_sq_corr(&cb.centers.value, epsilon, similarity)?),
            ),
            None => (None, None),
        };
        let val_error = evaluate(model, val_set)?;
        let test_error = test_set.map(|t| evaluate(model, t)).transpose()?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            penalty,
            mean_sq_corr,
            val_error,
            test_error,
            steps: adam.steps(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val {:.2}% test {} corr2 {}",
            metrics.train_loss,
            val_error,
            test_error.map_or("-".into(), |t| format!("{t:.2}%")),
            mean_sq_corr.map_or("-".into(), |c| format!("{c:.4}")),
        );
        if best.as_ref().is_none_or(|(_, v, _)| val_error < *v) {
            best = Some((epochs.len(), val_error, model.snapshot()));
        }
        epochs.push(metrics);
    }
    let (best, _, params) = best.expect("at least one epoch ran");
    model.restore(&params)?;
    Ok(TrainOutcome { epochs, best })
}

/// Gradient slots of every non-codebook parameter, in model order.
pub fn non_codebook_gradients(model: &Model) -> Vec<Tensor> {
    model
        .params()
        .iter()
        .filter(|p| !p.kind.is_codebook())
        .map(|p| p.grad.clone())
        .collect()
}

/// Gradient slot of the codebook centers, if the model has one.
pub fn center_gradient(model: &Model) -> Option<Tensor> {
    model
        .params()
        .iter()
        .find(|p| p.kind == ParamKind::CodebookCenters)
        .map(|p| p.grad.clone())
}
