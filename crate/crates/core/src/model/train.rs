//! Mini-batch SGD with momentum.
//!
//! Per-sample gradients are computed on independent tapes (in parallel) and
//! summed in batch order, so results do not depend on thread scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::{Classifier, Dataset, LinearClassifier, MiniInception, ModelError, Result, Split};
use crate::autodiff::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_stats(&self) -> &EpochStats {
        self.epochs.last().expect("report always holds the initial evaluation")
    }
}

trait Trainable: Classifier {
    fn sample_gradient(&self, image: &Tensor, label: usize) -> Result<(f32, usize, Vec<Tensor>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Trainable for MiniInception {
    fn sample_gradient(&self, image: &Tensor, label: usize) -> Result<(f32, usize, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, true);
        let x = tape.constant(image.clone());
        let f = self.forward_on_tape(&mut tape, x, &params)?;
        let predicted = tape.value(f.logits).argmax();
        let loss = tape.softmax_cross_entropy(f.logits, label)?;
        let mut grads = tape.backward(loss)?;
        let g = params
            .vars
            .iter()
            .map(|&v| grads.take(v).expect("parameters are differentiable"))
            .collect();
        Ok((tape.value(loss).item().expect("scalar"), predicted, g))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.parameters_mut()
    }
}

impl Trainable for LinearClassifier {
    fn sample_gradient(&self, image: &Tensor, label: usize) -> Result<(f32, usize, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.reshape(&[image.len()])?);
        let w = tape.param(self.weights.clone());
        let b = tape.param(self.bias.clone());
        let z = tape.dense(x, w, b)?;
        let predicted = tape.value(z).argmax();
        let loss = tape.softmax_cross_entropy(z, label)?;
        let mut grads = tape.backward(loss)?;
        let g = vec![grads.take(w).expect("param"), grads.take(b).expect("param")];
        Ok((tape.value(loss).item().expect("scalar"), predicted, g))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Fraction of `indices` the classifier labels correctly, or `None` when empty.
pub fn evaluate(model: &(impl Classifier + ?Sized), dataset: &Dataset, indices: &[usize]) -> Result<Option<f64>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let correct = indices
        .par_iter()
        .map(|&i| Ok(usize::from(model.predict(&dataset.images[i])? == dataset.labels[i])))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(Some(correct as f64 / indices.len() as f64))
}

fn run<M: Trainable>(model: &mut M, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(ModelError::Training("dataset has no training images".into()));
    }
    if config.batch_size == 0 {
        return Err(ModelError::Training("batch size must be positive".into()));
    }
    let test_idx = dataset.indices(Split::Test);
    let initial_loss = train_idx
        .par_iter()
        .map(|&i| {
            let (loss, _) = model.loss_and_input_gradient(&dataset.images[i], dataset.labels[i])?;
            Ok(f64::from(loss))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>()
        / train_idx.len() as f64;
    let mut report = TrainReport {
        epochs: vec![EpochStats {
            epoch: 0,
            mean_loss: initial_loss,
            train_accuracy: evaluate(model, dataset, &train_idx)?.expect("nonempty"),
            test_accuracy: evaluate(model, dataset, &test_idx)?,
        }],
    };

    let mut velocity: Vec<Vec<f32>> = model.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order = train_idx.clone();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let samples = batch
                .par_iter()
                .map(|&i| model.sample_gradient(&dataset.images[i], dataset.labels[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    ModelError::Tensor(TensorError::NonFinite { .. }) => ModelError::Diverged {
                        epoch,
                        batch: batch_no,
                        loss: f32::NAN,
                    },
                    other => other,
                })?;
            let mut sums: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            let mut batch_loss = 0f64;
            for ((loss, predicted, grads), &i) in samples.iter().zip(batch) {
                batch_loss += f64::from(*loss);
                correct += usize::from(*predicted == dataset.labels[i]);
                for (s, g) in sums.iter_mut().zip(grads) {
                    for (a, &b) in s.iter_mut().zip(g.data()) {
                        *a += f64::from(b);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss as f32,
                });
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for ((param, vel), sum) in model.params_mut().into_iter().zip(&mut velocity).zip(&sums) {
                let mut data = param.data().to_vec();
                for ((p, v), &g) in data.iter_mut().zip(vel.iter_mut()).zip(sum) {
                    *v = config.momentum * *v + (g * scale) as f32;
                    *p -= config.learning_rate * *v;
                }
                *param = Tensor::new(param.shape(), data).map_err(|_| ModelError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: f32::NAN,
                })?;
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            test_accuracy: evaluate(model, dataset, &test_idx)?,
        };
        info!(
            epoch,
            loss = stats.mean_loss,
            train = stats.train_accuracy,
            test = ?stats.test_accuracy,
            "epoch finished"
        );
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Trains `model` in place on the training split.
///
/// Train accuracy for epochs ≥ 1 is measured on the fly, before each batch's
/// update; test accuracy is a full evaluation after the epoch.
pub fn train(model: &mut MiniInception, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    run(model, dataset, config)
}

/// Softmax regression on raw pixels, for comparison with the convolutional model.
pub fn train_linear_baseline(dataset: &Dataset, config: &TrainConfig) -> Result<(LinearClassifier, TrainReport)> {
    let shape = dataset
        .images
        .first()
        .ok_or_else(|| ModelError::Training("empty dataset".into()))?
        .shape()
        .to_vec();
    let mut model = LinearClassifier::zeros(&shape, dataset.num_classes)?;
    let report = run(&mut model, dataset, config)?;
    Ok((model, report))
}
