//! Training: losses, SGD on primary filters, straight-through mask updates
//! and checkpoints.
//!
//! One [`train_step`] runs, in order: binarise the agent state, forward the
//! batch, accumulate secondary-filter gradients, fold them onto primary
//! filters and masks, add the orthogonality gradient to the mask gradient,
//! update the agent state, then update filters and biases.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::{ConvLayer, DenseLayer, Layer, LayerGrad, Model, ModelConfig, Prepared};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masks::{self, MaskSet};
use crate::tensor::{Real, Tensor};
use crate::vconv::{self, PrimaryFilterBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Softmax cross-entropy.
    CrossEntropy,
    /// `1/2 ||logits - onehot||^2`.
    MeanSquaredError,
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(Loss::CrossEntropy),
            "mean-squared-error" | "mse" => Ok(Loss::MeanSquaredError),
            _ => Err(Error::invalid(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Sum per-sample gradients in sample order regardless of threading.
    pub determinism: bool,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            lambda: 0.1,
            epochs: 1,
            batch: 32,
            seed: 0,
            loss: Loss::CrossEntropy,
            determinism: true,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must be in [0, 1) and weight decay >= 0"));
        }
        Ok(())
    }
}

/// Loss of one sample and its gradient w.r.t. the logits.
pub fn sample_loss<T: Real>(logits: &[T], label: usize, loss: Loss) -> Result<(f64, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    match loss {
        Loss::CrossEntropy => {
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            let value = (sum.ln() + max - logits[label]).to_f64_lossy();
            let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
            grad[label] -= T::one();
            Ok((value, grad))
        }
        Loss::MeanSquaredError => {
            let grad: Vec<T> = logits
                .iter()
                .enumerate()
                .map(|(i, &z)| if i == label { z - T::one() } else { z })
                .collect();
            let value = 0.5 * grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>();
            Ok((value, grad))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub ortho: f64,
    pub total: f64,
}

/// Mean task loss over the batch plus `lambda` times the summed
/// orthogonality loss of `mask_sets`.
pub fn total_loss<T: Real>(
    logits: &[Vec<T>],
    targets: &[usize],
    mask_sets: &[&MaskSet],
    lambda: f64,
    loss: Loss,
) -> Result<LossParts> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(format!("{} logit rows for {} targets", logits.len(), targets.len())));
    }
    let mut task = 0.0;
    for (z, &t) in logits.iter().zip(targets) {
        task += sample_loss(z, t, loss)?.0;
    }
    task /= logits.len() as f64;
    let ortho: f64 = mask_sets.iter().map(|m| masks::ortho_loss(m)).sum();
    Ok(LossParts {
        task,
        ortho,
        total: task + lambda * ortho,
    })
}

/// `p <- p - lr * g`.
pub fn sgd_update<T: Real>(params: &mut [T], grad: &[T], lr: T) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::shape(format!("{} parameters, {} gradients", params.len(), grad.len())));
    }
    params.iter_mut().zip(grad).for_each(|(p, &g)| *p -= lr * g);
    Ok(())
}

/// Plain SGD on a filter bank; biases take their own gradients.
pub fn sgd_step<T: Real>(bank: &mut PrimaryFilterBank<T>, grad_f: &[T], grad_b: &[T], lr: T) -> Result<()> {
    sgd_update(&mut bank.filters, grad_f, lr)?;
    sgd_update(&mut bank.biases, grad_b, lr)
}

/// Summed per-sample gradients of a batch, with loss and hit counts.
#[derive(Clone, Debug)]
pub struct BatchGrads<T> {
    pub layers: Vec<LayerGrad<T>>,
    pub task_loss_sum: f64,
    pub correct: usize,
    pub samples: usize,
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Forward and backward over a batch. Under `determinism` per-sample
/// gradients are summed in sample order.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    prep: &Prepared<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    loss: Loss,
    determinism: bool,
) -> Result<BatchGrads<T>> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::shape(format!("{} images, {} labels", images.len(), labels.len())));
    }
    let one = |(x, &label): (&Tensor<T>, &usize)| -> Result<BatchGrads<T>> {
        let mut caches = Vec::with_capacity(model.layers.len());
        let logits = model.forward_prepared(prep, x, Some(&mut caches))?;
        let (value, grad) = sample_loss(&logits, label, loss)?;
        Ok(BatchGrads {
            layers: model.backward_prepared(prep, caches, grad)?,
            task_loss_sum: value,
            correct: usize::from(argmax(&logits) == label),
            samples: 1,
        })
    };
    let merge = |mut a: BatchGrads<T>, b: BatchGrads<T>| {
        for (x, y) in a.layers.iter_mut().zip(&b.layers) {
            x.add_assign(y);
        }
        a.task_loss_sum += b.task_loss_sum;
        a.correct += b.correct;
        a.samples += b.samples;
        a
    };
    if determinism {
        let per: Vec<BatchGrads<T>> = images.par_iter().zip(labels).map(one).collect::<Result<_>>()?;
        let mut it = per.into_iter();
        let first = it.next().unwrap();
        Ok(it.fold(first, merge))
    } else {
        images
            .par_iter()
            .zip(labels)
            .map(one)
            .try_reduce_with(|a, b| Ok(merge(a, b)))
            .unwrap()
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub ortho_loss: f64,
    pub accuracy: f64,
    /// Fraction of learned mask bits that changed in this step.
    pub flip_rate: f64,
}

/// Optimizer state carried across steps (momentum buffers).
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub steps: usize,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            steps: 0,
            velocity: Vec::new(),
        }
    }

    fn apply(&mut self, slot: usize, params: &mut [T], grad: &[T]) -> Result<()> {
        let lr = T::from_f64_lossy(self.config.lr);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        if mu == 0.0 && wd == 0.0 {
            return sgd_update(params, grad, lr);
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != params.len() {
            *v = vec![T::zero(); params.len()];
        }
        let (mu, wd) = (T::from_f64_lossy(mu), T::from_f64_lossy(wd));
        for ((p, &g), vel) in params.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vel = mu * *vel + g + wd * *p;
            *p -= lr * *vel;
        }
        Ok(())
    }

    /// One step on a batch; see the module docs for the order of updates.
    pub fn train_step(&mut self, model: &mut Model<T>, images: &[Tensor<T>], labels: &[usize]) -> Result<StepRecord> {
        let cfg = self.config.clone();
        if !(cfg.lr >= 0.0) || !(cfg.lambda >= 0.0) {
            return Err(Error::invalid("learning rate and lambda must be >= 0"));
        }
        let step = self.steps;
        for conv in model.conv_layers_mut() {
            if let Some(agent) = &conv.agent {
                conv.masks = Some(masks::sign_binarize(agent));
            }
        }
        let prep = model.prepare()?;
        let mut grads = batch_gradients(model, &prep, images, labels, cfg.loss, cfg.determinism)?;
        let inv = T::one() / T::from_usize(grads.samples).unwrap();
        grads.layers.iter_mut().for_each(|g| g.scale(inv));
        let task_loss = grads.task_loss_sum / grads.samples as f64;
        let ortho_loss: f64 = model
            .conv_layers()
            .filter(|c| c.agent.is_some())
            .map(|c| masks::ortho_loss(c.masks.as_ref().unwrap()))
            .sum();
        let loss = task_loss + cfg.lambda * ortho_loss;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                task_loss,
                ortho_loss,
            });
        }
        let lr = T::from_f64_lossy(cfg.lr);
        let lambda = T::from_f64_lossy(cfg.lambda);
        let (mut flipped, mut learned_bits) = (0usize, 0usize);
        let mut slot = 0;
        for (layer, grad) in model.layers.iter_mut().zip(&grads.layers) {
            match (layer, grad) {
                (Layer::Conv(conv), LayerGrad::Conv { secondary, biases }) => {
                    let (grad_f, grad_m) =
                        vconv::fold_secondary_grads(&conv.spec, &conv.bank, conv.masks.as_ref(), secondary)?;
                    if let (Some(agent), Some(mut grad_m)) = (conv.agent.as_mut(), grad_m) {
                        let m = conv.masks.as_ref().unwrap();
                        if cfg.lambda != 0.0 {
                            for (g, o) in grad_m.iter_mut().zip(masks::ortho_grad(m)) {
                                *g += lambda * T::from_f64_lossy(o);
                            }
                        }
                        masks::agent_update(agent, m, &grad_m, lr)?;
                        let next = masks::sign_binarize(agent);
                        flipped += m
                            .all_words()
                            .iter()
                            .zip(next.all_words())
                            .map(|(a, b)| (a ^ b).count_ones() as usize)
                            .sum::<usize>();
                        learned_bits += m.num_masks() * m.patch_len();
                        conv.masks = Some(next);
                    }
                    self.apply(slot, &mut conv.bank.filters, &grad_f)?;
                    self.apply(slot + 1, &mut conv.bank.biases, biases)?;
                    slot += 2;
                }
                (Layer::Dense(d), LayerGrad::Dense { weights, biases }) => {
                    self.apply(slot, &mut d.weights, weights)?;
                    self.apply(slot + 1, &mut d.biases, biases)?;
                    slot += 2;
                }
                _ => {}
            }
        }
        self.steps += 1;
        Ok(StepRecord {
            step,
            epoch: 0,
            loss,
            task_loss,
            ortho_loss,
            accuracy: grads.correct as f64 / grads.samples as f64,
            flip_rate: if learned_bits == 0 {
                0.0
            } else {
                flipped as f64 / learned_bits as f64
            },
        })
    }

    /// Runs `config.epochs` shuffled passes over `data`, reporting each step.
    pub fn fit(
        &mut self,
        model: &mut Model<T>,
        data: &Dataset<T>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        self.config.validate()?;
        if data.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::new();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch) {
                let images: Vec<Tensor<T>> = chunk.iter().map(|&i| data.images[i].clone()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let mut rec = self.train_step(model, &images, &labels)?;
                rec.epoch = epoch;
                on_step(&rec);
                log.push(rec);
            }
        }
        Ok(log)
    }
}

/// A single step of plain SGD with fresh optimizer state.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<StepRecord> {
    Trainer::new(config.clone()).train_step(model, images, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Mean loss and accuracy of `model` on a labeled set.
pub fn evaluate<T: Real>(model: &Model<T>, images: &[Tensor<T>], labels: &[usize], loss: Loss) -> Result<EvalReport> {
    if images.len() != labels.len() {
        return Err(Error::shape(format!("{} images, {} labels", images.len(), labels.len())));
    }
    let prep = model.prepare()?;
    let per: Vec<(f64, bool)> = images
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| {
            let z = model.forward_prepared(&prep, x, None)?;
            Ok((sample_loss(&z, l, loss)?.0, argmax(&z) == l))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok(EvalReport {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: per.iter().filter(|p| p.1).count() as f64 / n,
        samples: per.len(),
    })
}

/// Index of the largest logit.
pub fn predict<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<usize> {
    Ok(argmax(&model.forward(x)?))
}

#[cfg(test)]
mod tests;
