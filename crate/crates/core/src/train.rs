//! Mini-batch training shared by every gradient-trained model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// A model trainable by [`train`]: a parameter store plus a forward pass
/// producing `[B, n_classes]` logits from flat per-sample inputs.
pub trait Classifier {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Values per input sample.
    fn input_len(&self) -> usize;
    /// Forward pass on parameters already bound to `tape` as `vars`.
    fn logits(&self, tape: &mut Tape, vars: &[Var], inputs: &[&[f64]], train: bool, seed: u64) -> Result<Var>;
}

/// Learning-rate shape once annealing starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Annealing {
    /// Linear decay towards 0 over the remaining optimizer steps.
    Linear,
    /// Multiply by `step_factor` for all remaining epochs.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs at the base learning rate before annealing.
    pub anneal_after: usize,
    pub annealing: Annealing,
    pub step_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            adam: AdamConfig::default(),
            anneal_after: 10,
            annealing: Annealing::Linear,
            step_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.learning_rate)));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of epoch `epoch` (both
    /// 0-based) with `steps_per_epoch` steps per epoch.
    pub fn learning_rate(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let base = self.adam.learning_rate;
        if epoch < self.anneal_after {
            return base;
        }
        match self.annealing {
            Annealing::Step => base * self.step_factor,
            Annealing::Linear => {
                let total = (self.epochs - self.anneal_after) * steps_per_epoch;
                let done = (epoch - self.anneal_after) * steps_per_epoch + step;
                base * (1.0 - done as f64 / total as f64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Eval-mode accuracy on the training set after the last epoch, in %.
    pub train_accuracy: f64,
}

/// SplitMix-style combination of two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_inputs<M: Classifier + ?Sized>(model: &M, inputs: &[&[f64]]) -> Result<()> {
    if let Some(x) = inputs.iter().find(|x| x.len() != model.input_len()) {
        return Err(Error::Shape(format!(
            "sample has {} values, model expects {}",
            x.len(),
            model.input_len()
        )));
    }
    Ok(())
}

/// Train with Adam on shuffled mini-batches of cross-entropy loss.
/// Fully deterministic for a fixed `cfg.seed`.
pub fn train<M: Classifier + ?Sized>(
    model: &mut M,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!("{} inputs but {} labels", inputs.len(), labels.len())));
    }
    check_inputs(model, inputs)?;
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let steps = inputs.len().div_ceil(cfg.batch_size);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&[f64]> = idx.iter().map(|&i| inputs[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape, true);
            let seed = mix_seed(mix_seed(cfg.seed, epoch as u64), step as u64 + 1);
            let logits = model.logits(&mut tape, &vars, &xs, true, seed)?;
            let loss = tape.cross_entropy(logits, &ys)?;
            total += tape.value(loss).item() * idx.len() as f64;
            tape.backward(loss)?;
            let grads = model.params().gradients(&tape, &vars);
            let lr = cfg.learning_rate(epoch, step, steps);
            if lr > 0.0 {
                adam.step(model.params_mut(), &grads, lr)?;
            }
        }
        let mean = total / inputs.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_loss.push(mean);
    }
    let pred = predict(model, inputs, cfg.batch_size)?;
    Ok(TrainReport {
        epoch_loss,
        train_accuracy: accuracy(&pred, labels),
    })
}

/// Eval-mode class predictions.
pub fn predict<M: Classifier + ?Sized>(model: &M, inputs: &[&[f64]], batch_size: usize) -> Result<Vec<usize>> {
    check_inputs(model, inputs)?;
    let mut out = Vec::with_capacity(inputs.len());
    for xs in inputs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let logits = model.logits(&mut tape, &vars, xs, false, 0)?;
        out.extend(tape.value(logits).argmax_rows());
    }
    Ok(out)
}

/// Percentage of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_reaches_near_zero() {
        let cfg = TrainConfig {
            epochs: 20,
            anneal_after: 10,
            ..Default::default()
        };
        let lr = cfg.adam.learning_rate;
        assert_eq!(cfg.learning_rate(9, 3, 4), lr);
        assert_eq!(cfg.learning_rate(10, 0, 4), lr);
        assert!((cfg.learning_rate(19, 3, 4) - lr / 40.0).abs() < 1e-18);
        let step = TrainConfig {
            annealing: Annealing::Step,
            ..cfg
        };
        assert!((step.learning_rate(12, 0, 4) - lr * 0.1).abs() < 1e-18);
    }

    #[test]
    fn accuracy_percent() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]), 75.0);
    }
}
