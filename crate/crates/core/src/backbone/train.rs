//! Minibatch training of the backbone with the Adam update rule.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{grad_total_loss, total_loss, Batch, ContentSource, Degrees, ItemGraph, LossWeights, ModelParams};
use crate::dataset::{sample_negatives, InteractionSet};
use crate::error::{Error, Result};

/// Adam moment decay rates and stabiliser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam step on `values` along `-grad`.
    pub fn step(&mut self, values: &mut [f64], grad: &[f64], learning_rate: f64) {
        debug_assert_eq!(values.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.step_count += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for k in 0..values.len() {
            let g = grad[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            values[k] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Settings for one backbone training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Negatives sampled per positive, fresh every epoch.
    pub neg_ratio: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 512,
            neg_ratio: 1,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// Trained parameters plus the loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Total loss summed over each epoch's minibatches, evaluated before the
    /// corresponding update.
    pub epoch_losses: Vec<f64>,
}

/// Trains `params` on the positives of `data` for `config.epochs` epochs.
///
/// Every epoch resamples negatives, shuffles all pairs, and applies one Adam
/// step per minibatch. `degrees` and `graph` describe the full training set
/// even when `data` is a subset of it (environment training), so the degree
/// weights and neighbour lists stay consistent across subsets. With zero
/// epochs the parameters are returned unchanged. Deterministic for a given
/// `rng` state.
pub fn train(
    params: ModelParams,
    data: &InteractionSet,
    graph: &ItemGraph,
    degrees: Degrees<'_>,
    content: &impl ContentSource,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be positive"));
    }
    config.weights.validate()?;

    let mut params = params;
    let mut adam = AdamState::new(params.values().len(), config.adam);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let sampled = sample_negatives(data, config.neg_ratio, rng)?;
        let mut pairs: Vec<(u32, u32, bool)> = Vec::new();
        pairs.extend(sampled.positives().map(|(u, i)| (u, i, true)));
        pairs.extend(sampled.negatives().map(|(u, i)| (u, i, false)));
        pairs.shuffle(rng);

        let mut epoch_loss = 0.0;
        for chunk in pairs.chunks(config.batch_size) {
            let mut batch = Batch::default();
            for &(u, i, positive) in chunk {
                if positive {
                    batch.positives.push((u, i));
                } else {
                    batch.negatives.push((u, i));
                }
            }
            epoch_loss += total_loss(&batch, graph, degrees, content, &params, &config.weights)?;
            let grad = grad_total_loss(&batch, graph, degrees, content, &params, &config.weights)?;
            adam.step(
                params.vector_mut().values_mut(),
                grad.values(),
                config.learning_rate,
            );
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}
