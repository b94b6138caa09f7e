//! Mini-batch SGD with momentum for the toy CNN.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{Architecture, ToyCnn};
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Drives weight initialization and the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains the standard architecture from a seeded initialization. Single
/// threaded, so the result is a pure function of dataset and config.
pub fn train(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<ToyCnn> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty"));
    }
    if config.batch_size == 0 || config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::Config(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut net = ToyCnn::init(Architecture::standard(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5EED);
    let mut velocity = vec![0.0; net.params().len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; velocity.len()];
            for &i in batch {
                let s = &dataset.samples[i];
                let g = net.backward(&s.image, s.label)?;
                for (acc, v) in grad.iter_mut().zip(&g.values) {
                    *acc += v;
                }
            }
            let scale = config.learning_rate / batch.len() as f64;
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v - scale * g;
                *p += *v;
            }
        }
    }
    Ok(net)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(net: &ToyCnn, dataset: &SyntheticDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in &dataset.samples {
        if net.forward(&s.image)?.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
