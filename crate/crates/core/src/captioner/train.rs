use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CaptionModel;
use crate::dataset::{CaptionRecord, ImageRecord};
use crate::{Error, Result};

/// Supervised training schedule for building an initial checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 50, batch_size: 16, lr: 0.01, seed: 0 }
    }
}

/// Shuffled mini-batch training; returns the mean batch loss of each epoch.
pub fn pretrain<M: CaptionModel + ?Sized>(
    model: &mut M,
    pairs: &[(ImageRecord, CaptionRecord)],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Argument("no training pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            total += model.train_step(&batch, config.lr)?;
            n += 1;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}
