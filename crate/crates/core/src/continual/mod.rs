//! Step-wise model updates with sparse episodic replay, and sequential
//! (disjoint-task) training with a per-task evaluation matrix.

pub mod memory;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::CaptionModel;
use crate::dataset::{CaptionRecord, ImageRecord, Provenance};
use crate::metrics::{evaluate, EvalItem};
use crate::{Error, Result};
pub use memory::{memory_sample, memory_write, Experience, ReplayMemory, DEFAULT_CAPACITY};

pub const DEFAULT_REPLAY_EVERY: usize = 10;

/// Images replay can draw from, keyed by image id.
pub type ImageIndex = HashMap<String, ImageRecord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// One replay batch after every `replay_every` new batches; `None` disables replay.
    pub replay_every: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Keep augmented captions out of the replay memory.
    pub exclude_augmented_from_memory: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            batch_size: 8,
            lr: 0.01,
            replay_every: Some(DEFAULT_REPLAY_EVERY),
            epochs: 1,
            seed: 0,
            exclude_augmented_from_memory: false,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.replay_every == Some(0) {
            return Err(Error::Argument("batch_size, epochs and replay_every must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Argument(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub task_id: u32,
    pub new_batches: usize,
    pub replay_batches: usize,
    /// Loss of the last new-data batch; `None` for a no-op update.
    pub final_loss: Option<f64>,
    pub checkpoint_hash: String,
}

/// Train on `new_instances`, replaying memory sparsely, and write every
/// consumed instance to memory.
///
/// Replay images are looked up first among the new instances, then in
/// `images`; memory entries whose image cannot be found are skipped.
pub fn update<M: CaptionModel + ?Sized>(
    model: &mut M,
    new_instances: &[(ImageRecord, CaptionRecord)],
    mem: &mut ReplayMemory,
    images: &ImageIndex,
    config: &UpdateConfig,
    task_id: u32,
) -> Result<UpdateReport> {
    config.validate()?;
    let mut report = UpdateReport {
        task_id,
        new_batches: 0,
        replay_batches: 0,
        final_loss: None,
        checkpoint_hash: model.content_hash(),
    };
    if new_instances.is_empty() {
        return Ok(report);
    }
    let local: HashMap<&str, &ImageRecord> = new_instances.iter().map(|(i, _)| (i.image_id.as_str(), i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..new_instances.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ImageRecord, CaptionRecord)> = chunk.iter().map(|&i| new_instances[i].clone()).collect();
            report.final_loss = Some(model.train_step(&batch, config.lr)?);
            report.new_batches += 1;
            for (_, c) in &batch {
                if config.exclude_augmented_from_memory && c.provenance == Provenance::Augmented {
                    continue;
                }
                let step = mem.seen_count();
                mem.write(Experience::new(c.clone(), step)?);
            }
            if let Some(every) = config.replay_every {
                if report.new_batches.is_multiple_of(every) {
                    let seed = config.seed ^ (report.new_batches as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    let replay: Vec<(ImageRecord, CaptionRecord)> = mem
                        .sample(config.batch_size, seed)
                        .into_iter()
                        .filter_map(|e| {
                            let img = local.get(e.image_id.as_str()).copied().or_else(|| images.get(&e.image_id))?;
                            Some((img.clone(), e.caption))
                        })
                        .collect();
                    if !replay.is_empty() {
                        model.train_step(&replay, config.lr)?;
                        report.replay_batches += 1;
                    }
                }
            }
        }
    }
    report.checkpoint_hash = model.content_hash();
    Ok(report)
}

/// One sequential task: its training pairs and its evaluation set.
#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: u32,
    pub train: Vec<(ImageRecord, CaptionRecord)>,
    pub eval: Vec<EvalItem>,
}

/// `T × (T+1)` matrix: row `i` holds scores after training task `i`;
/// columns are tasks then the union of all evaluation sets. Entries for
/// tasks not yet trained are `None`.
pub type RMatrix = Vec<Vec<Option<f64>>>;

#[derive(Debug, Clone)]
pub struct DisjointOutcome {
    pub r: RMatrix,
    pub reports: Vec<UpdateReport>,
    /// `(after_task, evaluated_column)` in call order; the union column is `T`.
    pub eval_trace: Vec<(usize, usize)>,
}

pub fn train_disjoint<M: CaptionModel + ?Sized>(
    model: &mut M,
    tasks: &[Task],
    mem: &mut ReplayMemory,
    images: &ImageIndex,
    config: &UpdateConfig,
) -> Result<DisjointOutcome> {
    if tasks.is_empty() {
        return Err(Error::Argument("no tasks".into()));
    }
    let t = tasks.len();
    let union: Vec<EvalItem> = tasks.iter().flat_map(|task| task.eval.iter().cloned()).collect();
    let mut out = DisjointOutcome {
        r: vec![vec![None; t + 1]; t],
        reports: Vec::with_capacity(t),
        eval_trace: Vec::new(),
    };
    for (i, task) in tasks.iter().enumerate() {
        let cfg = UpdateConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        out.reports.push(update(model, &task.train, mem, images, &cfg, task.task_id)?);
        for (j, other) in tasks.iter().enumerate().take(i + 1) {
            if !other.eval.is_empty() {
                out.r[i][j] = Some(evaluate(model, &other.eval)?.bleu4);
            }
            out.eval_trace.push((i, j));
        }
        if !union.is_empty() {
            out.r[i][t] = Some(evaluate(model, &union)?.bleu4);
        }
        out.eval_trace.push((i, t));
    }
    Ok(out)
}

/// Peak earlier score on column `j` minus the score after the last row.
/// Unfilled entries are skipped; with no earlier score the result is 0.
pub fn forgetting(r: &[Vec<Option<f64>>], j: usize) -> Result<f64> {
    let last = r.last().ok_or_else(|| Error::Argument("empty matrix".into()))?;
    if j >= last.len() {
        return Err(Error::Argument(format!("column {j} out of range for {} columns", last.len())));
    }
    let Some(final_score) = last[j] else {
        return Err(Error::Argument(format!("column {j} not filled in the last row")));
    };
    let peak = r[..r.len() - 1].iter().filter_map(|row| row.get(j).copied().flatten()).fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.max(v)))
    });
    Ok(peak.map_or(0.0, |p| p - final_score))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forgetting_examples() {
        let r = vec![vec![Some(0.8), None, Some(0.8)], vec![Some(0.5), Some(0.9), Some(0.7)]];
        assert!((forgetting(&r, 0).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(forgetting(&r, 1).unwrap(), 0.0);
        assert!((forgetting(&r, 2).unwrap() - 0.1).abs() < 1e-12);
        assert!(forgetting(&r, 3).is_err());
        let constant = vec![vec![Some(0.4), None], vec![Some(0.4), Some(0.1)]];
        assert_eq!(forgetting(&constant, 0).unwrap(), 0.0);
        assert!(forgetting(&[], 0).is_err());
    }

    #[test]
    fn negative_forgetting_when_later_training_helps() {
        let r = vec![vec![Some(0.2), None], vec![Some(0.6), Some(0.5)]];
        assert!((forgetting(&r, 0).unwrap() + 0.4).abs() < 1e-12);
    }
}
