use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use capfeed::captioner::{AttentionTrace, CaptionModel, GenerateOptions, Generated};
use capfeed::continual::{
    forgetting, memory_sample, train_disjoint, update, Experience, ImageIndex, ReplayMemory, Task, UpdateConfig,
};
use capfeed::dataset::{build_vocab, CaptionRecord, ImageRecord, Provenance, SplitTag, Vocabulary};
use capfeed::Result;
use image::RgbImage;
use proptest::prelude::*;

/// Counts calls; scores depend only on how many steps it has taken.
struct Recorder {
    vocab: Vocabulary,
    steps: usize,
    batch_sizes: Vec<usize>,
    evals: Arc<AtomicUsize>,
}

impl Recorder {
    fn new() -> Self {
        Recorder {
            vocab: build_vocab(&[], 1),
            steps: 0,
            batch_sizes: Vec::new(),
            evals: Arc::new(AtomicUsize::new(0)),
        }
    }
}

impl CaptionModel for Recorder {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn generate(&self, image: &ImageRecord, _opts: &GenerateOptions) -> Result<Generated> {
        self.evals.fetch_add(1, Ordering::SeqCst);
        let text = if self.steps.is_multiple_of(2) { "a dog" } else { "a cat" };
        Ok(Generated {
            caption: CaptionRecord::new("p", &image.image_id, text, Provenance::Predicted),
            trace: AttentionTrace { rows: vec![] },
        })
    }

    fn train_step(&mut self, batch: &[(ImageRecord, CaptionRecord)], _lr: f64) -> Result<f64> {
        self.steps += 1;
        self.batch_sizes.push(batch.len());
        Ok(1.0 / self.steps as f64)
    }

    fn content_hash(&self) -> String {
        format!("steps-{}", self.steps)
    }

    fn default_generate_options(&self) -> GenerateOptions {
        GenerateOptions::greedy(5)
    }
}

fn img(id: &str) -> ImageRecord {
    ImageRecord::from_rgb(id, RgbImage::new(2, 2), vec![], SplitTag::Train).unwrap()
}

fn instances(prefix: &str, n: usize) -> Vec<(ImageRecord, CaptionRecord)> {
    (0..n)
        .map(|i| {
            let id = format!("{prefix}{i}");
            (img(&id), CaptionRecord::new(format!("{id}-c"), &id, "a dog", Provenance::Corrected))
        })
        .collect()
}

fn exp(i: usize) -> Experience {
    Experience::new(CaptionRecord::new(format!("c{i}"), format!("i{i}"), "x", Provenance::GroundTruth), i as u64).unwrap()
}

#[test]
fn reservoir_inclusion_is_uniform() {
    // 20,000 trials keep the ±0.005 per-item band at about seven standard errors.
    let trials = 20_000;
    let mut hits = vec![0u32; 1000];
    let stream: Vec<Experience> = (0..1000).map(exp).collect();
    for t in 0..trials {
        let mut m = ReplayMemory::new(10, t);
        for e in &stream {
            m.write(e.clone());
        }
        for e in m.entries() {
            hits[e.write_step as usize] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let rate = h as f64 / trials as f64;
        assert!((rate - 0.01).abs() <= 0.005, "item {i}: {rate}");
    }
}

#[test]
fn sampling_is_uniform() {
    let mut m = ReplayMemory::new(10, 0);
    (0..10).for_each(|i| m.write(exp(i)));
    let mut counts = [0u32; 10];
    for seed in 0..10_000 {
        let s = memory_sample(&m, 1, seed);
        counts[s[0].write_step as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{counts:?}");
    }
}

#[test]
fn replay_schedule_arithmetic() {
    let data = instances("n", 100);
    for (every, expected) in [(Some(10), 10), (Some(1), 100), (Some(7), 14), (Some(300), 0), (None, 0)] {
        let mut model = Recorder::new();
        let mut mem = ReplayMemory::new(1000, 1);
        let cfg = UpdateConfig {
            batch_size: 1,
            replay_every: every,
            ..UpdateConfig::default()
        };
        let r = update(&mut model, &data, &mut mem, &ImageIndex::new(), &cfg, 0).unwrap();
        assert_eq!(r.new_batches, 100);
        assert_eq!(r.replay_batches, expected, "{every:?}");
        assert_eq!(model.steps, 100 + expected);
        assert_eq!(mem.len(), 100);
    }
}

#[test]
fn eleven_instances_in_batches_of_four() {
    let mut model = Recorder::new();
    let mut mem = ReplayMemory::new(100, 1);
    let cfg = UpdateConfig {
        batch_size: 4,
        replay_every: None,
        ..UpdateConfig::default()
    };
    let r = update(&mut model, &instances("x", 11), &mut mem, &ImageIndex::new(), &cfg, 0).unwrap();
    assert_eq!(r.new_batches, 3);
    assert_eq!(model.batch_sizes, vec![4, 4, 3]);
    assert_eq!(r.checkpoint_hash, "steps-3");
}

#[test]
fn empty_update_is_noop() {
    let mut model = Recorder::new();
    let mut mem = ReplayMemory::new(10, 0);
    let r = update(&mut model, &[], &mut mem, &ImageIndex::new(), &UpdateConfig::default(), 4).unwrap();
    assert_eq!((r.new_batches, r.replay_batches, r.final_loss, r.task_id), (0, 0, None, 4));
    assert_eq!(model.steps, 0);
}

#[test]
fn augmented_captions_can_be_kept_out_of_memory() {
    let mut data = instances("a", 4);
    for (_, c) in data.iter_mut().take(3) {
        c.provenance = Provenance::Augmented;
        c.parent_id = Some("root".into());
        c.method_tag = Some("synonym".into());
    }
    let mut mem = ReplayMemory::new(10, 0);
    let cfg = UpdateConfig {
        exclude_augmented_from_memory: true,
        ..UpdateConfig::default()
    };
    update(&mut Recorder::new(), &data, &mut mem, &ImageIndex::new(), &cfg, 0).unwrap();
    assert_eq!(mem.len(), 1);
}

fn task(id: u32, n: usize) -> Task {
    let train = instances(&format!("t{id}-"), n);
    let eval = train.iter().map(|(i, _)| (i.clone(), vec![vec!["a".to_string(), "dog".to_string()]])).collect();
    Task { task_id: id, train, eval }
}

#[test]
fn disjoint_matrix_shape_and_fill_order() {
    let tasks = vec![task(0, 3), task(1, 3)];
    let mut model = Recorder::new();
    let mut mem = ReplayMemory::new(10, 0);
    let out = train_disjoint(&mut model, &tasks, &mut mem, &ImageIndex::new(), &UpdateConfig::default()).unwrap();
    assert_eq!(out.r.len(), 2);
    assert!(out.r.iter().all(|row| row.len() == 3));
    assert!(out.r[0][0].is_some() && out.r[0][1].is_none() && out.r[0][2].is_some());
    assert!(out.r[1].iter().all(Option::is_some));
    assert_eq!(out.eval_trace, vec![(0, 0), (0, 2), (1, 0), (1, 1), (1, 2)]);
    assert!(forgetting(&out.r, 0).is_ok());

    let single = train_disjoint(&mut Recorder::new(), &tasks[..1], &mut ReplayMemory::new(10, 0), &ImageIndex::new(), &UpdateConfig::default())
        .unwrap();
    assert_eq!(single.r.len(), 1);
    assert_eq!(single.r[0][0], single.r[0][1]);
}

#[test]
fn disjoint_is_deterministic() {
    let tasks = vec![task(0, 5), task(1, 4), task(2, 6)];
    let run = || {
        let mut model = Recorder::new();
        let mut mem = ReplayMemory::new(4, 3);
        let cfg = UpdateConfig {
            batch_size: 2,
            replay_every: Some(2),
            ..UpdateConfig::default()
        };
        let out = train_disjoint(&mut model, &tasks, &mut mem, &ImageIndex::new(), &cfg).unwrap();
        (out.r, mem)
    };
    assert_eq!(run(), run());
}

fn brute_forgetting(r: &[Vec<Option<f64>>], j: usize) -> f64 {
    let last = r.len() - 1;
    let mut best: Option<f64> = None;
    for row in &r[..last] {
        if let Some(v) = row[j] {
            best = Some(match best {
                Some(b) if b >= v => b,
                _ => v,
            });
        }
    }
    best.map(|b| b - r[last][j].unwrap()).unwrap_or(0.0)
}

proptest! {
    #[test]
    fn capacity_bound_holds(cap in 0usize..20, ops in prop::collection::vec(0u8..3, 0..200), seed in any::<u64>()) {
        let mut m = ReplayMemory::new(cap, seed);
        for (i, op) in ops.iter().enumerate() {
            match op {
                0 | 1 => m.write(exp(i)),
                _ => {
                    let s = m.sample(i % 7 + 1, i as u64);
                    prop_assert!(m.is_empty() == s.is_empty());
                }
            }
            prop_assert!(m.len() <= cap);
        }
    }

    #[test]
    fn forgetting_matches_brute_force(vals in prop::collection::vec(0.0f64..1.0, 12)) {
        // Lower-triangular 3-task matrix plus union column.
        let r: Vec<Vec<Option<f64>>> = (0..3)
            .map(|i| (0..4).map(|j| if j <= i || j == 3 { Some(vals[i * 4 + j]) } else { None }).collect())
            .collect();
        for j in 0..4 {
            let got = forgetting(&r, j).unwrap();
            prop_assert!((got - brute_forgetting(&r, j)).abs() < 1e-12);
        }
    }
}
