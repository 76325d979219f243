use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capfeed::augment::image::augment_image;
use capfeed::augment::joint::{cutmix_joint_with, JointConfig};
use capfeed::augment::text::{augment_caption, StubBackend, SynonymLexicon, TextAugmentConfig, TextBackend};
use capfeed::captioner::{pretrain, Captioner, CaptionerConfig, PretrainConfig};
use capfeed::continual::{forgetting, train_disjoint, update, ImageIndex, ReplayMemory, Task, UpdateConfig, DEFAULT_CAPACITY};
use capfeed::dataset::synth::{all_specs, make_dataset, Shape};
use capfeed::dataset::{
    build_vocab, load_coco, load_dir, load_vizwiz, read_captions_jsonl, save_dir, write_captions_jsonl, CaptionRecord,
    ImageRecord, LoadOptions, Loaded, SplitTag, VIZWIZ_VAL_FRACTION,
};
use capfeed::metrics::{evaluate, EvalItem};
use capfeed::split::embed::EmbeddingTable;
use capfeed::split::{assign_splits, read_splits, write_splits, TaskSplit, DEFAULT_SPLITS};
use capfeed_service::sim::{run_loop, sim_items, write_transcript, SimOptions};
use capfeed_service::{AppState, HttpBackend, ServiceConfig};
use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "capfeed", version, about = "Interactive image-captioning adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Import or generate datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train an initial checkpoint on a dataset directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// TOML with optional [model] and [train] tables and `min_freq`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate augmentations.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Cluster caption noun phrases into task splits.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(short, long, default_value_t = DEFAULT_SPLITS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One step-wise update with replay.
    Update {
        #[arg(long)]
        ckpt: PathBuf,
        /// Captions JSONL to train on.
        #[arg(long)]
        instances: PathBuf,
        /// Dataset directory holding the images the instances refer to.
        #[arg(long)]
        data: PathBuf,
        /// Replay memory file; created when missing and rewritten afterwards.
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        update: UpdateArgs,
    },
    /// Train on splits one after another and write the evaluation matrix.
    TrainDisjoint {
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Replay memory file; in-memory only when omitted.
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[command(flatten)]
        update: UpdateArgs,
    },
    /// BLEU-4 of a checkpoint, overall or per split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Fraction of each split evaluated; 1 evaluates every image.
        #[arg(long, default_value_t = 1.0)]
        holdout: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the HTTP feedback service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Drive a running service with a simulated user.
    Simulate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// 0 disables updates.
        #[arg(long, default_value_t = 10)]
        update_every: usize,
        /// Shuffles the visiting order; omit to keep dataset order.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = capfeed::sim::DEFAULT_RATING_THRESHOLD)]
        threshold: f64,
        /// Rank variants instead of rating them.
        #[arg(long)]
        rank: bool,
        #[arg(long)]
        no_boxes: bool,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        transcript: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Coco,
    Vizwiz,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Convert COCO or VizWiz annotations into a dataset directory.
    Load {
        #[arg(long, value_enum)]
        format: Format,
        /// COCO annotation file, or the VizWiz annotation directory.
        #[arg(long)]
        annotations: PathBuf,
        /// COCO split file mapping image id to train/val/test.
        #[arg(long)]
        split_file: Option<PathBuf>,
        #[arg(long)]
        images_dir: Option<PathBuf>,
        #[arg(long, default_value_t = VIZWIZ_VAL_FRACTION)]
        val_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic colored-shapes dataset.
    Synth {
        /// Comma-separated subset of circle, square, triangle, star.
        #[arg(long, default_value = "circle,square,triangle,star")]
        shapes: String,
        #[arg(long, default_value_t = 32)]
        side: u32,
        /// Copies of every (shape, color, size) combination.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "img")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Synonym, back-translation and paraphrase variants of every caption.
    Text {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the offline table-driven backend (identity unless --stub-table is given).
        #[arg(long)]
        stub_backends: bool,
        #[arg(long)]
        stub_table: Option<PathBuf>,
        #[arg(long)]
        backend_url: Option<String>,
        /// TOML text augmentation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Box-aware image variants of every image.
    Image {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(short, default_value_t = capfeed::augment::image::DEFAULT_IMAGE_AUGMENTATIONS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paste a labeled box from each source image into a destination image.
    Joint {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "there is a {label} .")]
        template: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args, Clone)]
struct UpdateArgs {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// 0 disables replay.
    #[arg(long, default_value_t = capfeed::continual::DEFAULT_REPLAY_EVERY)]
    replay_every: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
    #[arg(long)]
    exclude_augmented: bool,
}

impl UpdateArgs {
    fn config(&self) -> UpdateConfig {
        UpdateConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            replay_every: (self.replay_every > 0).then_some(self.replay_every),
            epochs: self.epochs,
            seed: self.seed,
            exclude_augmented_from_memory: self.exclude_augmented,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainFile {
    model: CaptionerConfig,
    train: PretrainConfig,
    min_freq: Option<usize>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Data(cmd) => data(cmd),
        Command::Pretrain { data, config, out } => pretrain_cmd(&data, config.as_deref(), &out),
        Command::Augment(cmd) => augment(cmd),
        Command::Split { data, embeddings, k, seed, out } => split_cmd(&data, &embeddings, k, seed, &out),
        Command::Update { ckpt, instances, data, memory, out, update } => update_cmd(&ckpt, &instances, &data, &memory, &out, &update),
        Command::TrainDisjoint { splits, data, ckpt, out, report, memory, holdout, update } => {
            train_disjoint_cmd(&splits, &data, &ckpt, &out, &report, memory.as_deref(), holdout, &update)
        }
        Command::Eval { ckpt, data, splits, holdout, report } => eval_cmd(&ckpt, &data, splits.as_deref(), holdout, report.as_deref()),
        Command::Serve { config, listen } => serve_cmd(config.as_deref(), listen),
        Command::Simulate { data, endpoint, rounds, update_every, seed, threshold, rank, no_boxes, limit, transcript } => {
            let opts = SimOptions {
                update_every: (update_every > 0).then_some(update_every),
                threshold,
                rank,
                post_boxes: !no_boxes,
                ..SimOptions::default()
            };
            simulate_cmd(&data, &endpoint, rounds, seed, limit, &opts, &transcript)
        }
    }
}

fn report_errors(loaded: &Loaded) {
    for e in &loaded.errors {
        eprintln!("skipped {}: {}", e.record, e.message);
    }
}

fn data(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Load { format, annotations, split_file, images_dir, val_fraction, out } => {
            let opts = LoadOptions { images_dir, lazy: false };
            let loaded = match format {
                Format::Coco => {
                    let split = split_file.context("--split-file is required for COCO")?;
                    load_coco(&annotations, &split, &opts)?
                }
                Format::Vizwiz => load_vizwiz(&annotations, &opts, val_fraction)?,
            };
            report_errors(&loaded);
            save_dir(&out, &loaded.images, &loaded.captions)?;
            println!("{} images, {} captions, {} skipped", loaded.images.len(), loaded.captions.len(), loaded.errors.len());
        }
        DataCommand::Synth { shapes, side, repeat, seed, prefix, out } => {
            let shapes = shapes
                .split(',')
                .map(|s| match s.trim() {
                    "circle" => Ok(Shape::Circle),
                    "square" => Ok(Shape::Square),
                    "triangle" => Ok(Shape::Triangle),
                    "star" => Ok(Shape::Star),
                    other => bail!("unknown shape {other:?}"),
                })
                .collect::<Result<Vec<_>>>()?;
            let specs: Vec<_> = all_specs(&shapes).into_iter().cycle().take(all_specs(&shapes).len() * repeat).collect();
            let (images, captions) = make_dataset(&specs, side, seed, &prefix, SplitTag::Train);
            save_dir(&out, &images, &captions)?;
            println!("{} images", images.len());
        }
    }
    Ok(())
}

fn pairs_of(loaded: &Loaded) -> Vec<(ImageRecord, CaptionRecord)> {
    let by_id: HashMap<&str, &ImageRecord> = loaded.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    loaded
        .captions
        .iter()
        .filter_map(|c| Some(((*by_id.get(c.image_id.as_str())?).clone(), c.clone())))
        .collect()
}

fn pretrain_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let file: PretrainFile = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("{}", p.display()))?,
        None => PretrainFile::default(),
    };
    let loaded = load_dir(data, false)?;
    report_errors(&loaded);
    let train: Vec<_> = pairs_of(&loaded).into_iter().filter(|(i, _)| i.split == SplitTag::Train).collect();
    let vocab = build_vocab(&loaded.captions, file.min_freq.unwrap_or(1));
    let mut model = Captioner::new(file.model, vocab)?;
    let history = pretrain(&mut model, &train, &file.train)?;
    model.save(out)?;
    println!(
        "trained on {} pairs; loss {:.4} -> {:.4}; checkpoint {}",
        train.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN),
        model.content_hash()
    );
    Ok(())
}

fn augment(cmd: AugmentCommand) -> Result<()> {
    match cmd {
        AugmentCommand::Text { input, out, stub_backends, stub_table, backend_url, config, seed } => {
            let mut cfg: TextAugmentConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("{}", p.display()))?,
                None => TextAugmentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let backend: Box<dyn TextBackend> = match (backend_url, stub_table) {
                (Some(url), _) if !stub_backends => Box::new(HttpBackend::new(url)),
                (_, Some(table)) => Box::new(StubBackend::from_json(&std::fs::read_to_string(table)?)?),
                (None, None) if stub_backends => Box::new(StubBackend::identity()),
                _ => bail!("choose --stub-backends, --stub-table or --backend-url"),
            };
            let lexicon = SynonymLexicon::builtin();
            let captions = read_captions_jsonl(&input)?;
            let mut all = Vec::new();
            for c in &captions {
                all.extend(augment_caption(c, &cfg, &lexicon, backend.as_ref())?);
            }
            write_captions_jsonl(&out, &all)?;
            println!("{} captions -> {} variants", captions.len(), all.len());
        }
        AugmentCommand::Image { input, out, k, seed } => {
            let loaded = load_dir(&input, false)?;
            report_errors(&loaded);
            let mut images = Vec::new();
            for (i, im) in loaded.images.iter().enumerate() {
                images.extend(augment_image(im, k, seed.wrapping_add(i as u64))?);
            }
            save_dir(&out, &images, &[])?;
            println!("{} images -> {} variants", loaded.images.len(), images.len());
        }
        AugmentCommand::Joint { src, dst, out, template, seed } => {
            let src = load_dir(&src, false)?;
            let dst = load_dir(&dst, false)?;
            let config = JointConfig { template, ..JointConfig::default() };
            let donors: Vec<_> = src
                .images
                .iter()
                .filter_map(|im| im.bboxes.iter().find(|b| b.label.is_some()).map(|b| (im, b)))
                .collect();
            if donors.is_empty() {
                bail!("no source image has a labeled box");
            }
            let (mut images, mut captions) = (Vec::new(), Vec::new());
            let mut failed = 0;
            for (i, im) in dst.images.iter().enumerate() {
                let Some(cap) = dst.captions.iter().find(|c| c.image_id == im.image_id) else { continue };
                let (donor, b) = donors[i % donors.len()];
                match cutmix_joint_with(donor, b, im, cap, seed.wrapping_add(i as u64), &config) {
                    Ok((img, c)) => {
                        images.push(img);
                        captions.push(c);
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", im.image_id);
                    }
                }
            }
            save_dir(&out, &images, &captions)?;
            println!("{} joint variants, {failed} placements failed", images.len());
        }
    }
    Ok(())
}

fn split_cmd(data: &Path, embeddings: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    let loaded = load_dir(data, true)?;
    let table = EmbeddingTable::read(embeddings)?;
    let outcome = assign_splits(&loaded.images, &loaded.captions, &table, k, seed)?;
    write_splits(out, &outcome.splits)?;
    println!("split sizes {:?}; {} phrases out of vocabulary", outcome.sizes(), outcome.oov_phrases.len());
    Ok(())
}

fn load_memory(path: &Path, capacity: usize, seed: u64) -> Result<ReplayMemory> {
    Ok(if path.exists() { ReplayMemory::load(path)? } else { ReplayMemory::new(capacity, seed) })
}

fn update_cmd(ckpt: &Path, instances: &Path, data: &Path, memory: &Path, out: &Path, args: &UpdateArgs) -> Result<()> {
    let mut model = Captioner::load(ckpt)?;
    let loaded = load_dir(data, true)?;
    let index: ImageIndex = loaded.images.into_iter().map(|i| (i.image_id.clone(), i)).collect();
    let captions = read_captions_jsonl(instances)?;
    let pairs = captions
        .into_iter()
        .map(|c| {
            let img = index.get(&c.image_id).with_context(|| format!("unknown image {}", c.image_id))?;
            Ok((img.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mem = load_memory(memory, args.capacity, args.seed)?;
    let report = update(&mut model, &pairs, &mut mem, &index, &args.config(), 0)?;
    model.save(out)?;
    mem.save(memory)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Per split: training pairs, and evaluation items for the last `holdout` share of its images.
fn split_tasks(loaded: &Loaded, splits: &[TaskSplit], holdout: f64) -> Result<Vec<Task>> {
    if !(0.0..=1.0).contains(&holdout) {
        bail!("holdout {holdout} outside [0, 1]");
    }
    let by_id: HashMap<&str, &ImageRecord> = loaded.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut caps: HashMap<&str, Vec<&CaptionRecord>> = HashMap::new();
    for c in &loaded.captions {
        caps.entry(c.image_id.as_str()).or_default().push(c);
    }
    splits
        .iter()
        .map(|s| {
            let n_eval = (s.image_ids.len() as f64 * holdout).ceil() as usize;
            let cut = s.image_ids.len() - n_eval;
            let mut task = Task { task_id: s.split_id as u32, train: Vec::new(), eval: Vec::new() };
            for (pos, id) in s.image_ids.iter().enumerate() {
                let img = by_id.get(id.as_str()).with_context(|| format!("split {} names unknown image {id}", s.split_id))?;
                let refs = caps.get(id.as_str()).cloned().unwrap_or_default();
                if pos < cut {
                    task.train.extend(refs.iter().map(|c| ((*img).clone(), (*c).clone())));
                } else if !refs.is_empty() {
                    task.eval.push(((*img).clone(), refs.iter().map(|c| c.tokens.clone()).collect()));
                }
            }
            Ok(task)
        })
        .collect()
}

#[derive(Serialize)]
struct DisjointReport {
    columns: Vec<String>,
    r: Vec<Vec<Option<f64>>>,
    forgetting: Vec<Option<f64>>,
    updates: Vec<capfeed::continual::UpdateReport>,
}

#[allow(clippy::too_many_arguments)]
fn train_disjoint_cmd(
    splits: &Path,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    report: &Path,
    memory: Option<&Path>,
    holdout: f64,
    args: &UpdateArgs,
) -> Result<()> {
    let loaded = load_dir(data, false)?;
    let splits = read_splits(splits)?;
    let tasks = split_tasks(&loaded, &splits, holdout)?;
    let mut model = Captioner::load(ckpt)?;
    let mut mem = match memory {
        Some(p) => load_memory(p, args.capacity, args.seed)?,
        None => ReplayMemory::new(args.capacity, args.seed),
    };
    let index: ImageIndex = loaded.images.iter().map(|i| (i.image_id.clone(), i.clone())).collect();
    let outcome = train_disjoint(&mut model, &tasks, &mut mem, &index, &args.config())?;
    model.save(out)?;
    if let Some(p) = memory {
        mem.save(p)?;
    }
    let t = tasks.len();
    let rep = DisjointReport {
        columns: tasks.iter().map(|t| format!("split-{}", t.task_id)).chain(std::iter::once("union".into())).collect(),
        forgetting: (0..=t).map(|j| forgetting(&outcome.r, j).ok()).collect(),
        r: outcome.r,
        updates: outcome.reports,
    };
    std::fs::write(report, serde_json::to_string_pretty(&rep)?)?;
    for (row, name) in rep.r.iter().zip(&rep.columns) {
        let cells: Vec<String> = row.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.4}"))).collect();
        println!("after {name}: {}", cells.join(" "));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint_hash: String,
    overall: capfeed::metrics::EvalReport,
    per_split: BTreeMap<usize, capfeed::metrics::EvalReport>,
}

fn eval_cmd(ckpt: &Path, data: &Path, splits: Option<&Path>, holdout: f64, report: Option<&Path>) -> Result<()> {
    let model = Captioner::load(ckpt)?;
    let loaded = load_dir(data, true)?;
    let mut per_split = BTreeMap::new();
    let all: Vec<EvalItem> = match splits {
        Some(p) => {
            let splits = read_splits(p)?;
            let tasks = split_tasks(&loaded, &splits, holdout)?;
            for t in &tasks {
                if !t.eval.is_empty() {
                    per_split.insert(t.task_id as usize, evaluate(&model, &t.eval)?);
                }
            }
            tasks.into_iter().flat_map(|t| t.eval).collect()
        }
        None => {
            let mut refs: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
            for c in &loaded.captions {
                refs.entry(c.image_id.as_str()).or_default().push(c.tokens.clone());
            }
            loaded
                .images
                .iter()
                .filter_map(|i| Some((i.clone(), refs.get(i.image_id.as_str())?.clone())))
                .collect()
        }
    };
    let out = EvalOutput { checkpoint_hash: model.content_hash(), overall: evaluate(&model, &all)?, per_split };
    let json = serde_json::to_string_pretty(&out)?;
    match report {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    eprintln!("BLEU-4 {:.4} over {} images", out.overall.bleu4, out.overall.n);
    Ok(())
}

fn serve_cmd(config: Option<&Path>, listen: Option<String>) -> Result<()> {
    let mut cfg = ServiceConfig::load(config)?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen).await.with_context(|| format!("bind {}", cfg.listen))?;
        let addr = listener.local_addr()?;
        let state = AppState::from_config(cfg)?;
        // Printed on stdout so wrappers can find an ephemeral port.
        println!("listening on http://{addr}");
        capfeed_service::serve(state, listener).await?;
        Ok(())
    })
}

fn simulate_cmd(
    data: &Path,
    endpoint: &str,
    rounds: usize,
    seed: Option<u64>,
    limit: Option<usize>,
    opts: &SimOptions,
    transcript: &Path,
) -> Result<()> {
    let loaded = load_dir(data, true)?;
    let mut items = sim_items(&loaded.images, &loaded.captions);
    if let Some(s) = seed {
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    if let Some(n) = limit {
        items.truncate(n);
    }
    let rt = tokio::runtime::Runtime::new()?;
    let t = rt.block_on(run_loop(&items, endpoint, rounds, opts))?;
    write_transcript(transcript, &t)?;
    let failed = t.iter().filter(|e| !e.ok()).count();
    let updates = t.iter().filter(|e| e.call == "update").count();
    println!("{} calls, {updates} updates, {failed} failed", t.len());
    Ok(())
}
