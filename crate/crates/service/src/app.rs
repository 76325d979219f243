//! Routes, shared state, and the background augmentation and update jobs.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State as Extract};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use capfeed::augment::image::{apply_transform, sample_transforms};
use capfeed::augment::text::{augment_caption, StubBackend, SynonymLexicon, TextBackend};
use capfeed::augment::{AugmentationSet, ImageVariant, Rating, Variant, VariantContent};
use capfeed::captioner::{CaptionModel, Captioner};
use capfeed::continual::{forgetting, update, ImageIndex, ReplayMemory, UpdateReport};
use capfeed::dataset::{decode_bytes, BBox, CaptionRecord, ImageRecord, Provenance, SplitTag};
use capfeed::feedback::{
    correction_caption_id, parse_event_id, set_id_for, EventLog, EventPayload, FeedbackEvent, NewEvent,
    PendingItem, RatingPayload,
};
use capfeed::metrics::{evaluate, EvalItem};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Mutex as AsyncMutex;

use crate::backend::HttpBackend;
use crate::config::ServiceConfig;
use crate::ServiceError;

/// JSON error response `{"error": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<capfeed::Error> for ApiError {
    fn from(e: capfeed::Error) -> Self {
        let status = match e {
            capfeed::Error::Argument(_) | capfeed::Error::Placement { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            capfeed::Error::Image(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(c) => c.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Evaluation set of one training update: images and their corrected captions.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RoundEval {
    items: Vec<(String, Vec<Vec<String>>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoundRecord {
    report: UpdateReport,
    eval: RoundEval,
    /// BLEU-4 on rounds `0..=i` then on their union.
    row: Vec<Option<f64>>,
    seen_before: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct MetricsStore {
    rounds: Vec<RoundRecord>,
}

/// Shared state behind every handler.
pub struct AppState {
    config: ServiceConfig,
    /// Serving snapshot; an update builds a new model and swaps the `Arc`.
    model: RwLock<Option<Arc<Captioner>>>,
    log: EventLog,
    images: RwLock<HashMap<String, ImageRecord>>,
    memory: Mutex<ReplayMemory>,
    update_lock: Arc<AsyncMutex<()>>,
    /// image_id → number of augmentation jobs still running.
    augmenting: Mutex<HashMap<String, usize>>,
    metrics: Mutex<MetricsStore>,
    lexicon: SynonymLexicon,
    backend: Arc<dyn TextBackend>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Event number mixed into augmentation seeds.
fn event_number(event_id: &str) -> u64 {
    parse_event_id(event_id).unwrap_or(0)
}

impl AppState {
    /// Build the service from parts. Replays the log, re-queues augmentation
    /// for corrections whose sets were never written, and closes an update
    /// that a previous process left in flight.
    pub fn new(
        config: ServiceConfig,
        model: Option<Captioner>,
        images: Vec<ImageRecord>,
        backend: Arc<dyn TextBackend>,
    ) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        std::fs::create_dir_all(&config.checkpoint_dir)?;
        let log = EventLog::open(&config.log_path)?;
        let memory = match &config.memory_path {
            Some(p) if p.exists() => ReplayMemory::load(p)?,
            _ => ReplayMemory::new(config.memory_capacity, config.memory_seed),
        };
        let metrics_path = config.checkpoint_dir.join("metrics.json");
        let metrics = if metrics_path.exists() {
            serde_json::from_slice(&std::fs::read(&metrics_path)?).map_err(|e| ServiceError::Config(format!("{}: {e}", metrics_path.display())))?
        } else {
            MetricsStore::default()
        };
        let state = Arc::new(AppState {
            model: RwLock::new(model.map(Arc::new)),
            log,
            images: RwLock::new(images.into_iter().map(|i| (i.image_id.clone(), i)).collect()),
            memory: Mutex::new(memory),
            update_lock: Arc::new(AsyncMutex::new(())),
            augmenting: Mutex::new(HashMap::new()),
            metrics: Mutex::new(metrics),
            lexicon: SynonymLexicon::builtin(),
            backend,
            config,
        });
        if state.log.with_state(|s| !s.in_flight.is_empty()) {
            state.log.append(NewEvent {
                image_id: String::new(),
                payload: EventPayload::UpdateCompleted {
                    report: None,
                    error: Some("interrupted by restart".into()),
                },
            })?;
        }
        Ok(state)
    }

    /// Build from config: checkpoint (`checkpoint_dir/latest.json` first),
    /// dataset directory and text backend.
    pub fn from_config(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let latest = config.checkpoint_dir.join("latest.json");
        let ckpt = if latest.exists() { Some(latest) } else { config.checkpoint.clone() };
        let model = ckpt.as_deref().map(Captioner::load).transpose()?;
        let images = match &config.data_dir {
            Some(dir) => capfeed::dataset::load_dir(dir, true)?.images,
            None => Vec::new(),
        };
        let backend: Arc<dyn TextBackend> = match (&config.backend_url, &config.stub_table) {
            (Some(url), _) => Arc::new(HttpBackend::new(url.clone())),
            (None, Some(path)) => Arc::new(StubBackend::from_json(&std::fs::read_to_string(path)?)?),
            (None, None) => Arc::new(StubBackend::identity()),
        };
        Self::new(config, model, images, backend)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Current serving snapshot.
    pub fn model(&self) -> Option<Arc<Captioner>> {
        self.model.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn require_model(&self) -> Result<Arc<Captioner>, ApiError> {
        self.model()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model snapshot available"))
    }

    fn image(&self, image_id: &str) -> Option<ImageRecord> {
        self.images.read().unwrap_or_else(|p| p.into_inner()).get(image_id).cloned()
    }

    fn register_image(&self, image: ImageRecord) {
        self.images
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .entry(image.image_id.clone())
            .or_insert(image);
    }

    /// Relaunch augmentation for corrections that have no set yet.
    pub fn resume_augmentation(self: &Arc<Self>) {
        let todo: Vec<(String, CaptionRecord)> = self.log.with_state(|s| {
            s.corrections
                .iter()
                .filter_map(|(cid, c)| {
                    let eid = cid.strip_prefix("corr-")?;
                    (!s.augmentation_sets.contains_key(&set_id_for(eid))).then(|| (eid.to_owned(), c.clone()))
                })
                .collect()
        });
        for (eid, caption) in todo {
            self.spawn_text_augmentation(eid, caption);
        }
    }

    fn start_job(&self, image_id: &str) {
        *lock(&self.augmenting).entry(image_id.to_owned()).or_default() += 1;
    }

    fn finish_job(&self, image_id: &str) {
        let mut jobs = lock(&self.augmenting);
        if let Some(n) = jobs.get_mut(image_id) {
            *n -= 1;
            if *n == 0 {
                jobs.remove(image_id);
            }
        }
    }

    /// True while augmentation jobs for `image_id` are running.
    pub fn augmenting(&self, image_id: &str) -> bool {
        lock(&self.augmenting).contains_key(image_id)
    }

    fn spawn_text_augmentation(self: &Arc<Self>, event_id: String, caption: CaptionRecord) {
        self.start_job(&caption.image_id);
        let state = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let image_id = caption.image_id.clone();
            let mut cfg = state.config.text.clone();
            cfg.seed = cfg.seed.wrapping_add(state.config.augment_seed).wrapping_add(event_number(&event_id));
            let result = augment_caption(&caption, &cfg, &state.lexicon, state.backend.as_ref()).and_then(|variants| {
                let set = AugmentationSet::from_captions(&set_id_for(&event_id), &caption, variants);
                state.log.append(NewEvent { image_id: image_id.clone(), payload: EventPayload::AugmentationSet { set } })
            });
            if let Err(e) = result {
                tracing::warn!(event_id, error = %e, "text augmentation failed");
            }
            state.finish_job(&image_id);
        });
    }

    fn spawn_image_augmentation(self: &Arc<Self>, event_id: String, image_id: String) {
        self.start_job(&image_id);
        let state = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let seed = state.config.augment_seed.wrapping_add(event_number(&event_id));
            let set_id = set_id_for(&event_id);
            let result = sample_transforms(state.config.image_augmentations, seed, &state.config.image).and_then(|ts| {
                let variants = ts
                    .into_iter()
                    .enumerate()
                    .map(|(i, (transform, seed))| Variant {
                        augmentation_id: format!("{set_id}/{i}"),
                        method_tag: transform.tag().to_owned(),
                        content: VariantContent::Image(ImageVariant { source_image_id: image_id.clone(), transform, seed }),
                        rating: None,
                        rank: None,
                    })
                    .collect();
                let set = AugmentationSet { set_id: set_id.clone(), image_id: image_id.clone(), source_caption_id: None, variants };
                state.log.append(NewEvent { image_id: image_id.clone(), payload: EventPayload::AugmentationSet { set } })
            });
            if let Err(e) = result {
                tracing::warn!(event_id, error = %e, "image augmentation failed");
            }
            state.finish_job(&image_id);
        });
    }

    /// Image record with user-drawn boxes added to the dataset ones.
    fn image_with_feedback(&self, image_id: &str) -> Option<ImageRecord> {
        let mut img = self.image(image_id)?;
        let extra = self.log.with_state(|s| s.bboxes.get(image_id).cloned().unwrap_or_default());
        img.bboxes.extend(extra);
        Some(img)
    }

    fn variant_image(&self, variant: &ImageVariant, augmentation_id: &str) -> capfeed::Result<ImageRecord> {
        let src = self
            .image_with_feedback(&variant.source_image_id)
            .ok_or_else(|| capfeed::Error::Argument(format!("unknown image {}", variant.source_image_id)))?;
        let mut out = apply_transform(&src, &variant.transform, variant.seed)?;
        out.image_id = format!("{}~{augmentation_id}", variant.source_image_id);
        Ok(out)
    }

    /// Turn in-flight items into training pairs; image variants are regenerated.
    fn training_pairs(&self, items: Vec<PendingItem>) -> capfeed::Result<Vec<(ImageRecord, CaptionRecord)>> {
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            match item {
                PendingItem::Caption(c) => {
                    let img = self
                        .image(&c.image_id)
                        .ok_or_else(|| capfeed::Error::Argument(format!("unknown image {}", c.image_id)))?;
                    out.push((img, c));
                }
                PendingItem::Image { variant, augmentation_id, caption: Some(c) } => {
                    let img = self.variant_image(&variant, &augmentation_id)?;
                    let mut cap = c.derive_augmented(c.text.clone(), "image", 0);
                    cap.caption_id = format!("{}~{augmentation_id}", c.caption_id);
                    cap.image_id = img.image_id.clone();
                    self.register_image(img.clone());
                    out.push((img, cap));
                }
                PendingItem::Image { caption: None, .. } => {}
            }
        }
        Ok(out)
    }

    fn eval_items(&self, eval: &RoundEval) -> Vec<EvalItem> {
        eval.items
            .iter()
            .filter_map(|(id, refs)| Some((self.image(id)?, refs.clone())))
            .collect()
    }

    fn save_metrics(&self, store: &MetricsStore) -> Result<(), ServiceError> {
        let bytes = serde_json::to_vec_pretty(store).map_err(|e| ServiceError::Config(e.to_string()))?;
        write_atomic(&self.config.checkpoint_dir.join("metrics.json"), &bytes)
    }

    /// Trigger, train, checkpoint, swap, complete. Blocking.
    fn run_update(&self, since_event_id: Option<String>) -> Result<UpdateResponse, ApiError> {
        let snapshot = self.require_model()?;
        if let Some(s) = &since_event_id {
            parse_event_id(s)?;
        }
        self.log.append(NewEvent {
            image_id: String::new(),
            payload: EventPayload::UpdateTrigger {
                policy: self.config.approval.clone(),
                since_event_id,
                overrides: None,
            },
        })?;
        match self.train_in_flight(&snapshot) {
            Ok(resp) => Ok(resp),
            Err(e) => {
                let completed = self.log.append(NewEvent {
                    image_id: String::new(),
                    payload: EventPayload::UpdateCompleted { report: None, error: Some(e.message.clone()) },
                });
                if let Err(log_err) = completed {
                    tracing::error!(error = %log_err, "could not record failed update");
                }
                Err(e)
            }
        }
    }

    fn train_in_flight(&self, snapshot: &Captioner) -> Result<UpdateResponse, ApiError> {
        let (items, task_id) = self.log.with_state(|s| (s.in_flight_items(), s.updates.len() as u32));
        let pairs = self.training_pairs(items)?;
        if pairs.is_empty() {
            let report = UpdateReport {
                task_id,
                new_batches: 0,
                replay_batches: 0,
                final_loss: None,
                checkpoint_hash: snapshot.content_hash(),
            };
            self.log.append(NewEvent {
                image_id: String::new(),
                payload: EventPayload::UpdateCompleted { report: Some(report.clone()), error: None },
            })?;
            return Ok(UpdateResponse { report, r_row: Vec::new(), seen_bleu_before: None, instances: 0 });
        }
        // Corrected captions of this round, latest per image.
        let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (img, c) in &pairs {
            if c.provenance == Provenance::Corrected {
                refs.insert(img.image_id.clone(), c.tokens.clone());
            }
        }
        let round_eval = RoundEval { items: refs.into_iter().map(|(id, t)| (id, vec![t])).collect() };

        let mut model = snapshot.clone();
        let mut memory = lock(&self.memory).clone();
        let index: ImageIndex = self.images.read().unwrap_or_else(|p| p.into_inner()).clone();
        let mut cfg = self.config.update.clone();
        cfg.seed = cfg.seed.wrapping_add(u64::from(task_id));
        let report = update(&mut model, &pairs, &mut memory, &index, &cfg, task_id)?;

        let mut store = lock(&self.metrics).clone();
        let mut evals: Vec<Vec<EvalItem>> = store.rounds.iter().map(|r| self.eval_items(&r.eval)).collect();
        evals.push(self.eval_items(&round_eval));
        let seen: Vec<EvalItem> = evals.iter().flatten().cloned().collect();
        let score = |m: &Captioner, set: &[EvalItem]| -> capfeed::Result<Option<f64>> {
            if set.is_empty() { Ok(None) } else { evaluate(m, set).map(|r| Some(r.bleu4)) }
        };
        let mut row = Vec::with_capacity(evals.len() + 1);
        for set in &evals {
            row.push(score(&model, set)?);
        }
        row.push(score(&model, &seen)?);
        let seen_before = score(snapshot, &seen)?;

        let dir = &self.config.checkpoint_dir;
        let ckpt = dir.join(format!("ckpt-{task_id:04}.json"));
        model.save(&ckpt)?;
        write_atomic(&dir.join("latest.json"), &std::fs::read(&ckpt).map_err(ServiceError::from)?)?;
        if let Some(p) = &self.config.memory_path {
            memory.save(p)?;
        }
        store.rounds.push(RoundRecord { report: report.clone(), eval: round_eval, row: row.clone(), seen_before });
        self.save_metrics(&store)?;

        *lock(&self.memory) = memory;
        *lock(&self.metrics) = store;
        *self.model.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(model));
        self.log.append(NewEvent {
            image_id: String::new(),
            payload: EventPayload::UpdateCompleted { report: Some(report.clone()), error: None },
        })?;
        Ok(UpdateResponse { report, r_row: row, seen_bleu_before: seen_before, instances: pairs.len() })
    }

    fn metrics_view(&self) -> MetricsResponse {
        let store = lock(&self.metrics);
        let t = store.rounds.len();
        let r: Vec<Vec<Option<f64>>> = store
            .rounds
            .iter()
            .map(|round| {
                let mut row = vec![None; t + 1];
                let n = round.row.len() - 1;
                row[..n].copy_from_slice(&round.row[..n]);
                row[t] = round.row[n];
                row
            })
            .collect();
        let forgetting = (0..t).map(|j| forgetting(&r, j).ok()).collect();
        MetricsResponse {
            updates: store.rounds.iter().map(|x| x.report.clone()).collect(),
            columns: store.rounds.iter().map(|x| format!("task-{}", x.report.task_id)).chain(std::iter::once("seen".to_owned())).collect(),
            r,
            forgetting,
            latest: store.rounds.last().map(|x| LatestMetrics {
                task_id: x.report.task_id,
                seen_bleu_before: x.seen_before,
                seen_bleu_after: *x.row.last().expect("row has the union column"),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// Number of attended feature positions.
    pub positions: usize,
    /// Attention averaged over emitted tokens.
    pub mean: Vec<f64>,
    /// Most attended position per token.
    pub peak: Vec<usize>,
}

impl AttentionSummary {
    fn from_rows(rows: &[Vec<f64>]) -> Self {
        let positions = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; positions];
        for row in rows {
            for (m, a) in mean.iter_mut().zip(row) {
                *m += a / rows.len() as f64;
            }
        }
        let peak = rows
            .iter()
            .map(|row| row.iter().enumerate().fold((0, f64::MIN), |b, (i, &a)| if a > b.1 { (i, a) } else { b }).0)
            .collect();
        AttentionSummary { positions, mean, peak }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictResponse {
    pub event_id: String,
    pub image_id: String,
    pub caption_id: String,
    pub caption: String,
    pub tokens: Vec<String>,
    pub attention: AttentionSummary,
    pub checkpoint_hash: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictJson {
    image_id: Option<String>,
    image_base64: Option<String>,
}

/// Box in coordinates normalized to the image size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub label: Option<String>,
}

impl NormalizedBox {
    fn to_pixels(&self, width: u32, height: u32) -> Result<BBox, ApiError> {
        const EPS: f64 = 1e-9;
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.x < 0.0 || self.y < 0.0 || self.w <= 0.0 || self.h <= 0.0 || self.x + self.w > 1.0 + EPS || self.y + self.h > 1.0 + EPS {
            return Err(ApiError::unprocessable(format!(
                "box ({}, {}, {}, {}) is not inside the unit square",
                self.x, self.y, self.w, self.h
            )));
        }
        let (fw, fh) = (f64::from(width), f64::from(height));
        let x = self.x * fw;
        let y = self.y * fh;
        let mut b = BBox::new(x, y, (self.w * fw).min(fw - x), (self.h * fh).min(fh - y));
        b.label = self.label.clone();
        Ok(b)
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
enum FeedbackBody {
    CaptionCorrection {
        text: String,
        #[serde(default)]
        predicted_caption_id: Option<String>,
    },
    BboxAnnotation(NormalizedBox),
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    image_id: String,
    #[serde(flatten)]
    body: FeedbackBody,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub event_id: String,
}

#[derive(Debug, Deserialize)]
struct AugQuery {
    image_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationsResponse {
    pub image_id: String,
    pub sets: Vec<AugmentationSet>,
    pub in_progress: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RatingRequest {
    #[serde(default)]
    pub ratings: BTreeMap<String, Rating>,
    #[serde(default)]
    pub ranks: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingResponse {
    pub accepted: usize,
    pub event_id: String,
}

#[derive(Debug, Default, Deserialize)]
struct UpdateRequest {
    #[serde(default)]
    since_event_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateResponse {
    #[serde(flatten)]
    pub report: UpdateReport,
    /// Scores after this update on every round's corrections so far, then on their union.
    pub r_row: Vec<Option<f64>>,
    /// Union score of the snapshot this update started from.
    pub seen_bleu_before: Option<f64>,
    pub instances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatestMetrics {
    pub task_id: u32,
    pub seen_bleu_before: Option<f64>,
    pub seen_bleu_after: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub updates: Vec<UpdateReport>,
    pub columns: Vec<String>,
    pub r: Vec<Vec<Option<f64>>>,
    /// Forgetting per round column; `None` until the column has a final score.
    pub forgetting: Vec<Option<f64>>,
    pub latest: Option<LatestMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateResponse {
    pub last_event_id: Option<String>,
    pub event_count: u64,
    pub pending: usize,
    pub approved_pending: usize,
    pub in_flight: usize,
    pub consumed: usize,
    pub updates: usize,
    pub state_hash: String,
    pub checkpoint_hash: Option<String>,
    pub updating: bool,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await?
}

async fn predict(Extract(state): Extract<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<PredictResponse> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty request body"));
    }
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let model = state.require_model()?;
    let st = Arc::clone(&state);
    let resp = blocking(move || {
        let image = if is_json {
            let req: PredictJson = serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
            match (req.image_id, req.image_base64) {
                (Some(id), None) => st.image(&id).ok_or_else(|| ApiError::not_found(format!("unknown image {id}")))?,
                (None, Some(b64)) => {
                    let bytes = base64::engine::general_purpose::STANDARD
                        .decode(b64.trim())
                        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad base64: {e}")))?;
                    upload(&st, &bytes)?
                }
                _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "give exactly one of image_id, image_base64")),
            }
        } else {
            upload(&st, &body)?
        };
        let generated = model.generate(&image, &model.default_generate_options())?;
        let caption_id = format!("{}#pred", image.image_id);
        let checkpoint_hash = model.content_hash();
        let event = st.log.append(NewEvent {
            image_id: image.image_id.clone(),
            payload: EventPayload::Prediction {
                caption_id: caption_id.clone(),
                text: generated.caption.text.clone(),
                checkpoint_hash: checkpoint_hash.clone(),
            },
        })?;
        Ok(PredictResponse {
            event_id: event.event_id,
            image_id: image.image_id,
            caption_id,
            caption: generated.caption.text,
            tokens: generated.caption.tokens,
            attention: AttentionSummary::from_rows(&generated.trace.rows),
            checkpoint_hash,
        })
    })
    .await?;
    Ok(Json(resp))
}

/// Decode uploaded bytes and register them under a content-derived id.
fn upload(state: &AppState, bytes: &[u8]) -> Result<ImageRecord, ApiError> {
    let rgb = decode_bytes(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = format!("upload-{}", &hex::encode(Sha256::digest(bytes))[..16]);
    if let Some(existing) = state.image(&id) {
        return Ok(existing);
    }
    let rec = ImageRecord::from_rgb(id, rgb, Vec::new(), SplitTag::Test)?;
    state.register_image(rec.clone());
    Ok(rec)
}

async fn feedback(
    Extract(state): Extract<Arc<AppState>>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<FeedbackResponse> {
    let Json(req) = body?;
    let image = state
        .image(&req.image_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {}", req.image_id)))?;
    let payload = match req.body {
        FeedbackBody::CaptionCorrection { text, predicted_caption_id } => {
            if capfeed::text::tokenize(&text).is_empty() {
                return Err(ApiError::unprocessable("correction has no tokens"));
            }
            EventPayload::CaptionCorrection { text, predicted_caption_id }
        }
        FeedbackBody::BboxAnnotation(b) => EventPayload::BboxAnnotation { bbox: b.to_pixels(image.width, image.height)? },
    };
    let st = Arc::clone(&state);
    let image_id = req.image_id.clone();
    let event: FeedbackEvent = blocking(move || Ok(st.log.append(NewEvent { image_id, payload })?)).await?;
    match &event.payload {
        EventPayload::CaptionCorrection { text, .. } => {
            let caption = CaptionRecord::new(correction_caption_id(&event.event_id), &event.image_id, text, Provenance::Corrected);
            state.spawn_text_augmentation(event.event_id.clone(), caption);
        }
        EventPayload::BboxAnnotation { .. } if state.config.image_augmentations > 0 => {
            state.spawn_image_augmentation(event.event_id.clone(), event.image_id.clone());
        }
        _ => {}
    }
    Ok(Json(FeedbackResponse { event_id: event.event_id }))
}

async fn augmentations(Extract(state): Extract<Arc<AppState>>, Query(q): Query<AugQuery>) -> ApiResult<AugmentationsResponse> {
    if state.image(&q.image_id).is_none() {
        return Err(ApiError::not_found(format!("unknown image {}", q.image_id)));
    }
    // Read the flag first so a set finished in between is not missed.
    let in_progress = state.augmenting(&q.image_id);
    let sets = state.log.with_state(|s| {
        s.augmentation_sets.values().filter(|set| set.image_id == q.image_id).cloned().collect()
    });
    Ok(Json(AugmentationsResponse { image_id: q.image_id, sets, in_progress }))
}

async fn rate(
    Extract(state): Extract<Arc<AppState>>,
    UrlPath(set_id): UrlPath<String>,
    body: Result<Json<RatingRequest>, JsonRejection>,
) -> ApiResult<RatingResponse> {
    let Json(req) = body?;
    let image_id = state
        .log
        .with_state(|s| s.augmentation_sets.get(&set_id).map(|set| set.image_id.clone()))
        .ok_or_else(|| ApiError::not_found(format!("unknown augmentation set {set_id}")))?;
    if !req.ranks.is_empty() {
        capfeed::feedback::check_rank_permutation(&req.ranks)?;
    }
    let accepted = req.ratings.len() + req.ranks.len();
    let payload = EventPayload::AugmentationRating(RatingPayload { set_id, ratings: req.ratings, ranks: req.ranks });
    let st = Arc::clone(&state);
    let event = blocking(move || Ok(st.log.append(NewEvent { image_id, payload })?)).await?;
    Ok(Json(RatingResponse { accepted, event_id: event.event_id }))
}

async fn trigger_update(Extract(state): Extract<Arc<AppState>>, body: Bytes) -> ApiResult<UpdateResponse> {
    let req: UpdateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        UpdateRequest::default()
    } else {
        serde_json::from_slice::<Option<UpdateRequest>>(&body)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?
            .unwrap_or_default()
    };
    let guard = Arc::clone(&state.update_lock)
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "an update is already running"))?;
    let st = Arc::clone(&state);
    // The guard moves into the job so a dropped request cannot release it early.
    let resp = blocking(move || {
        let _guard = guard;
        st.run_update(req.since_event_id)
    })
    .await?;
    Ok(Json(resp))
}

async fn metrics(Extract(state): Extract<Arc<AppState>>) -> ApiResult<MetricsResponse> {
    Ok(Json(state.metrics_view()))
}

async fn service_state(Extract(state): Extract<Arc<AppState>>) -> ApiResult<StateResponse> {
    let policy = state.config.approval.clone();
    let resp = state.log.with_state(|s| StateResponse {
        last_event_id: s.last_event_id.clone(),
        event_count: s.event_count,
        pending: s.pending.len(),
        approved_pending: s.approved_pending(&policy).len(),
        in_flight: s.in_flight.len(),
        consumed: s.consumed.len(),
        updates: s.updates.len(),
        state_hash: s.canonical_hash(),
        checkpoint_hash: None,
        updating: state.update_lock.try_lock().is_err(),
    });
    Ok(Json(StateResponse { checkpoint_hash: state.model().map(|m| m.content_hash()), ..resp }))
}

async fn healthz(Extract(state): Extract<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model": state.model().is_some() }))
}

fn png_response(img: &ImageRecord) -> Result<Response, ApiError> {
    let rgb = img.rgb()?;
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], out.into_inner()).into_response())
}

async fn image_png(Extract(state): Extract<Arc<AppState>>, UrlPath(image_id): UrlPath<String>) -> Result<Response, ApiError> {
    let img = state.image(&image_id).ok_or_else(|| ApiError::not_found(format!("unknown image {image_id}")))?;
    blocking(move || png_response(&img)).await
}

async fn variant_png(
    Extract(state): Extract<Arc<AppState>>,
    UrlPath((set_id, index)): UrlPath<(String, usize)>,
) -> Result<Response, ApiError> {
    let variant = state
        .log
        .with_state(|s| s.augmentation_sets.get(&set_id).and_then(|set| set.variants.get(index).cloned()))
        .ok_or_else(|| ApiError::not_found(format!("no variant {index} in {set_id}")))?;
    let VariantContent::Image(iv) = variant.content else {
        return Err(ApiError::not_found(format!("variant {index} of {set_id} is a caption")));
    };
    let st = Arc::clone(&state);
    blocking(move || png_response(&st.variant_image(&iv, &variant.augmentation_id)?)).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/feedback", post(feedback))
        .route("/augmentations", get(augmentations))
        .route("/augmentations/{set_id}/ratings", post(rate))
        .route("/augmentations/{set_id}/variants/{index}/image", get(variant_png))
        .route("/images/{image_id}", get(image_png))
        .route("/update", post(trigger_update))
        .route("/metrics", get(metrics))
        .route("/state", get(service_state))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> Result<(), ServiceError> {
    state.resume_augmentation();
    axum::serve(listener, router(state)).await?;
    Ok(())
}
