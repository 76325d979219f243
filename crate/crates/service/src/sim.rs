//! Simulated user driving a running service over HTTP.

use std::collections::HashSet;
use std::time::Duration;

use capfeed::augment::{AugmentationSet, Rating, VariantContent};
use capfeed::dataset::{BBox, CaptionRecord, ImageRecord, Provenance};
use capfeed::feedback::{set_id_for, EventPayload};
use capfeed::sim::{simulate_correction, simulate_rating, DEFAULT_RATING_THRESHOLD};
use reqwest::Method;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ServiceError;

/// One dataset image with its ground-truth captions.
#[derive(Debug, Clone)]
pub struct SimItem {
    pub image: ImageRecord,
    pub gt: Vec<CaptionRecord>,
}

/// Group captions under their images, keeping image order; images without
/// captions are dropped.
pub fn sim_items(images: &[ImageRecord], captions: &[CaptionRecord]) -> Vec<SimItem> {
    images
        .iter()
        .map(|im| SimItem {
            image: im.clone(),
            gt: captions.iter().filter(|c| c.image_id == im.image_id).cloned().collect(),
        })
        .filter(|it| !it.gt.is_empty())
        .collect()
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// POST /update after every this many images; `None` never updates.
    pub update_every: Option<usize>,
    pub threshold: f64,
    /// Rank variants by similarity instead of rating them good/bad.
    pub rank: bool,
    /// Post the dataset's boxes as bbox feedback.
    pub post_boxes: bool,
    /// Retries after the first attempt on network errors and 5xx answers.
    pub retries: u32,
    pub poll_interval: Duration,
    pub poll_timeout: Duration,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            update_every: Some(10),
            threshold: DEFAULT_RATING_THRESHOLD,
            rank: false,
            post_boxes: true,
            retries: 3,
            poll_interval: Duration::from_millis(20),
            poll_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    /// predict, feedback, get-augmentations, ratings or update.
    pub call: String,
    pub method: String,
    pub path: String,
    pub request: Value,
    pub status: Option<u16>,
    pub response: Value,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TranscriptEntry {
    pub fn ok(&self) -> bool {
        self.status.is_some_and(|s| (200..300).contains(&s))
    }
}

struct Outcome {
    status: Option<u16>,
    body: Value,
    attempts: u32,
    error: Option<String>,
}

struct Client {
    http: reqwest::Client,
    base: String,
    retries: u32,
    transcript: Vec<TranscriptEntry>,
}

impl Client {
    async fn send(&self, method: &Method, path: &str, body: &Value) -> Outcome {
        let url = format!("{}{path}", self.base);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut req = self.http.request(method.clone(), &url);
            if !body.is_null() {
                req = req.json(body);
            }
            let (status, body, error) = match req.send().await {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().await.unwrap_or_default();
                    let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
                    let error = (status >= 400).then(|| format!("HTTP {status}"));
                    (Some(status), body, error)
                }
                Err(e) => (None, Value::Null, Some(e.to_string())),
            };
            let retry = status.is_none_or(|s| s >= 500);
            if !retry || attempts > self.retries {
                return Outcome { status, body, attempts, error };
            }
            tokio::time::sleep(Duration::from_millis(50 * u64::from(attempts))).await;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, round: usize, image_id: Option<&str>, call: &str, method: &Method, path: &str, request: Value, out: &Outcome) {
        self.transcript.push(TranscriptEntry {
            round,
            image_id: image_id.map(str::to_owned),
            call: call.to_owned(),
            method: method.to_string(),
            path: path.to_owned(),
            request,
            status: out.status,
            response: out.body.clone(),
            attempts: out.attempts,
            error: out.error.clone(),
        });
    }

    /// Send, record, and hand back the body of a 2xx answer.
    async fn call(&mut self, round: usize, image_id: Option<&str>, call: &str, method: Method, path: &str, request: Value) -> Option<Value> {
        let out = self.send(&method, path, &request).await;
        self.record(round, image_id, call, &method, path, request, &out);
        out.status.filter(|s| (200..300).contains(s)).map(|_| out.body)
    }
}

fn normalized(b: &BBox, img: &ImageRecord) -> Value {
    let (w, h) = (f64::from(img.width), f64::from(img.height));
    json!({ "x": b.x / w, "y": b.y / h, "w": b.w / w, "h": b.h / h, "label": b.label })
}

/// Rating request for one set: caption variants judged against ground truth,
/// image variants accepted.
fn judge(set: &AugmentationSet, gt: &[CaptionRecord], opts: &SimOptions) -> capfeed::Result<Value> {
    let mut scored = Vec::with_capacity(set.variants.len());
    for v in &set.variants {
        let (rating, sim) = match &v.content {
            VariantContent::Caption(c) => {
                let best = gt.iter().map(|g| capfeed::text::jaccard(&c.tokens, &g.tokens)).fold(0.0, f64::max);
                (simulate_rating(c, gt, opts.threshold)?, best)
            }
            VariantContent::Image(_) => (Rating::Good, 1.0),
        };
        scored.push((v.augmentation_id.clone(), rating, sim));
    }
    if opts.rank {
        // Best first; ties keep set order.
        scored.sort_by(|a, b| b.2.total_cmp(&a.2));
        let ranks: serde_json::Map<String, Value> =
            scored.into_iter().enumerate().map(|(i, (id, _, _))| (id, json!(i + 1))).collect();
        Ok(json!({ "ranks": ranks }))
    } else {
        let ratings: serde_json::Map<String, Value> =
            scored.into_iter().map(|(id, r, _)| (id, serde_json::to_value(r).expect("rating serializes"))).collect();
        Ok(json!({ "ratings": ratings }))
    }
}

/// Drive `endpoint` with simulated feedback for `n_rounds` passes over
/// `items`: predict, correct, wait for augmentations, rate them, and
/// trigger an update every `update_every` images. Every call lands in the
/// returned transcript; calls that keep failing are recorded, not fatal.
pub async fn run_loop(items: &[SimItem], endpoint: &str, n_rounds: usize, opts: &SimOptions) -> Result<Vec<TranscriptEntry>, ServiceError> {
    let http = reqwest::Client::builder()
        .timeout(Duration::from_secs(600))
        .build()
        .map_err(|e| ServiceError::Http(e.to_string()))?;
    let mut client = Client { http, base: endpoint.trim_end_matches('/').to_owned(), retries: opts.retries, transcript: Vec::new() };
    let mut rated: HashSet<String> = HashSet::new();
    let mut visited = 0usize;
    for round in 0..n_rounds {
        for item in items {
            let id = item.image.image_id.as_str();
            visit(&mut client, round, item, opts, &mut rated).await?;
            visited += 1;
            if opts.update_every.is_some_and(|n| visited.is_multiple_of(n)) {
                client.call(round, None, "update", Method::POST, "/update", json!({})).await;
            }
            tracing::debug!(image_id = id, "visited");
        }
    }
    Ok(client.transcript)
}

async fn visit(client: &mut Client, round: usize, item: &SimItem, opts: &SimOptions, rated: &mut HashSet<String>) -> Result<(), ServiceError> {
    let id = item.image.image_id.as_str();
    let Some(pred) = client.call(round, Some(id), "predict", Method::POST, "/predict", json!({ "image_id": id })).await else {
        return Ok(());
    };
    let text = pred.get("caption").and_then(Value::as_str).unwrap_or_default();
    let caption_id = pred.get("caption_id").and_then(Value::as_str).unwrap_or("pred");
    let predicted = CaptionRecord::new(caption_id, id, text, Provenance::Predicted);
    let correction = simulate_correction(id, &predicted, &item.gt)?;
    let EventPayload::CaptionCorrection { text, predicted_caption_id } = correction.payload else {
        unreachable!("simulate_correction emits a correction");
    };
    let mut expected_sets = Vec::new();
    let body = json!({
        "image_id": id,
        "kind": "caption_correction",
        "payload": { "text": text, "predicted_caption_id": predicted_caption_id },
    });
    if let Some(ack) = client.call(round, Some(id), "feedback", Method::POST, "/feedback", body).await {
        if let Some(eid) = ack.get("event_id").and_then(Value::as_str) {
            expected_sets.push(set_id_for(eid));
        }
    }
    if opts.post_boxes {
        for b in &item.image.bboxes {
            let body = json!({ "image_id": id, "kind": "bbox_annotation", "payload": normalized(b, &item.image) });
            if let Some(ack) = client.call(round, Some(id), "feedback", Method::POST, "/feedback", body).await {
                if let Some(eid) = ack.get("event_id").and_then(Value::as_str) {
                    expected_sets.push(set_id_for(eid));
                }
            }
        }
    }

    // Poll until every set this visit produced is there and nothing is running.
    let path = format!("/augmentations?image_id={}", urlencode(id));
    let started = tokio::time::Instant::now();
    let (out, sets) = loop {
        let out = client.send(&Method::GET, &path, &Value::Null).await;
        let parsed: Option<(Vec<AugmentationSet>, bool)> = out.status.filter(|s| *s == 200).and_then(|_| {
            let sets = serde_json::from_value(out.body.get("sets")?.clone()).ok()?;
            Some((sets, out.body.get("in_progress")?.as_bool()?))
        });
        match parsed {
            Some((sets, in_progress)) => {
                let complete = expected_sets.iter().all(|s| sets.iter().any(|x: &AugmentationSet| &x.set_id == s));
                if (!in_progress && complete) || started.elapsed() > opts.poll_timeout {
                    break (out, sets);
                }
            }
            None => break (out, Vec::new()),
        }
        tokio::time::sleep(opts.poll_interval).await;
    };
    client.record(round, Some(id), "get-augmentations", &Method::GET, &path, Value::Null, &out);

    for set in &sets {
        if rated.contains(&set.set_id) {
            continue;
        }
        let body = judge(set, &item.gt, opts)?;
        let path = format!("/augmentations/{}/ratings", urlencode(&set.set_id));
        if client.call(round, Some(id), "ratings", Method::POST, &path, body).await.is_some() {
            rated.insert(set.set_id.clone());
        }
    }
    Ok(())
}

fn urlencode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Write the transcript as JSON lines.
pub fn write_transcript(path: &std::path::Path, transcript: &[TranscriptEntry]) -> Result<(), ServiceError> {
    let mut text = String::new();
    for e in transcript {
        text.push_str(&serde_json::to_string(e).map_err(|e| ServiceError::Http(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
