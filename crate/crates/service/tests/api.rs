use std::collections::BTreeSet;
use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use capfeed::augment::text::{StubBackend, TextBackend};
use capfeed::augment::VariantContent;
use capfeed::captioner::{Captioner, CaptionerConfig};
use capfeed::dataset::synth::{all_specs, make_dataset, Shape};
use capfeed::dataset::{build_vocab, CaptionRecord, ImageRecord, SplitTag};
use capfeed::feedback::{parse_event_id, ApprovalPolicy, EventLog, EventPayload, NewEvent};
use capfeed_service::sim::{run_loop, sim_items, SimOptions};
use capfeed_service::{AppState, HttpBackend, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Harness {
    base: String,
    state: Arc<AppState>,
    images: Vec<ImageRecord>,
    captions: Vec<CaptionRecord>,
    http: reqwest::Client,
    _dir: TempDir,
}

fn fixture(n: usize) -> (Vec<ImageRecord>, Vec<CaptionRecord>) {
    let specs: Vec<_> = all_specs(&Shape::ALL).into_iter().take(n).collect();
    make_dataset(&specs, 32, 3, "img", SplitTag::Train)
}

fn model_for(captions: &[CaptionRecord]) -> Captioner {
    let mut all = captions.to_vec();
    all.extend(fixture(32).1);
    Captioner::new(CaptionerConfig::default(), build_vocab(&all, 1)).unwrap()
}

fn base_config(dir: &TempDir) -> ServiceConfig {
    let mut cfg = ServiceConfig {
        log_path: dir.path().join("events.jsonl"),
        checkpoint_dir: dir.path().join("ckpt"),
        memory_path: Some(dir.path().join("memory.jsonl")),
        ..ServiceConfig::default()
    };
    cfg.update.batch_size = 4;
    cfg
}

async fn start_with(n_images: usize, backend: Arc<dyn TextBackend>, edit: impl FnOnce(&mut ServiceConfig)) -> Harness {
    let dir = TempDir::new().unwrap();
    let mut cfg = base_config(&dir);
    edit(&mut cfg);
    let (images, captions) = fixture(n_images);
    let state = AppState::new(cfg, Some(model_for(&captions)), images.clone(), backend).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(capfeed_service::serve(Arc::clone(&state), listener));
    Harness { base, state, images, captions, http: reqwest::Client::new(), _dir: dir }
}

async fn start(n_images: usize) -> Harness {
    start_with(n_images, Arc::new(StubBackend::identity()), |_| {}).await
}

impl Harness {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn correct(&self, image_id: &str, text: &str) -> String {
        let (s, v) = self
            .post("/feedback", json!({"image_id": image_id, "kind": "caption_correction", "payload": {"text": text}}))
            .await;
        assert_eq!(s, 200, "{v}");
        v["event_id"].as_str().unwrap().to_owned()
    }

    /// Wait until augmentation for `image_id` has settled; returns the sets.
    async fn settled_sets(&self, image_id: &str) -> Vec<Value> {
        for _ in 0..500 {
            let (s, v) = self.get(&format!("/augmentations?image_id={image_id}")).await;
            assert_eq!(s, 200);
            if !v["in_progress"].as_bool().unwrap() && !v["sets"].as_array().unwrap().is_empty() {
                return v["sets"].as_array().unwrap().clone();
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("augmentation for {image_id} never settled");
    }
}

fn png(img: &ImageRecord) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.rgb().unwrap().write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn predict_contract() {
    let h = start(4).await;
    let (s, a) = h.post("/predict", json!({"image_id": "img1"})).await;
    assert_eq!(s, 200, "{a}");
    let tokens = a["tokens"].as_array().unwrap();
    assert!(!tokens.is_empty() && tokens.len() <= CaptionerConfig::default().max_len);
    assert_eq!(a["attention"]["positions"], 4);
    let (_, b) = h.post("/predict", json!({"image_id": "img1"})).await;
    assert_eq!(a["caption"], b["caption"]);
    assert_ne!(a["event_id"], b["event_id"]);

    // Raw bytes of the same pixels give the same caption under a content id.
    let resp = h.http.post(format!("{}/predict", h.base)).body(png(&h.images[1])).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let c: Value = resp.json().await.unwrap();
    assert_eq!(c["caption"], a["caption"]);
    assert!(c["image_id"].as_str().unwrap().starts_with("upload-"));

    let resp = h.http.post(format!("{}/predict", h.base)).body(Vec::<u8>::new()).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let resp = h.http.post(format!("{}/predict", h.base)).body(b"not an image".to_vec()).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    assert_eq!(h.post("/predict", json!({"image_id": "nope"})).await.0, 404);
    assert_eq!(h.post("/predict", json!({})).await.0, 400);

    let kinds: Vec<&str> = h.state.log().with_state(|st| st.predictions.keys().map(|_| "p").collect());
    assert_eq!(kinds.len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn predict_without_model_is_unavailable() {
    let dir = TempDir::new().unwrap();
    let (images, _) = fixture(1);
    let state = AppState::new(base_config(&dir), None, images, Arc::new(StubBackend::identity())).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(capfeed_service::serve(state, listener));
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}/predict"))
        .json(&json!({"image_id": "img0"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 503);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn feedback_validation() {
    let h = start(2).await;
    let bbox = |x: f64, w: f64| json!({"image_id": "img0", "kind": "bbox_annotation", "payload": {"x": x, "y": 0.1, "w": w, "h": 0.2, "label": "cup"}});
    assert_eq!(h.post("/feedback", bbox(0.5, 0.6)).await.0, 422);
    assert_eq!(h.post("/feedback", bbox(-0.1, 0.2)).await.0, 422);
    assert_eq!(h.post("/feedback", bbox(0.5, 0.0)).await.0, 422);
    let (s, v) = h.post("/feedback", bbox(0.5, 0.5)).await;
    assert_eq!(s, 200, "{v}");
    let stored = h.state.log().with_state(|st| st.bboxes["img0"][0].clone());
    assert_eq!((stored.x, stored.w, stored.label.as_deref()), (16.0, 16.0, Some("cup")));

    let unknown = json!({"image_id": "ghost", "kind": "caption_correction", "payload": {"text": "a cat"}});
    assert_eq!(h.post("/feedback", unknown).await.0, 404);
    let bad_kind = json!({"image_id": "img0", "kind": "vibes", "payload": {}});
    assert_eq!(h.post("/feedback", bad_kind).await.0, 422);
    let empty = json!({"image_id": "img0", "kind": "caption_correction", "payload": {"text": " . "}});
    assert_eq!(h.post("/feedback", empty).await.0, 422);

    // Image variants for the box arrive asynchronously.
    let sets = h.settled_sets("img0").await;
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0]["variants"].as_array().unwrap().len(), 5);
    let resp = h.http.get(format!("{}/augmentations/{}/variants/0/image", h.base, sets[0]["set_id"].as_str().unwrap())).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert!(capfeed::dataset::decode_bytes(&resp.bytes().await.unwrap()).is_ok());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_feedback_gets_ordered_ids() {
    let h = Arc::new(start(2).await);
    let tasks: Vec<_> = (0..16)
        .map(|i| {
            let h = Arc::clone(&h);
            tokio::spawn(async move { h.correct(&format!("img{}", i % 2), &format!("a shape number {i}")).await })
        })
        .collect();
    let mut ids = Vec::new();
    for t in tasks {
        ids.push(parse_event_id(&t.await.unwrap()).unwrap());
    }
    let distinct: BTreeSet<u64> = ids.iter().copied().collect();
    assert_eq!(distinct.len(), 16);
    let text = std::fs::read_to_string(h.state.log().path()).unwrap();
    let (events, _) = capfeed::feedback::parse_log(&text).unwrap();
    let logged: Vec<u64> = events
        .iter()
        .filter(|e| matches!(e.payload, EventPayload::CaptionCorrection { .. }))
        .map(|e| parse_event_id(&e.event_id).unwrap())
        .collect();
    assert!(logged.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(logged.iter().copied().collect::<BTreeSet<_>>(), distinct);
}

fn ten_variant_backend(text: &str) -> StubBackend {
    StubBackend::identity()
        .with_pivot_translation(text, "ar", "a red circle that is small")
        .with_pivot_translation(text, "es", "a circle small and red")
        .with_paraphrases(
            text,
            &["one small red circle", "a small circle in red", "a round red shape", "the red circle is small", "a small red disc"],
        )
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn correction_fans_out_and_update_batches() {
    let text = "a small red circle";
    let h = start_with(2, Arc::new(ten_variant_backend(text)), |_| {}).await;
    assert_eq!(h.post("/update", json!({})).await.1["new_batches"], 0);

    let eid = h.correct("img0", text).await;
    let sets = h.settled_sets("img0").await;
    assert_eq!(sets.len(), 1);
    let variants = sets[0]["variants"].as_array().unwrap();
    assert!(variants.len() <= 10);
    assert_eq!(variants.len(), 10, "{variants:#?}");
    let set_id = sets[0]["set_id"].as_str().unwrap();
    assert_eq!(set_id, format!("set-{eid}"));

    let ratings: serde_json::Map<String, Value> =
        variants.iter().map(|v| (v["augmentation_id"].as_str().unwrap().to_owned(), json!("good"))).collect();
    let (s, r) = h.post(&format!("/augmentations/{set_id}/ratings"), json!({ "ratings": ratings })).await;
    assert_eq!((s, r["accepted"].as_u64()), (200, Some(10)));

    let before = h.state.model().unwrap().content_hash();
    let (s, rep) = h.post("/update", json!({})).await;
    assert_eq!(s, 200, "{rep}");
    assert_eq!(rep["instances"], 11);
    assert_eq!(rep["new_batches"], 3);
    assert_ne!(rep["checkpoint_hash"].as_str().unwrap(), before);
    assert_eq!(h.state.model().unwrap().content_hash(), rep["checkpoint_hash"].as_str().unwrap());
    let consumed = h.state.log().with_state(|st| st.consumed.len());
    assert_eq!(consumed, 11);

    let (_, m) = h.get("/metrics").await;
    assert_eq!(m["r"].as_array().unwrap().len(), 1);
    assert!(m["r"][0][0].is_number() && m["r"][0][1].is_number());
    assert_eq!(m["columns"], json!(["task-1", "seen"]));

    // Checkpoint and memory were persisted.
    let dir = &h.state.config().checkpoint_dir;
    let saved = Captioner::load(&dir.join("latest.json")).unwrap();
    assert_eq!(saved.content_hash(), rep["checkpoint_hash"].as_str().unwrap());
    let mem = capfeed::continual::ReplayMemory::load(h.state.config().memory_path.as_ref().unwrap()).unwrap();
    assert_eq!(mem.len(), 11);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ranks_filter_by_cutoff() {
    let text = "a small red circle";
    let backend = StubBackend::identity().with_paraphrases(text, &["one small red circle", "a tiny red circle", "small red disc"]);
    let h = start_with(2, Arc::new(backend), |cfg| {
        cfg.text.n_synonym = 0;
        cfg.text.pivots.clear();
        cfg.approval = ApprovalPolicy { rank_cutoff: 2, include_unrated: false };
    })
    .await;
    h.correct("img0", text).await;
    let sets = h.settled_sets("img0").await;
    let set_id = sets[0]["set_id"].as_str().unwrap().to_owned();
    let ids: Vec<String> = sets[0]["variants"].as_array().unwrap().iter().map(|v| v["augmentation_id"].as_str().unwrap().to_owned()).collect();
    assert_eq!(ids.len(), 3);
    let ranks = |r: [u32; 3]| json!({ "ranks": { &ids[0]: r[0], &ids[1]: r[1], &ids[2]: r[2] } });

    let (s, _) = h.post(&format!("/augmentations/{set_id}/ratings"), ranks([2, 1, 1])).await;
    assert_eq!(s, 422);
    assert_eq!(h.post("/augmentations/set-missing/ratings", ranks([3, 1, 2])).await.0, 404);
    let (s, r) = h.post(&format!("/augmentations/{set_id}/ratings"), ranks([3, 1, 2])).await;
    assert_eq!((s, r["accepted"].as_u64()), (200, Some(3)));

    let (s, rep) = h.post("/update", Value::Null).await;
    assert_eq!(s, 200, "{rep}");
    assert_eq!(rep["instances"], 3);
    let consumed = h.state.log().with_state(|st| st.consumed.clone());
    assert!(consumed.contains(&format!("aug:{}", ids[1])));
    assert!(consumed.contains(&format!("aug:{}", ids[2])));
    assert!(!consumed.contains(&format!("aug:{}", ids[0])));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn simultaneous_updates_conflict() {
    let h = Arc::new(
        start_with(4, Arc::new(StubBackend::identity()), |cfg| {
            cfg.update.epochs = 60;
            cfg.text.n_synonym = 0;
            cfg.text.pivots.clear();
        })
        .await,
    );
    for (i, c) in h.captions.clone().iter().enumerate() {
        h.correct(&format!("img{i}"), &c.text).await;
    }
    let a = { let h = Arc::clone(&h); tokio::spawn(async move { h.post("/update", json!({})).await.0 }) };
    let b = { let h = Arc::clone(&h); tokio::spawn(async move { h.post("/update", json!({})).await.0 }) };
    let mut codes = vec![a.await.unwrap(), b.await.unwrap()];
    codes.sort();
    assert_eq!(codes, vec![200, 409]);
    let (_, st) = h.get("/state").await;
    assert_eq!(st["updates"], 1);
    assert_eq!(st["updating"], false);
    assert_eq!(st["in_flight"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn since_event_id_limits_the_update() {
    let h = start_with(3, Arc::new(StubBackend::identity()), |cfg| {
        cfg.text.n_synonym = 0;
        cfg.text.pivots.clear();
    })
    .await;
    let first = h.correct("img0", "a small red circle").await;
    h.correct("img1", "a large red circle").await;
    let (s, rep) = h.post("/update", json!({ "since_event_id": first })).await;
    assert_eq!(s, 200, "{rep}");
    assert_eq!(rep["instances"], 1);
    assert_eq!(h.post("/update", json!({ "since_event_id": "x" })).await.0, 422);
    let (_, st) = h.get("/state").await;
    assert_eq!(st["pending"], 1);
}

#[test]
fn restart_closes_interrupted_update() {
    let dir = TempDir::new().unwrap();
    let cfg = base_config(&dir);
    {
        let log = EventLog::open(&cfg.log_path).unwrap();
        let corr = EventPayload::CaptionCorrection { text: "a red circle".into(), predicted_caption_id: None };
        log.append(NewEvent { image_id: "img0".into(), payload: corr }).unwrap();
        let trigger = EventPayload::UpdateTrigger { policy: ApprovalPolicy::default(), since_event_id: None, overrides: None };
        log.append(NewEvent { image_id: String::new(), payload: trigger }).unwrap();
        assert_eq!(log.state().in_flight.len(), 1);
    }
    let (images, captions) = fixture(1);
    let state = AppState::new(cfg.clone(), Some(model_for(&captions)), images, Arc::new(StubBackend::identity())).unwrap();
    let st = state.log().state();
    assert!(st.in_flight.is_empty());
    assert_eq!(st.pending.len(), 1);
    assert_eq!(st.event_count, 3);
    drop(state);
    // Replaying from disk gives the same state.
    assert_eq!(capfeed::feedback::replay_log(&cfg.log_path).unwrap().canonical_hash(), st.canonical_hash());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn run_loop_traces() {
    let h = start_with(20, Arc::new(StubBackend::identity()), |cfg| {
        cfg.text.pivots.clear();
        cfg.text.n_paraphrase = 0;
    })
    .await;
    let mut items = sim_items(&h.images, &h.captions);
    for it in &mut items {
        it.image.bboxes.clear();
    }
    let opts = SimOptions::default();
    assert!(run_loop(&items, &h.base, 0, &opts).await.unwrap().is_empty());

    let one = run_loop(&items[..1], &h.base, 1, &opts).await.unwrap();
    let calls: Vec<&str> = one.iter().map(|e| e.call.as_str()).collect();
    assert_eq!(calls, ["predict", "feedback", "get-augmentations", "ratings"]);
    assert!(one.iter().all(|e| e.ok()), "{one:#?}");

    let full = run_loop(&items, &h.base, 1, &opts).await.unwrap();
    let updates: Vec<_> = full.iter().filter(|e| e.call == "update").collect();
    assert_eq!(updates.len(), 2);
    assert!(updates.iter().all(|e| e.ok()), "{updates:#?}");
    let (_, m) = h.get("/metrics").await;
    assert_eq!(m["r"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn run_loop_records_unreachable_service() {
    let (images, captions) = fixture(1);
    let items = sim_items(&images, &captions);
    let opts = SimOptions { retries: 3, ..SimOptions::default() };
    // Nothing listens on this port once the listener is dropped.
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let t = run_loop(&items, &format!("http://{addr}"), 1, &opts).await.unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!((t[0].call.as_str(), t[0].attempts, t[0].status), ("predict", 4, None));
    assert!(t[0].error.is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_backend_round_trip() {
    use axum::routing::post;
    use axum::Json;
    let app = axum::Router::new()
        .route("/translate", post(|Json(v): Json<Value>| async move { Json(json!({"text": format!("{}|{}", v["text"].as_str().unwrap(), v["dst"].as_str().unwrap())})) }))
        .route("/paraphrase", post(|Json(v): Json<Value>| async move {
            let n = v["n"].as_u64().unwrap() as usize;
            Json(json!({"paraphrases": (0..n + 2).map(|i| format!("p{i}")).collect::<Vec<_>>()}))
        }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let backend = HttpBackend::new(format!("http://{addr}/"));
    let (t, p) = tokio::task::spawn_blocking(move || (backend.translate("a cat", "en", "es").unwrap(), backend.paraphrase("a cat", 3).unwrap()))
        .await
        .unwrap();
    assert_eq!(t, "a cat|es");
    assert_eq!(p, ["p0", "p1", "p2"]);

    let dead = HttpBackend::new("http://127.0.0.1:9").with_timeout(Duration::from_millis(500));
    let err = tokio::task::spawn_blocking(move || dead.paraphrase("a cat", 1)).await.unwrap();
    assert!(matches!(err, Err(capfeed::Error::Backend(_))));
}

#[test]
fn variant_content_is_tagged() {
    let v = serde_json::to_value(VariantContent::Caption(CaptionRecord::new("c", "i", "a cat", capfeed::dataset::Provenance::Augmented))).unwrap();
    assert_eq!(v["type"], "caption");
}

#[test]
fn openapi_lists_every_route() {
    let spec = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/openapi.yaml")).unwrap();
    let documented: Vec<&str> = spec.lines().filter(|l| l.starts_with("  /")).map(|l| l.trim().trim_end_matches(':')).collect();
    let routes = [
        "/predict",
        "/feedback",
        "/augmentations",
        "/augmentations/{set_id}/ratings",
        "/augmentations/{set_id}/variants/{index}/image",
        "/images/{image_id}",
        "/update",
        "/metrics",
        "/state",
        "/healthz",
    ];
    assert_eq!(documented, routes);
    let app = include_str!("../src/app.rs");
    for r in routes {
        assert!(app.contains(&format!(".route(\"{r}\"")), "{r} is not routed");
    }
}
