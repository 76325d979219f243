//! Encoder/decoder-with-soft-attention caption generator.
//!
//! A small strided conv stack turns an image into a grid of `a` feature
//! vectors of width `D`; an LSTM decoder with additive attention over that
//! grid emits one token per step. Training is teacher-forced cross-entropy
//! with momentum SGD; all gradients are computed by hand.

mod checkpoint;
mod decoder;
mod encoder;
mod params;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionRecord, ImageRecord, Provenance, Vocabulary, END, PAD, START};
use crate::{Error, Result};

pub use checkpoint::{checkpoint_from_json, CHECKPOINT_FORMAT};
pub use train::{pretrain, PretrainConfig};
pub use params::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    /// Images are resized to `input_size`×`input_size` before the conv stack.
    pub input_size: usize,
    /// Output channels of the first three conv layers; the fourth outputs `feature_dim`.
    pub conv: [usize; 3],
    /// Number of feature positions `a`; must be a perfect square.
    pub positions: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Width of the additive attention MLP.
    pub attn: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Weight of the doubly-stochastic attention penalty `Σ_i (1 - Σ_t α_ti)²`.
    pub attention_reg: f64,
    pub max_len: usize,
    pub beam_size: usize,
    pub seed: u64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            input_size: 32,
            conv: [8, 16, 16],
            positions: 4,
            feature_dim: 32,
            hidden: 64,
            embed: 32,
            attn: 32,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: Some(5.0),
            attention_reg: 0.0,
            max_len: 20,
            beam_size: 3,
            seed: 0,
        }
    }
}

impl CaptionerConfig {
    pub fn grid_side(&self) -> usize {
        (self.positions as f64).sqrt().round() as usize
    }

    pub(crate) fn conv_channels(&self) -> [usize; 5] {
        [3, self.conv[0], self.conv[1], self.conv[2], self.feature_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid_side();
        if self.positions == 0 || g * g != self.positions {
            return Err(Error::Argument(format!("positions {} is not a perfect square", self.positions)));
        }
        let dims = [self.input_size, self.feature_dim, self.hidden, self.embed, self.attn, self.max_len, self.beam_size];
        if dims.iter().chain(&self.conv).any(|&d| d == 0) {
            return Err(Error::Argument("all sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Argument("need 0 <= momentum < 1 and finite lr >= 0".into()));
        }
        Ok(())
    }
}

/// `a`×`D` grid of feature vectors extracted from one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub source_image_id: String,
    pub positions: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    fn from_array(source_image_id: &str, a: &Array2<f64>) -> Self {
        FeatureGrid {
            source_image_id: source_image_id.to_owned(),
            positions: a.nrows(),
            dim: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        if self.positions == 0 || self.dim == 0 {
            return Err(Error::Shape("feature grid needs a >= 1 and D >= 1".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Array2::from_shape_vec((self.positions, self.dim), self.data.clone())
            .map_err(|e| Error::Shape(e.to_string()))
    }

    /// Read a precomputed grid stored as JSON.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: FeatureGrid = serde_json::from_str(&text).map_err(|e| Error::json("feature grid", e))?;
        grid.to_array()?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub prev_token_id: usize,
}

/// Attention weights, one row per emitted token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_len: usize,
}

impl GenerateOptions {
    pub fn greedy(max_len: usize) -> Self {
        GenerateOptions {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub caption: CaptionRecord,
    pub trace: AttentionTrace,
}

/// Training input: raw image through the encoder, or a precomputed feature grid.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Image(&'a ImageRecord),
    Features(&'a FeatureGrid),
}

/// Interface a caption model exposes to the trainer and the service.
pub trait CaptionModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn generate(&self, image: &ImageRecord, opts: &GenerateOptions) -> Result<Generated>;
    /// One optimizer step on the batch; returns mean per-token cross-entropy.
    fn train_step(&mut self, batch: &[(ImageRecord, CaptionRecord)], lr: f64) -> Result<f64>;
    fn content_hash(&self) -> String;
    fn default_generate_options(&self) -> GenerateOptions;
}

#[derive(Debug, Clone)]
pub struct Captioner {
    config: CaptionerConfig,
    vocab: Vocabulary,
    params: Params,
    velocity: Params,
    step: u64,
}

fn image_input(image: &ImageRecord, side: usize) -> Result<Array2<f64>> {
    let rgb = image.rgb()?;
    let side32 = u32::try_from(side).map_err(|_| Error::Argument("input size too large".into()))?;
    let resized;
    let img = if rgb.dimensions() == (side32, side32) {
        &*rgb
    } else {
        resized = image::imageops::resize(&*rgb, side32, side32, image::imageops::FilterType::Triangle);
        &resized
    };
    pixels_to_input(img.as_raw(), side, side, 3)
}

fn pixels_to_input(data: &[u8], height: usize, width: usize, channels: usize) -> Result<Array2<f64>> {
    if channels != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {channels}")));
    }
    if data.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "pixel buffer of {} bytes does not match {height}x{width}x3",
            data.len()
        )));
    }
    Ok(Array2::from_shape_fn((height * width, 3), |(p, c)| f64::from(data[p * 3 + c]) / 255.0))
}

struct Sequence<'a> {
    input: Input<'a>,
    ids: Vec<usize>,
}

impl Captioner {
    pub fn new(config: CaptionerConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, vocab.len(), &mut rng);
        let velocity = params.zeros_like();
        Ok(Captioner {
            config,
            vocab,
            params,
            velocity,
            step: 0,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn features_of(&self, input: Input<'_>) -> Result<(Array2<f64>, Option<encoder::EncoderCache>)> {
        match input {
            Input::Image(img) => {
                let x = image_input(img, self.config.input_size)?;
                let (f, cache) = encoder::forward(&self.params, x, self.config.input_size, self.config.grid_side());
                Ok((f, Some(cache)))
            }
            Input::Features(grid) => {
                let f = grid.to_array()?;
                if f.ncols() != self.config.feature_dim {
                    return Err(Error::Shape(format!(
                        "feature dim {} != configured {}",
                        f.ncols(),
                        self.config.feature_dim
                    )));
                }
                Ok((f, None))
            }
        }
    }

    pub fn encode(&self, image: &ImageRecord) -> Result<FeatureGrid> {
        let (f, _) = self.features_of(Input::Image(image))?;
        Ok(FeatureGrid::from_array(&image.image_id, &f))
    }

    /// Encode a raw `height`×`width`×`channels` byte buffer.
    pub fn encode_pixels(&self, data: &[u8], height: usize, width: usize, channels: usize) -> Result<FeatureGrid> {
        let x = pixels_to_input(data, height, width, channels)?;
        let img = image::RgbImage::from_raw(width as u32, height as u32, x.iter().map(|v| (v * 255.0).round() as u8).collect())
            .ok_or_else(|| Error::Shape("pixel buffer".into()))?;
        let rec = ImageRecord::from_rgb("raw", img, Vec::new(), crate::dataset::SplitTag::Test)?;
        self.encode(&rec)
    }

    /// Initial decoder state for a feature grid.
    pub fn initial_state(&self, features: &FeatureGrid) -> Result<DecoderState> {
        let prep = decoder::prepare(&self.params, self.checked_features(features)?);
        let (_, h, c) = decoder::init_state(&self.params, &prep);
        Ok(DecoderState {
            hidden: h.to_vec(),
            cell: c.to_vec(),
            prev_token_id: START,
        })
    }

    fn checked_features(&self, features: &FeatureGrid) -> Result<Array2<f64>> {
        self.features_of(Input::Features(features)).map(|(f, _)| f)
    }

    /// One decoder step. The returned state keeps `prev_token_id`; callers set
    /// it to whichever token they pick from the distribution.
    pub fn decode_step(&self, state: &DecoderState, features: &FeatureGrid) -> Result<(Vec<f64>, DecoderState, Vec<f64>)> {
        let h = self.config.hidden;
        if state.hidden.len() != h || state.cell.len() != h {
            return Err(Error::Shape(format!(
                "state sizes {}/{} != hidden {h}",
                state.hidden.len(),
                state.cell.len()
            )));
        }
        if state.prev_token_id >= self.vocab.len() {
            return Err(Error::Shape(format!("token id {} outside vocabulary", state.prev_token_id)));
        }
        let prep = decoder::prepare(&self.params, self.checked_features(features)?);
        let st = decoder::step(
            &self.params,
            &prep,
            &Array1::from(state.hidden.clone()),
            &Array1::from(state.cell.clone()),
            state.prev_token_id,
        );
        Ok((
            st.probs.to_vec(),
            DecoderState {
                hidden: st.h.to_vec(),
                cell: st.c.to_vec(),
                prev_token_id: state.prev_token_id,
            },
            st.alpha.to_vec(),
        ))
    }

    fn masked_logprobs(probs: &Array1<f64>) -> Vec<f64> {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if i == PAD || i == START { f64::NEG_INFINITY } else { p.ln() })
            .collect()
    }

    pub fn generate_from_features(&self, image_id: &str, features: &FeatureGrid, opts: &GenerateOptions) -> Result<Generated> {
        let f = self.checked_features(features)?;
        self.generate_inner(image_id, f, opts)
    }

    fn generate_inner(&self, image_id: &str, feats: Array2<f64>, opts: &GenerateOptions) -> Result<Generated> {
        if opts.max_len == 0 {
            return Err(Error::Argument("max_len must be at least 1".into()));
        }
        if opts.beam_size == 0 {
            return Err(Error::Argument("beam_size must be at least 1".into()));
        }
        let prep = decoder::prepare(&self.params, feats);
        let (ids, rows) = match opts.mode {
            DecodeMode::Greedy => self.greedy(&prep, opts.max_len),
            DecodeMode::Beam => self.beam(&prep, opts.beam_size, opts.max_len),
        };
        let text = self.vocab.decode(&ids).join(" ");
        let caption = CaptionRecord::new(format!("{image_id}#pred"), image_id, text, Provenance::Predicted);
        Ok(Generated {
            caption,
            trace: AttentionTrace { rows },
        })
    }

    fn greedy(&self, prep: &decoder::Prepared, max_len: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
        let (_, mut h, mut c) = decoder::init_state(&self.params, prep);
        let mut token = START;
        let (mut ids, mut rows) = (Vec::new(), Vec::new());
        while ids.len() < max_len {
            let st = decoder::step(&self.params, prep, &h, &c, token);
            let lp = Self::masked_logprobs(&st.probs);
            token = argmax(&lp);
            if token == END {
                break;
            }
            ids.push(token);
            rows.push(st.alpha.to_vec());
            h = st.h;
            c = st.c;
        }
        (ids, rows)
    }

    fn beam(&self, prep: &decoder::Prepared, width: usize, max_len: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
        struct Beam {
            score: f64,
            ids: Vec<usize>,
            rows: Vec<Vec<f64>>,
            h: Array1<f64>,
            c: Array1<f64>,
        }
        let (_, h0, c0) = decoder::init_state(&self.params, prep);
        let mut alive = vec![Beam {
            score: 0.0,
            ids: Vec::new(),
            rows: Vec::new(),
            h: h0,
            c: c0,
        }];
        let mut finished: Vec<Beam> = Vec::new();
        while !alive.is_empty() {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            let mut steps = Vec::with_capacity(alive.len());
            for (b, beam) in alive.iter().enumerate() {
                let prev = beam.ids.last().copied().unwrap_or(START);
                let st = decoder::step(&self.params, prep, &beam.h, &beam.c, prev);
                let lp = Self::masked_logprobs(&st.probs);
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]).then(x.cmp(&y)));
                cands.extend(order.iter().take(width).map(|&tok| (beam.score + lp[tok], b, tok)));
                steps.push(st);
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            cands.truncate(width);
            let mut next = Vec::new();
            for (score, b, tok) in cands {
                let parent = &alive[b];
                let st = &steps[b];
                if tok == END {
                    finished.push(Beam {
                        score,
                        ids: parent.ids.clone(),
                        rows: parent.rows.clone(),
                        h: st.h.clone(),
                        c: st.c.clone(),
                    });
                    continue;
                }
                let mut ids = parent.ids.clone();
                ids.push(tok);
                let mut rows = parent.rows.clone();
                rows.push(st.alpha.to_vec());
                let beam = Beam {
                    score,
                    ids,
                    rows,
                    h: st.h.clone(),
                    c: st.c.clone(),
                };
                if beam.ids.len() >= max_len {
                    finished.push(beam);
                } else {
                    next.push(beam);
                }
            }
            alive = next;
            let best_alive = alive.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            let best_done = finished.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            if !finished.is_empty() && best_done >= best_alive {
                break;
            }
        }
        let best = finished
            .into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .expect("beam search always finishes at least one hypothesis");
        (best.ids, best.rows)
    }

    fn encode_caption(&self, caption: &CaptionRecord) -> Vec<usize> {
        self.vocab.encode(&caption.tokens)
    }

    /// Mean per-token cross-entropy (plus attention penalty) and its gradient.
    fn loss_and_grads(&self, batch: &[Sequence<'_>]) -> Result<(f64, Params)> {
        let n_tokens: usize = batch.iter().map(|s| s.ids.len() + 1).sum();
        let scale = 1.0 / n_tokens as f64;
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        let mut penalty = 0.0;
        let n_images = batch.len() as f64;
        let lambda = self.config.attention_reg;
        for seq in batch {
            let (feats, enc_cache) = self.features_of(seq.input)?;
            let prep = decoder::prepare(&self.params, feats);
            let (mean, h0, c0) = decoder::init_state(&self.params, &prep);
            let mut steps = Vec::with_capacity(seq.ids.len() + 1);
            let (mut h, mut c) = (h0.clone(), c0.clone());
            let targets: Vec<usize> = seq.ids.iter().copied().chain([END]).collect();
            let inputs: Vec<usize> = [START].into_iter().chain(seq.ids.iter().copied()).collect();
            for (&tok, &target) in inputs.iter().zip(&targets) {
                let st = decoder::step(&self.params, &prep, &h, &c, tok);
                total -= st.probs[target].max(f64::MIN_POSITIVE).ln();
                h = st.h.clone();
                c = st.c.clone();
                steps.push(st);
            }
            // Doubly-stochastic penalty on per-position attention mass, averaged over images.
            let dalpha_extra = if lambda > 0.0 {
                let mut mass = Array1::<f64>::zeros(prep.feats.nrows());
                for st in &steps {
                    mass += &st.alpha;
                }
                penalty += lambda / n_images * mass.iter().map(|m| (1.0 - m).powi(2)).sum::<f64>();
                Some(mass.mapv(|m| -2.0 * lambda * (1.0 - m) / n_images))
            } else {
                None
            };

            let mut dfeats = Array2::zeros(prep.feats.raw_dim());
            let mut dproj = Array2::zeros(prep.proj.raw_dim());
            let mut dh = Array1::zeros(self.config.hidden);
            let mut dc = Array1::zeros(self.config.hidden);
            for (st, &target) in steps.iter().zip(&targets).rev() {
                let mut dlogits = st.probs.clone();
                dlogits[target] -= 1.0;
                dlogits *= scale;
                let back = decoder::step_backward(
                    &self.params,
                    &prep,
                    st,
                    &dlogits,
                    dalpha_extra.as_ref().map(|d| d.view()),
                    &dh,
                    &dc,
                    &mut dfeats,
                    &mut dproj,
                    &mut grads,
                );
                dh = back.dh_prev;
                dc = back.dc_prev;
            }
            let dfeats = decoder::finish_backward(&self.params, &prep, &mean, &h0, &c0, &dh, &dc, &dproj, dfeats, &mut grads);
            if let Some(cache) = enc_cache {
                encoder::backward(&self.params, &cache, &dfeats, &mut grads);
            }
        }
        Ok((total * scale + penalty, grads))
    }

    fn apply(&mut self, grads: &Params, lr: f64) {
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let mu = self.config.momentum;
        let grads = grads.tensors();
        let vel = self.velocity.tensors_mut();
        for ((_, v), (_, g)) in vel.into_iter().zip(&grads) {
            for (vi, gi) in v.iter_mut().zip(g.iter()) {
                *vi = mu * *vi + clip * gi;
            }
        }
        let vel = self.velocity.tensors();
        for ((_, p), (_, v)) in self.params.tensors_mut().into_iter().zip(vel) {
            for (pi, vi) in p.iter_mut().zip(v) {
                *pi -= lr * vi;
            }
        }
    }

    fn step_on(&mut self, batch: &[Sequence<'_>], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let (loss, grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "loss {loss} at step {} (grad norm {}, param norm {})",
                self.step,
                grads.global_norm(),
                self.params.global_norm()
            )));
        }
        self.apply(&grads, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Train on precomputed feature grids; the encoder is left untouched.
    pub fn train_step_features(&mut self, batch: &[(FeatureGrid, CaptionRecord)], lr: f64) -> Result<f64> {
        let seqs: Vec<Sequence<'_>> = batch
            .iter()
            .map(|(f, c)| Sequence {
                input: Input::Features(f),
                ids: self.encode_caption(c),
            })
            .collect();
        self.step_on(&seqs, lr)
    }

    /// Loss and gradient without updating anything (for diagnostics and gradient checks).
    pub fn loss_with_grads(&self, batch: &[(Input<'_>, &CaptionRecord)]) -> Result<(f64, Params)> {
        let seqs: Vec<Sequence<'_>> = batch
            .iter()
            .map(|(i, c)| Sequence {
                input: *i,
                ids: self.encode_caption(c),
            })
            .collect();
        self.loss_and_grads(&seqs)
    }

    pub fn content_hash(&self) -> String {
        checkpoint::content_hash(&self.config, &self.vocab, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl CaptionModel for Captioner {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn generate(&self, image: &ImageRecord, opts: &GenerateOptions) -> Result<Generated> {
        if opts.beam_size == 0 {
            return Err(Error::Argument("beam_size must be at least 1".into()));
        }
        let (f, _) = self.features_of(Input::Image(image))?;
        self.generate_inner(&image.image_id, f, opts)
    }

    fn train_step(&mut self, batch: &[(ImageRecord, CaptionRecord)], lr: f64) -> Result<f64> {
        let seqs: Vec<Sequence<'_>> = batch
            .iter()
            .map(|(im, c)| Sequence {
                input: Input::Image(im),
                ids: self.encode_caption(c),
            })
            .collect();
        self.step_on(&seqs, lr)
    }

    fn content_hash(&self) -> String {
        Captioner::content_hash(self)
    }

    fn default_generate_options(&self) -> GenerateOptions {
        GenerateOptions::greedy(self.config.max_len)
    }
}
