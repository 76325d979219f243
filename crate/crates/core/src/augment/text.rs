//! Meaning-preserving caption augmentation: synonym substitution,
//! back-translation through pivot languages, and paraphrasing.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::CaptionRecord;
use crate::text::{dedup_key, tokenize};
use crate::{Error, Result};

/// Words never substituted.
pub const STOP_WORDS: [&str; 25] = [
    "a", "an", "the", "and", "or", "of", "in", "on", "at", "to", "with", "is", "are", "was", "were", "be", "it",
    "its", "this", "that", "for", "by", "from", "as", "there",
];

/// Sampling attempts per requested synonym output before giving up.
const ATTEMPTS_PER_OUTPUT: usize = 20;

/// Translation and paraphrase provider.
pub trait TextBackend: Send + Sync {
    fn translate(&self, text: &str, src_lang: &str, dst_lang: &str) -> Result<String>;
    fn paraphrase(&self, text: &str, n: usize) -> Result<Vec<String>>;
}

/// token → single-token synonyms. A token is never listed as its own synonym.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        let mut out = BTreeMap::new();
        for (token, syns) in entries {
            let key = token.to_lowercase();
            let mut clean: Vec<String> = Vec::new();
            for s in syns {
                let toks = tokenize(&s);
                if toks.len() == 1 && toks[0] != key && !clean.contains(&toks[0]) {
                    clean.push(toks[0].clone());
                }
            }
            if !clean.is_empty() {
                out.insert(key, clean);
            }
        }
        SynonymLexicon { entries: out }
    }

    /// Parse a JSON object `{token: [synonym, ...]}`.
    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| Error::json("synonym lexicon", e))?;
        Ok(Self::new(map))
    }

    /// The lexicon shipped with the crate (common caption vocabulary).
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../data/lexicon.json")).expect("bundled lexicon parses")
    }

    pub fn synonyms(&self, token: &str) -> &[String] {
        self.entries.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Table-driven deterministic backend for offline use and tests.
///
/// Translation to a pivot wraps the text in a marker; translating back looks
/// the original text up in the table (pivot-specific entry first) and returns
/// the input unchanged when there is no entry. Paraphrasing returns the listed
/// strings, or nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubBackend {
    translate: BTreeMap<String, TranslationEntry>,
    paraphrase: BTreeMap<String, Vec<String>>,
    failing_pivots: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum TranslationEntry {
    Any(String),
    PerPivot(BTreeMap<String, String>),
}

#[derive(Deserialize)]
struct StubFile {
    #[serde(default)]
    translate: BTreeMap<String, Value>,
    #[serde(default)]
    paraphrase: BTreeMap<String, Value>,
    #[serde(default)]
    fail: Vec<String>,
}

fn strings_of(v: &Value, what: &str) -> Result<Vec<String>> {
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| Error::Argument(format!("{what}: expected strings")))
            })
            .collect(),
        _ => Err(Error::Argument(format!("{what}: expected string or list of strings"))),
    }
}

impl StubBackend {
    /// Backend that returns its input for every translation and paraphrases nothing.
    pub fn identity() -> Self {
        Self::default()
    }

    /// Parse a stub table. Two layouts are accepted:
    ///
    /// * sectioned: `{"translate": {text: out | {pivot: out}}, "paraphrase": {text: out | [out, ...]}, "fail": [pivot, ...]}`
    /// * flat: `{text: out | [out, ...]}` where a string is a round-trip
    ///   translation and a list is a set of paraphrases.
    pub fn from_json(json: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(json).map_err(|e| Error::json("stub table", e))?;
        let Value::Object(map) = &value else {
            return Err(Error::Argument("stub table must be a JSON object".into()));
        };
        let sectioned = map.keys().all(|k| matches!(k.as_str(), "translate" | "paraphrase" | "fail")) && !map.is_empty();
        let mut out = StubBackend::default();
        if sectioned {
            let file: StubFile = serde_json::from_value(value.clone()).map_err(|e| Error::json("stub table", e))?;
            for (k, v) in file.translate {
                let entry = match v {
                    Value::String(s) => TranslationEntry::Any(s),
                    Value::Object(per) => TranslationEntry::PerPivot(
                        per.into_iter()
                            .map(|(p, s)| {
                                s.as_str()
                                    .map(|s| (p.clone(), s.to_owned()))
                                    .ok_or_else(|| Error::Argument(format!("translation of {k:?} via {p}")))
                            })
                            .collect::<Result<_>>()?,
                    ),
                    _ => return Err(Error::Argument(format!("translation of {k:?}"))),
                };
                out.translate.insert(k, entry);
            }
            for (k, v) in file.paraphrase {
                let list = strings_of(&v, &format!("paraphrases of {k:?}"))?;
                out.paraphrase.insert(k, list);
            }
            out.failing_pivots = file.fail.into_iter().collect();
        } else {
            for (k, v) in map {
                match v {
                    Value::String(s) => {
                        out.translate.insert(k.clone(), TranslationEntry::Any(s.clone()));
                    }
                    other => {
                        out.paraphrase.insert(k.clone(), strings_of(other, k)?);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn with_translation(mut self, text: &str, out: &str) -> Self {
        self.translate.insert(text.to_owned(), TranslationEntry::Any(out.to_owned()));
        self
    }

    pub fn with_pivot_translation(mut self, text: &str, pivot: &str, out: &str) -> Self {
        let entry = self
            .translate
            .entry(text.to_owned())
            .or_insert_with(|| TranslationEntry::PerPivot(BTreeMap::new()));
        if let TranslationEntry::PerPivot(map) = entry {
            map.insert(pivot.to_owned(), out.to_owned());
        } else {
            *entry = TranslationEntry::PerPivot(BTreeMap::from([(pivot.to_owned(), out.to_owned())]));
        }
        self
    }

    pub fn with_paraphrases(mut self, text: &str, outs: &[&str]) -> Self {
        self.paraphrase
            .insert(text.to_owned(), outs.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn failing_on(mut self, pivot: &str) -> Self {
        self.failing_pivots.insert(pivot.to_owned());
        self
    }

    fn lookup<'a, T>(table: &'a BTreeMap<String, T>, text: &str) -> Option<&'a T> {
        table.get(text).or_else(|| {
            let key = dedup_key(text);
            table.iter().find(|(k, _)| dedup_key(k) == key).map(|(_, v)| v)
        })
    }
}

const PIVOT_MARK: &str = "\u{1}pivot:";

impl TextBackend for StubBackend {
    fn translate(&self, text: &str, src_lang: &str, dst_lang: &str) -> Result<String> {
        for lang in [src_lang, dst_lang] {
            if self.failing_pivots.contains(lang) {
                return Err(Error::Backend(format!("stub configured to fail for {lang}")));
            }
        }
        if dst_lang != "en" {
            return Ok(format!("{PIVOT_MARK}{dst_lang}\u{1}{text}"));
        }
        let original = text
            .strip_prefix(PIVOT_MARK)
            .and_then(|rest| rest.split_once('\u{1}'))
            .map(|(_, t)| t)
            .unwrap_or(text);
        Ok(match Self::lookup(&self.translate, original) {
            Some(TranslationEntry::Any(s)) => s.clone(),
            Some(TranslationEntry::PerPivot(map)) => map.get(src_lang).cloned().unwrap_or_else(|| original.to_owned()),
            None => original.to_owned(),
        })
    }

    fn paraphrase(&self, text: &str, n: usize) -> Result<Vec<String>> {
        Ok(Self::lookup(&self.paraphrase, text)
            .map(|v| v.iter().take(n).cloned().collect())
            .unwrap_or_default())
    }
}

/// Keeps candidates that differ (by dedup key) from the input and from each other.
struct Dedup {
    seen: HashSet<String>,
}

impl Dedup {
    fn new(input: &CaptionRecord) -> Self {
        Dedup {
            seen: HashSet::from([dedup_key(&input.text)]),
        }
    }

    fn admit(&mut self, text: &str) -> bool {
        let key = dedup_key(text);
        !key.is_empty() && self.seen.insert(key)
    }
}

fn substitutable(tokens: &[String], lexicon: &SynonymLexicon) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !STOP_WORDS.contains(&t.as_str()) && !lexicon.synonyms(t).is_empty())
        .map(|(i, _)| i)
        .collect()
}

/// Replace `k = max(1, floor(rate·len))` substitutable tokens by random
/// synonyms, producing up to `n_out` distinct variants.
pub fn synonym_substitute(
    caption: &CaptionRecord,
    rate: f64,
    n_out: usize,
    lexicon: &SynonymLexicon,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Argument(format!("substitution rate {rate} outside (0, 1]")));
    }
    if n_out == 0 {
        return Err(Error::Argument("n_out must be at least 1".into()));
    }
    let tokens = &caption.tokens;
    let slots = substitutable(tokens, lexicon);
    if slots.is_empty() {
        return Ok(Vec::new());
    }
    let k = ((rate * tokens.len() as f64).floor() as usize).max(1).min(slots.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dedup = Dedup::new(caption);
    let mut out = Vec::new();
    for _ in 0..n_out * ATTEMPTS_PER_OUTPUT {
        if out.len() == n_out {
            break;
        }
        let mut variant = tokens.clone();
        for idx in sample(&mut rng, slots.len(), k) {
            let pos = slots[idx];
            let syns = lexicon.synonyms(&tokens[pos]);
            variant[pos] = syns[rng.gen_range(0..syns.len())].clone();
        }
        let text = variant.join(" ");
        if dedup.admit(&text) {
            out.push(caption.derive_augmented(text, "synonym", out.len()));
        }
    }
    Ok(out)
}

/// Round-trip the caption through each pivot language. Pivots whose backend
/// call fails are skipped.
pub fn back_translate(caption: &CaptionRecord, pivots: &[String], backend: &dyn TextBackend) -> Result<Vec<CaptionRecord>> {
    if pivots.is_empty() {
        return Err(Error::Argument("at least one pivot language required".into()));
    }
    let mut dedup = Dedup::new(caption);
    let mut out = Vec::new();
    for pivot in pivots {
        let round_trip = backend
            .translate(&caption.text, "en", pivot)
            .and_then(|mid| backend.translate(&mid, pivot, "en"));
        if let Ok(text) = round_trip {
            if dedup.admit(&text) {
                let idx = out.len();
                out.push(caption.derive_augmented(text, &format!("backtranslate:{pivot}"), idx));
            }
        }
    }
    Ok(out)
}

/// Up to `n` distinct paraphrases; a failing backend yields none.
pub fn paraphrase(caption: &CaptionRecord, n: usize, backend: &dyn TextBackend) -> Result<Vec<CaptionRecord>> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let Ok(candidates) = backend.paraphrase(&caption.text, n) else {
        return Ok(Vec::new());
    };
    let mut dedup = Dedup::new(caption);
    let mut out = Vec::new();
    for text in candidates.into_iter().take(n) {
        if dedup.admit(&text) {
            let idx = out.len();
            out.push(caption.derive_augmented(text, "paraphrase", idx));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextAugmentConfig {
    pub synonym_rate: f64,
    pub n_synonym: usize,
    pub pivots: Vec<String>,
    pub n_paraphrase: usize,
    pub seed: u64,
}

impl Default for TextAugmentConfig {
    fn default() -> Self {
        TextAugmentConfig {
            synonym_rate: 0.1,
            n_synonym: 3,
            pivots: vec!["ar".into(), "es".into()],
            n_paraphrase: 5,
            seed: 0,
        }
    }
}

impl TextAugmentConfig {
    pub fn max_outputs(&self) -> usize {
        self.n_synonym + self.pivots.len() + self.n_paraphrase
    }
}

/// All three methods, globally deduplicated, in method order
/// synonym → back-translation → paraphrase. A method with a zero cap is skipped.
pub fn augment_caption(
    caption: &CaptionRecord,
    config: &TextAugmentConfig,
    lexicon: &SynonymLexicon,
    backend: &dyn TextBackend,
) -> Result<Vec<CaptionRecord>> {
    if caption.tokens.is_empty() {
        return Err(Error::Argument(format!("caption {} is empty", caption.caption_id)));
    }
    let mut raw = Vec::new();
    if config.n_synonym > 0 {
        raw.extend(synonym_substitute(caption, config.synonym_rate, config.n_synonym, lexicon, config.seed)?);
    }
    if !config.pivots.is_empty() {
        raw.extend(back_translate(caption, &config.pivots, backend)?);
    }
    if config.n_paraphrase > 0 {
        raw.extend(paraphrase(caption, config.n_paraphrase, backend)?);
    }
    let mut dedup = Dedup::new(caption);
    Ok(raw.into_iter().filter(|c| dedup.admit(&c.text)).collect())
}
