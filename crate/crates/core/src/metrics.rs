//! Caption-quality scoring.
//!
//! BLEU uses clipped n-gram precisions with uniform weights and the standard
//! brevity penalty (closest reference length, ties to the shorter). For n ≥ 2
//! a precision whose matched count is zero is smoothed to `1 / (total + 1)`.
//! Unigram precision is never smoothed, so a hypothesis sharing no word with
//! any reference scores exactly 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::captioner::CaptionModel;
use crate::dataset::ImageRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
struct BleuStats {
    matched: Vec<usize>,
    total: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

fn sentence_stats<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> BleuStats {
    let mut stats = BleuStats {
        matched: vec![0; max_n],
        total: vec![0; max_n],
        hyp_len: hyp.len(),
        ref_len: closest_ref_len(hyp.len(), refs),
    };
    for n in 1..=max_n {
        let hyp_counts = ngram_counts(hyp, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(c);
            }
        }
        stats.matched[n - 1] = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        stats.total[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    stats
}

fn closest_ref_len<S>(hyp_len: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

fn score(stats: &BleuStats) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let max_n = stats.matched.len();
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = (stats.matched[n] as f64, stats.total[n] as f64);
        let p = if n == 0 {
            if t == 0.0 {
                0.0
            } else {
                m / t
            }
        } else if stats.matched[n] == 0 {
            1.0 / (t + 1.0)
        } else {
            m / t
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (stats.hyp_len as f64, stats.ref_len as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0)
}

/// Sentence BLEU of `hyp` against `refs`.
pub fn bleu<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Argument("BLEU needs at least one reference".into()));
    }
    if max_n == 0 {
        return Err(Error::Argument("max_n must be at least 1".into()));
    }
    Ok(score(&sentence_stats(hyp, refs, max_n)))
}

/// Corpus BLEU: n-gram statistics and lengths are summed before scoring.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<Vec<S>>)], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::Argument("max_n must be at least 1".into()));
    }
    let mut acc = BleuStats {
        matched: vec![0; max_n],
        total: vec![0; max_n],
        ..Default::default()
    };
    for (hyp, refs) in pairs {
        if refs.is_empty() {
            return Err(Error::Argument("BLEU needs at least one reference".into()));
        }
        let s = sentence_stats(hyp, refs, max_n);
        for n in 0..max_n {
            acc.matched[n] += s.matched[n];
            acc.total[n] += s.total[n];
        }
        acc.hyp_len += s.hyp_len;
        acc.ref_len += s.ref_len;
    }
    Ok(score(&acc))
}

/// A corpus-level caption metric. BLEU-4 is the one the evaluator reports;
/// others (CIDEr and the like) can be plugged in through this trait.
pub trait CaptionMetric {
    fn name(&self) -> &str;
    fn score(&self, pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<f64>;
}

pub struct Bleu {
    pub max_n: usize,
}

impl CaptionMetric for Bleu {
    fn name(&self) -> &str {
        "bleu"
    }

    fn score(&self, pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<f64> {
        corpus_bleu(pairs, self.max_n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub avg_len: f64,
    pub n: usize,
}

/// One image plus its reference token lists.
pub type EvalItem = (ImageRecord, Vec<Vec<String>>);

/// Greedy-decode every image and score the corpus with BLEU-4.
pub fn evaluate<M: CaptionModel + ?Sized>(model: &M, eval_set: &[EvalItem]) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let opts = model.default_generate_options();
    let mut pairs = Vec::with_capacity(eval_set.len());
    let mut total_len = 0usize;
    for (image, refs) in eval_set {
        let hyp = model.generate(image, &opts)?.caption.tokens;
        total_len += hyp.len();
        pairs.push((hyp, refs.clone()));
    }
    Ok(EvalReport {
        bleu4: corpus_bleu(&pairs, 4)?,
        avg_len: total_len as f64 / eval_set.len() as f64,
        n: eval_set.len(),
    })
}
