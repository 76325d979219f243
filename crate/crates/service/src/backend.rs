use std::time::Duration;

use capfeed::augment::text::TextBackend;
use capfeed::{Error, Result};
use serde::{Deserialize, Serialize};

/// Text backend reached over HTTP.
///
/// `POST {base}/translate` takes `{text, src, dst}` and answers `{text}`;
/// `POST {base}/paraphrase` takes `{text, n}` and answers `{paraphrases: [..]}`.
/// Calls block, so use it from blocking threads only.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base: String,
    timeout: Duration,
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    src: &'a str,
    dst: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    text: String,
}

#[derive(Serialize)]
struct ParaphraseRequest<'a> {
    text: &'a str,
    n: usize,
}

#[derive(Deserialize)]
struct ParaphraseResponse {
    paraphrases: Vec<String>,
}

impl HttpBackend {
    pub fn new(base: impl Into<String>) -> Self {
        HttpBackend {
            base: base.into().trim_end_matches('/').to_owned(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn post<Q: Serialize, A: for<'de> Deserialize<'de>>(&self, route: &str, body: &Q) -> Result<A> {
        // A client per call: blocking clients must not be dropped inside an async context.
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        let url = format!("{}/{route}", self.base);
        let resp = client
            .post(&url)
            .json(body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Backend(format!("{url}: {e}")))?;
        resp.json().map_err(|e| Error::Backend(format!("{url}: {e}")))
    }
}

impl TextBackend for HttpBackend {
    fn translate(&self, text: &str, src_lang: &str, dst_lang: &str) -> Result<String> {
        let r: TranslateResponse = self.post("translate", &TranslateRequest { text, src: src_lang, dst: dst_lang })?;
        Ok(r.text)
    }

    fn paraphrase(&self, text: &str, n: usize) -> Result<Vec<String>> {
        let mut r: ParaphraseResponse = self.post("paraphrase", &ParaphraseRequest { text, n })?;
        r.paraphrases.truncate(n);
        Ok(r.paraphrases)
    }
}
