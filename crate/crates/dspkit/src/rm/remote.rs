//! Remote RM hook: any HTTP service exposing
//! `GET /search?query=...&k=...` that returns `[{id, title, text, score}]`
//! satisfies the retrieve contract. Responses go through the shared call
//! cache so runs stay replayable.

use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use super::{softmax, Passage, Retrieve, ScoredPassage};
use crate::cache::{prompt_hash, Cache, CacheKeyFields};
use crate::error::{DspError, Result};

/// Percent-encodes everything outside the RFC 3986 unreserved set.
fn urlencode(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for byte in raw.bytes() {
        match byte {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(byte as char)
            }
            _ => out.push_str(&format!("%{byte:02X}")),
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct RemoteHit {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
    score: f64,
}

/// A retriever backed by a remote search endpoint.
pub struct RemoteRm {
    base_url: String,
    client: reqwest::blocking::Client,
    cache: Option<Arc<Cache>>,
}

impl RemoteRm {
    /// Creates a client for `<base_url>/search`.
    pub fn new(base_url: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| DspError::Config(format!("http client: {e}")))?;
        Ok(RemoteRm {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
            cache: None,
        })
    }

    /// Routes responses through the shared call cache.
    pub fn with_cache(mut self, cache: Arc<Cache>) -> Self {
        self.cache = Some(cache);
        self
    }

    fn fetch(&self, query: &str, k: usize) -> Result<String> {
        let url = format!("{}/search?query={}&k={k}", self.base_url, urlencode(query));
        let send = || -> std::result::Result<String, (bool, String)> {
            let response = self
                .client
                .get(&url)
                .send()
                .map_err(|e| (true, e.to_string()))?;
            let status = response.status();
            if status.is_success() {
                response.text().map_err(|e| (true, e.to_string()))
            } else {
                let retryable = status.is_server_error() || status.as_u16() == 429;
                Err((retryable, format!("status {status}")))
            }
        };
        let mut last = String::new();
        for (attempt, backoff_secs) in [1u64, 2, 4].iter().enumerate() {
            match send() {
                Ok(body) => return Ok(body),
                Err((retryable, message)) => {
                    last = message;
                    if !retryable || attempt == 2 {
                        break;
                    }
                    std::thread::sleep(Duration::from_secs(*backoff_secs));
                }
            }
        }
        Err(DspError::Transport {
            prompt_hash: prompt_hash(query),
            message: last,
        })
    }
}

impl Retrieve for RemoteRm {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredPassage>> {
        let payload = serde_json::json!({ "k": k, "query": query }).to_string();
        let fields = CacheKeyFields {
            backend_id: self.id(),
            kind: "retrieve".to_string(),
            payload,
            params: "{}".to_string(),
            seed: 0,
        };
        let body = match &self.cache {
            Some(cache) => cache.get_or_compute(&fields, || self.fetch(query, k))?,
            None => self.fetch(query, k)?,
        };
        let hits: Vec<RemoteHit> = serde_json::from_str(&body)
            .map_err(|e| DspError::parse(format!("{}/search", self.base_url), e.to_string()))?;
        let probs = softmax(&hits.iter().map(|h| h.score).collect::<Vec<_>>());
        Ok(hits
            .into_iter()
            .zip(probs)
            .map(|(hit, prob)| ScoredPassage {
                passage: Passage {
                    id: hit.id,
                    title: hit.title,
                    text: hit.text,
                },
                score: hit.score,
                prob,
            })
            .collect())
    }

    fn id(&self) -> String {
        format!("rm:remote:{}", self.base_url)
    }
}
