//! OpenAI-style completions backend over HTTP.
//!
//! Requests carry prompt, n, temperature, max_tokens, stop, and logprobs.
//! Transport failures, 5xx, and 429 are retried up to 3 attempts with
//! 1s/2s backoff; other statuses fail immediately. Scoring uses the
//! echo+logprobs capability when the profile declares it.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LmBackend, LmRequest, RawCompletion, CHARS_PER_TOKEN, DEFAULT_CONTEXT_TOKENS};
use crate::cache::prompt_hash;
use crate::error::{DspError, Result};

/// Environment variable overriding the base URL.
pub const ENV_LM_URL: &str = "DSPKIT_LM_URL";
/// Environment variable overriding the API key.
pub const ENV_LM_KEY: &str = "DSPKIT_LM_KEY";

/// Connection profile for an OpenAI-compatible completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpProfile {
    /// Base URL; `/completions` is appended.
    pub base_url: String,
    /// Model name sent with every request.
    pub model: String,
    /// Bearer token; optional for local servers.
    #[serde(default)]
    pub api_key: Option<String>,
    /// Context window in tokens; budgeted as 4 characters per token.
    #[serde(default = "default_context_tokens")]
    pub context_tokens: usize,
    /// Whether the endpoint supports echo+logprobs scoring.
    #[serde(default)]
    pub supports_score: bool,
}

fn default_context_tokens() -> usize {
    DEFAULT_CONTEXT_TOKENS
}

impl HttpProfile {
    /// Applies the `DSPKIT_LM_URL` / `DSPKIT_LM_KEY` environment overrides.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_LM_URL) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_LM_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    logprobs: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    echo: bool,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

/// The HTTP LM backend.
pub struct HttpLm {
    profile: HttpProfile,
    client: reqwest::blocking::Client,
}

impl HttpLm {
    /// Builds a backend from a profile (apply env overrides first with
    /// [`HttpProfile::with_env_overrides`]).
    pub fn new(profile: HttpProfile) -> Result<Self> {
        if profile.base_url.is_empty() {
            return Err(DspError::Config(
                "http lm profile has an empty base_url".to_string(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| DspError::Config(format!("http client: {e}")))?;
        Ok(HttpLm { profile, client })
    }

    fn post(&self, body: &CompletionRequest<'_>, key_hash: &str) -> Result<CompletionResponse> {
        let url = format!(
            "{}/completions",
            self.profile.base_url.trim_end_matches('/')
        );
        let send = || -> std::result::Result<CompletionResponse, (bool, String)> {
            let mut builder = self.client.post(&url).json(body);
            if let Some(key) = &self.profile.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = builder.send().map_err(|e| (true, e.to_string()))?;
            let status = response.status();
            if status.is_success() {
                response
                    .json::<CompletionResponse>()
                    .map_err(|e| (false, format!("malformed response: {e}")))
            } else {
                let retryable = status.is_server_error() || status.as_u16() == 429;
                Err((retryable, format!("status {status}")))
            }
        };
        let mut last = String::new();
        for (attempt, backoff_secs) in [1u64, 2, 4].iter().enumerate() {
            match send() {
                Ok(parsed) => return Ok(parsed),
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
            prompt_hash: key_hash.to_string(),
            message: last,
        })
    }
}

impl LmBackend for HttpLm {
    fn id(&self) -> String {
        format!("lm:http:{}@{}", self.profile.model, self.profile.base_url)
    }

    fn complete(&self, request: &LmRequest) -> Result<Vec<RawCompletion>> {
        let hash = prompt_hash(&request.prompt);
        let body = CompletionRequest {
            model: &self.profile.model,
            prompt: &request.prompt,
            n: request.n,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop: if request.stop.is_empty() {
                None
            } else {
                Some(&request.stop)
            },
            logprobs: 0,
            echo: false,
        };
        let parsed = self.post(&body, &hash)?;
        if parsed.choices.len() < request.n {
            return Err(DspError::Transport {
                prompt_hash: hash,
                message: format!(
                    "backend returned {} completion(s), requested {}",
                    parsed.choices.len(),
                    request.n
                ),
            });
        }
        Ok(parsed
            .choices
            .into_iter()
            .map(|choice| {
                let avg_logprob = choice.logprobs.and_then(|lp| {
                    let values: Vec<f64> = lp.token_logprobs.iter().flatten().copied().collect();
                    if values.is_empty() {
                        None
                    } else {
                        Some(values.iter().sum::<f64>() / values.len() as f64)
                    }
                });
                RawCompletion {
                    text: choice.text,
                    avg_logprob,
                }
            })
            .collect())
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<f64> {
        if !self.profile.supports_score {
            return Err(DspError::Capability(format!(
                "profile for {} does not declare echo+logprobs scoring",
                self.profile.model
            )));
        }
        let full = format!("{prompt}{continuation}");
        let hash = prompt_hash(&full);
        let body = CompletionRequest {
            model: &self.profile.model,
            prompt: &full,
            n: 1,
            temperature: 0.0,
            max_tokens: 0,
            stop: None,
            logprobs: 0,
            echo: true,
        };
        let parsed = self.post(&body, &hash)?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| DspError::Transport {
                prompt_hash: hash.clone(),
                message: "no choices in score response".to_string(),
            })?;
        let lp = choice.logprobs.ok_or_else(|| {
            DspError::Capability("backend returned no logprobs for echo scoring".to_string())
        })?;
        let total = lp
            .token_logprobs
            .iter()
            .zip(&lp.text_offset)
            .filter(|(_, &offset)| offset >= prompt.len())
            .filter_map(|(lp, _)| *lp)
            .sum();
        Ok(total)
    }

    fn context_chars(&self) -> usize {
        self.profile.context_tokens * CHARS_PER_TOKEN
    }
}
