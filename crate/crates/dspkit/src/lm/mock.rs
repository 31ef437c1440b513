//! Deterministic scripted LM for offline runs and tests.
//!
//! The script is a JSON-lines file. Each record holds a `match` map (every
//! value must appear as a substring of the prompt), the completions to
//! return, optional per-completion average logprobs, and optional score
//! rules. The first matching record wins. When the requested n exceeds the
//! scripted completions, the mock cycles them; strict mode errors instead.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmBackend, LmRequest, RawCompletion, CHARS_PER_TOKEN, DEFAULT_CONTEXT_TOKENS};
use crate::error::{DspError, Result};

/// A scripted (prompt substring, continuation) to logprob rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRule {
    /// Substring the prompt must contain.
    pub contains: String,
    /// Exact continuation being scored.
    pub continuation: String,
    /// The scripted total log-probability.
    pub logprob: f64,
}

/// One script record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRecord {
    /// Substrings that must all appear in the prompt, keyed by a label that
    /// exists only for readability of the script.
    #[serde(rename = "match", default)]
    pub matches: BTreeMap<String, String>,
    /// Completions returned in order.
    pub completions: Vec<String>,
    /// Optional average logprobs, cycled alongside the completions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_logprobs: Option<Vec<f64>>,
    /// Optional scoring rules.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<ScoreRule>,
}

impl ScriptRecord {
    fn matched_count(&self, prompt: &str) -> usize {
        self.matches
            .values()
            .filter(|v| prompt.contains(v.as_str()))
            .count()
    }

    fn matches_prompt(&self, prompt: &str) -> bool {
        self.matched_count(prompt) == self.matches.len()
    }
}

/// The scripted mock backend. Read-only after construction.
#[derive(Debug, Clone)]
pub struct MockLm {
    records: Vec<ScriptRecord>,
    id: String,
    strict: bool,
    context_chars: usize,
}

impl MockLm {
    /// Loads a JSON-lines script file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| DspError::io(path.display().to_string(), e))?;
        let mut records = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ScriptRecord = serde_json::from_str(line).map_err(|e| {
                DspError::parse(
                    path.display().to_string(),
                    format!("line {}: {e}", lineno + 1),
                )
            })?;
            records.push(record);
        }
        Ok(MockLm {
            records,
            id: format!("lm:mock:{}", path.display()),
            strict: false,
            context_chars: DEFAULT_CONTEXT_TOKENS * CHARS_PER_TOKEN,
        })
    }

    /// Builds a mock from in-memory records.
    pub fn from_records(records: Vec<ScriptRecord>) -> Self {
        MockLm {
            records,
            id: "lm:mock:inline".to_string(),
            strict: false,
            context_chars: DEFAULT_CONTEXT_TOKENS * CHARS_PER_TOKEN,
        }
    }

    /// In strict mode, requesting more completions than a record scripts is
    /// an error instead of cycling.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Overrides the context budget (characters).
    pub fn with_context_chars(mut self, chars: usize) -> Self {
        self.context_chars = chars;
        self
    }

    fn find(&self, prompt: &str) -> Result<&ScriptRecord> {
        if let Some(record) = self.records.iter().find(|r| r.matches_prompt(prompt)) {
            return Ok(record);
        }
        let closest = self
            .records
            .iter()
            .enumerate()
            .max_by_key(|(_, r)| r.matched_count(prompt))
            .map(|(i, r)| {
                format!(
                    "record {} (matched {}/{} constraints: {:?})",
                    i,
                    r.matched_count(prompt),
                    r.matches.len(),
                    r.matches.values().collect::<Vec<_>>()
                )
            })
            .unwrap_or_else(|| "script is empty".to_string());
        Err(DspError::ScriptMiss { closest })
    }
}

/// Truncates text at the earliest occurrence of any stop sequence.
fn apply_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

impl LmBackend for MockLm {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &LmRequest) -> Result<Vec<RawCompletion>> {
        let record = self.find(&request.prompt)?;
        if record.completions.is_empty() {
            return Err(DspError::ScriptMiss {
                closest: "matching record has no completions".to_string(),
            });
        }
        if self.strict && request.n > record.completions.len() {
            return Err(DspError::Contract(format!(
                "strict mock: requested n={} but record scripts {} completion(s)",
                request.n,
                record.completions.len()
            )));
        }
        Ok((0..request.n)
            .map(|i| {
                let idx = i % record.completions.len();
                RawCompletion {
                    text: apply_stop(&record.completions[idx], &request.stop),
                    avg_logprob: record.avg_logprobs.as_ref().map(|lps| lps[idx % lps.len()]),
                }
            })
            .collect())
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<f64> {
        for record in &self.records {
            for rule in &record.scores {
                if prompt.contains(&rule.contains) && continuation == rule.continuation {
                    return Ok(rule.logprob);
                }
            }
        }
        Err(DspError::Capability(
            "mock script has no score rule for this (prompt, continuation) pair".to_string(),
        ))
    }

    fn context_chars(&self) -> usize {
        self.context_chars
    }
}
