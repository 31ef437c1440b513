//! The frozen LM: conditional generation and scoring behind a deterministic
//! cache, with an OpenAI-style HTTP backend and a scripted mock.
//!
//! `generate` renders a template for an example, consults the cache, invokes
//! the backend on a miss, and parses each completion back into fields. When
//! the rendered prompt exceeds the backend's context budget, demonstrations
//! are dropped oldest-first until it fits; the input block is never
//! truncated.

mod http;
mod mock;

pub use http::{HttpLm, HttpProfile};
pub use mock::{MockLm, ScoreRule, ScriptRecord};

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::cache::{prompt_hash, Cache, CacheKeyFields};
use crate::error::{DspError, Result};
use crate::example::Example;
use crate::template::Template;
use crate::trace::Tracer;

/// Default max in-flight backend requests.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// Approximate characters per token for context budgeting.
pub const CHARS_PER_TOKEN: usize = 4;

/// Default context window in tokens (budgeted as 4 characters per token).
pub const DEFAULT_CONTEXT_TOKENS: usize = 4097;

/// Sampling parameters for one generation call.
///
/// `n = 1` means greedy decoding; the temperature is treated as 0 regardless
/// of what is set. `n > 1` requires a positive temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// Number of samples to request.
    pub n: usize,
    /// Sampling temperature; ignored (treated as 0) when `n = 1`.
    pub temperature: f64,
    /// Completion token budget.
    pub max_tokens: usize,
    /// Stop sequences; when empty, `generate` defaults to the template's
    /// first label plus a double newline.
    pub stop: Vec<String>,
    /// Replay seed, mixed into the cache key.
    pub seed: u64,
}

impl SamplingParams {
    /// Greedy decoding (n = 1, temperature 0).
    pub fn greedy(seed: u64) -> Self {
        SamplingParams {
            n: 1,
            temperature: 0.0,
            max_tokens: 256,
            stop: Vec::new(),
            seed,
        }
    }

    /// Sampled decoding with `n` samples at `temperature`.
    pub fn sampled(n: usize, temperature: f64, seed: u64) -> Self {
        SamplingParams {
            n,
            temperature,
            max_tokens: 256,
            stop: Vec::new(),
            seed,
        }
    }

    /// Checks the n/temperature invariants.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(DspError::Contract("sampling requires n >= 1".to_string()));
        }
        if self.n > 1 && self.temperature <= 0.0 {
            return Err(DspError::Contract(
                "n > 1 requires a positive temperature".to_string(),
            ));
        }
        Ok(())
    }

    /// The temperature actually sent: 0 when greedy (n = 1).
    pub fn effective_temperature(&self) -> f64 {
        if self.n == 1 {
            0.0
        } else {
            self.temperature
        }
    }
}

/// The canonical request handed to backends.
#[derive(Debug, Clone)]
pub struct LmRequest {
    /// Full prompt text.
    pub prompt: String,
    /// Number of completions.
    pub n: usize,
    /// Effective temperature (0 for greedy).
    pub temperature: f64,
    /// Completion token budget.
    pub max_tokens: usize,
    /// Stop sequences.
    pub stop: Vec<String>,
    /// Replay seed.
    pub seed: u64,
}

/// A backend completion before template extraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCompletion {
    /// Completion text.
    pub text: String,
    /// Mean per-token log-probability; absent when the backend omits
    /// logprobs. Absent means "unrankable", not zero.
    pub avg_logprob: Option<f64>,
}

/// A parsed completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Raw completion text.
    pub text: String,
    /// Fields extracted via the template.
    pub fields: BTreeMap<String, String>,
    /// Mean per-token log-probability, when reported.
    pub avg_logprob: Option<f64>,
}

impl Completion {
    /// An extracted field value.
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }
}

/// The n completions for one prompt, in backend return order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completions {
    /// Completions, ordered as returned.
    pub items: Vec<Completion>,
    /// The exact prompt sent, byte for byte.
    pub prompt: String,
}

impl Completions {
    /// The given field's value from every completion that has it, in order.
    pub fn field_values(&self, name: &str) -> Vec<&str> {
        self.items.iter().filter_map(|c| c.field(name)).collect()
    }

    /// The completion with the largest average log-probability. Completions
    /// without logprobs are unrankable; when none are rankable, falls back to
    /// the first completion. Ties keep the earlier completion.
    pub fn best_by_avg_logprob(&self) -> Option<&Completion> {
        let ranked = self
            .items
            .iter()
            .filter(|c| c.avg_logprob.is_some())
            .max_by(|a, b| {
                a.avg_logprob
                    .partial_cmp(&b.avg_logprob)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        ranked.or_else(|| self.items.first())
    }
}

/// A frozen LM backend.
pub trait LmBackend: Send + Sync {
    /// Stable identifier, mixed into cache keys.
    fn id(&self) -> String;

    /// Produces completions for a request. Implementations own their retry
    /// policy; errors that reach the caller are final.
    fn complete(&self, request: &LmRequest) -> Result<Vec<RawCompletion>>;

    /// Total log-probability of `continuation` given `prompt`. Backends that
    /// cannot score return a capability error.
    fn score(&self, prompt: &str, continuation: &str) -> Result<f64>;

    /// Context budget in characters (4 per token by convention).
    fn context_chars(&self) -> usize {
        DEFAULT_CONTEXT_TOKENS * CHARS_PER_TOKEN
    }
}

#[derive(Serialize, Deserialize)]
struct CachedGeneration {
    completions: Vec<RawCompletion>,
}

struct Gate {
    slots: Mutex<usize>,
    cond: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            slots: Mutex::new(limit.max(1)),
            cond: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cond.wait(slots).unwrap();
        }
        *slots -= 1;
        drop(slots);
        let out = f();
        *self.slots.lock().unwrap() += 1;
        self.cond.notify_one();
        out
    }
}

/// The LM handle programs call: a backend plus the shared cache, an
/// in-flight limit, and an optional tracer.
#[derive(Clone)]
pub struct Lm {
    backend: Arc<dyn LmBackend>,
    cache: Arc<Cache>,
    gate: Arc<Gate>,
    tracer: Option<Arc<Tracer>>,
}

impl Lm {
    /// Wraps a backend with the shared cache.
    pub fn new(backend: Arc<dyn LmBackend>, cache: Arc<Cache>) -> Self {
        Lm {
            backend,
            cache,
            gate: Arc::new(Gate::new(DEFAULT_MAX_IN_FLIGHT)),
            tracer: None,
        }
    }

    /// Caps concurrent backend requests.
    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.gate = Arc::new(Gate::new(limit));
        self
    }

    /// A handle that records prompts into `tracer`. The cache and in-flight
    /// gate stay shared with the original.
    pub fn with_tracer(&self, tracer: Arc<Tracer>) -> Lm {
        let mut lm = self.clone();
        lm.tracer = Some(tracer);
        lm
    }

    /// The backend identifier.
    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    /// Renders the template for `x`, queries the backend (through the
    /// cache), and parses each completion's fields. Demos are dropped
    /// oldest-first if the prompt would exceed the context budget.
    pub fn generate(&self, t: &Template, p: &SamplingParams, x: &Example) -> Result<Completions> {
        p.validate()?;
        let budget = self.backend.context_chars();
        let mut rendered = t.render_full(x)?;
        if rendered.text.chars().count() > budget {
            let demos = x.demos();
            for dropped in 1..=demos.len() {
                let trimmed = x.copy_with([(
                    "demos".to_string(),
                    crate::example::Value::Examples(demos[dropped..].to_vec()),
                )]);
                rendered = t.render_full(&trimmed)?;
                if rendered.text.chars().count() <= budget {
                    log::warn!(
                        "prompt over context budget; dropped {dropped} oldest demo(s) for template {}",
                        t.name
                    );
                    break;
                }
            }
        }

        let mut stop = p.stop.clone();
        if stop.is_empty() {
            stop = vec![t.first_label().to_string(), "\n\n".to_string()];
        }
        let raw = self.complete_cached(&rendered.text, p, &stop)?;
        let items = raw
            .into_iter()
            .map(|rc| {
                let fields = t.extract(&rc.text, rendered.already_filled);
                Completion {
                    text: rc.text,
                    fields,
                    avg_logprob: rc.avg_logprob,
                }
            })
            .collect();
        Ok(Completions {
            items,
            prompt: rendered.text,
        })
    }

    /// Generation over a raw prompt, without template extraction. Used by
    /// control flows that manage one growing prompt themselves.
    pub fn complete_raw(&self, prompt: &str, p: &SamplingParams) -> Result<Completions> {
        p.validate()?;
        let raw = self.complete_cached(prompt, p, &p.stop)?;
        let items = raw
            .into_iter()
            .map(|rc| Completion {
                text: rc.text,
                fields: BTreeMap::new(),
                avg_logprob: rc.avg_logprob,
            })
            .collect();
        Ok(Completions {
            items,
            prompt: prompt.to_string(),
        })
    }

    fn complete_cached(
        &self,
        prompt: &str,
        p: &SamplingParams,
        stop: &[String],
    ) -> Result<Vec<RawCompletion>> {
        let request = LmRequest {
            prompt: prompt.to_string(),
            n: p.n,
            temperature: p.effective_temperature(),
            max_tokens: p.max_tokens,
            stop: stop.to_vec(),
            seed: p.seed,
        };
        let fields = CacheKeyFields {
            backend_id: self.backend.id(),
            kind: "generate".to_string(),
            payload: serde_json::json!({ "prompt": request.prompt }).to_string(),
            params: serde_json::json!({
                "max_tokens": request.max_tokens,
                "n": request.n,
                "stop": request.stop,
                "temperature": request.temperature,
            })
            .to_string(),
            seed: request.seed,
        };
        let body = self.cache.get_or_compute(&fields, || {
            let completions = self.gate.run(|| self.backend.complete(&request))?;
            serde_json::to_string(&CachedGeneration { completions })
                .map_err(|e| DspError::Cache(format!("serialize response: {e}")))
        })?;
        if let Some(tracer) = &self.tracer {
            tracer.record_prompt(prompt_hash(prompt), prompt);
        }
        let parsed: CachedGeneration = serde_json::from_str(&body)
            .map_err(|e| DspError::Cache(format!("corrupt cached response: {e}")))?;
        Ok(parsed.completions)
    }

    /// Total log-probability of `continuation` given `prompt`, cached.
    pub fn score(&self, prompt: &str, continuation: &str) -> Result<f64> {
        let fields = CacheKeyFields {
            backend_id: self.backend.id(),
            kind: "score".to_string(),
            payload: serde_json::json!({ "continuation": continuation, "prompt": prompt })
                .to_string(),
            params: "{}".to_string(),
            seed: 0,
        };
        let body = self.cache.get_or_compute(&fields, || {
            let value = self.gate.run(|| self.backend.score(prompt, continuation))?;
            Ok(value.to_string())
        })?;
        body.parse::<f64>()
            .map_err(|e| DspError::Cache(format!("corrupt cached score: {e}")))
    }
}

impl std::fmt::Debug for Lm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Lm({})", self.backend.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::TemplateSet;

    fn record(substr: &str, completions: &[&str]) -> ScriptRecord {
        ScriptRecord {
            matches: BTreeMap::from([("question".to_string(), substr.to_string())]),
            completions: completions.iter().map(|s| s.to_string()).collect(),
            avg_logprobs: None,
            scores: Vec::new(),
        }
    }

    fn mock_lm(records: Vec<ScriptRecord>) -> Lm {
        Lm::new(
            Arc::new(MockLm::from_records(records)),
            Arc::new(Cache::memory()),
        )
    }

    #[test]
    fn generate_extracts_fields_from_scripted_completion() {
        let lm = mock_lm(vec![record("Palomar 4", &["Answer: 1889"])]);
        let set = TemplateSet::builtin();
        let t = set.get("qa").unwrap();
        let x = Example::new().with("question", "When was the discoverer of Palomar 4 born?");
        let out = lm.generate(t, &SamplingParams::greedy(0), &x).unwrap();
        assert_eq!(out.items.len(), 1);
        assert_eq!(out.items[0].field("answer"), Some("1889"));
    }

    #[test]
    fn mock_cycles_when_n_exceeds_scripted_completions() {
        let lm = mock_lm(vec![record("q", &["Answer: a", "Answer: b"])]);
        let set = TemplateSet::builtin();
        let t = set.get("qa").unwrap();
        let x = Example::new().with("question", "q");
        let out = lm
            .generate(t, &SamplingParams::sampled(3, 0.7, 0), &x)
            .unwrap();
        let answers: Vec<_> = out.field_values("answer");
        assert_eq!(answers, vec!["a", "b", "a"]);
    }

    #[test]
    fn repeated_call_is_served_from_cache() {
        use std::sync::atomic::{AtomicUsize, Ordering};

        struct Counting {
            calls: AtomicUsize,
        }
        impl LmBackend for Counting {
            fn id(&self) -> String {
                "lm:counting".to_string()
            }
            fn complete(&self, _req: &LmRequest) -> Result<Vec<RawCompletion>> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                Ok(vec![RawCompletion {
                    text: "Answer: yes".to_string(),
                    avg_logprob: None,
                }])
            }
            fn score(&self, _p: &str, _c: &str) -> Result<f64> {
                Err(DspError::Capability("no scoring".to_string()))
            }
        }

        let backend = Arc::new(Counting {
            calls: AtomicUsize::new(0),
        });
        let lm = Lm::new(backend.clone(), Arc::new(Cache::memory()));
        let set = TemplateSet::builtin();
        let t = set.get("qa").unwrap();
        let x = Example::new().with("question", "q");
        let p = SamplingParams::greedy(0);
        let first = lm.generate(t, &p, &x).unwrap();
        let second = lm.generate(t, &p, &x).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn prompt_matches_render_byte_for_byte() {
        let lm = mock_lm(vec![record("q", &["Answer: a"])]);
        let set = TemplateSet::builtin();
        let t = set.get("qa").unwrap();
        let x = Example::new().with("question", "q");
        let out = lm.generate(t, &SamplingParams::greedy(0), &x).unwrap();
        assert_eq!(out.prompt, t.render(&x).unwrap());
    }

    #[test]
    fn demos_drop_oldest_first_when_over_budget() {
        let backend =
            MockLm::from_records(vec![record("q", &["Answer: a"])]).with_context_chars(400);
        let lm = Lm::new(Arc::new(backend), Arc::new(Cache::memory()));
        let set = TemplateSet::builtin();
        let t = set.get("qa").unwrap();
        let demo = |tag: &str| {
            Example::new()
                .with("question", format!("{tag} {}", "x".repeat(200)))
                .with("answer", "a")
        };
        let x = Example::new()
            .with("question", "q")
            .with("demos", vec![demo("oldest"), demo("newest")]);
        let out = lm.generate(t, &SamplingParams::greedy(0), &x).unwrap();
        assert!(!out.prompt.contains("oldest"));
        assert!(out.prompt.contains("newest"));
        assert!(out.prompt.contains("Question: q"));
    }

    #[test]
    fn sampling_invariants_enforced() {
        assert!(SamplingParams::sampled(3, 0.0, 0).validate().is_err());
        assert!(SamplingParams::sampled(3, 0.7, 0).validate().is_ok());
        let mut p = SamplingParams::greedy(0);
        p.temperature = 0.9;
        assert_eq!(p.effective_temperature(), 0.0);
    }

    #[test]
    fn best_by_avg_logprob_falls_back_to_first() {
        let c = |text: &str, lp: Option<f64>| Completion {
            text: text.to_string(),
            fields: BTreeMap::new(),
            avg_logprob: lp,
        };
        let ranked = Completions {
            items: vec![c("a", Some(-2.0)), c("b", Some(-1.0)), c("c", None)],
            prompt: String::new(),
        };
        assert_eq!(ranked.best_by_avg_logprob().unwrap().text, "b");
        let unranked = Completions {
            items: vec![c("a", None), c("b", None)],
            prompt: String::new(),
        };
        assert_eq!(unranked.best_by_avg_logprob().unwrap().text, "a");
    }

    #[test]
    fn scripted_score_lookup_and_capability_error() {
        let mut rec = record("abc", &["unused"]);
        rec.scores.push(ScoreRule {
            contains: "abc".to_string(),
            continuation: "x".to_string(),
            logprob: -1.5,
        });
        let lm = mock_lm(vec![rec]);
        assert_eq!(lm.score("prompt with abc inside", "x").unwrap(), -1.5);
        assert!(matches!(
            lm.score("prompt with abc inside", "unscripted"),
            Err(DspError::Capability(_))
        ));
    }
}
