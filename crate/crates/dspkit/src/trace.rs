//! Per-run tracing: prompt hashes and retrieval ids, collected while a
//! program runs one example. The harness attaches a fresh tracer per example
//! and folds the snapshots into the report.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rm::{Retrieve, ScoredPassage};

/// One retrieval call: the query and the returned passage ids, in rank order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalTrace {
    /// The query sent to the RM.
    pub query: String,
    /// Returned passage ids, best first.
    pub ids: Vec<String>,
}

/// Everything recorded for one example.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TraceEvents {
    /// Hex hashes of every prompt sent, in call order.
    pub prompt_hashes: Vec<String>,
    /// Full prompt texts; populated only when text capture is on.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub prompts: Vec<String>,
    /// Retrieval calls, in call order.
    pub retrievals: Vec<RetrievalTrace>,
}

/// A thread-safe event collector.
#[derive(Debug, Default)]
pub struct Tracer {
    capture_text: bool,
    events: Mutex<TraceEvents>,
}

impl Tracer {
    /// A tracer recording hashes and retrieval ids only.
    pub fn new() -> Self {
        Self::default()
    }

    /// A tracer that also keeps full prompt texts (the `trace` subcommand).
    pub fn capturing_text() -> Self {
        Tracer {
            capture_text: true,
            events: Mutex::new(TraceEvents::default()),
        }
    }

    /// Records one LM call.
    pub fn record_prompt(&self, hash: String, text: &str) {
        let mut events = self.events.lock().unwrap();
        events.prompt_hashes.push(hash);
        if self.capture_text {
            events.prompts.push(text.to_string());
        }
    }

    /// Records one retrieval call.
    pub fn record_retrieval(&self, query: &str, ids: Vec<String>) {
        self.events.lock().unwrap().retrievals.push(RetrievalTrace {
            query: query.to_string(),
            ids,
        });
    }

    /// A copy of everything recorded so far.
    pub fn snapshot(&self) -> TraceEvents {
        self.events.lock().unwrap().clone()
    }
}

/// Wraps a retriever so every call lands in the tracer.
pub struct TracingRetriever<'a> {
    inner: &'a dyn Retrieve,
    tracer: &'a Tracer,
}

impl<'a> TracingRetriever<'a> {
    /// Wraps `inner`, recording into `tracer`.
    pub fn new(inner: &'a dyn Retrieve, tracer: &'a Tracer) -> Self {
        TracingRetriever { inner, tracer }
    }
}

impl Retrieve for TracingRetriever<'_> {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredPassage>> {
        let hits = self.inner.retrieve(query, k)?;
        self.tracer
            .record_retrieval(query, hits.iter().map(|h| h.passage.id.clone()).collect());
        Ok(hits)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}
