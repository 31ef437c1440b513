//! The `Example` datatype and the transformation contract.
//!
//! An `Example` is the universal pipeline state: a record of named fields
//! that every stage reads from and writes to. Examples are immutable values;
//! transformations return new copies instead of mutating their input.
//!
//! Reserved field names used by the built-in stages: `question`, `answer`,
//! `answers`, `turns`, `train`, `demos`, `context`, `passages`, `hops`,
//! `pred`, `choices`, `candidates`, `rationale`, `rewrite`, `response`,
//! `hop1`/`hop2`, `psg1`/`psg2`, `id`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};

/// A field value. Typical values are strings or lists of strings; nested
/// example lists carry demonstrations and candidates, and `hops` stores
/// (summary, query) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    /// Free text.
    Text(String),
    /// A number (counts, scores).
    Number(f64),
    /// A list of texts (passages, context lines, conversation turns).
    List(Vec<String>),
    /// A list of (summary, query) pairs, one per retrieval hop.
    Pairs(Vec<(String, String)>),
    /// Nested examples (train set, demos, candidates).
    Examples(Vec<Example>),
}

impl Value {
    /// The contained text, if this is a `Text` value.
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    /// The contained list, if this is a `List` value.
    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            Value::List(items) => Some(items),
            _ => None,
        }
    }

    /// The contained examples, if this is an `Examples` value.
    pub fn as_examples(&self) -> Option<&[Example]> {
        match self {
            Value::Examples(items) => Some(items),
            _ => None,
        }
    }

    /// The contained pairs, if this is a `Pairs` value.
    pub fn as_pairs(&self) -> Option<&[(String, String)]> {
        match self {
            Value::Pairs(items) => Some(items),
            _ => None,
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<Vec<String>> for Value {
    fn from(items: Vec<String>) -> Self {
        Value::List(items)
    }
}

impl From<Vec<Example>> for Value {
    fn from(items: Vec<Example>) -> Self {
        Value::Examples(items)
    }
}

impl From<Vec<(String, String)>> for Value {
    fn from(items: Vec<(String, String)>) -> Self {
        Value::Pairs(items)
    }
}

/// A record of named fields flowing through the pipeline.
///
/// Field names are unique by construction (map-backed). Copy-with-overrides
/// never mutates the source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Example {
    fields: BTreeMap<String, Value>,
}

impl Example {
    /// An example with no fields.
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insertion, consuming and returning the example.
    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.fields.insert(name.into(), value.into());
        self
    }

    /// Sets a field in place. Prefer [`Example::copy_with`] inside
    /// transformations; this is for local construction only.
    pub fn set(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.fields.insert(name.into(), value.into());
    }

    /// Removes a field if present.
    pub fn remove(&mut self, name: &str) {
        self.fields.remove(name);
    }

    /// A copy of this example with the given overrides applied last.
    /// Unknown override names create new fields.
    pub fn copy_with(&self, overrides: impl IntoIterator<Item = (String, Value)>) -> Example {
        let mut out = self.clone();
        for (name, value) in overrides {
            out.fields.insert(name, value);
        }
        out
    }

    /// Whether the field exists.
    pub fn has(&self, name: &str) -> bool {
        self.fields.contains_key(name)
    }

    /// Raw field lookup.
    pub fn get(&self, name: &str) -> Option<&Value> {
        #[cfg(debug_assertions)]
        audit::record(name);
        self.fields.get(name)
    }

    /// Field names in sorted order.
    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    /// Iterates over (name, value) pairs in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Text field accessor.
    pub fn text(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(Value::as_text)
    }

    /// List field accessor.
    pub fn list(&self, name: &str) -> Option<&[String]> {
        self.get(name).and_then(Value::as_list)
    }

    /// Nested-examples field accessor.
    pub fn examples(&self, name: &str) -> Option<&[Example]> {
        self.get(name).and_then(Value::as_examples)
    }

    /// Pairs field accessor.
    pub fn pairs(&self, name: &str) -> Option<&[(String, String)]> {
        self.get(name).and_then(Value::as_pairs)
    }

    /// The `question` field.
    pub fn question(&self) -> Option<&str> {
        self.text("question")
    }

    /// The `answer` field (gold answer on training examples).
    pub fn answer(&self) -> Option<&str> {
        self.text("answer")
    }

    /// The `pred` field (the pipeline's prediction).
    pub fn pred(&self) -> Option<&str> {
        self.text("pred")
    }

    /// The `demos` field, or an empty slice.
    pub fn demos(&self) -> &[Example] {
        self.examples("demos").unwrap_or(&[])
    }

    /// The `train` field, or an empty slice.
    pub fn train(&self) -> &[Example] {
        self.examples("train").unwrap_or(&[])
    }

    /// The `context` field, or an empty slice.
    pub fn context(&self) -> &[String] {
        self.list("context").unwrap_or(&[])
    }

    /// The `passages` field, or an empty slice.
    pub fn passages(&self) -> &[String] {
        self.list("passages").unwrap_or(&[])
    }

    /// The `turns` field, or an empty slice.
    pub fn turns(&self) -> &[String] {
        self.list("turns").unwrap_or(&[])
    }

    /// The `hops` field, or an empty slice.
    pub fn hops(&self) -> &[(String, String)] {
        self.pairs("hops").unwrap_or(&[])
    }

    /// Gold answers: the `answers` list if present, else the single `answer`.
    pub fn golds(&self) -> Vec<String> {
        if let Some(list) = self.list("answers") {
            list.to_vec()
        } else if let Some(a) = self.answer() {
            vec![a.to_string()]
        } else {
            Vec::new()
        }
    }
}

impl FromIterator<(String, Value)> for Example {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        Example {
            fields: iter.into_iter().collect(),
        }
    }
}

/// Debug-build audit of field reads: programs should touch only the fields
/// they declare, and a typo'd field name silently reads nothing. The audit
/// records every name passed to [`Example::get`] on the current thread.
#[cfg(debug_assertions)]
pub mod audit {
    use std::cell::RefCell;
    use std::collections::BTreeSet;

    thread_local! {
        static READS: RefCell<Option<BTreeSet<String>>> = const { RefCell::new(None) };
    }

    pub(super) fn record(name: &str) {
        READS.with(|reads| {
            if let Some(set) = reads.borrow_mut().as_mut() {
                set.insert(name.to_string());
            }
        });
    }

    /// Runs `f` while recording the field names read on this thread.
    pub fn trace_field_reads<T>(f: impl FnOnce() -> T) -> (T, BTreeSet<String>) {
        READS.with(|reads| *reads.borrow_mut() = Some(BTreeSet::new()));
        let out = f();
        let seen = READS.with(|reads| reads.borrow_mut().take().unwrap_or_default());
        (out, seen)
    }
}

/// A named transformation over examples.
///
/// Returning `Ok(None)` signals a failed or filtered attempt (used by
/// `annotate`); returning `Ok(Some(_))` yields a new example and leaves the
/// input untouched.
type TransformFn = dyn Fn(&Example) -> Result<Option<Example>> + Send + Sync;

#[derive(Clone)]
pub struct Transformation {
    name: String,
    func: Arc<TransformFn>,
}

impl Transformation {
    /// Wraps a function as a named transformation.
    pub fn new(
        name: impl Into<String>,
        func: impl Fn(&Example) -> Result<Option<Example>> + Send + Sync + 'static,
    ) -> Self {
        Transformation {
            name: name.into(),
            func: Arc::new(func),
        }
    }

    /// The trace name.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Applies the transformation.
    pub fn apply(&self, x: &Example) -> Result<Option<Example>> {
        (self.func)(x)
    }
}

impl std::fmt::Debug for Transformation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transformation")
            .field("name", &self.name)
            .finish()
    }
}

/// Composes transformations left to right, short-circuiting to `None` when
/// any stage filters the example. Stage errors propagate unchanged.
pub fn chain(stages: Vec<Transformation>) -> Result<Transformation> {
    if stages.is_empty() {
        return Err(DspError::Contract(
            "chain requires at least one stage".to_string(),
        ));
    }
    let name = stages
        .iter()
        .map(Transformation::name)
        .collect::<Vec<_>>()
        .join(" -> ");
    Ok(Transformation::new(name, move |x| {
        let mut current = x.clone();
        for stage in &stages {
            match stage.apply(&current)? {
                Some(next) => current = next,
                None => return Ok(None),
            }
        }
        Ok(Some(current))
    }))
}
