//! Demonstration selection and weak-supervision bootstrapping: `sample`,
//! `knn_select`, `crossval_select`, and `annotate`.
//!
//! All tie-breaks go to the earliest index so selection is deterministic for
//! a fixed seed.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DspError, Result};
use crate::example::Example;
use crate::rm::tokenize;

/// Scores a candidate demo set against the held-out remainder.
pub type EvaluateFn<'a> = &'a dyn Fn(&[Example], &[Example]) -> Result<f64>;

/// How a demonstration subset is chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectionMethod {
    /// Seeded random draw without replacement.
    Sample,
    /// TF-IDF cosine nearest neighbors to the input text.
    Knn,
    /// Best of n sampled candidate sets, scored on the held-out remainder.
    Crossval {
        /// Candidate sets to evaluate.
        n: usize,
    },
}

/// A declarative selection request dispatching to [`sample`],
/// [`knn_select`], or [`crossval_select`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSpec {
    /// Demonstrations to select.
    pub k: usize,
    /// Replay seed.
    pub seed: u64,
    /// The selection method.
    pub method: SelectionMethod,
}

impl SelectionSpec {
    /// Checks the method invariants.
    pub fn validate(&self) -> Result<()> {
        if let SelectionMethod::Crossval { n } = self.method {
            if n == 0 {
                return Err(DspError::Contract(
                    "crossval selection requires n >= 1 candidate sets".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Runs the selection. `knn` needs `cast` and the input example;
    /// `crossval` needs `evaluate`; missing context is a contract error.
    pub fn select(
        &self,
        train: &[Example],
        cast: Option<&dyn Fn(&Example) -> String>,
        input: Option<&Example>,
        evaluate: Option<EvaluateFn<'_>>,
    ) -> Result<Vec<Example>> {
        self.validate()?;
        match &self.method {
            SelectionMethod::Sample => Ok(sample(train, self.k, self.seed)),
            SelectionMethod::Knn => {
                let cast = cast.ok_or_else(|| {
                    DspError::Contract("knn selection requires a cast function".to_string())
                })?;
                let input = input.ok_or_else(|| {
                    DspError::Contract("knn selection requires an input example".to_string())
                })?;
                Ok(knn_select(train, cast, input, self.k))
            }
            SelectionMethod::Crossval { n } => {
                let evaluate = evaluate.ok_or_else(|| {
                    DspError::Contract(
                        "crossval selection requires an evaluate function".to_string(),
                    )
                })?;
                crossval_select(train, *n, self.k, evaluate, self.seed)
            }
        }
    }
}

/// Indices of a k-subset drawn without replacement, in draw order.
fn sample_indices(len: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..len).collect();
    let take = k.min(len);
    for i in 0..take {
        let j = rng.gen_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// A seeded permutation of `0..len`; the harness subsampler shuffles with
/// the same PRNG the selection primitives use.
pub(crate) fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    sample_indices(len, len, seed)
}

/// Draws k distinct examples (or all, if fewer) without replacement using a
/// seeded PRNG; the output order is the draw order.
pub fn sample(train: &[Example], k: usize, seed: u64) -> Vec<Example> {
    sample_indices(train.len(), k, seed)
        .into_iter()
        .map(|i| train[i].clone())
        .collect()
}

/// The k training examples with the highest TF-IDF cosine similarity between
/// `cast(x)` and `cast(train_i)`, with the train set as the collection. Ties
/// break toward the lower train index.
pub fn knn_select(
    train: &[Example],
    cast: impl Fn(&Example) -> String,
    x: &Example,
    k: usize,
) -> Vec<Example> {
    if train.is_empty() || k == 0 {
        return Vec::new();
    }
    let docs: Vec<Vec<String>> = train.iter().map(|t| tokenize(&cast(t))).collect();
    let n = docs.len() as f64;

    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        let unique: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for token in unique {
            *df.entry(token).or_insert(0) += 1;
        }
    }
    // Terms absent from the collection carry no weight; they cannot match
    // any document and a uniform query-norm factor never changes ranking.
    let idf = |token: &str| -> Option<f64> { df.get(token).map(|&d| (n / d as f64).ln()) };
    let vectorize = |tokens: &[String]| -> HashMap<String, f64> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for token in tokens {
            *counts.entry(token).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .filter_map(|(token, tf)| idf(token).map(|w| (token.to_string(), tf as f64 * w)))
            .collect()
    };
    let norm = |v: &HashMap<String, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();

    let query = vectorize(&tokenize(&cast(x)));
    let query_norm = norm(&query);
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, tokens)| {
            let doc = vectorize(tokens);
            let dot: f64 = query
                .iter()
                .filter_map(|(token, w)| doc.get(token).map(|dw| w * dw))
                .sum();
            let denom = query_norm * norm(&doc);
            (i, if denom > 0.0 { dot / denom } else { 0.0 })
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored
        .into_iter()
        .take(k)
        .map(|(i, _)| train[i].clone())
        .collect()
}

/// Draws `n` candidate k-sets (candidate `i` uses seed `base_seed + i`),
/// scores each with `evaluate(candidate, train minus candidate)`, and
/// returns the best-scoring set. Ties go to the lowest candidate index.
pub fn crossval_select(
    train: &[Example],
    n: usize,
    k: usize,
    evaluate: impl Fn(&[Example], &[Example]) -> Result<f64>,
    seed: u64,
) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(DspError::Contract("crossval requires n >= 1".to_string()));
    }
    if k > train.len() {
        return Err(DspError::Contract(format!(
            "crossval k={k} exceeds train size {}",
            train.len()
        )));
    }
    let mut best: Option<(usize, f64, Vec<Example>)> = None;
    for candidate in 0..n {
        let indices = sample_indices(train.len(), k, seed + candidate as u64);
        let chosen: HashSet<usize> = indices.iter().copied().collect();
        let demos: Vec<Example> = indices.iter().map(|&i| train[i].clone()).collect();
        let heldout: Vec<Example> = train
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(_, x)| x.clone())
            .collect();
        let score = evaluate(&demos, &heldout).map_err(|e| DspError::CrossvalCandidate {
            index: candidate,
            source: Box::new(e),
        })?;
        let better = match &best {
            None => true,
            Some((_, best_score, _)) => score > *best_score,
        };
        if better {
            best = Some((candidate, score, demos));
        }
    }
    Ok(best.expect("n >= 1 guarantees a candidate").2)
}

/// Applies `attempt` to training examples in order, collecting each
/// non-absent result (a fully populated demonstration), and stops after `k`
/// successes. Attempt errors propagate tagged with the example index.
pub fn annotate(
    train: &[Example],
    attempt: impl Fn(&Example) -> Result<Option<Example>>,
    k: usize,
) -> Result<Vec<Example>> {
    let mut demos = Vec::new();
    if k == 0 {
        return Ok(demos);
    }
    for (index, example) in train.iter().enumerate() {
        match attempt(example).map_err(|e| DspError::AnnotateAttempt {
            index,
            source: Box::new(e),
        })? {
            Some(demo) => {
                demos.push(demo);
                if demos.len() == k {
                    break;
                }
            }
            None => continue,
        }
    }
    Ok(demos)
}
