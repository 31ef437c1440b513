//! Answer normalization, EM / F1 / novel-F1 metrics, bootstrapping filters,
//! and the seeded evaluation harness.

mod dataset;
mod harness;
mod stopwords;

pub use dataset::{load_dataset, DatasetRecord};
pub use harness::{run_harness, ExampleTrace, HarnessConfig, Report, SeedReport};
pub use stopwords::STOPWORDS;

use std::collections::HashMap;

use crate::example::Example;

/// Lowercases, strips punctuation, removes the articles a/an/the as whole
/// words, and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    stripped
        .split_whitespace()
        .filter(|token| !matches!(*token, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized whitespace tokens of `s`.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_answer(s)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Exact match: 1 iff the normalized prediction equals any normalized gold.
pub fn em(pred: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(pred);
    golds.iter().any(|g| normalize_answer(g) == p) as u8
}

fn bag(tokens: &[String]) -> HashMap<&str, usize> {
    let mut bag = HashMap::new();
    for token in tokens {
        *bag.entry(token.as_str()).or_insert(0) += 1;
    }
    bag
}

/// Token-multiset F1 between two token lists. Both empty scores 1; exactly
/// one empty scores 0.
fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pred_bag = bag(pred);
    let gold_bag = bag(gold);
    let overlap: usize = pred_bag
        .iter()
        .filter_map(|(token, &count)| gold_bag.get(token).map(|&g| count.min(g)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1 on normalized token bags, maximized over the golds.
pub fn f1(pred: &str, golds: &[String]) -> f64 {
    let pred_tokens = normalized_tokens(pred);
    golds
        .iter()
        .map(|gold| token_f1(&pred_tokens, &normalized_tokens(gold)))
        .fold(0.0, f64::max)
}

/// Novel F1: token F1 after removing stopwords and every normalized token
/// appearing in any question asked so far from both the prediction and the
/// gold. Both residuals empty scores 1.
pub fn novel_f1(pred: &str, gold: &str, questions_so_far: &[String]) -> f64 {
    let mut discount: std::collections::HashSet<String> =
        STOPWORDS.iter().map(|w| normalize_answer(w)).collect();
    for question in questions_so_far {
        discount.extend(normalized_tokens(question));
    }
    let residual = |s: &str| -> Vec<String> {
        normalized_tokens(s)
            .into_iter()
            .filter(|t| !discount.contains(t))
            .collect()
    };
    token_f1(&residual(pred), &residual(gold))
}

/// Fraction of the answer's normalized tokens (with multiplicity) present
/// in the passage's normalized token set. An empty answer scores 0.
pub fn answer_precision(answer: &str, passage: &str) -> f64 {
    let answer_tokens = normalized_tokens(answer);
    if answer_tokens.is_empty() {
        return 0.0;
    }
    let passage_tokens: std::collections::HashSet<String> =
        normalized_tokens(passage).into_iter().collect();
    let present = answer_tokens
        .iter()
        .filter(|t| passage_tokens.contains(*t))
        .count();
    present as f64 / answer_tokens.len() as f64
}

/// Whether any retrieved passage (in `passages` or `context`) contains some
/// normalized gold answer as a contiguous token subsequence.
pub fn passage_match(x: &Example) -> bool {
    let golds = x.golds();
    if golds.is_empty() {
        return false;
    }
    let gold_tokens: Vec<Vec<String>> = golds.iter().map(|g| normalized_tokens(g)).collect();
    x.passages().iter().chain(x.context()).any(|passage| {
        let tokens = normalized_tokens(passage);
        gold_tokens
            .iter()
            .filter(|g| !g.is_empty())
            .any(|g| contains_subsequence(&tokens, g))
    })
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.len() > haystack.len() {
        return false;
    }
    haystack
        .windows(needle.len())
        .any(|window| window == needle)
}

/// Whether the prediction exactly matches some gold after normalization.
pub fn answer_match(x: &Example) -> bool {
    match x.pred() {
        Some(pred) => em(pred, &x.golds()) == 1,
        None => false,
    }
}
