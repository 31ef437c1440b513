//! The frozen retrieval model: passage indexing, top-k retrieval, relevance
//! scoring of ad-hoc passages, and multi-query score fusion.
//!
//! The default backend is an in-memory BM25 index (k1 = 1.5, b = 0.75) over
//! lowercased alphanumeric tokens of title + text. A remote HTTP hook with
//! the same retrieve contract plugs in a neural retriever without code
//! changes; see [`remote::RemoteRm`].

mod corpus;
mod remote;

pub use corpus::load_corpus;
pub use remote::RemoteRm;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};

/// A unit of the retrieval corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    /// Unique identifier within the corpus.
    pub id: String,
    /// Title; may be empty.
    #[serde(default)]
    pub title: String,
    /// Passage body.
    pub text: String,
}

/// A retrieved passage with its backend-native score and per-list
/// probability (softmax over the returned list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    /// The passage.
    pub passage: Passage,
    /// Backend-native relevance score.
    pub score: f64,
    /// Probability within its retrieval list; per-list probs sum to 1.
    pub prob: f64,
}

/// Anything that can serve top-k retrieval: the local BM25 [`Index`] or a
/// remote RM behind HTTP.
pub trait Retrieve: Send + Sync {
    /// Up to `k` passages by descending relevance, ties broken by ascending
    /// id, with per-list softmax probabilities attached.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredPassage>>;

    /// Stable identifier for caches and traces.
    fn id(&self) -> String;
}

/// Lowercased alphanumeric runs; Unicode-aware.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for lower in c.to_lowercase() {
                current.push(lower);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Softmax over scores, numerically stabilized. Empty input yields empty.
fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// An immutable BM25 inverted index over a passage corpus. Retrieval over it
/// is a pure function.
#[derive(Debug, Clone)]
pub struct Index {
    passages: Vec<Passage>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

/// Builds a BM25 index with the default parameters k1 = 1.5, b = 0.75.
pub fn build_index(corpus: Vec<Passage>) -> Result<Index> {
    build_index_with(corpus, 1.5, 0.75)
}

/// Builds a BM25 index with explicit k1 and b.
pub fn build_index_with(corpus: Vec<Passage>, k1: f64, b: f64) -> Result<Index> {
    if corpus.is_empty() {
        return Err(DspError::IndexBuild("corpus is empty".to_string()));
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut duplicates = Vec::new();
    for p in &corpus {
        *seen.entry(p.id.as_str()).or_insert(0) += 1;
    }
    for p in &corpus {
        if seen.get(p.id.as_str()).copied().unwrap_or(0) > 1 && !duplicates.contains(&p.id) {
            duplicates.push(p.id.clone());
        }
    }
    if !duplicates.is_empty() {
        return Err(DspError::IndexBuild(format!(
            "duplicate passage ids: {}",
            duplicates.join(", ")
        )));
    }

    let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
    let mut doc_len = Vec::with_capacity(corpus.len());
    for (doc, passage) in corpus.iter().enumerate() {
        let tokens = tokenize(&format!("{} {}", passage.title, passage.text));
        doc_len.push(tokens.len() as u32);
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for token in tokens {
            *counts.entry(token).or_insert(0) += 1;
        }
        for (token, tf) in counts {
            postings.entry(token).or_default().push((doc as u32, tf));
        }
    }
    let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
    Ok(Index {
        passages: corpus,
        postings,
        doc_len,
        avg_len,
        k1,
        b,
    })
}

impl Index {
    /// Number of indexed passages.
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    /// True when the index holds no passages (never, post-build).
    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Mean document length in tokens.
    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Distinct terms in the postings.
    pub fn vocab_size(&self) -> usize {
        self.postings.len()
    }

    /// Inverse document frequency, Lucene-style (never negative):
    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    fn idf(&self, term: &str) -> f64 {
        let n = self.passages.len() as f64;
        let df = self.postings.get(term).map_or(0.0, |p| p.len() as f64);
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn tf_component(&self, tf: f64, len: f64) -> f64 {
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * len / self.avg_len))
    }

    /// Up to `k` passages by descending BM25 score; ties broken by ascending
    /// passage id. A query sharing no terms with the corpus returns empty.
    /// Repeated query terms count once.
    pub fn search(&self, query: &str, k: usize) -> Vec<ScoredPassage> {
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in postings {
                let len = self.doc_len[doc as usize] as f64;
                *scores.entry(doc).or_insert(0.0) += idf * self.tf_component(tf as f64, len);
            }
        }
        let mut hits: Vec<(u32, f64)> = scores.into_iter().collect();
        hits.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    self.passages[a.0 as usize]
                        .id
                        .cmp(&self.passages[b.0 as usize].id)
                })
        });
        hits.truncate(k);
        let probs = softmax(&hits.iter().map(|h| h.1).collect::<Vec<_>>());
        hits.iter()
            .zip(probs)
            .map(|(&(doc, score), prob)| ScoredPassage {
                passage: self.passages[doc as usize].clone(),
                score,
                prob,
            })
            .collect()
    }

    /// BM25 scores for ad-hoc passage texts against a query, computed with
    /// this index's collection statistics (idf, average length). One score
    /// per passage, in input order. A passage sharing no query terms scores 0.
    pub fn rank(&self, query: &str, passages: &[String]) -> Vec<f64> {
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        passages
            .iter()
            .map(|text| {
                let tokens = tokenize(text);
                let len = tokens.len() as f64;
                let mut counts: HashMap<&str, u32> = HashMap::new();
                for token in &tokens {
                    *counts.entry(token.as_str()).or_insert(0) += 1;
                }
                terms
                    .iter()
                    .filter_map(|term| {
                        counts
                            .get(term.as_str())
                            .map(|&tf| self.idf(term) * self.tf_component(tf as f64, len))
                    })
                    .sum()
            })
            .collect()
    }
}

impl Retrieve for Index {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredPassage>> {
        Ok(self.search(query, k))
    }

    fn id(&self) -> String {
        format!("rm:bm25:{}docs", self.passages.len())
    }
}

/// CombSUM fusion: each distinct passage gets the sum of its probabilities
/// across the retrieval lists containing it. Output is sorted by descending
/// fused score, ties by ascending id, with probs re-normalized to sum to 1.
pub fn fuse_combsum(lists: &[Vec<ScoredPassage>]) -> Vec<ScoredPassage> {
    let mut fused: BTreeMap<String, (Passage, f64)> = BTreeMap::new();
    for list in lists {
        for sp in list {
            fused
                .entry(sp.passage.id.clone())
                .and_modify(|(_, total)| *total += sp.prob)
                .or_insert_with(|| (sp.passage.clone(), sp.prob));
        }
    }
    let mut out: Vec<(Passage, f64)> = fused.into_values().collect();
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    let total: f64 = out.iter().map(|(_, s)| s).sum();
    out.into_iter()
        .map(|(passage, score)| ScoredPassage {
            passage,
            score,
            prob: if total > 0.0 { score / total } else { 0.0 },
        })
        .collect()
}

/// Retrieves top-k per query, fuses with CombSUM, and truncates to k.
pub fn fused_retrieval(
    rm: &dyn Retrieve,
    queries: &[String],
    k: usize,
) -> Result<Vec<ScoredPassage>> {
    let mut lists = Vec::with_capacity(queries.len());
    for query in queries {
        lists.push(rm.retrieve(query, k)?);
    }
    let mut fused = fuse_combsum(&lists);
    fused.truncate(k);
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn kinnairdy_corpus() -> Vec<Passage> {
        vec![
            Passage {
                id: "P1".into(),
                title: "David Gregory".into(),
                text: "David Gregory inherited Kinnairdy Castle in 1664".into(),
            },
            Passage {
                id: "P2".into(),
                title: "Kinnairdy Castle".into(),
                text: "Kinnairdy Castle is a tower house, having five storeys".into(),
            },
            Passage {
                id: "P3".into(),
                title: "Gregory of Tours".into(),
                text: "Gregory of Tours was a historian".into(),
            },
        ]
    }

    /// Independent BM25 oracle sharing only the formula definition.
    fn oracle_bm25(corpus: &[Passage], query: &str, k1: f64, b: f64) -> Vec<f64> {
        let docs: Vec<Vec<String>> = corpus
            .iter()
            .map(|p| tokenize(&format!("{} {}", p.title, p.text)))
            .collect();
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        docs.iter()
            .map(|tokens| {
                let len = tokens.len() as f64;
                terms
                    .iter()
                    .map(|term| {
                        let tf = tokens.iter().filter(|t| *t == term).count() as f64;
                        if tf == 0.0 {
                            return 0.0;
                        }
                        let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg))
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn tokenize_lowercases_alphanumeric_runs() {
        assert_eq!(
            tokenize("Which castle did David-Gregory inherit? 1664!"),
            vec!["which", "castle", "did", "david", "gregory", "inherit", "1664"]
        );
        assert!(tokenize("?!...").is_empty());
    }

    #[test]
    fn retrieve_matches_hand_computed_bm25() {
        let corpus = kinnairdy_corpus();
        let query = "Which castle did David Gregory inherit?";
        let expected = oracle_bm25(&corpus, query, 1.5, 0.75);
        let ix = build_index(corpus).unwrap();
        let hits = ix.search(query, 3);
        assert_eq!(hits[0].passage.id, "P1");
        for hit in &hits {
            let doc = match hit.passage.id.as_str() {
                "P1" => 0,
                "P2" => 1,
                _ => 2,
            };
            assert!(
                (hit.score - expected[doc]).abs() < 1e-12,
                "score mismatch for {}: {} vs oracle {}",
                hit.passage.id,
                hit.score,
                expected[doc]
            );
        }
    }

    #[test]
    fn retrieve_no_overlap_returns_empty() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        assert!(ix.search("zzzz", 5).is_empty());
    }

    #[test]
    fn retrieve_clamps_k_to_matches() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let hits = ix.search("Gregory castle", 50);
        assert_eq!(hits.len(), 3);
        for pair in hits.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn retrieve_probs_sum_to_one() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let hits = ix.search("Gregory", 3);
        let total: f64 = hits.iter().map(|h| h.prob).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn retrieve_topk_is_prefix_of_topk_plus_one() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let query = "Gregory castle tower";
        for k in 1..3 {
            let small = ix.search(query, k);
            let big = ix.search(query, k + 1);
            for (a, b) in small.iter().zip(&big) {
                assert_eq!(a.passage.id, b.passage.id);
            }
        }
    }

    #[test]
    fn retrieve_breaks_score_ties_by_ascending_id() {
        // identical bodies, distinct ids: scores tie exactly
        let corpus = vec![
            Passage {
                id: "z9".into(),
                title: String::new(),
                text: "granite keep".into(),
            },
            Passage {
                id: "a1".into(),
                title: String::new(),
                text: "granite keep".into(),
            },
            Passage {
                id: "m5".into(),
                title: String::new(),
                text: "granite keep".into(),
            },
        ];
        let ix = build_index(corpus).unwrap();
        let ids: Vec<String> = ix
            .search("granite keep", 3)
            .into_iter()
            .map(|sp| sp.passage.id)
            .collect();
        assert_eq!(ids, vec!["a1", "m5", "z9"]);
    }

    #[test]
    fn rebuild_gives_identical_results() {
        let a = build_index(kinnairdy_corpus()).unwrap();
        let b = build_index(kinnairdy_corpus()).unwrap();
        assert_eq!(
            a.search("Kinnairdy storeys", 3),
            b.search("Kinnairdy storeys", 3)
        );
    }

    #[test]
    fn build_rejects_empty_corpus_and_duplicate_ids() {
        assert!(matches!(build_index(vec![]), Err(DspError::IndexBuild(_))));
        let mut corpus = kinnairdy_corpus();
        corpus.push(corpus[0].clone());
        let err = build_index(corpus).unwrap_err();
        assert!(err.to_string().contains("P1"));
    }

    #[test]
    fn index_bookkeeping() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        assert_eq!(ix.len(), 3);
        let lens: Vec<f64> = kinnairdy_corpus()
            .iter()
            .map(|p| tokenize(&format!("{} {}", p.title, p.text)).len() as f64)
            .collect();
        let expected = lens.iter().sum::<f64>() / lens.len() as f64;
        assert!((ix.avg_len() - expected).abs() < 1e-12);
    }

    #[test]
    fn rank_is_consistent_with_retrieve() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let query = "Which castle did David Gregory inherit?";
        let top = &ix.search(query, 1)[0];
        let ranked = ix.rank(
            query,
            &[format!("{} {}", top.passage.title, top.passage.text)],
        );
        assert!((ranked[0] - top.score).abs() < 1e-9);
    }

    #[test]
    fn rank_zero_for_no_term_overlap() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let scores = ix.rank("castle", &["of the and".to_string()]);
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn fuse_combsum_matches_worked_example() {
        let p = |id: &str| Passage {
            id: id.into(),
            title: String::new(),
            text: id.to_lowercase(),
        };
        let with_probs = |items: Vec<(&str, f64)>| -> Vec<ScoredPassage> {
            let probs = softmax(&items.iter().map(|i| i.1).collect::<Vec<_>>());
            items
                .into_iter()
                .zip(probs)
                .map(|((id, score), prob)| ScoredPassage {
                    passage: p(id),
                    score,
                    prob,
                })
                .collect()
        };
        let a = with_probs(vec![("P1", 2.0), ("P2", 1.0)]);
        let b = with_probs(vec![("P2", 3.0), ("P3", 1.0)]);
        let fused = fuse_combsum(&[a, b]);
        let ids: Vec<&str> = fused.iter().map(|f| f.passage.id.as_str()).collect();
        assert_eq!(ids, vec!["P2", "P1", "P3"]);
        assert!((fused[0].score - 1.1497).abs() < 1e-4);
        assert!((fused[1].score - 0.7311).abs() < 1e-4);
        assert!((fused[2].score - 0.1192).abs() < 1e-4);
        let total: f64 = fused.iter().map(|f| f.prob).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fuse_single_list_preserves_order() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let list = ix.search("Gregory castle", 3);
        let fused = fuse_combsum(std::slice::from_ref(&list));
        let ids: Vec<_> = fused.iter().map(|f| f.passage.id.as_str()).collect();
        let orig: Vec<_> = list.iter().map(|f| f.passage.id.as_str()).collect();
        assert_eq!(ids, orig);
    }

    #[test]
    fn fuse_duplicate_lists_doubles_scores() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let list = ix.search("Gregory castle", 3);
        let once = fuse_combsum(std::slice::from_ref(&list));
        let twice = fuse_combsum(&[list.clone(), list]);
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(a.passage.id, b.passage.id);
            assert!((b.score - 2.0 * a.score).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_retrieval_of_duplicate_queries_equals_single_retrieve() {
        let ix = build_index(kinnairdy_corpus()).unwrap();
        let q = "Which castle did David Gregory inherit?".to_string();
        let single = ix.search(&q, 2);
        let fused = fused_retrieval(&ix, &[q.clone(), q], 2).unwrap();
        let single_ids: Vec<_> = single.iter().map(|f| f.passage.id.as_str()).collect();
        let fused_ids: Vec<_> = fused.iter().map(|f| f.passage.id.as_str()).collect();
        assert_eq!(single_ids, fused_ids);
    }
}
