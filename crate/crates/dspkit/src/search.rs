//! Search strategies: direct retrieval, iterative multi-hop search with
//! per-hop summarization and termination, and conversational query
//! rewriting with result fusion.

use crate::error::{DspError, Result};
use crate::example::{Example, Value};
use crate::lm::{Lm, SamplingParams};
use crate::rm::{fused_retrieval, Retrieve};
use crate::template::TemplateSet;

/// Configuration for the search stage.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Hop ceiling when the LM controls termination.
    pub max_hops: usize,
    /// Run exactly this many hops, ignoring (and logging) termination tokens.
    pub fixed_hops: Option<usize>,
    /// Queries generated per hop (and rewrites per conversation); n > 1
    /// fuses retrieval across the sampled queries.
    pub queries_per_hop: usize,
    /// Passages retrieved per query.
    pub passages_k: usize,
    /// Total passages kept in the context across hops.
    pub passage_budget: usize,
    /// Query that terminates hopping (case-insensitive, trimmed).
    pub termination_token: String,
    /// Temperature for sampled query generation (n > 1).
    pub sample_temperature: f64,
    /// Completion token budget for query generation.
    pub max_tokens: usize,
    /// Replay seed for query generation.
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_hops: 3,
            fixed_hops: None,
            queries_per_hop: 1,
            passages_k: 5,
            passage_budget: 5,
            termination_token: "N/A".to_string(),
            sample_temperature: 0.7,
            max_tokens: 256,
            seed: 0,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.max_hops == 0 || self.fixed_hops == Some(0) {
            return Err(DspError::Contract(
                "search requires at least one hop".to_string(),
            ));
        }
        if self.passages_k == 0 || self.queries_per_hop == 0 {
            return Err(DspError::Contract(
                "passages_k and queries_per_hop must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    fn generation_params(&self) -> SamplingParams {
        let mut params = if self.queries_per_hop > 1 {
            SamplingParams::sampled(self.queries_per_hop, self.sample_temperature, self.seed)
        } else {
            SamplingParams::greedy(self.seed)
        };
        params.max_tokens = self.max_tokens;
        params
    }
}

/// Retrieves top-k passages for `x.question` and stores their texts in
/// `x.passages`; everything else is unchanged.
pub fn simple_search(rm: &dyn Retrieve, x: &Example, k: usize) -> Result<Example> {
    let question = x
        .question()
        .ok_or_else(|| DspError::Contract("simple_search requires a question".to_string()))?;
    let texts: Vec<String> = rm
        .retrieve(question, k)?
        .into_iter()
        .map(|sp| sp.passage.text)
        .collect();
    Ok(x.copy_with([("passages".to_string(), Value::List(texts))]))
}

/// The retrieve-then-read query for conversations: the first turn
/// concatenated with the final question.
pub fn conversation_baseline_query(turns: &[String]) -> String {
    match (turns.first(), turns.last()) {
        (Some(first), Some(last)) if turns.len() > 1 => format!("{first} {last}"),
        (Some(first), _) => first.clone(),
        _ => String::new(),
    }
}

/// Splits a passage budget across the hops that retrieved anything: an even
/// split with the remainder going to later hops, and when the budget is
/// smaller than the hop count, hop 1 keeps one passage and the last hops
/// take the rest. Short hops hand unused quota to the hops after them.
fn allocate_budget(per_hop: &[Vec<String>], budget: usize) -> Vec<String> {
    let active: Vec<&Vec<String>> = per_hop.iter().filter(|l| !l.is_empty()).collect();
    let hops = active.len();
    if hops == 0 || budget == 0 {
        return Vec::new();
    }
    let mut quotas = vec![0usize; hops];
    if budget >= hops {
        let base = budget / hops;
        let remainder = budget % hops;
        for (i, quota) in quotas.iter_mut().enumerate() {
            *quota = base + usize::from(i >= hops - remainder);
        }
    } else {
        quotas[0] = 1;
        let mut remaining = budget - 1;
        for quota in quotas.iter_mut().skip(1).rev() {
            if remaining == 0 {
                break;
            }
            *quota = 1;
            remaining -= 1;
        }
    }
    let mut take: Vec<usize> = active
        .iter()
        .zip(&quotas)
        .map(|(list, &quota)| quota.min(list.len()))
        .collect();
    let mut leftover = budget - take.iter().sum::<usize>();
    for i in (0..hops).rev() {
        if leftover == 0 {
            break;
        }
        let extra = leftover.min(active[i].len() - take[i]);
        take[i] += extra;
        leftover -= extra;
    }
    active
        .iter()
        .zip(take)
        .flat_map(|(list, t)| list[..t].iter().cloned())
        .collect()
}

/// Expands annotated demos into per-hop views for the hop template: hop i's
/// view carries the question, the summaries of earlier hops plus the stored
/// passage of hop i-1 as context, and that hop's summary and query as the
/// supervision labels. Demos without hop annotations have nothing to teach
/// the hop transformation and are skipped, so bootstrapping attempts run
/// their hops zero-shot.
fn expand_hop_demos(demos: &[Example]) -> Vec<Example> {
    let mut views = Vec::new();
    for demo in demos {
        let hops = demo.hops();
        if hops.is_empty() {
            continue;
        }
        for (i, (summary, query)) in hops.iter().enumerate() {
            let mut view = Example::new();
            if let Some(q) = demo.question() {
                view.set("question", q);
            }
            if i > 0 {
                let mut context: Vec<String> = hops[..i].iter().map(|(s, _)| s.clone()).collect();
                if let Some(psg) = demo.text(&format!("psg{i}")) {
                    context.push(psg.to_string());
                }
                view.set("context", context);
            }
            view.set("summary", summary.clone());
            view.set("query", query.clone());
            views.push(view);
        }
    }
    views
}

/// Iterative multi-hop search. Each hop generates n (summary, query) pairs
/// from the hop template, records the pair with the largest average
/// log-probability (falling back to the first), and either terminates on the
/// termination token or retrieves (fusing across the n queries when n > 1).
/// The context after each retrieving hop is the summaries of all hops so far
/// followed by the retrieved passages, allocated under the passage budget
/// with later hops taking priority.
///
/// With `fixed_hops` set, exactly that many hops run: termination tokens are
/// logged and skip only that hop's retrieval.
pub fn multihop_search(
    lm: &Lm,
    rm: &dyn Retrieve,
    templates: &TemplateSet,
    x: &Example,
    cfg: &SearchConfig,
) -> Result<Example> {
    cfg.validate()?;
    if x.question().is_none() {
        return Err(DspError::Contract(
            "multihop_search requires a question".to_string(),
        ));
    }
    let hop_template = templates.get("hop")?;
    let total_hops = cfg.fixed_hops.unwrap_or(cfg.max_hops);
    let params = cfg.generation_params();

    let mut current = x.clone();
    let mut hops: Vec<(String, String)> = Vec::new();
    let mut summaries: Vec<String> = Vec::new();
    let mut per_hop_passages: Vec<Vec<String>> = Vec::new();

    for hop in 0..total_hops {
        let hop_x = current.copy_with([(
            "demos".to_string(),
            Value::Examples(expand_hop_demos(current.demos())),
        )]);
        let completions = lm.generate(hop_template, &params, &hop_x)?;
        let best = completions
            .best_by_avg_logprob()
            .ok_or_else(|| DspError::Contract("backend returned no completions".to_string()))?;
        let summary = best.field("summary").unwrap_or("").trim().to_string();
        let query = best.field("query").unwrap_or("").trim().to_string();
        hops.push((summary.clone(), query.clone()));
        summaries.push(summary);

        let token = cfg.termination_token.trim();
        let terminated = query.is_empty() || query.eq_ignore_ascii_case(token);
        if terminated {
            if query.is_empty() {
                log::warn!(
                    "hop {} produced an empty query; treating as termination",
                    hop + 1
                );
            }
            if cfg.fixed_hops.is_none() {
                break;
            }
            log::warn!(
                "fixed_hops set: ignoring termination at hop {} (no retrieval this hop)",
                hop + 1
            );
            per_hop_passages.push(Vec::new());
        } else {
            let retrieved: Vec<String> = if cfg.queries_per_hop > 1 {
                let queries: Vec<String> = completions
                    .items
                    .iter()
                    .filter_map(|c| c.field("query"))
                    .map(|q| q.trim().to_string())
                    .filter(|q| !q.is_empty() && !q.eq_ignore_ascii_case(token))
                    .collect();
                if queries.is_empty() {
                    Vec::new()
                } else {
                    fused_retrieval(rm, &queries, cfg.passages_k)?
                        .into_iter()
                        .map(|sp| sp.passage.text)
                        .collect()
                }
            } else {
                rm.retrieve(&query, cfg.passages_k)?
                    .into_iter()
                    .map(|sp| sp.passage.text)
                    .collect()
            };
            per_hop_passages.push(retrieved);
        }

        let mut context = summaries.clone();
        context.extend(allocate_budget(&per_hop_passages, cfg.passage_budget));
        current = current.copy_with([("context".to_string(), Value::List(context))]);
    }

    let mut out = current;
    for (i, (summary, query)) in hops.iter().enumerate().take(2) {
        let _ = summary;
        out.set(format!("hop{}", i + 1), query.clone());
        if let Some(first) = per_hop_passages.get(i).and_then(|l| l.first()) {
            out.set(format!("psg{}", i + 1), first.clone());
        }
    }
    out.set("hops", hops);
    Ok(out)
}

/// Conversational search: generates n self-contained rewrites of the final
/// turn from the rewrite template, sets `x.question` (and `x.rewrite`, so
/// bootstrapped demos demonstrate the rewriting) to the best rewrite, and
/// retrieves with fusion across all rewrites (k = passage budget) into
/// `x.passages`.
pub fn conversational_search(
    lm: &Lm,
    rm: &dyn Retrieve,
    templates: &TemplateSet,
    x: &Example,
    cfg: &SearchConfig,
) -> Result<Example> {
    cfg.validate()?;
    let turns = x.turns();
    if turns.is_empty() {
        return Err(DspError::Contract(
            "conversational_search requires non-empty turns".to_string(),
        ));
    }
    let rewrite_template = templates.get("rewrite")?;
    let completions = lm.generate(rewrite_template, &cfg.generation_params(), x)?;
    let best = completions
        .best_by_avg_logprob()
        .ok_or_else(|| DspError::Contract("backend returned no completions".to_string()))?;
    let top_rewrite = match best
        .field("rewrite")
        .map(str::trim)
        .filter(|r| !r.is_empty())
    {
        Some(rewrite) => rewrite.to_string(),
        None => {
            log::warn!("rewrite generation produced no query; using the final turn");
            turns.last().cloned().unwrap_or_default()
        }
    };
    let mut rewrites: Vec<String> = completions
        .items
        .iter()
        .filter_map(|c| c.field("rewrite"))
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty())
        .collect();
    if rewrites.is_empty() {
        rewrites.push(top_rewrite.clone());
    }
    let passages: Vec<String> = fused_retrieval(rm, &rewrites, cfg.passage_budget)?
        .into_iter()
        .map(|sp| sp.passage.text)
        .collect();
    Ok(x.copy_with([
        ("question".to_string(), Value::Text(top_rewrite.clone())),
        ("rewrite".to_string(), Value::Text(top_rewrite)),
        ("passages".to_string(), Value::List(passages)),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::Cache;
    use crate::lm::{MockLm, ScriptRecord};
    use crate::rm::{build_index, Index, Passage};

    use std::sync::Arc;

    fn kinnairdy_index() -> Index {
        build_index(vec![
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
        ])
        .unwrap()
    }

    fn record(pairs: &[(&str, &str)], completions: &[&str]) -> ScriptRecord {
        ScriptRecord {
            matches: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            completions: completions.iter().map(|c| c.to_string()).collect(),
            avg_logprobs: None,
            scores: Vec::new(),
        }
    }

    fn lm_of(records: Vec<ScriptRecord>) -> Lm {
        Lm::new(
            Arc::new(MockLm::from_records(records)),
            Arc::new(Cache::memory()),
        )
    }

    #[test]
    fn simple_search_sets_passages_only() {
        let ix = kinnairdy_index();
        let x = Example::new().with("question", "Which castle did David Gregory inherit?");
        let out = simple_search(&ix, &x, 1).unwrap();
        assert_eq!(
            out.passages(),
            &["David Gregory inherited Kinnairdy Castle in 1664".to_string()]
        );
        assert_eq!(out.question(), x.question());
        assert!(!out.has("context"));
    }

    #[test]
    fn simple_search_empty_retrieval_passes_through() {
        let ix = kinnairdy_index();
        let x = Example::new().with("question", "zzzz");
        let out = simple_search(&ix, &x, 3).unwrap();
        assert!(out.passages().is_empty());
    }

    fn two_hop_script() -> Vec<ScriptRecord> {
        vec![
            // Second hop: fires once the first hop's evidence is in context.
            record(
                &[("q", "storeys"), ("ctx", "Kinnairdy")],
                &["the castle is Kinnairdy Castle.\nSearch Query: Kinnairdy Castle storeys"],
            ),
            // First hop.
            record(
                &[("q", "storeys")],
                &["we must find the castle David Gregory inherited.\nSearch Query: Which castle did David Gregory inherit?"],
            ),
        ]
    }

    #[test]
    fn multihop_two_scripted_hops_reach_second_passage() {
        let lm = lm_of(two_hop_script());
        let ix = kinnairdy_index();
        let templates = TemplateSet::builtin();
        let x = Example::new().with(
            "question",
            "How many storeys does the castle that David Gregory inherited have?",
        );
        let cfg = SearchConfig {
            max_hops: 3,
            passages_k: 2,
            passage_budget: 3,
            ..SearchConfig::default()
        };
        let out = multihop_search(&lm, &ix, &templates, &x, &cfg).unwrap();
        assert_eq!(out.hops().len(), 3); // third hop re-fires the second record
        let context = out.context();
        assert!(context
            .iter()
            .any(|c| c.contains("tower house, having five storeys")));
        // summaries of all hops come first
        assert_eq!(
            context[0],
            "we must find the castle David Gregory inherited."
        );
        assert_eq!(
            out.text("hop1"),
            Some("Which castle did David Gregory inherit?")
        );
        assert!(out
            .text("psg1")
            .unwrap()
            .contains("inherited Kinnairdy Castle"));
    }

    #[test]
    fn multihop_terminates_on_na_without_retrieval() {
        let lm = lm_of(vec![record(
            &[("q", "anything")],
            &["context suffices.\nSearch Query: N/A"],
        )]);
        let ix = kinnairdy_index();
        let templates = TemplateSet::builtin();
        let x = Example::new().with("question", "anything?");
        let out = multihop_search(&lm, &ix, &templates, &x, &SearchConfig::default()).unwrap();
        assert_eq!(
            out.hops(),
            &[("context suffices.".to_string(), "N/A".to_string())]
        );
        assert!(!out.has("context"));
    }

    #[test]
    fn multihop_termination_is_case_insensitive_and_trimmed() {
        let lm = lm_of(vec![record(&[("q", "x")], &["s.\nSearch Query:  n/a "])]);
        let ix = kinnairdy_index();
        let templates = TemplateSet::builtin();
        let x = Example::new().with("question", "x?");
        let out = multihop_search(&lm, &ix, &templates, &x, &SearchConfig::default()).unwrap();
        assert_eq!(out.hops().len(), 1);
    }

    #[test]
    fn fixed_hops_ignores_termination_and_runs_exactly() {
        let lm = lm_of(vec![record(&[("q", "x")], &["s.\nSearch Query: N/A"])]);
        let ix = kinnairdy_index();
        let templates = TemplateSet::builtin();
        let x = Example::new().with("question", "x?");
        let cfg = SearchConfig {
            fixed_hops: Some(2),
            ..SearchConfig::default()
        };
        let out = multihop_search(&lm, &ix, &templates, &x, &cfg).unwrap();
        assert_eq!(out.hops().len(), 2);
        // terminating hops skip retrieval but still contribute summaries
        assert_eq!(out.context(), &["s.".to_string(), "s.".to_string()]);
    }

    #[test]
    fn multihop_single_hop_on_question_matches_simple_search() {
        let question = "Which castle did David Gregory inherit?";
        let lm = lm_of(vec![record(
            &[("q", "castle")],
            &[&format!("looking this up.\nSearch Query: {question}")],
        )]);
        let ix = kinnairdy_index();
        let templates = TemplateSet::builtin();
        let x = Example::new().with("question", question);
        let cfg = SearchConfig {
            max_hops: 1,
            queries_per_hop: 1,
            passages_k: 2,
            passage_budget: 2,
            ..SearchConfig::default()
        };
        let via_hops = multihop_search(&lm, &ix, &templates, &x, &cfg).unwrap();
        let via_simple = simple_search(&ix, &x, 2).unwrap();
        let hop_passages: Vec<&String> = via_hops.context().iter().skip(1).collect();
        let simple_passages: Vec<&String> = via_simple.passages().iter().collect();
        assert_eq!(hop_passages, simple_passages);
    }

    #[test]
    fn budget_split_two_from_first_three_from_second() {
        let hop1: Vec<String> = (0..5).map(|i| format!("a{i}")).collect();
        let hop2: Vec<String> = (0..5).map(|i| format!("b{i}")).collect();
        let kept = allocate_budget(&[hop1.clone(), hop2.clone()], 5);
        assert_eq!(kept, vec!["a0", "a1", "b0", "b1", "b2"]);
        // single hop keeps all five
        assert_eq!(allocate_budget(std::slice::from_ref(&hop1), 5).len(), 5);
        // three hops: 1 + 2 + 2
        let hop3: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let kept = allocate_budget(&[hop1.clone(), hop2.clone(), hop3], 5);
        assert_eq!(kept, vec!["a0", "b0", "b1", "c0", "c1"]);
    }

    #[test]
    fn budget_smaller_than_hops_keeps_hop_one_and_later_hops() {
        let lists: Vec<Vec<String>> = (0..4)
            .map(|h| (0..3).map(|i| format!("h{h}p{i}")).collect())
            .collect();
        let kept = allocate_budget(&lists, 2);
        assert_eq!(kept, vec!["h0p0", "h3p0"]);
    }

    #[test]
    fn budget_reassigns_quota_from_short_hops() {
        let hop1: Vec<String> = vec!["a0".into()];
        let hop2: Vec<String> = (0..5).map(|i| format!("b{i}")).collect();
        let kept = allocate_budget(&[hop1, hop2], 5);
        assert_eq!(kept, vec!["a0", "b0", "b1", "b2", "b3"]);
    }

    #[test]
    fn hop_demo_views_expand_per_hop() {
        let demo = Example::new()
            .with("question", "two hop question")
            .with(
                "hops",
                vec![
                    ("s1".to_string(), "q1".to_string()),
                    ("s2".to_string(), "q2".to_string()),
                ],
            )
            .with("psg1", "first passage")
            .with("psg2", "second passage");
        let views = expand_hop_demos(&[demo]);
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].text("query"), Some("q1"));
        assert!(!views[0].has("context"));
        assert_eq!(views[1].text("summary"), Some("s2"));
        assert_eq!(
            views[1].context(),
            &["s1".to_string(), "first passage".to_string()]
        );
    }

    #[test]
    fn conversational_search_retrieves_on_the_rewrite() {
        let lm = lm_of(vec![record(
            &[("turn", "he die")],
            &["Rewritten Query: Which castle did David Gregory inherit?"],
        )]);
        let ix = kinnairdy_index();
        let templates = TemplateSet::builtin();
        let x = Example::new().with(
            "turns",
            vec![
                "Who was David Gregory?".to_string(),
                "When did he die?".to_string(),
            ],
        );
        let cfg = SearchConfig {
            passage_budget: 1,
            ..SearchConfig::default()
        };
        let out = conversational_search(&lm, &ix, &templates, &x, &cfg).unwrap();
        assert_eq!(
            out.question(),
            Some("Which castle did David Gregory inherit?")
        );
        assert_eq!(out.passages().len(), 1);
        assert!(out.passages()[0].contains("inherited Kinnairdy Castle"));
    }

    #[test]
    fn conversation_baseline_query_concatenates_first_and_last() {
        let turns = vec![
            "first turn".to_string(),
            "middle".to_string(),
            "last?".to_string(),
        ];
        assert_eq!(conversation_baseline_query(&turns), "first turn last?");
        assert_eq!(conversation_baseline_query(&turns[..1]), "first turn");
    }
}
