//! Property tests for the core invariants: value semantics, chain
//! associativity, template render/extract roundtrips, fusion invariances,
//! selection soundness, and normalization laws.

use proptest::prelude::*;

use dspkit::demonstrate::sample;
use dspkit::eval::normalize_answer;
use dspkit::example::{chain, Example, Transformation, Value};
use dspkit::rm::{build_index, fuse_combsum, fused_retrieval, Passage, Retrieve, ScoredPassage};
use dspkit::template::TemplateSet;

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,10}"
}

fn phrase() -> impl Strategy<Value = String> {
    proptest::collection::vec(word(), 1..5).prop_map(|words| words.join(" "))
}

proptest! {
    // Copy-with-overrides and transformations never mutate their input.
    #[test]
    fn value_semantics_hold_under_transformations(
        fields in proptest::collection::btree_map(word(), phrase(), 1..6),
        new_value in phrase(),
    ) {
        let x: Example = fields
            .iter()
            .map(|(k, v)| (k.clone(), Value::Text(v.clone())))
            .collect();
        let snapshot = x.clone();
        let t = Transformation::new("adds", move |x| {
            Ok(Some(x.copy_with([("added".to_string(), Value::Text(new_value.clone()))])))
        });
        let out = t.apply(&x).unwrap().unwrap();
        prop_assert_eq!(&x, &snapshot);
        prop_assert!(out.has("added"));
    }

    // chain([f, g, h]) == chain([chain([f, g]), h]) when no stage filters.
    #[test]
    fn chain_is_associative(values in proptest::collection::vec(phrase(), 3)) {
        let stage = |name: &str, value: String| {
            let field = name.to_string();
            Transformation::new(name, move |x: &Example| {
                Ok(Some(x.copy_with([(field.clone(), Value::Text(value.clone()))])))
            })
        };
        let f = stage("f", values[0].clone());
        let g = stage("g", values[1].clone());
        let h = stage("h", values[2].clone());

        let flat = chain(vec![f.clone(), g.clone(), h.clone()]).unwrap();
        let nested = chain(vec![chain(vec![f, g]).unwrap(), h]).unwrap();

        let x = Example::new().with("question", "q");
        prop_assert_eq!(
            flat.apply(&x).unwrap().unwrap(),
            nested.apply(&x).unwrap().unwrap()
        );
    }

    // For an example filling every field, extraction over the rendered block
    // (minus everything through the first extractable label) recovers the
    // original extractable values exactly.
    #[test]
    fn template_render_extract_roundtrip(
        question in phrase(),
        context in proptest::collection::vec(phrase(), 0..3),
        summary in phrase(),
        query in phrase(),
    ) {
        let templates = TemplateSet::builtin();
        let t = templates.get("hop").unwrap();
        let x = Example::new()
            .with("question", question)
            .with("context", context)
            .with("summary", summary.clone())
            .with("query", query.clone());
        let rendered = t.render(&x).unwrap();
        let label = "Summary:";
        let after = &rendered[rendered.find(label).unwrap() + label.len()..];
        let got = t.extract(after, 0);
        prop_assert_eq!(got.get("summary").map(String::as_str), Some(summary.as_str()));
        prop_assert_eq!(got.get("query").map(String::as_str), Some(query.as_str()));
    }

    // Fusion is invariant to the order of the lists and to the order of
    // passages within each list.
    #[test]
    fn fusion_is_commutative(
        seed_lists in proptest::collection::vec(
            proptest::collection::vec((0usize..10, 0u32..40), 1..6),
            1..4,
        ),
        list_order in proptest::collection::vec(0usize..100, 0..8),
    ) {
        let softmaxed = |entries: &[(usize, u32)]| -> Vec<ScoredPassage> {
            // dedupe ids within a list, keep first occurrence
            let mut seen = std::collections::HashSet::new();
            let entries: Vec<(usize, u32)> = entries
                .iter()
                .filter(|(id, _)| seen.insert(*id))
                .copied()
                .collect();
            let scores: Vec<f64> = entries.iter().map(|(_, s)| *s as f64 * 0.25).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            entries
                .iter()
                .zip(&scores)
                .map(|(&(id, _), &score)| ScoredPassage {
                    passage: Passage {
                        id: format!("p{id}"),
                        title: String::new(),
                        text: format!("text {id}"),
                    },
                    score,
                    prob: (score - max).exp() / denom,
                })
                .collect()
        };
        let lists: Vec<Vec<ScoredPassage>> =
            seed_lists.iter().map(|l| softmaxed(l)).collect();
        let baseline = fuse_combsum(&lists);

        // permute list order
        let mut permuted = lists.clone();
        for (i, &j) in list_order.iter().enumerate() {
            let a = i % permuted.len();
            let b = j % permuted.len();
            permuted.swap(a, b);
        }
        // and reverse passages within each list
        for list in &mut permuted {
            list.reverse();
        }
        let shuffled = fuse_combsum(&permuted);

        prop_assert_eq!(baseline.len(), shuffled.len());
        for (a, b) in baseline.iter().zip(&shuffled) {
            prop_assert_eq!(&a.passage.id, &b.passage.id);
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    // Selection never fabricates examples.
    #[test]
    fn sample_outputs_come_from_train(k in 0usize..12, seed in 0u64..64) {
        let train: Vec<Example> = (0..8)
            .map(|i| Example::new().with("id", format!("t{i}")))
            .collect();
        let drawn = sample(&train, k, seed);
        prop_assert_eq!(drawn.len(), k.min(train.len()));
        for x in &drawn {
            prop_assert!(train.contains(x));
        }
        // distinct: no duplicates in the draw
        let mut ids: Vec<&str> = drawn.iter().map(|x| x.text("id").unwrap()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), drawn.len());
    }

    #[test]
    fn normalize_is_idempotent_and_stable(s in "\\PC{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        // normalized output only holds lowercase alphanumerics and single spaces
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' '));
        prop_assert!(!once.contains("  "));
    }
}

/// Disjoint-topic construction: each query has a clear leader passage
/// sharing three unique tokens, so every per-query top-1 lands in the fused
/// top-(number of queries). Checked over 20 seeded synthetic corpora.
#[test]
fn fused_retrieval_union_coverage_on_synthetic_corpora() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);

    for corpus_index in 0..20 {
        let n_queries = rng.gen_range(2..=4);
        let mut corpus = Vec::new();
        let mut queries = Vec::new();
        for topic in 0..n_queries {
            let t1 = format!("topic{corpus_index}x{topic}a");
            let t2 = format!("topic{corpus_index}x{topic}b");
            let t3 = format!("topic{corpus_index}x{topic}c");
            corpus.push(Passage {
                id: format!("lead-{topic}"),
                title: String::new(),
                text: format!("{t1} {t2} {t3} chronicle entry"),
            });
            for runner in 0..2 {
                corpus.push(Passage {
                    id: format!("run-{topic}-{runner}"),
                    title: String::new(),
                    text: format!("{t1} marginal note number {runner}"),
                });
            }
            queries.push(format!("{t1} {t2} {t3}"));
        }
        let index = build_index(corpus).unwrap();

        let depth = n_queries.max(3);
        let top1: Vec<String> = queries
            .iter()
            .map(|q| index.retrieve(q, depth).unwrap()[0].passage.id.clone())
            .collect();
        let fused = fused_retrieval(&index, &queries, depth).unwrap();
        let fused_top: Vec<&str> = fused
            .iter()
            .take(n_queries)
            .map(|sp| sp.passage.id.as_str())
            .collect();
        for id in &top1 {
            assert!(
                fused_top.contains(&id.as_str()),
                "corpus {corpus_index}: per-query top-1 {id} missing from fused top-{n_queries} {fused_top:?}"
            );
        }
    }
}

/// A hand-written reference parser, independent of the library path: walk
/// the expected labels in order, split on first occurrences, first label
/// optional. Ten crafted completions must parse identically.
#[test]
fn extraction_matches_a_reference_parser_on_crafted_completions() {
    fn reference_parse(
        labels: &[(&str, &str)], // (field, label)
        completion: &str,
    ) -> std::collections::BTreeMap<String, String> {
        let mut out = std::collections::BTreeMap::new();
        let Some(((first_field, first_label), rest)) = labels.split_first() else {
            return out;
        };
        let mut open_field = *first_field;
        let mut start = match completion.find(first_label) {
            Some(p) => p + first_label.len(),
            None => 0,
        };
        for (field, label) in rest {
            if let Some(rel) = completion[start.min(completion.len())..].find(label) {
                let pos = start + rel;
                out.insert(open_field.to_string(), completion[start..pos].trim().to_string());
                open_field = field;
                start = pos + label.len();
            }
        }
        out.insert(
            open_field.to_string(),
            completion[start.min(completion.len())..].trim().to_string(),
        );
        out
    }

    let templates = TemplateSet::builtin();
    let qa = templates.get("qa_with_cot").unwrap();
    let qa_labels = [
        ("rationale", "Rationale: Let's think step by step."),
        ("answer", "Answer:"),
    ];
    let hop = templates.get("hop").unwrap();
    let hop_labels = [("summary", "Summary:"), ("query", "Search Query:")];

    let qa_cases = [
        "five\nAnswer: five storeys",
        "Rationale: Let's think step by step. the keep has five levels\nAnswer: five",
        "no labels at all, just musing",
        "",
        "   \nAnswer:   spaced out   ",
        "the Answer: hides mid-sentence\nAnswer: real one",
        "Answer: immediate",
    ];
    for completion in qa_cases {
        assert_eq!(
            qa.extract(completion, 0),
            reference_parse(&qa_labels, completion),
            "qa completion {completion:?}"
        );
    }
    let hop_cases = [
        "to answer we need X.\nSearch Query: which castle",
        "Summary: context settled.\nSearch Query: N/A",
        "query only\nSearch Query: kinnairdy storeys\ntrailing noise Search Query: second",
    ];
    for completion in hop_cases {
        assert_eq!(
            hop.extract(completion, 0),
            reference_parse(&hop_labels, completion),
            "hop completion {completion:?}"
        );
    }
}

/// The documented crossval shape: 100 training examples, candidate sets of
/// k = 5, each evaluated against the remaining 95.
#[test]
fn crossval_evaluates_candidates_on_the_remaining_95() {
    use dspkit::demonstrate::crossval_select;
    let train: Vec<Example> = (0..100)
        .map(|i| Example::new().with("id", format!("t{i}")))
        .collect();
    let winner = crossval_select(
        &train,
        4,
        5,
        |demos, heldout| {
            assert_eq!(demos.len(), 5);
            assert_eq!(heldout.len(), 95);
            for d in demos {
                assert!(!heldout.contains(d));
            }
            Ok(demos
                .iter()
                .filter_map(|d| d.text("id")?.strip_prefix('t')?.parse::<f64>().ok())
                .sum())
        },
        7,
    )
    .unwrap();
    assert_eq!(winner.len(), 5);
}
