//! Prediction strategies: candidate generation, self-consistency majority,
//! pipeline branching, MCQ comparison, and RM-grounded selection.

use crate::error::{DspError, Result};
use crate::eval::normalize_answer;
use crate::example::{Example, Value};
use crate::lm::{Completion, Lm, SamplingParams};
use crate::rm::{fused_retrieval, Index, Retrieve};
use crate::template::{Template, TemplateSet};

/// Where a candidate answer came from.
#[derive(Debug, Clone)]
pub enum CandidateSource {
    /// A sampled completion (self-consistency).
    Completion(Completion),
    /// A branch's final example (pipelines of transformations).
    Example(Box<Example>),
}

/// One candidate answer.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// The answer text as produced (surface form).
    pub answer: String,
    /// The producing completion or example, when tracked.
    pub source: Option<CandidateSource>,
}

/// Candidate predictions, in production order.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    /// The candidates.
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    /// Builds a set from bare answer strings.
    pub fn from_answers(answers: impl IntoIterator<Item = String>) -> Self {
        CandidateSet {
            candidates: answers
                .into_iter()
                .map(|answer| Candidate {
                    answer,
                    source: None,
                })
                .collect(),
        }
    }

    /// True when no candidates were produced.
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The candidate answers, in order.
    pub fn answers(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.answer.as_str()).collect()
    }
}

/// The most popular prediction: answers are grouped by normalized class, the
/// earliest-occurring class among those with maximal frequency wins, and the
/// returned surface form is that class's first occurrence.
pub fn majority(cands: &CandidateSet) -> Result<String> {
    if cands.is_empty() {
        return Err(DspError::Contract(
            "majority requires a non-empty candidate set".to_string(),
        ));
    }
    let mut counts: Vec<(String, usize, usize)> = Vec::new(); // (class, count, first index)
    for (i, candidate) in cands.candidates.iter().enumerate() {
        let class = normalize_answer(&candidate.answer);
        match counts.iter_mut().find(|(c, _, _)| *c == class) {
            Some((_, count, _)) => *count += 1,
            None => counts.push((class, 1, i)),
        }
    }
    let best = counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .expect("non-empty");
    Ok(cands.candidates[best.2].answer.clone())
}

/// Counts normalized classes and returns up to `k` (surface form, count)
/// pairs ordered by descending count, ties by first occurrence.
pub fn most_common(answers: &[&str], k: usize) -> Vec<String> {
    let mut counts: Vec<(String, usize, usize, String)> = Vec::new();
    for (i, answer) in answers.iter().enumerate() {
        let class = normalize_answer(answer);
        match counts.iter_mut().find(|(c, _, _, _)| *c == class) {
            Some((_, count, _, _)) => *count += 1,
            None => counts.push((class, 1, i, answer.to_string())),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    counts
        .into_iter()
        .take(k)
        .map(|(_, _, _, surface)| surface)
        .collect()
}

/// A copy of `x` whose `context` falls back to `passages` for rendering.
/// Search stages set `passages` (simple) or `context` (multi-hop); templates
/// read `context`.
pub fn with_prompt_context(x: &Example) -> Example {
    if !x.has("context") && x.has("passages") {
        x.copy_with([("context".to_string(), Value::List(x.passages().to_vec()))])
    } else {
        x.clone()
    }
}

/// Generates `n` completions (temperature applies when n > 1, greedy when
/// n = 1), extracts the template's final field as the answer, and sets
/// `candidates` (one `{pred}` example per answer, in order) and
/// `pred = majority`. Intermediate extracted fields (e.g. the rationale) of
/// the winning completion are copied onto the result; the final field is
/// never written back, so gold `answer` fields survive annotation attempts.
pub fn sc_predict(
    lm: &Lm,
    t: &Template,
    x: &Example,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Example> {
    let params = if n > 1 {
        SamplingParams::sampled(n, temperature, seed)
    } else {
        SamplingParams::greedy(seed)
    };
    sc_predict_with(lm, t, x, &params)
}

/// [`sc_predict`] with full control of the sampling parameters (token
/// budget, stop sequences).
pub fn sc_predict_with(
    lm: &Lm,
    t: &Template,
    x: &Example,
    params: &SamplingParams,
) -> Result<Example> {
    let completions = lm.generate(t, params, &with_prompt_context(x))?;
    let target = t
        .extractable()
        .last()
        .expect("validated template has an extractable field")
        .name
        .clone();

    let mut cands = CandidateSet::default();
    for item in &completions.items {
        if let Some(answer) = item.field(&target) {
            cands.candidates.push(Candidate {
                answer: answer.to_string(),
                source: Some(CandidateSource::Completion(item.clone())),
            });
        }
    }
    let mut out = x.clone();
    if cands.is_empty() {
        log::warn!("no completion produced the {target:?} field; prediction is empty");
        out.set("candidates", Vec::<Example>::new());
        out.set("pred", "");
        return Ok(out);
    }
    let winner = majority(&cands)?;
    let winner_class = normalize_answer(&winner);
    if let Some(best) = completions.items.iter().find(|c| {
        c.field(&target)
            .is_some_and(|a| normalize_answer(a) == winner_class)
    }) {
        for (name, value) in &best.fields {
            if name != &target {
                out.set(name.clone(), value.clone());
            }
        }
    }
    out.set(
        "candidates",
        cands
            .candidates
            .iter()
            .map(|c| Example::new().with("pred", c.answer.clone()))
            .collect::<Vec<_>>(),
    );
    out.set("pred", winner);
    Ok(out)
}

/// Runs a whole pipeline `n` times with sampling enabled, seeding branch `i`
/// with `base_seed + i`, and accumulates each branch's final prediction.
/// Failing branches (errors, filtered results, or missing `pred`) are logged
/// and excluded; when every branch fails, a branch-exhaustion error is
/// returned.
pub fn branch(
    pipeline: impl Fn(&Example, u64, f64) -> Result<Option<Example>>,
    n: usize,
    temperature: f64,
    base_seed: u64,
    x: &Example,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(DspError::Contract("branch requires n >= 1".to_string()));
    }
    let mut cands = CandidateSet::default();
    let mut last_failure = String::from("no branches ran");
    for i in 0..n {
        let seed = base_seed + i as u64;
        match pipeline(x, seed, temperature) {
            Ok(Some(ex)) => match ex.pred() {
                Some(pred) => cands.candidates.push(Candidate {
                    answer: pred.to_string(),
                    source: Some(CandidateSource::Example(Box::new(ex.clone()))),
                }),
                None => {
                    last_failure = format!("branch {i} produced no pred");
                    log::warn!("{last_failure}");
                }
            },
            Ok(None) => {
                last_failure = format!("branch {i} was filtered");
                log::warn!("{last_failure}");
            }
            Err(e) => {
                last_failure = format!("branch {i} failed: {e}");
                log::warn!("{last_failure}");
            }
        }
    }
    if cands.is_empty() {
        return Err(DspError::BranchExhausted {
            attempted: n,
            last: last_failure,
        });
    }
    Ok(cands)
}

/// Parameters for [`mcq_compare_predict`].
#[derive(Debug, Clone)]
pub struct McqParams {
    /// Candidate generations.
    pub n: usize,
    /// Choices kept for the comparison prompt.
    pub k_choices: usize,
    /// Passages retrieved by the fused choice queries.
    pub fused_k: usize,
    /// Sampling temperature for candidate generation.
    pub temperature: f64,
    /// Replay seed.
    pub seed: u64,
}

impl Default for McqParams {
    fn default() -> Self {
        McqParams {
            n: 20,
            k_choices: 4,
            fused_k: 5,
            temperature: 0.7,
            seed: 0,
        }
    }
}

/// Samples `n` answers, keeps the `k_choices` most common as MCQ options,
/// grounds them with fused retrieval over one query per choice, and asks the
/// LM to compare the lettered choices. The extracted letter maps back to the
/// choice text; unparseable completions fall back to the first (most common)
/// choice with a warning. Sets `choices`, `passages`, `answer`, and `pred`.
pub fn mcq_compare_predict(
    lm: &Lm,
    rm: &dyn Retrieve,
    templates: &TemplateSet,
    x: &Example,
    params: &McqParams,
) -> Result<Example> {
    let question = x
        .question()
        .ok_or_else(|| DspError::Contract("mcq_compare_predict requires a question".to_string()))?
        .to_string();
    let qa = templates.get("qa_with_cot")?;
    let gen = if params.n > 1 {
        SamplingParams::sampled(params.n, params.temperature, params.seed)
    } else {
        SamplingParams::greedy(params.seed)
    };
    let completions = lm.generate(qa, &gen, &with_prompt_context(x))?;
    let answers = completions.field_values("answer");
    if answers.is_empty() {
        return Err(DspError::Contract(
            "mcq candidate generation produced no answers".to_string(),
        ));
    }
    let choices = most_common(&answers, params.k_choices);

    let queries: Vec<String> = choices.iter().map(|c| format!("{question} {c}")).collect();
    let passages: Vec<String> = fused_retrieval(rm, &queries, params.fused_k)?
        .into_iter()
        .map(|sp| sp.passage.text)
        .collect();

    let options = choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}) {}", (b'A' + i as u8) as char, c))
        .collect::<Vec<_>>()
        .join("\n");
    let mcq_x = x.copy_with([
        ("choices".to_string(), Value::List(choices.clone())),
        ("passages".to_string(), Value::List(passages.clone())),
        ("context".to_string(), Value::List(passages.clone())),
        ("options".to_string(), Value::Text(options)),
    ]);
    let mcq_t = templates.get("mcq")?;
    let picked = lm.generate(mcq_t, &SamplingParams::greedy(params.seed), &mcq_x)?;
    let raw_answer = picked
        .items
        .first()
        .and_then(|c| c.field("answer"))
        .unwrap_or("")
        .to_string();
    let chosen = parse_choice(&raw_answer, &choices).unwrap_or_else(|| {
        log::warn!("unparseable MCQ completion {raw_answer:?}; falling back to first choice");
        choices[0].clone()
    });

    let mut out = x.clone();
    out.set("choices", choices);
    out.set("passages", passages);
    out.set("answer", chosen.clone());
    out.set("pred", chosen);
    Ok(out)
}

/// Maps an MCQ completion to a choice: by leading letter first, then by
/// normalized exact text.
fn parse_choice(answer: &str, choices: &[String]) -> Option<String> {
    let trimmed = answer.trim();
    let letter = trimmed
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase());
    if let Some(letter) = letter {
        let index = (letter as u8).wrapping_sub(b'A') as usize;
        // A bare letter or a "B) text" shape counts; a longer first word does not.
        let first_word = trimmed.split_whitespace().next().unwrap_or("");
        let looks_lettered = first_word.trim_end_matches([')', '.', ':']).len() == 1;
        if looks_lettered && index < choices.len() {
            return Some(choices[index].clone());
        }
    }
    let class = normalize_answer(trimmed);
    choices
        .iter()
        .find(|c| normalize_answer(c) == class)
        .cloned()
}

/// Returns the candidate whose BM25 rank score against the concatenation of
/// the retrieved passages is maximal; ties keep the earlier candidate.
pub fn grounded_select(x: &Example, ix: &Index, cands: &CandidateSet) -> Result<String> {
    if cands.is_empty() {
        return Err(DspError::Contract(
            "grounded_select requires candidates".to_string(),
        ));
    }
    let passages = x.passages();
    if passages.is_empty() {
        return Err(DspError::Contract(
            "grounded_select requires retrieved passages".to_string(),
        ));
    }
    let concatenated = passages.join(" ");
    let mut best: (usize, f64) = (0, f64::NEG_INFINITY);
    for (i, candidate) in cands.candidates.iter().enumerate() {
        let score = ix.rank(&candidate.answer, std::slice::from_ref(&concatenated))[0];
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(cands.candidates[best.0].answer.clone())
}
