//! The six reference pipelines, assembled from the other modules with the
//! default hyperparameters: `vanilla`, `rtr` (retrieve-then-read),
//! `selfask`, `openqa`, `multihop`, and `convqa`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demonstrate::{annotate, sample};
use crate::error::{DspError, Result};
use crate::eval::{answer_match, answer_precision, f1, passage_match};
use crate::example::{Example, Value};
use crate::lm::{Lm, SamplingParams};
use crate::predict::sc_predict_with;
use crate::rm::Retrieve;
use crate::search::{
    conversation_baseline_query, conversational_search, multihop_search, simple_search,
    SearchConfig,
};
use crate::template::{TemplateSet, SELFASK_PROMPT};

/// Default hyperparameters, following the reference setups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramConfig {
    /// Demonstrations sampled from train for QA programs.
    pub k_shot: usize,
    /// Conversations sampled from train for the conversational program.
    pub conv_k_shot: usize,
    /// Demonstrations bootstrapped by annotate.
    pub annotate_k: usize,
    /// Passages retrieved by the open-domain QA program.
    pub openqa_retrieve_k: usize,
    /// Passages retrieved by retrieve-then-read (2 suits multi-hop datasets).
    pub rtr_k: usize,
    /// Self-consistency samples.
    pub sc_n: usize,
    /// Fixed hop count for the multi-hop program.
    pub multihop_fixed_hops: usize,
    /// Queries generated (and fused) per hop.
    pub multihop_queries_per_hop: usize,
    /// Total passages kept across hops.
    pub multihop_passage_budget: usize,
    /// Passages retrieved per hop query.
    pub multihop_passages_k: usize,
    /// Rewrites generated (and fused) by conversational search.
    pub convqa_rewrites: usize,
    /// Passages kept by conversational search.
    pub convqa_passages: usize,
    /// Greedy decoding temperature.
    pub greedy_temperature: f64,
    /// Sampling temperature when n > 1.
    pub sample_temperature: f64,
    /// Follow-up cap for the self-ask baseline.
    pub selfask_max_followups: usize,
    /// Completion token budget.
    pub max_tokens: usize,
    /// Replay seed; the harness derives one per evaluation seed.
    pub seed: u64,
}

impl Default for ProgramConfig {
    fn default() -> Self {
        ProgramConfig {
            k_shot: 16,
            conv_k_shot: 4,
            annotate_k: 3,
            openqa_retrieve_k: 7,
            rtr_k: 1,
            sc_n: 20,
            multihop_fixed_hops: 2,
            multihop_queries_per_hop: 10,
            multihop_passage_budget: 5,
            multihop_passages_k: 5,
            convqa_rewrites: 10,
            convqa_passages: 5,
            greedy_temperature: 0.0,
            sample_temperature: 0.7,
            selfask_max_followups: 5,
            max_tokens: 256,
            seed: 0,
        }
    }
}

/// The registered programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProgramKind {
    /// Few-shot closed-book QA.
    Vanilla,
    /// Retrieve-then-read.
    Rtr,
    /// Self-ask with intercepted follow-up queries.
    Selfask,
    /// Open-domain QA: bootstrapped demos, top-k search, self-consistency.
    Openqa,
    /// Multi-hop QA: fixed two-hop search with per-hop fusion.
    Multihop,
    /// Conversational QA: rewrite fusion plus grounded responses.
    Convqa,
}

impl ProgramKind {
    /// Every registered program, in CLI listing order.
    pub fn all() -> &'static [ProgramKind] {
        &[
            ProgramKind::Vanilla,
            ProgramKind::Rtr,
            ProgramKind::Selfask,
            ProgramKind::Openqa,
            ProgramKind::Multihop,
            ProgramKind::Convqa,
        ]
    }

    /// The registry name.
    pub fn name(&self) -> &'static str {
        match self {
            ProgramKind::Vanilla => "vanilla",
            ProgramKind::Rtr => "rtr",
            ProgramKind::Selfask => "selfask",
            ProgramKind::Openqa => "openqa",
            ProgramKind::Multihop => "multihop",
            ProgramKind::Convqa => "convqa",
        }
    }
}

impl FromStr for ProgramKind {
    type Err = DspError;

    fn from_str(s: &str) -> Result<Self> {
        ProgramKind::all()
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                DspError::Config(format!(
                    "unknown program {s:?}; expected one of: {}",
                    ProgramKind::all()
                        .iter()
                        .map(|k| k.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

impl std::fmt::Display for ProgramKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A program input: a question or a conversation history.
#[derive(Debug, Clone, PartialEq)]
pub enum ProgramInput {
    /// A standalone question.
    Question(String),
    /// Conversation turns, final question last; may include the system's own
    /// earlier responses when replayed auto-regressively.
    Turns(Vec<String>),
}

/// Shared context for running programs: backends, templates, and config.
pub struct Pipeline<'a> {
    /// The frozen LM handle.
    pub lm: &'a Lm,
    /// The retriever.
    pub rm: &'a dyn Retrieve,
    /// Prompt templates.
    pub templates: &'a TemplateSet,
    /// Hyperparameters.
    pub cfg: &'a ProgramConfig,
}

impl Pipeline<'_> {
    /// Runs a program on one input. The prediction lands in the returned
    /// example's `pred` field.
    pub fn run(
        &self,
        kind: ProgramKind,
        input: &ProgramInput,
        train: &[Example],
    ) -> Result<Example> {
        match kind {
            ProgramKind::Vanilla => self.vanilla(input, train),
            ProgramKind::Rtr => self.retrieve_then_read(input, train),
            ProgramKind::Selfask => self.selfask(input),
            ProgramKind::Openqa => self.openqa(input, train),
            ProgramKind::Multihop => self.multihop(input, train),
            ProgramKind::Convqa => self.convqa(input, train),
        }
    }

    /// The Demonstrate stage alone: the demos the program would prompt with.
    /// Bootstrapping programs return annotated demos; the baselines return
    /// their sampled demos.
    pub fn bootstrap_demos(&self, kind: ProgramKind, train: &[Example]) -> Result<Vec<Example>> {
        match kind {
            ProgramKind::Vanilla | ProgramKind::Rtr => {
                Ok(sample(train, self.cfg.k_shot, self.cfg.seed))
            }
            ProgramKind::Selfask => Ok(Vec::new()),
            ProgramKind::Openqa => self.bootstrap(train, AttemptKind::Simple),
            ProgramKind::Multihop => self.bootstrap(train, AttemptKind::Multihop),
            ProgramKind::Convqa => self.bootstrap_conv(train),
        }
    }

    fn greedy(&self) -> SamplingParams {
        self.gen_params(1)
    }

    /// Sampling parameters for n generations under this config's seed,
    /// temperature, and token budget.
    fn gen_params(&self, n: usize) -> SamplingParams {
        let mut p = if n > 1 {
            SamplingParams::sampled(n, self.cfg.sample_temperature, self.cfg.seed)
        } else {
            SamplingParams::greedy(self.cfg.seed)
        };
        p.max_tokens = self.cfg.max_tokens;
        p
    }

    fn question_of(input: &ProgramInput) -> Result<&str> {
        match input {
            ProgramInput::Question(q) => Ok(q),
            ProgramInput::Turns(_) => Err(DspError::Contract(
                "this program expects a question, not a conversation".to_string(),
            )),
        }
    }

    fn vanilla(&self, input: &ProgramInput, train: &[Example]) -> Result<Example> {
        match input {
            ProgramInput::Question(question) => {
                let demos = sample(train, self.cfg.k_shot, self.cfg.seed);
                let x = Example::new()
                    .with("question", question.clone())
                    .with("demos", demos);
                let t = self.templates.get("qa")?;
                let out = self.lm.generate(t, &self.greedy(), &x)?;
                let pred = out
                    .items
                    .first()
                    .and_then(|c| c.field("answer"))
                    .unwrap_or("")
                    .to_string();
                Ok(x.copy_with([("pred".to_string(), Value::Text(pred))]))
            }
            ProgramInput::Turns(turns) => {
                let demos = conv_demo_views(&sample(train, self.cfg.conv_k_shot, self.cfg.seed));
                let x = Example::new()
                    .with("turns", turns.clone())
                    .with("demos", demos);
                let t = self.templates.get("conv_response")?;
                let out = self.lm.generate(t, &self.greedy(), &x)?;
                let pred = out
                    .items
                    .first()
                    .and_then(|c| c.field("response"))
                    .unwrap_or("")
                    .to_string();
                Ok(x.copy_with([("pred".to_string(), Value::Text(pred))]))
            }
        }
    }

    fn retrieve_then_read(&self, input: &ProgramInput, train: &[Example]) -> Result<Example> {
        match input {
            ProgramInput::Question(question) => {
                let demos = sample(train, self.cfg.k_shot, self.cfg.seed);
                let x = Example::new()
                    .with("question", question.clone())
                    .with("demos", demos);
                let x = simple_search(self.rm, &x, self.cfg.rtr_k)?;
                let t = self.templates.get("qa")?;
                sc_predict_with(self.lm, t, &x, &self.greedy())
            }
            ProgramInput::Turns(turns) => {
                let demos = conv_demo_views(&sample(train, self.cfg.conv_k_shot, self.cfg.seed));
                let query = conversation_baseline_query(turns);
                let passages: Vec<String> = self
                    .rm
                    .retrieve(&query, self.cfg.rtr_k)?
                    .into_iter()
                    .map(|sp| sp.passage.text)
                    .collect();
                let x = Example::new()
                    .with("turns", turns.clone())
                    .with("demos", demos)
                    .with("passages", passages);
                let t = self.templates.get("conv_response")?;
                sc_predict_with(self.lm, t, &x, &self.greedy())
            }
        }
    }

    /// The self-ask baseline: one growing prompt in which follow-up
    /// questions are intercepted, sent to the retriever, and answered with
    /// the top passage. The loop ends at the final-answer marker or after
    /// the follow-up cap, whichever comes first.
    fn selfask(&self, input: &ProgramInput) -> Result<Example> {
        const FOLLOW_UP: &str = "Follow up:";
        const FINAL: &str = "So the final answer is:";

        let question = Self::question_of(input)?;
        let mut prompt = format!(
            "{}\n\nQuestion: {}\nAre follow up questions needed here:",
            SELFASK_PROMPT.trim_end(),
            question
        );
        let mut params = self.greedy();
        params.stop = vec!["\nIntermediate answer:".to_string()];

        let mut transcript_pred: Option<String> = None;
        let mut last_intermediate = String::new();
        let mut followups = 0usize;
        while transcript_pred.is_none() {
            let out = self.lm.complete_raw(&prompt, &params)?;
            let text = out.items.first().map(|c| c.text.as_str()).unwrap_or("");
            if let Some(pos) = text.find(FINAL) {
                let answer = text[pos + FINAL.len()..]
                    .lines()
                    .next()
                    .unwrap_or("")
                    .trim()
                    .to_string();
                prompt.push_str(text);
                transcript_pred = Some(answer);
            } else if let Some(pos) = text.find(FOLLOW_UP) {
                followups += 1;
                if followups > self.cfg.selfask_max_followups {
                    log::warn!(
                        "selfask reached the follow-up cap without a final answer; \
                         using the last intermediate text"
                    );
                    transcript_pred = Some(last_intermediate.clone());
                    break;
                }
                let rest = &text[pos + FOLLOW_UP.len()..];
                let followup = rest.lines().next().unwrap_or("").trim().to_string();
                if followup.is_empty() {
                    log::warn!("selfask produced an empty follow-up; stopping");
                    transcript_pred = Some(last_intermediate.clone());
                    break;
                }
                let line_end = pos + FOLLOW_UP.len() + rest.find('\n').unwrap_or(rest.len());
                let intermediate = self
                    .rm
                    .retrieve(&followup, 1)?
                    .first()
                    .map(|sp| sp.passage.text.clone())
                    .unwrap_or_else(|| "No results found.".to_string());
                prompt.push_str(&text[..line_end]);
                prompt.push_str("\nIntermediate answer: ");
                prompt.push_str(&intermediate);
                last_intermediate = intermediate;
            } else {
                // No markers at all: the completion is a direct answer.
                prompt.push_str(text);
                transcript_pred = Some(text.trim().to_string());
            }
        }
        Ok(Example::new()
            .with("question", question)
            .with("transcript", prompt)
            .with("pred", transcript_pred.unwrap_or_default()))
    }

    fn bootstrap(&self, train: &[Example], attempt_kind: AttemptKind) -> Result<Vec<Example>> {
        let demos16 = sample(train, self.cfg.k_shot, self.cfg.seed);
        let qa_cot = self.templates.get("qa_with_cot")?;
        let attempt = |d: &Example| -> Result<Option<Example>> {
            let others: Vec<Example> = demos16.iter().filter(|e| *e != d).cloned().collect();
            let mut cand = d.copy_with([("demos".to_string(), Value::Examples(others))]);
            cand = match attempt_kind {
                AttemptKind::Simple => simple_search(self.rm, &cand, 2)?,
                AttemptKind::Multihop => {
                    // Demonstrate defaults to greedy decoding: one query per hop.
                    let cfg = SearchConfig {
                        max_hops: self.cfg.multihop_fixed_hops,
                        fixed_hops: Some(self.cfg.multihop_fixed_hops),
                        queries_per_hop: 1,
                        passages_k: self.cfg.multihop_passages_k,
                        passage_budget: self.cfg.multihop_passage_budget,
                        sample_temperature: self.cfg.sample_temperature,
                        max_tokens: self.cfg.max_tokens,
                        seed: self.cfg.seed,
                        ..SearchConfig::default()
                    };
                    multihop_search(self.lm, self.rm, self.templates, &cand, &cfg)?
                }
            };
            if !passage_match(&cand) {
                return Ok(None); // search failed for this example
            }
            cand = sc_predict_with(self.lm, qa_cot, &cand, &self.greedy())?;
            if !answer_match(&cand) {
                return Ok(None); // predict failed for this example
            }
            let mut demo = cand.clone();
            demo.remove("demos");
            demo.remove("train");
            Ok(Some(demo))
        };
        annotate(&demos16, attempt, self.cfg.annotate_k)
    }

    fn openqa(&self, input: &ProgramInput, train: &[Example]) -> Result<Example> {
        let question = Self::question_of(input)?;
        let demos = self.bootstrap(train, AttemptKind::Simple)?;
        if demos.is_empty() {
            log::warn!("openqa: annotate produced no demos; proceeding zero-shot");
        }
        let x = Example::new()
            .with("question", question)
            .with("demos", demos);
        let x = simple_search(self.rm, &x, self.cfg.openqa_retrieve_k)?;
        let t = self.templates.get("qa_with_cot")?;
        sc_predict_with(self.lm, t, &x, &self.gen_params(self.cfg.sc_n))
    }

    fn multihop(&self, input: &ProgramInput, train: &[Example]) -> Result<Example> {
        let question = Self::question_of(input)?;
        let demos = self.bootstrap(train, AttemptKind::Multihop)?;
        if demos.is_empty() {
            log::warn!("multihop: annotate produced no demos; proceeding zero-shot");
        }
        let x = Example::new()
            .with("question", question)
            .with("demos", demos);
        let cfg = SearchConfig {
            max_hops: self.cfg.multihop_fixed_hops,
            fixed_hops: Some(self.cfg.multihop_fixed_hops),
            queries_per_hop: self.cfg.multihop_queries_per_hop,
            passages_k: self.cfg.multihop_passages_k,
            passage_budget: self.cfg.multihop_passage_budget,
            sample_temperature: self.cfg.sample_temperature,
            max_tokens: self.cfg.max_tokens,
            seed: self.cfg.seed,
            ..SearchConfig::default()
        };
        let x = multihop_search(self.lm, self.rm, self.templates, &x, &cfg)?;
        let t = self.templates.get("qa_with_cot")?;
        sc_predict_with(self.lm, t, &x, &self.gen_params(self.cfg.sc_n))
    }

    fn bootstrap_conv(&self, train: &[Example]) -> Result<Vec<Example>> {
        let demos4 = sample(train, self.cfg.conv_k_shot, self.cfg.seed);
        let conv_t = self.templates.get("conv_response")?;
        let attempt = |d: &Example| -> Result<Option<Example>> {
            let gold = d.answer().unwrap_or("").to_string();
            let others: Vec<Example> = conv_demo_views(
                &demos4
                    .iter()
                    .filter(|e| *e != d)
                    .cloned()
                    .collect::<Vec<_>>(),
            );
            let mut cand = d.copy_with([("demos".to_string(), Value::Examples(others))]);
            let search_cfg = SearchConfig {
                queries_per_hop: 1, // Demonstrate defaults to greedy decoding
                passage_budget: 2,
                sample_temperature: self.cfg.sample_temperature,
                max_tokens: self.cfg.max_tokens,
                seed: self.cfg.seed,
                ..SearchConfig::default()
            };
            cand = conversational_search(self.lm, self.rm, self.templates, &cand, &search_cfg)?;
            let best_precision = cand
                .passages()
                .iter()
                .map(|p| answer_precision(&gold, p))
                .fold(0.0, f64::max);
            if best_precision < 0.8 {
                return Ok(None); // search failed for this conversation
            }
            cand = sc_predict_with(self.lm, conv_t, &cand, &self.gen_params(self.cfg.sc_n))?;
            let best_f1 = cand
                .examples("candidates")
                .unwrap_or(&[])
                .iter()
                .filter_map(|c| c.pred())
                .map(|p| f1(p, std::slice::from_ref(&gold)))
                .fold(0.0, f64::max);
            if best_f1 < 0.75 {
                return Ok(None); // no candidate respondent came close enough
            }
            let mut demo = cand.clone();
            demo.remove("demos");
            demo.remove("train");
            demo.set("response", gold);
            Ok(Some(demo))
        };
        annotate(&demos4, attempt, self.cfg.annotate_k)
    }

    fn convqa(&self, input: &ProgramInput, train: &[Example]) -> Result<Example> {
        let turns = match input {
            ProgramInput::Turns(turns) if !turns.is_empty() => turns.clone(),
            ProgramInput::Turns(_) => {
                return Err(DspError::Contract(
                    "convqa requires at least one turn".to_string(),
                ))
            }
            ProgramInput::Question(q) => vec![q.clone()],
        };
        let demos = self.bootstrap_conv(train)?;
        if demos.is_empty() {
            log::warn!("convqa: annotate produced no demos; proceeding zero-shot");
        }
        let x = Example::new().with("turns", turns).with("demos", demos);
        let search_cfg = SearchConfig {
            queries_per_hop: self.cfg.convqa_rewrites,
            passage_budget: self.cfg.convqa_passages,
            sample_temperature: self.cfg.sample_temperature,
            max_tokens: self.cfg.max_tokens,
            seed: self.cfg.seed,
            ..SearchConfig::default()
        };
        let x = conversational_search(self.lm, self.rm, self.templates, &x, &search_cfg)?;
        let t = self.templates.get("conv_response")?;
        sc_predict_with(self.lm, t, &x, &self.greedy())
    }
}

enum AttemptKind {
    Simple,
    Multihop,
}

/// Raw conversational train examples carry the gold response in `answer`;
/// the conv template renders `response`, so demo views copy it across.
fn conv_demo_views(demos: &[Example]) -> Vec<Example> {
    demos
        .iter()
        .map(|d| {
            if d.has("response") {
                d.clone()
            } else if let Some(answer) = d.answer() {
                d.copy_with([("response".to_string(), Value::Text(answer.to_string()))])
            } else {
                d.clone()
            }
        })
        .collect()
}
