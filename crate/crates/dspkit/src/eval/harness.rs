//! The seeded evaluation harness: deterministic subsampling, contiguous
//! per-seed partitions, per-example program runs with tracing, and metric
//! aggregation into a report.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::{em, f1, novel_f1, DatasetRecord};
use crate::demonstrate::shuffled_indices;
use crate::error::{DspError, Result};
use crate::example::Example;
use crate::lm::Lm;
use crate::programs::{Pipeline, ProgramConfig, ProgramInput, ProgramKind};
use crate::rm::Retrieve;
use crate::template::TemplateSet;
use crate::trace::{RetrievalTrace, Tracer, TracingRetriever};

/// Harness-level settings; program hyperparameters live in
/// [`ProgramConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessConfig {
    /// Program under evaluation.
    pub program: ProgramKind,
    /// Number of seeds; the subsample is split into this many contiguous
    /// partitions (the remainder goes to the last).
    pub seeds: usize,
    /// Evaluation examples kept after the seeded shuffle.
    pub subsample: usize,
    /// Example-level parallelism (1 = sequential).
    pub jobs: usize,
    /// Whether per-example traces are included in the report.
    pub include_traces: bool,
}

impl HarnessConfig {
    /// A sequential harness with traces on.
    pub fn new(program: ProgramKind, seeds: usize, subsample: usize) -> Self {
        HarnessConfig {
            program,
            seeds,
            subsample,
            jobs: 1,
            include_traces: true,
        }
    }
}

/// Metrics for one seed's partition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedReport {
    /// Seed index (0-based).
    pub seed_index: usize,
    /// The derived seed value used for this partition's draws.
    pub seed: u64,
    /// Examples evaluated.
    pub n_examples: usize,
    /// Examples that errored (scored 0).
    pub n_errors: usize,
    /// Mean exact match.
    pub em: f64,
    /// Mean token F1.
    pub f1: f64,
    /// Mean novel F1 (conversational datasets only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nf1: Option<f64>,
}

/// Unweighted means over seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    /// Mean of per-seed EM.
    pub em: f64,
    /// Mean of per-seed F1.
    pub f1: f64,
    /// Mean of per-seed novel F1, when reported.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nf1: Option<f64>,
}

/// Everything recorded for one evaluated example.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExampleTrace {
    /// Dataset record id.
    pub id: String,
    /// Which seed partition evaluated it.
    pub seed_index: usize,
    /// Final prediction (last turn's response for conversations).
    pub pred: String,
    /// Gold answers (per-turn golds for conversations).
    pub golds: Vec<String>,
    /// Exact match for this example.
    pub em: f64,
    /// Token F1 for this example.
    pub f1: f64,
    /// Novel F1, for conversations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nf1: Option<f64>,
    /// Per-turn responses, for conversations.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub turn_preds: Vec<String>,
    /// The error, when the program failed on this example.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Hashes of every prompt sent while running this example.
    pub prompt_hashes: Vec<String>,
    /// Every retrieval call made while running this example.
    pub retrievals: Vec<RetrievalTrace>,
}

/// The harness output: config snapshot, per-seed metrics, aggregate means,
/// and per-example traces.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    /// Wall-clock stamp; left unset by the harness so reports stay
    /// byte-comparable, filled in by the CLI.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
    /// One entry per seed.
    pub per_seed: Vec<SeedReport>,
    /// Unweighted means over seeds.
    pub aggregate: Aggregate,
    /// Per-example traces, in evaluation order.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub traces: Vec<ExampleTrace>,
}

impl Report {
    /// Pretty JSON for the report file.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("seed  n     errors  em      f1      nf1\n");
        for seed in &self.per_seed {
            out.push_str(&format!(
                "{:<5} {:<5} {:<7} {:<7.4} {:<7.4} {}\n",
                seed.seed_index,
                seed.n_examples,
                seed.n_errors,
                seed.em,
                seed.f1,
                seed.nf1.map_or("-".to_string(), |v| format!("{v:.4}")),
            ));
        }
        out.push_str(&format!(
            "mean        -       {:<7.4} {:<7.4} {}\n",
            self.aggregate.em,
            self.aggregate.f1,
            self.aggregate
                .nf1
                .map_or("-".to_string(), |v| format!("{v:.4}")),
        ));
        out
    }
}

struct Scored {
    trace: ExampleTrace,
}

/// Runs the harness: deterministically subsamples the dataset (seeded
/// shuffle, then truncate), partitions it into contiguous per-seed slices,
/// runs the program on every example, and folds metrics in example order.
/// Program errors score 0 and are counted, never aborting the run.
///
/// The k-shot train pool comes from `train_pool` when given, otherwise from
/// the dataset records left over after subsampling.
pub fn run_harness(
    lm: &Lm,
    rm: &dyn Retrieve,
    templates: &TemplateSet,
    program_cfg: &ProgramConfig,
    dataset: &[DatasetRecord],
    train_pool: Option<&[DatasetRecord]>,
    hcfg: &HarnessConfig,
) -> Result<Report> {
    if hcfg.seeds == 0 {
        return Err(DspError::Config("seeds must be >= 1".to_string()));
    }
    if hcfg.subsample == 0 || hcfg.subsample > dataset.len() {
        return Err(DspError::Config(format!(
            "subsample must be in 1..={}, got {}",
            dataset.len(),
            hcfg.subsample
        )));
    }

    let order = shuffled_indices(dataset.len(), program_cfg.seed);
    let eval_indices = &order[..hcfg.subsample];
    let train_examples: Vec<Example> = match train_pool {
        Some(records) => records
            .iter()
            .map(DatasetRecord::to_train_example)
            .collect(),
        None => order[hcfg.subsample..]
            .iter()
            .map(|&i| dataset[i].to_train_example())
            .collect(),
    };
    if train_examples.is_empty() {
        log::warn!("harness train pool is empty; programs will run without demonstrations");
    }

    let chunk = hcfg.subsample / hcfg.seeds;
    let mut per_seed = Vec::with_capacity(hcfg.seeds);
    let mut traces = Vec::new();

    let pool = if hcfg.jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(hcfg.jobs)
                .build()
                .map_err(|e| DspError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    for seed_index in 0..hcfg.seeds {
        let start = seed_index * chunk;
        let end = if seed_index == hcfg.seeds - 1 {
            hcfg.subsample
        } else {
            (seed_index + 1) * chunk
        };
        let seed = program_cfg.seed + seed_index as u64;
        let mut cfg = program_cfg.clone();
        cfg.seed = seed;

        let slice: Vec<&DatasetRecord> = eval_indices[start..end]
            .iter()
            .map(|&i| &dataset[i])
            .collect();
        let run_one = |record: &&DatasetRecord| -> Scored {
            run_example(
                lm,
                rm,
                templates,
                &cfg,
                hcfg,
                seed_index,
                record,
                &train_examples,
            )
        };
        let results: Vec<Scored> = match &pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                slice.par_iter().map(run_one).collect()
            }),
            None => slice.iter().map(run_one).collect(),
        };

        let n = results.len();
        let n_errors = results.iter().filter(|r| r.trace.error.is_some()).count();
        let mean = |f: &dyn Fn(&Scored) -> f64| -> f64 {
            if n == 0 {
                0.0
            } else {
                results.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let nf1_values: Vec<f64> = results.iter().filter_map(|r| r.trace.nf1).collect();
        let nf1 = if nf1_values.is_empty() {
            None
        } else {
            Some(nf1_values.iter().sum::<f64>() / nf1_values.len() as f64)
        };
        per_seed.push(SeedReport {
            seed_index,
            seed,
            n_examples: n,
            n_errors,
            em: mean(&|r| r.trace.em),
            f1: mean(&|r| r.trace.f1),
            nf1,
        });
        if hcfg.include_traces {
            traces.extend(results.into_iter().map(|r| r.trace));
        }
    }

    let seeds = per_seed.len() as f64;
    let nf1_seeds: Vec<f64> = per_seed.iter().filter_map(|s| s.nf1).collect();
    let aggregate = Aggregate {
        em: per_seed.iter().map(|s| s.em).sum::<f64>() / seeds,
        f1: per_seed.iter().map(|s| s.f1).sum::<f64>() / seeds,
        nf1: if nf1_seeds.is_empty() {
            None
        } else {
            Some(nf1_seeds.iter().sum::<f64>() / nf1_seeds.len() as f64)
        },
    };

    let config = serde_json::json!({
        "program": hcfg.program.name(),
        "seeds": hcfg.seeds,
        "subsample": hcfg.subsample,
        "jobs": hcfg.jobs,
        "lm": lm.backend_id(),
        "rm": rm.id(),
        "program_config": serde_json::to_value(program_cfg)
            .map_err(|e| DspError::Config(format!("config snapshot: {e}")))?,
    });

    Ok(Report {
        generated_at: None,
        config,
        per_seed,
        aggregate,
        traces,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_example(
    lm: &Lm,
    rm: &dyn Retrieve,
    templates: &TemplateSet,
    cfg: &ProgramConfig,
    hcfg: &HarnessConfig,
    seed_index: usize,
    record: &DatasetRecord,
    train: &[Example],
) -> Scored {
    let tracer = Arc::new(Tracer::new());
    let traced_lm = lm.with_tracer(Arc::clone(&tracer));
    let traced_rm = TracingRetriever::new(rm, &tracer);
    let pipeline = Pipeline {
        lm: &traced_lm,
        rm: &traced_rm,
        templates,
        cfg,
    };

    let outcome = if record.is_conversation() {
        run_conversation(&pipeline, hcfg.program, record, train)
    } else {
        run_question(&pipeline, hcfg.program, record, train)
    };

    let events = tracer.snapshot();
    let trace = match outcome {
        Ok(mut trace) => {
            trace.id = record.id.clone();
            trace.seed_index = seed_index;
            trace.prompt_hashes = events.prompt_hashes;
            trace.retrievals = events.retrievals;
            trace
        }
        Err(e) => ExampleTrace {
            id: record.id.clone(),
            seed_index,
            pred: String::new(),
            golds: record.answers.clone(),
            em: 0.0,
            f1: 0.0,
            nf1: record.is_conversation().then_some(0.0),
            turn_preds: Vec::new(),
            error: Some(e.to_string()),
            prompt_hashes: events.prompt_hashes,
            retrievals: events.retrievals,
        },
    };
    Scored { trace }
}

fn run_question(
    pipeline: &Pipeline<'_>,
    program: ProgramKind,
    record: &DatasetRecord,
    train: &[Example],
) -> Result<ExampleTrace> {
    let question = record
        .question
        .clone()
        .ok_or_else(|| DspError::Contract("QA record without a question".to_string()))?;
    let out = pipeline.run(program, &ProgramInput::Question(question), train)?;
    let pred = out.pred().unwrap_or("").to_string();
    Ok(ExampleTrace {
        id: String::new(),
        seed_index: 0,
        em: em(&pred, &record.answers) as f64,
        f1: f1(&pred, &record.answers),
        nf1: None,
        pred,
        golds: record.answers.clone(),
        turn_preds: Vec::new(),
        error: None,
        prompt_hashes: Vec::new(),
        retrievals: Vec::new(),
    })
}

/// Replays a conversation auto-regressively: at turn t the system sees its
/// own earlier responses, never the gold ones. The first user turn is the
/// dataset's rewrite when present. Metrics average over the turns that have
/// golds; novel F1 discounts tokens from the questions asked so far.
fn run_conversation(
    pipeline: &Pipeline<'_>,
    program: ProgramKind,
    record: &DatasetRecord,
    train: &[Example],
) -> Result<ExampleTrace> {
    let user_turns = record
        .turns
        .clone()
        .ok_or_else(|| DspError::Contract("conversation record without turns".to_string()))?;
    if user_turns.is_empty() {
        return Err(DspError::Contract(
            "conversation record with zero turns".to_string(),
        ));
    }
    let mut history: Vec<String> = Vec::new();
    let mut asked: Vec<String> = Vec::new();
    let mut turn_preds: Vec<String> = Vec::new();
    let mut em_scores = Vec::new();
    let mut f1_scores = Vec::new();
    let mut nf1_scores = Vec::new();

    for (t, turn) in user_turns.iter().enumerate() {
        let user = if t == 0 {
            record.rewrite.clone().unwrap_or_else(|| turn.clone())
        } else {
            turn.clone()
        };
        history.push(user.clone());
        asked.push(user);
        let out = pipeline.run(program, &ProgramInput::Turns(history.clone()), train)?;
        let response = out.pred().unwrap_or("").to_string();
        history.push(response.clone());
        if let Some(gold) = record.answers.get(t) {
            let golds = std::slice::from_ref(gold);
            em_scores.push(em(&response, golds) as f64);
            f1_scores.push(f1(&response, golds));
            nf1_scores.push(novel_f1(&response, gold, &asked));
        }
        turn_preds.push(response);
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ExampleTrace {
        id: String::new(),
        seed_index: 0,
        pred: turn_preds.last().cloned().unwrap_or_default(),
        golds: record.answers.clone(),
        em: mean(&em_scores),
        f1: mean(&f1_scores),
        nf1: Some(mean(&nf1_scores)),
        turn_preds,
        error: None,
        prompt_hashes: Vec::new(),
        retrievals: Vec::new(),
    })
}
