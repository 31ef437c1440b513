//! Command-line entry point: wires corpora, datasets, backends, programs,
//! and the evaluation harness; emits reports and traces.
//!
//! Exit codes: 0 success, 2 configuration error, 1 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dspkit::cache::Cache;
use dspkit::eval::{load_dataset, run_harness, DatasetRecord, HarnessConfig};
use dspkit::example::Example;
use dspkit::lm::{HttpLm, HttpProfile, Lm, MockLm};
use dspkit::programs::{Pipeline, ProgramConfig, ProgramInput, ProgramKind};
use dspkit::rm::{build_index, load_corpus, RemoteRm, Retrieve, ScoredPassage};
use dspkit::template::TemplateSet;
use dspkit::trace::{Tracer, TracingRetriever};
use dspkit::DspError;

const ENV_CACHE_DIR: &str = "DSPKIT_CACHE_DIR";

const EXAMPLE_INVOCATION: &str = "example: dspkit run --program multihop --dataset toy.jsonl \
--corpus toy.tsv --lm mock:script.jsonl --seeds 5 --k-shot 16 --subsample 1000";

#[derive(Parser)]
#[command(name = "dspkit", version, about = "Run LM+RM pipelines over a corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a program over a dataset and write a report.
    Run(RunArgs),
    /// Bootstrap a program's demonstrations and dump them as JSON lines.
    Annotate(RunArgs),
    /// Build the BM25 index for a corpus and print its statistics.
    Index(IndexArgs),
    /// Run one example and pretty-print its prompts and retrievals.
    Trace(TraceArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Program name: vanilla | rtr | selfask | openqa | multihop | convqa.
    #[arg(long)]
    program: Option<String>,
    /// Evaluation dataset (JSON lines).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Passage corpus (TSV or JSON lines).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Train pool (JSON lines); defaults to the dataset records left over
    /// after subsampling.
    #[arg(long)]
    train: Option<PathBuf>,
    /// LM backend: `mock:<script path>` or `http:<profile name>`.
    #[arg(long)]
    lm: Option<String>,
    /// RM backend: `bm25` (default) or `remote:<url>`.
    #[arg(long)]
    rm: Option<String>,
    /// Config file (TOML); flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of template JSON files overriding the built-ins.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Call cache directory (also via DSPKIT_CACHE_DIR); in-memory if unset.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of evaluation seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Base seed; seed i uses base + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation subsample size (seeded shuffle, then truncate).
    #[arg(long)]
    subsample: Option<usize>,
    /// Example-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Drop per-example traces from the report.
    #[arg(long, default_value_t = false)]
    no_traces: bool,
    /// Demonstrations sampled per seed.
    #[arg(long)]
    k_shot: Option<usize>,
    /// Demonstrations bootstrapped by annotate.
    #[arg(long)]
    annotate_k: Option<usize>,
    /// Self-consistency samples.
    #[arg(long)]
    sc_n: Option<usize>,
    /// Passages retrieved by openqa.
    #[arg(long)]
    openqa_k: Option<usize>,
    /// Passages retrieved by retrieve-then-read.
    #[arg(long)]
    rtr_k: Option<usize>,
    /// Fixed hop count for multihop.
    #[arg(long)]
    fixed_hops: Option<usize>,
    /// Queries generated and fused per hop.
    #[arg(long)]
    queries_per_hop: Option<usize>,
    /// Total passages kept across hops.
    #[arg(long)]
    passage_budget: Option<usize>,
    /// Rewrites generated and fused by convqa.
    #[arg(long)]
    rewrites: Option<usize>,
    /// Completion token budget.
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct IndexArgs {
    /// Passage corpus (TSV or JSON lines).
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Dataset record id to trace.
    #[arg(long)]
    example_id: Option<String>,
    /// Dataset record index to trace (default 0).
    #[arg(long)]
    example_index: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    program: Option<String>,
    dataset: Option<PathBuf>,
    corpus: Option<PathBuf>,
    train: Option<PathBuf>,
    lm: Option<String>,
    rm: Option<String>,
    templates: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    output: Option<PathBuf>,
    seeds: Option<usize>,
    seed: Option<u64>,
    subsample: Option<usize>,
    jobs: Option<usize>,
    lm_strict_mock: Option<bool>,
    #[serde(default)]
    overrides: Overrides,
    #[serde(default)]
    lm_profiles: BTreeMap<String, HttpProfile>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overrides {
    k_shot: Option<usize>,
    conv_k_shot: Option<usize>,
    annotate_k: Option<usize>,
    openqa_retrieve_k: Option<usize>,
    rtr_k: Option<usize>,
    sc_n: Option<usize>,
    multihop_fixed_hops: Option<usize>,
    multihop_queries_per_hop: Option<usize>,
    multihop_passage_budget: Option<usize>,
    multihop_passages_k: Option<usize>,
    convqa_rewrites: Option<usize>,
    convqa_passages: Option<usize>,
    sample_temperature: Option<f64>,
    selfask_max_followups: Option<usize>,
    max_tokens: Option<usize>,
}

fn config_error(message: impl std::fmt::Display) -> DspError {
    DspError::Config(format!("{message}\n{EXAMPLE_INVOCATION}"))
}

/// The fully resolved run setup.
struct Resolved {
    program: ProgramKind,
    dataset: Vec<DatasetRecord>,
    train: Option<Vec<DatasetRecord>>,
    lm: Lm,
    rm: RmBackend,
    templates: TemplateSet,
    program_cfg: ProgramConfig,
    harness_cfg: HarnessConfig,
    output: PathBuf,
}

enum RmBackend {
    Bm25(dspkit::rm::Index),
    Remote(RemoteRm),
}

impl Retrieve for RmBackend {
    fn retrieve(&self, query: &str, k: usize) -> dspkit::Result<Vec<ScoredPassage>> {
        match self {
            RmBackend::Bm25(ix) => ix.retrieve(query, k),
            RmBackend::Remote(rm) => rm.retrieve(query, k),
        }
    }
    fn id(&self) -> String {
        match self {
            RmBackend::Bm25(ix) => Retrieve::id(ix),
            RmBackend::Remote(rm) => rm.id(),
        }
    }
}

fn resolve(args: &RunArgs) -> dspkit::Result<Resolved> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path).map_err(|e| {
                config_error(format!("cannot read --config {}: {e}", path.display()))
            })?;
            toml::from_str(&raw)
                .map_err(|e| config_error(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let program_name = args
        .program
        .clone()
        .or(file.program)
        .ok_or_else(|| config_error("missing --program"))?;
    let program: ProgramKind = program_name.parse().map_err(config_error)?;

    let dataset_path = args
        .dataset
        .clone()
        .or(file.dataset)
        .ok_or_else(|| config_error("missing --dataset"))?;
    let dataset = load_dataset(&dataset_path).map_err(config_error)?;
    let train = match args.train.clone().or(file.train) {
        Some(path) => Some(load_dataset(&path).map_err(config_error)?),
        None => None,
    };

    let mut templates = TemplateSet::builtin();
    if let Some(dir) = args.templates.clone().or(file.templates) {
        templates.load_dir(&dir).map_err(config_error)?;
    }

    let cache_dir = args.cache_dir.clone().or(file.cache_dir).or_else(|| {
        std::env::var(ENV_CACHE_DIR)
            .ok()
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    });
    let cache = Arc::new(match &cache_dir {
        Some(dir) => Cache::disk(dir).map_err(config_error)?,
        None => Cache::memory(),
    });

    let lm_spec = args
        .lm
        .clone()
        .or(file.lm)
        .ok_or_else(|| config_error("missing --lm (mock:<script> or http:<profile>)"))?;
    let lm = build_lm(
        &lm_spec,
        Arc::clone(&cache),
        &file.lm_profiles,
        file.lm_strict_mock.unwrap_or(false),
    )?;

    let rm_spec = args
        .rm
        .clone()
        .or(file.rm)
        .unwrap_or_else(|| "bm25".to_string());
    let rm = match rm_spec.as_str() {
        "bm25" => {
            let corpus_path = args
                .corpus
                .clone()
                .or(file.corpus)
                .ok_or_else(|| config_error("missing --corpus (required with --rm bm25)"))?;
            let corpus = load_corpus(&corpus_path).map_err(config_error)?;
            RmBackend::Bm25(build_index(corpus).map_err(config_error)?)
        }
        other => match other.strip_prefix("remote:") {
            Some(url) => {
                RmBackend::Remote(RemoteRm::new(url).map_err(config_error)?.with_cache(cache))
            }
            None => {
                return Err(config_error(format!(
                    "bad --rm {other:?}; expected bm25 or remote:<url>"
                )))
            }
        },
    };

    let mut cfg = ProgramConfig {
        seed: args.seed.or(file.seed).unwrap_or(0),
        ..ProgramConfig::default()
    };
    let o = &file.overrides;
    let pick = |flag: Option<usize>, file_value: Option<usize>, default: usize| {
        flag.or(file_value).unwrap_or(default)
    };
    cfg.k_shot = pick(args.k_shot, o.k_shot, cfg.k_shot);
    cfg.conv_k_shot = pick(None, o.conv_k_shot, cfg.conv_k_shot);
    cfg.annotate_k = pick(args.annotate_k, o.annotate_k, cfg.annotate_k);
    cfg.openqa_retrieve_k = pick(args.openqa_k, o.openqa_retrieve_k, cfg.openqa_retrieve_k);
    cfg.rtr_k = pick(args.rtr_k, o.rtr_k, cfg.rtr_k);
    cfg.sc_n = pick(args.sc_n, o.sc_n, cfg.sc_n);
    cfg.multihop_fixed_hops = pick(
        args.fixed_hops,
        o.multihop_fixed_hops,
        cfg.multihop_fixed_hops,
    );
    cfg.multihop_queries_per_hop = pick(
        args.queries_per_hop,
        o.multihop_queries_per_hop,
        cfg.multihop_queries_per_hop,
    );
    cfg.multihop_passage_budget = pick(
        args.passage_budget,
        o.multihop_passage_budget,
        cfg.multihop_passage_budget,
    );
    cfg.multihop_passages_k = pick(None, o.multihop_passages_k, cfg.multihop_passages_k);
    cfg.convqa_rewrites = pick(args.rewrites, o.convqa_rewrites, cfg.convqa_rewrites);
    cfg.convqa_passages = pick(None, o.convqa_passages, cfg.convqa_passages);
    cfg.selfask_max_followups = pick(None, o.selfask_max_followups, cfg.selfask_max_followups);
    cfg.max_tokens = pick(args.max_tokens, o.max_tokens, cfg.max_tokens);
    if let Some(t) = o.sample_temperature {
        cfg.sample_temperature = t;
    }

    let subsample = args.subsample.or(file.subsample).unwrap_or(dataset.len());
    let harness_cfg = HarnessConfig {
        program,
        seeds: args.seeds.or(file.seeds).unwrap_or(5),
        subsample,
        jobs: args.jobs.or(file.jobs).unwrap_or(1),
        include_traces: !args.no_traces,
    };

    Ok(Resolved {
        program,
        dataset,
        train,
        lm,
        rm,
        templates,
        program_cfg: cfg,
        harness_cfg,
        output: args
            .output
            .clone()
            .or(file.output)
            .unwrap_or_else(|| PathBuf::from("report.json")),
    })
}

fn build_lm(
    spec: &str,
    cache: Arc<Cache>,
    profiles: &BTreeMap<String, HttpProfile>,
    strict_mock: bool,
) -> dspkit::Result<Lm> {
    if let Some(path) = spec.strip_prefix("mock:") {
        let mock = MockLm::from_path(Path::new(path))
            .map_err(config_error)?
            .strict(strict_mock);
        return Ok(Lm::new(Arc::new(mock), cache));
    }
    if let Some(name) = spec.strip_prefix("http:") {
        let profile = profiles
            .get(name)
            .cloned()
            .unwrap_or_else(|| HttpProfile {
                base_url: String::new(),
                model: name.to_string(),
                api_key: None,
                context_tokens: 4097,
                supports_score: false,
            })
            .with_env_overrides();
        if profile.base_url.is_empty() {
            return Err(config_error(format!(
                "http profile {name:?} has no base_url; add [lm_profiles.{name}] to the config \
                 file or set DSPKIT_LM_URL"
            )));
        }
        let backend = HttpLm::new(profile).map_err(config_error)?;
        return Ok(Lm::new(Arc::new(backend), cache));
    }
    Err(config_error(format!(
        "bad --lm {spec:?}; expected mock:<script path> or http:<profile name>"
    )))
}

fn cmd_run(args: &RunArgs) -> dspkit::Result<()> {
    let resolved = resolve(args)?;
    let report = {
        let mut report = run_harness(
            &resolved.lm,
            &resolved.rm,
            &resolved.templates,
            &resolved.program_cfg,
            &resolved.dataset,
            resolved.train.as_deref(),
            &resolved.harness_cfg,
        )?;
        report.generated_at = Some(chrono::Utc::now().to_rfc3339());
        report
    };
    std::fs::write(&resolved.output, report.to_json_pretty())
        .map_err(|e| DspError::io(resolved.output.display().to_string(), e))?;
    print!("{}", report.table());
    println!("report written to {}", resolved.output.display());
    Ok(())
}

fn train_examples(resolved: &Resolved) -> Vec<Example> {
    match &resolved.train {
        Some(records) => records
            .iter()
            .map(DatasetRecord::to_train_example)
            .collect(),
        None => resolved
            .dataset
            .iter()
            .map(DatasetRecord::to_train_example)
            .collect(),
    }
}

fn cmd_annotate(args: &RunArgs) -> dspkit::Result<()> {
    let resolved = resolve(args)?;
    let train = train_examples(&resolved);
    let pipeline = Pipeline {
        lm: &resolved.lm,
        rm: &resolved.rm,
        templates: &resolved.templates,
        cfg: &resolved.program_cfg,
    };
    let demos = pipeline.bootstrap_demos(resolved.program, &train)?;
    let mut lines = String::new();
    for demo in &demos {
        lines.push_str(&serde_json::to_string(demo).expect("examples serialize"));
        lines.push('\n');
    }
    if args.output.is_some() {
        std::fs::write(&resolved.output, &lines)
            .map_err(|e| DspError::io(resolved.output.display().to_string(), e))?;
        println!(
            "{} demo(s) written to {}",
            demos.len(),
            resolved.output.display()
        );
    } else {
        print!("{lines}");
        eprintln!("{} demo(s)", demos.len());
    }
    Ok(())
}

fn cmd_index(args: &IndexArgs) -> dspkit::Result<()> {
    let corpus = load_corpus(&args.corpus).map_err(config_error)?;
    let n = corpus.len();
    let index = build_index(corpus).map_err(config_error)?;
    println!("passages: {n}");
    println!("average length (tokens): {:.2}", index.avg_len());
    println!("vocabulary: {} terms", index.vocab_size());
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> dspkit::Result<()> {
    let resolved = resolve(&args.run)?;
    let record = match (&args.example_id, args.example_index) {
        (Some(id), _) => resolved
            .dataset
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| config_error(format!("no dataset record with id {id:?}")))?,
        (None, index) => {
            let index = index.unwrap_or(0);
            resolved
                .dataset
                .get(index)
                .ok_or_else(|| config_error(format!("dataset has no record at index {index}")))?
        }
    };
    let train = train_examples(&resolved);

    let tracer = Arc::new(Tracer::capturing_text());
    let lm = resolved.lm.with_tracer(Arc::clone(&tracer));
    let rm = TracingRetriever::new(&resolved.rm, &tracer);
    let pipeline = Pipeline {
        lm: &lm,
        rm: &rm,
        templates: &resolved.templates,
        cfg: &resolved.program_cfg,
    };

    println!("== example {} ({}) ==", record.id, resolved.program);
    let pred = match &record.turns {
        Some(turns) => {
            let mut history = Vec::new();
            let mut last = String::new();
            for (t, turn) in turns.iter().enumerate() {
                let user = if t == 0 {
                    record.rewrite.clone().unwrap_or_else(|| turn.clone())
                } else {
                    turn.clone()
                };
                history.push(user);
                let out = pipeline.run(
                    resolved.program,
                    &ProgramInput::Turns(history.clone()),
                    &train,
                )?;
                last = out.pred().unwrap_or("").to_string();
                println!("turn {}: {}", t + 1, last);
                history.push(last.clone());
            }
            last
        }
        None => {
            let question = record.question.clone().unwrap_or_default();
            println!("question: {question}");
            let out = pipeline.run(resolved.program, &ProgramInput::Question(question), &train)?;
            out.pred().unwrap_or("").to_string()
        }
    };

    let events = tracer.snapshot();
    for (i, prompt) in events.prompts.iter().enumerate() {
        println!(
            "\n-- prompt {} ({}) --",
            i + 1,
            &events.prompt_hashes[i][..12]
        );
        println!("{prompt}");
    }
    for retrieval in &events.retrievals {
        println!(
            "\n-- retrieval: {:?} -> {:?}",
            retrieval.query, retrieval.ids
        );
    }
    println!("\npred: {pred}");
    println!("gold: {:?}", record.answers);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Annotate(args) => cmd_annotate(args),
        Command::Index(args) => cmd_index(args),
        Command::Trace(args) => cmd_trace(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (DspError::Config(_) | DspError::Parse { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
