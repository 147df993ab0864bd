//! `rolegraph`: run, evaluate, collect training data, and model costs.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 backend or
//! retriever failure (including unusable model output), 3 data error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rolegraph_core::cost::{
    compare, compare_with_trace, comparison_table, rolegraph_cost, sweep, CostError, CostParams, Param,
    RetrievalAssumption,
};
use rolegraph_core::datagen::{self, DatagenError, ScoreMetric};
use rolegraph_core::eval::{self, DatasetFormat, EvalError, QAItem};
use rolegraph_core::gateway::{
    load_role_adapter, Backend, Gateway, RemoteBackend, RemoteConfig, ScriptedBackend, ENV_GATEWAY_TIMEOUT,
    ENV_GATEWAY_TOKEN, ENV_GATEWAY_URL,
};
use rolegraph_core::graph::GraphMode;
use rolegraph_core::pipeline::{Failure, Pipeline, PipelineConfig, PipelineError, RunResult};
use rolegraph_core::retrieval::{build_index, RetrievalError, Retriever, RetrieverConfig, RetrieverKind};
use rolegraph_core::roles::{PromptRegistry, RoleError, Roles};
use serde::Serialize;

use config::{BackendKind, Config, RetrieverChoice};

#[derive(Debug)]
enum CliError {
    Config(String),
    Backend(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Backend(m) | CliError::Data(m) => m,
        }
    }
}

type CliResult = Result<(), CliError>;

fn retrieval_error(e: RetrievalError) -> CliError {
    match e {
        RetrievalError::EndpointUnreachable(_) | RetrievalError::BadResponse(_) => CliError::Backend(e.to_string()),
        RetrievalError::InvalidTopK => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn pipeline_error(e: &PipelineError) -> CliError {
    let msg = format!("{e} (memory held {} entries)", e.partial_memory.len());
    match &e.source {
        Failure::Config(_) => CliError::Config(msg),
        Failure::Role(RoleError::Gateway(_)) | Failure::Role(RoleError::Graph(_)) => CliError::Backend(msg),
        Failure::Retrieval(r) => match retrieval_error(r.clone()) {
            CliError::Backend(_) => CliError::Backend(msg),
            _ => CliError::Data(msg),
        },
        Failure::Graph(_) | Failure::Memory(_) => CliError::Data(msg),
    }
}

fn eval_error(e: EvalError) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "rolegraph", version, about = "Query-graph retrieval-augmented question answering")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set pipeline.max_new_queries=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, value_enum, global = true)]
    backend: Option<BackendKind>,
    /// Rules file for the scripted backend.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Role adapter file; prompts are then sent in role-token mode.
    #[arg(long, global = true)]
    adapter: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    retriever: Option<RetrieverChoice>,
    /// Corpus for the local retriever (index it first with `rolegraph index`).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Search endpoint for the remote retriever.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    no_graph: bool,
    #[arg(long, global = true)]
    no_judge: bool,
    #[arg(long, global = true)]
    no_summarizer: bool,
    #[arg(long = "no-newquery", global = true)]
    no_new_query: bool,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    metric: Option<ScoreMetric>,
    /// Items processed at once by batch commands.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Reject multi-sink plans and stop batches at the first failure.
    #[arg(long, global = true)]
    strict: bool,
    /// Write one trace file per run into this directory.
    #[arg(long, global = true)]
    trace_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Answer one query or every item of a dataset.
    Run(RunArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Collect filtered training samples.
    Collect(CollectArgs),
    /// Check a collected sample directory.
    Validate(ValidateArgs),
    /// Analytic token costs and comparison with run traces.
    Cost(CostArgs),
    /// Build and validate the query graph for one query.
    Graph(GraphArgs),
    /// Build the lexical index for a local corpus.
    Index(IndexArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    query: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset is a single JSON array rather than JSON lines.
    #[arg(long)]
    json_array: bool,
    /// Predictions output (JSON lines of `{id, prediction}`) for datasets.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the full trace (single query) or batch report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions file: JSON lines of `{id, prediction}`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    json_array: bool,
    /// Add one row per hop count.
    #[arg(long)]
    by_hops: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CollectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    json_array: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, default_value_t = 2)]
    n: u64,
    #[arg(long, default_value_t = 20)]
    m: u64,
    #[arg(long, default_value_t = 10)]
    t: u64,
    #[arg(long, default_value_t = 5)]
    k: u64,
    #[arg(long, default_value_t = 100)]
    l: u64,
    /// Sweep one parameter, e.g. `n=1..8` (inclusive).
    #[arg(long)]
    sweep: Option<String>,
    /// Share of sub-queries that retrieve, as a decimal in [0, 1].
    #[arg(long)]
    retrieve_fraction: Option<String>,
    /// Compare the model with the token tallies of a run trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print per-stage rows.
    #[arg(long)]
    breakdown: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    query: String,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
}

/// Everything a command needs after config, file and flags are merged.
struct Settings {
    config: Config,
    strict: bool,
}

impl Settings {
    fn resolve(g: &GlobalArgs) -> Result<Settings, CliError> {
        let mut c = Config::load(g.config.as_deref(), &g.overrides).map_err(CliError::Config)?;
        if let Some(v) = g.backend {
            c.backend.kind = v;
        }
        if let Some(v) = &g.rules {
            c.backend.rules = Some(v.clone());
        }
        if let Some(v) = &g.model {
            c.backend.model = Some(v.clone());
        }
        if let Some(v) = &g.adapter {
            c.backend.adapter = Some(v.clone());
        }
        if let Some(v) = g.retriever {
            c.retriever.kind = v;
        }
        if let Some(v) = &g.corpus {
            c.retriever.corpus = Some(v.clone());
        }
        if let Some(v) = &g.endpoint {
            c.retriever.endpoint = Some(v.clone());
        }
        if let Some(v) = g.top_k {
            c.retriever.top_k = v;
        }
        let ab = &mut c.pipeline.ablations;
        ab.no_graph |= g.no_graph;
        ab.no_judge |= g.no_judge;
        ab.no_summarizer |= g.no_summarizer;
        ab.no_new_query |= g.no_new_query;
        if let Some(v) = g.alpha {
            c.datagen.alpha = v;
        }
        if let Some(v) = g.metric {
            c.datagen.metric = v;
        }
        if let Some(v) = g.parallel {
            c.batch.parallel = v;
        }
        if g.strict {
            c.pipeline.strict_graph = true;
            c.batch.fail_fast = true;
        }
        if let Some(v) = &g.trace_dir {
            c.trace_dir = Some(v.clone());
        }
        c.validate().map_err(CliError::Config)?;
        Ok(Settings { strict: c.batch.fail_fast, config: c })
    }

    fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.config.pipeline;
        PipelineConfig {
            top_k: self.config.retriever.top_k,
            max_new_queries: p.max_new_queries,
            ablations: p.ablations,
            width: p.width,
            graph_mode: if p.strict_graph { GraphMode::Strict } else { GraphMode::Lenient },
        }
    }

    fn roles(&self) -> Result<Roles, CliError> {
        let b = &self.config.backend;
        let backend: Arc<dyn Backend> = match b.kind {
            BackendKind::Scripted => {
                let rules = b
                    .rules
                    .as_ref()
                    .ok_or_else(|| CliError::Config("the scripted backend needs --rules".into()))?;
                Arc::new(ScriptedBackend::from_file(rules).map_err(CliError::Config)?)
            }
            BackendKind::Remote => {
                let model = b.model.clone().unwrap_or_else(|| "default".into());
                let mut remote = match (&b.base_url, RemoteConfig::from_env(model.clone())) {
                    (Some(url), env) => RemoteConfig {
                        base_url: url.clone(),
                        model,
                        token: env.as_ref().and_then(|e| e.token.clone()).or_else(|| std::env::var(ENV_GATEWAY_TOKEN).ok()),
                        timeout_secs: env.map_or(60, |e| e.timeout_secs),
                    },
                    (None, Some(env)) => env,
                    (None, None) => {
                        return Err(CliError::Config(format!(
                            "the remote backend needs {ENV_GATEWAY_URL} or backend.base_url (see also {ENV_GATEWAY_TOKEN}, {ENV_GATEWAY_TIMEOUT})"
                        )))
                    }
                };
                if let Some(t) = b.timeout_secs {
                    remote.timeout_secs = t;
                }
                Arc::new(RemoteBackend::new(remote).map_err(|e| CliError::Backend(e.to_string()))?)
            }
        };
        let mut gateway = Gateway::new(backend);
        if let Some(path) = &b.adapter {
            let tokens = load_role_adapter(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            gateway = gateway.with_role_tokens(tokens).map_err(|e| CliError::Config(e.to_string()))?;
        }
        let registry = match &b.prompts {
            Some(dir) => PromptRegistry::from_dir(dir).map_err(CliError::Config)?,
            None => PromptRegistry::builtin(),
        };
        let mut roles = Roles::new(gateway, registry);
        roles.judge_sees_summaries = self.config.pipeline.judge_sees_summaries;
        Ok(roles)
    }

    fn retriever(&self) -> Result<Arc<dyn Retriever>, CliError> {
        let r = &self.config.retriever;
        let config = RetrieverConfig {
            kind: match r.kind {
                RetrieverChoice::Local => RetrieverKind::LocalLexical,
                RetrieverChoice::Remote => RetrieverKind::Remote,
            },
            top_k: r.top_k,
            corpus_path: r.corpus.clone(),
            endpoint: r.endpoint.clone(),
            timeout_secs: r.timeout_secs,
        };
        if config.kind == RetrieverKind::LocalLexical && config.corpus_path.is_none() {
            return Err(CliError::Config("the local retriever needs --corpus".into()));
        }
        if config.kind == RetrieverKind::Remote && config.endpoint.is_none() {
            return Err(CliError::Config("the remote retriever needs --endpoint".into()));
        }
        config.open().map(Arc::from).map_err(retrieval_error)
    }

    fn pipeline(&self) -> Result<Pipeline, CliError> {
        Ok(Pipeline::new(self.roles()?, self.retriever()?))
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports always serialize")
}

fn write_trace(dir: &Path, name: &str, run: &RunResult) -> CliResult {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    write_file(&dir.join(format!("{safe}.json")), &(run.to_trace_json() + "\n"))
}

fn load_items(path: &Path, json_array: bool) -> Result<Vec<QAItem>, CliError> {
    let format = if json_array { DatasetFormat::JsonArray } else { DatasetFormat::Jsonl };
    eval::load_dataset(path, format).map_err(eval_error)
}

fn print_telemetry(run: &RunResult) {
    let t = &run.telemetry;
    println!("answer: {}", run.final_answer);
    println!("sub-queries: {}", t.sub_query_count);
    println!("retrieval calls: {}", t.retrieval_calls);
    println!("retrievals skipped: {}", t.retrievals_skipped);
    println!("passages fetched: {}", t.passages_fetched);
    println!("new queries added: {}", t.new_queries_added);
    if t.builder_fallback {
        println!("graph builder fell back to the single-node plan");
    }
    for (role, tally) in &t.tokens {
        println!(
            "tokens {:<16} calls {:>3}  in {:>6}  out {:>6}",
            role.as_str(),
            tally.calls,
            tally.prompt_tokens,
            tally.output_tokens
        );
    }
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    prediction: &'a str,
}

fn cmd_run(s: &Settings, args: &RunArgs) -> CliResult {
    let pipeline = s.pipeline()?;
    let config = s.pipeline_config();
    let trace_dir = s.config.trace_dir.as_deref();

    if let Some(query) = &args.query {
        let run = pipeline.run(query, &config).map_err(|e| pipeline_error(&e))?;
        if let Some(dir) = trace_dir {
            write_trace(dir, "query", &run)?;
        }
        if args.json {
            println!("{}", run.to_trace_json());
        } else {
            print_telemetry(&run);
        }
        return Ok(());
    }

    let path = args.dataset.as_ref().expect("clap requires query or dataset");
    let items = load_items(path, args.json_array)?;
    if items.is_empty() {
        return Err(CliError::Data(format!("{}: dataset is empty", path.display())));
    }
    let report = pipeline
        .run_batch(&items, &config, s.config.batch.parallel, s.strict)
        .map_err(|e| pipeline_error(&e.error))?;
    if let Some(dir) = trace_dir {
        for o in &report.outcomes {
            if let Some(run) = &o.result {
                write_trace(dir, &o.id, run)?;
            }
        }
    }
    if let Some(out) = &args.out {
        let mut text = String::new();
        for o in &report.outcomes {
            if let Some(run) = &o.result {
                text.push_str(&serde_json::to_string(&PredictionLine { id: &o.id, prediction: &run.final_answer }).expect("serializes"));
                text.push('\n');
            }
        }
        write_file(out, &text)?;
    }
    if args.json {
        println!("{}", to_json(&report));
        return Ok(());
    }
    for o in &report.outcomes {
        match (&o.result, &o.error) {
            (Some(run), _) => println!("{}\t{}", o.id, run.final_answer),
            (None, Some(err)) => println!("{}\tFAILED: {err}", o.id),
            (None, None) => {}
        }
    }
    let a = &report.aggregate;
    println!("items: {} ({} succeeded, {} failed)", a.items, a.succeeded, a.failed);
    println!("mean sub-queries: {:.4}", a.mean_sub_queries);
    println!("passages per query: {:.4}", a.mean_passages_per_query);
    println!("saved retrieval: {:.2}%", 100.0 * a.saved_retrieval_ratio);
    println!("items with new queries: {:.2}%", 100.0 * a.new_query_item_ratio);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let items = load_items(&args.dataset, args.json_array)?;
    let predictions = eval::load_predictions(&args.results).map_err(eval_error)?;
    let report = eval::report(&predictions, &items).map_err(eval_error)?;
    if let Some(out) = &args.out {
        write_file(out, &(to_json(&report) + "\n"))?;
    }
    if args.json {
        println!("{}", to_json(&report));
    } else {
        print!("{}", report.to_table(args.by_hops));
    }
    Ok(())
}

fn cmd_collect(s: &Settings, args: &CollectArgs) -> CliResult {
    let items = load_items(&args.dataset, args.json_array)?;
    let pipeline = s.pipeline()?;
    let manifest = datagen::collect(
        &pipeline,
        &items,
        &s.pipeline_config(),
        s.config.datagen,
        &args.out_dir,
        s.config.batch.parallel,
    )
    .map_err(|e| match e {
        DatagenError::InvalidPolicy(m) => CliError::Config(m),
        DatagenError::Batch(b) => pipeline_error(&b.error),
        other => CliError::Data(other.to_string()),
    })?;
    for (role, n) in &manifest.counts {
        println!("{:<16} {:>8}", role.as_str(), n);
    }
    println!("retained runs: {} of {} successful ({:.2}%)", manifest.retained_runs, manifest.succeeded, 100.0 * manifest.retention_rate);
    if !manifest.failed.is_empty() {
        println!("failed items: {}", manifest.failed.len());
    }
    if manifest.excluded_fallback > 0 {
        println!("excluded after builder fallback: {}", manifest.excluded_fallback);
    }
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> CliResult {
    let report = datagen::validate_corpus(&args.dir).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", report.to_table());
    println!("ok");
    Ok(())
}

fn parse_sweep(text: &str) -> Result<(Param, Vec<u64>), CliError> {
    let bad = || CliError::Config(format!("sweep {text:?} is not of the form <param>=<from>..<to>"));
    let (name, range) = text.split_once('=').ok_or_else(bad)?;
    let param: Param = name.trim().parse().map_err(CliError::Config)?;
    let (from, to) = range.split_once("..").ok_or_else(bad)?;
    let from: u64 = from.trim().parse().map_err(|_| bad())?;
    let to: u64 = to.trim().parse().map_err(|_| bad())?;
    if from > to {
        return Err(bad());
    }
    Ok((param, (from..=to).collect()))
}

fn cmd_cost(args: &CostArgs) -> CliResult {
    let params = CostParams::new(args.n, args.m, args.t, args.k, args.l);
    let retrieval = match &args.retrieve_fraction {
        Some(f) => RetrievalAssumption::parse_decimal(f).map_err(|e| CliError::Config(e.to_string()))?,
        None => RetrievalAssumption::Always,
    };

    if let Some(path) = &args.trace {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let report = compare_with_trace(&text, &params, retrieval).map_err(|e| match e {
            CostError::InvalidFraction(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(format!("{}: {e}", path.display())),
        })?;
        if args.json {
            println!("{}", to_json(&report));
        } else {
            print!("{}", report.to_table());
        }
        return Ok(());
    }

    let mut rows = match &args.sweep {
        Some(text) => {
            let (param, values) = parse_sweep(text)?;
            sweep(&params, param, values)
        }
        None => vec![compare(&params)],
    };
    for row in &mut rows {
        row.costs[0] = rolegraph_cost(&row.params, retrieval);
    }
    if args.json {
        println!("{}", to_json(&rows));
        return Ok(());
    }
    print!("{}", comparison_table(&rows));
    if args.breakdown {
        for c in rows.iter().flat_map(|r| &r.costs) {
            let p = c.params;
            println!();
            println!("{} (n={} m={} t={} k={} l={})", c.method.label(), p.n, p.m, p.t, p.k, p.l);
            for s in &c.stages {
                println!("  {:<22} in {:>10}  out {:>10}", s.stage, s.input.to_string(), s.output.to_string());
            }
            println!("  {:<22} in {:>10}  out {:>10}", "total", c.input.to_string(), c.output.to_string());
            if c.degenerate {
                println!("  (degenerate: no sub-queries)");
            }
        }
    }
    Ok(())
}

fn cmd_graph(s: &Settings, args: &GraphArgs) -> CliResult {
    let roles = s.roles()?;
    let mode = s.pipeline_config().graph_mode;
    let outcome = roles
        .run_graph_builder(&args.query, mode)
        .map_err(|e| CliError::Backend(format!("graph building failed: {e}")))?;
    let graph = &outcome.graph;
    if outcome.fallback {
        println!(
            "fallback: builder output rejected twice ({}); using the single-node plan",
            outcome.last_error.as_deref().unwrap_or("unknown reason")
        );
    } else if outcome.retried {
        println!("builder output accepted after one repair attempt");
    }
    println!("{}", graph.to_payload());
    let tiers = graph.tiers().map_err(|e| CliError::Data(e.to_string()))?;
    let tiers: Vec<String> = tiers
        .iter()
        .map(|t| t.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    println!("valid: {} nodes, final {}, tiers [{}]", graph.len(), graph.final_id, tiers.join("] ["));
    Ok(())
}

fn cmd_index(args: &IndexArgs) -> CliResult {
    let summary = build_index(&args.corpus).map_err(retrieval_error)?;
    println!("indexed {} documents, {} terms", summary.doc_count, summary.term_count);
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Index(a) => cmd_index(a),
        Command::Run(a) => cmd_run(&Settings::resolve(&cli.global)?, a),
        Command::Collect(a) => cmd_collect(&Settings::resolve(&cli.global)?, a),
        Command::Graph(a) => cmd_graph(&Settings::resolve(&cli.global)?, a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
