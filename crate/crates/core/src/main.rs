use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use recall_core::decoder::DecoderConfig;
use recall_core::eval::{self, BatchOptions, EndpointConfig, EvalResult, HttpBackend, StubBackend, Usage};
use recall_core::metrics::score_answer;
use recall_core::reward::{
    composite_reward, format_reward, retrieval_breakdown, FormatRules, RewardTable, DEFAULT_ANSWER_PATTERN,
    DEFAULT_END_MARKER, DEFAULT_START_MARKER,
};
use recall_core::service::{self, MaskService};
use recall_core::sim::{self, MockPolicy};
use recall_core::taskgen::{
    self, CandidateKind, CharHeuristic, MathFamily, NeedleValueType, QueryPosition, StoreFormat, TaskCategory,
    TaskExtras, TaskInstance, TaskSpec,
};

#[derive(Parser)]
#[command(name = "recall", version, about = "Recall-span decoding, rewards and synthetic long-context tasks")]
struct Cli {
    /// TOML file with [gen], [score], [eval], [mask_serve] and [simulate]
    /// tables whose keys mirror the flags. Flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic tasks as JSONL.
    Gen(GenArgs),
    /// Score completions against gold tasks with the composite reward.
    Score(ScoreArgs),
    /// Send tasks to a chat-completions endpoint (or the offline stub).
    Eval(EvalArgs),
    /// Serve decoder sessions over HTTP or stdio.
    MaskServe(ServeArgs),
    /// Run mock decoding episodes and check every span.
    Simulate(SimArgs),
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct GenArgs {
    /// kv_retrieval, reasoning_retrieval, multi_niah, majority_vote, top_n_vote
    #[arg(long)]
    category: Option<String>,
    /// Target prompt size in tokens [default: 4000]
    #[arg(long)]
    length: Option<usize>,
    /// Base seed; instance i uses seed + i [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of instances [default: 1]
    #[arg(long)]
    count: Option<usize>,
    /// csv, json, lines or mixed [default: mixed]
    #[arg(long)]
    format: Option<String>,
    /// before, after, both or mixed [default: mixed]
    #[arg(long)]
    query_position: Option<String>,
    /// Instruction template id [default: seeded choice]
    #[arg(long)]
    template: Option<usize>,
    #[arg(long)]
    target_keys: Option<usize>,
    #[arg(long)]
    distractor_needles: Option<usize>,
    #[arg(long)]
    values_per_key: Option<usize>,
    /// number, word, uuid or alnum
    #[arg(long)]
    value_type: Option<String>,
    #[arg(long)]
    candidates: Option<usize>,
    /// names, places, letters or numbers
    #[arg(long)]
    candidate_kind: Option<String>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    /// linear or arithmetic [default: seeded choice]
    #[arg(long)]
    math_family: Option<String>,
    /// JSONL file of full task specs; replaces the per-task flags
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output file [default: stdout]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct ScoreArgs {
    /// Results JSONL (eval output, or lines with task_id and completion)
    #[arg(long)]
    results: Option<PathBuf>,
    /// Task JSONL from `gen`
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Reward table TOML layered over the built-in table
    #[arg(long)]
    reward_config: Option<PathBuf>,
    #[arg(long)]
    start_marker: Option<String>,
    #[arg(long)]
    end_marker: Option<String>,
    /// Report file [default: stdout]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    /// Task JSONL from `gen`
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Results JSONL [default: stdout]
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Summary JSON file [default: stderr]
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Answer from gold data instead of calling an endpoint
    #[arg(long)]
    stub: bool,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable with the bearer token [default: OPENAI_API_KEY]
    #[arg(long)]
    api_key_env: Option<String>,
    /// Send no Authorization header
    #[arg(long)]
    no_auth: bool,
    /// [default: 0.6]
    #[arg(long)]
    temperature: Option<f64>,
    /// [default: 0.95]
    #[arg(long)]
    top_p: Option<f64>,
    /// [default: 8192]
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Per-request timeout in seconds [default: 600]
    #[arg(long)]
    timeout: Option<f64>,
    /// Maximum requests in flight [default: 8]
    #[arg(long)]
    concurrency: Option<usize>,
    /// Retries for connection errors, 429 and 5xx [default: 2]
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    system_prompt: Option<String>,
    #[arg(long)]
    system_prompt_file: Option<PathBuf>,
    /// JSONL of {"id": ..., "prefix": ...}; each prefix is sent as a partial
    /// assistant turn for that task
    #[arg(long)]
    inject_prefix_at: Option<PathBuf>,
    #[arg(long)]
    reward_config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct ServeArgs {
    /// Address to listen on [default: 127.0.0.1:8765]
    #[arg(long)]
    bind: Option<String>,
    /// Read requests from stdin and answer on stdout instead of HTTP
    #[arg(long)]
    stdio: bool,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct SimArgs {
    /// [default: 100]
    #[arg(long)]
    episodes: Option<usize>,
    /// Vocabulary size including the two delimiters [default: 256]
    #[arg(long)]
    vocab: Option<usize>,
    /// Prompt length in tokens [default: 4096]
    #[arg(long)]
    context_len: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    max_steps: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// random, adversarial [default: random]
    #[arg(long)]
    policy: Option<String>,
    /// [default: 0.05]
    #[arg(long)]
    open_probability: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    close_probability: Option<f64>,
    /// Write the first episode's step trace here as JSONL
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Overlays explicitly given flags on the config-file table.
fn merge<T: Serialize + DeserializeOwned>(flags: T, config: &Option<toml::Table>, section: &str) -> Result<T> {
    let Some(table) = config.as_ref().and_then(|c| c.get(section)) else {
        return Ok(flags);
    };
    let mut base = serde_json::to_value(table).context("reading config")?;
    let over = serde_json::to_value(&flags)?;
    if let (Value::Object(b), Value::Object(o)) = (&mut base, over) {
        for (k, v) in o {
            if !(v.is_null() || v == Value::Bool(false)) {
                b.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).with_context(|| format!("invalid [{section}] table in config"))
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<toml::Table>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    })
}

fn parse_opt<T: std::str::FromStr<Err = String>>(v: &Option<String>, what: &str) -> Result<Option<T>> {
    v.as_deref()
        .filter(|s| *s != "mixed")
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("--{what}: {e}")))
        .transpose()
}

fn parse_value_type(s: &str) -> Result<NeedleValueType> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| anyhow!("--value-type: unknown {s:?}"))
}

fn parse_candidate_kind(s: &str) -> Result<CandidateKind> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| anyhow!("--candidate-kind: unknown {s:?}"))
}

fn parse_math_family(s: &str) -> Result<MathFamily> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| anyhow!("--math-family: unknown {s:?}"))
}

fn specs_from_flags(a: &GenArgs) -> Result<Vec<TaskSpec>> {
    let category: TaskCategory = a
        .category
        .as_deref()
        .ok_or_else(|| anyhow!("--category is required (or pass --spec FILE)"))?
        .parse()
        .map_err(|e| anyhow!("--category: {e}"))?;
    let format: Option<StoreFormat> = parse_opt(&a.format, "format")?;
    let position: Option<QueryPosition> = parse_opt(&a.query_position, "query-position")?;
    let d = TaskExtras::default();
    let extras = TaskExtras {
        target_keys: a.target_keys.unwrap_or(d.target_keys),
        distractor_needles: a.distractor_needles.unwrap_or(d.distractor_needles),
        values_per_key: a.values_per_key.unwrap_or(d.values_per_key),
        value_type: a.value_type.as_deref().map(parse_value_type).transpose()?.unwrap_or(d.value_type),
        candidate_count: a.candidates.unwrap_or(d.candidate_count),
        vote_margin: a.margin.unwrap_or(d.vote_margin),
        top_n: a.top_n.unwrap_or(d.top_n),
        candidate_kind: a
            .candidate_kind
            .as_deref()
            .map(parse_candidate_kind)
            .transpose()?
            .unwrap_or(d.candidate_kind),
        math_family: a.math_family.as_deref().map(parse_math_family).transpose()?,
    };
    let seed = a.seed.unwrap_or(0);
    let length = a.length.unwrap_or(4000);
    Ok((0..a.count.unwrap_or(1))
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            // "mixed" axes are drawn per instance from its own seed
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed_f00d);
            TaskSpec {
                category,
                target_length: length,
                store_format: format.unwrap_or_else(|| *StoreFormat::ALL.choose(&mut rng).unwrap()),
                query_position: position.unwrap_or_else(|| *QueryPosition::ALL.choose(&mut rng).unwrap()),
                seed: s,
                template: a.template,
                extras: extras.clone(),
            }
        })
        .collect())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let specs = match &a.spec {
        Some(p) => eval::read_jsonl::<TaskSpec>(p)?,
        None => specs_from_flags(&a)?,
    };
    let mut out = output(&a.out)?;
    for (spec, inst) in specs.iter().zip(taskgen::generate_batch(&specs)) {
        let inst = inst.with_context(|| format!("generating {} (seed {})", spec.category, spec.seed))?;
        serde_json::to_writer(&mut out, &inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct ScoreInput {
    #[serde(alias = "id")]
    task_id: String,
    #[serde(default)]
    completion: Option<String>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Serialize)]
struct ItemReport {
    task_id: String,
    category: String,
    r: f64,
    r_format: f64,
    r_ans: f64,
    r_ret: f64,
    mean_overlap: f64,
    p_density: f64,
    p_correct: f64,
    n_spans: usize,
    n_short: usize,
    n_mismatch: usize,
}

#[derive(Serialize, Default)]
struct Aggregate {
    n: usize,
    r: f64,
    r_format: f64,
    r_ans: f64,
    r_ret: f64,
    p_density: f64,
    p_correct: f64,
}

fn score_item(
    input: &ScoreInput,
    task: &TaskInstance,
    table: &RewardTable,
    rules: &FormatRules,
) -> Result<ItemReport> {
    let cfg = table.get(task.category.as_str())?;
    let completion = input.completion.as_deref().unwrap_or("");
    let reported = input
        .usage
        .as_ref()
        .and_then(|u| u.completion_tokens)
        .map(|n| n as usize);
    let record = eval::completion_record(
        completion,
        &task.prompt,
        &rules.start_marker,
        &rules.end_marker,
        reported,
        &CharHeuristic,
    );
    let r_format = format_reward(completion, rules);
    let r_ans = score_answer(cfg.answer_metric, record.answer.as_deref(), &task.gold_answers)?;
    let ret = retrieval_breakdown(&record, &task.gold_intervals, &cfg.retrieval)?;
    let r = composite_reward(r_format, r_ans, ret.value, &table.composite)?;
    Ok(ItemReport {
        task_id: task.id.clone(),
        category: task.category.to_string(),
        r,
        r_format,
        r_ans,
        r_ret: ret.value,
        mean_overlap: ret.mean_overlap,
        p_density: ret.p_density,
        p_correct: ret.p_correct,
        n_spans: record.n_spans(),
        n_short: record.n_short(cfg.retrieval.min_span_chars),
        n_mismatch: record.n_mismatch(),
    })
}

fn reward_table(path: &Option<PathBuf>) -> Result<RewardTable> {
    Ok(match path {
        Some(p) => RewardTable::load(p)?,
        None => RewardTable::builtin(),
    })
}

fn load_tasks(path: &Path) -> Result<HashMap<String, TaskInstance>> {
    Ok(eval::read_jsonl::<TaskInstance>(path)?
        .into_iter()
        .map(|t| (t.id.clone(), t))
        .collect())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let results_path = a.results.as_ref().ok_or_else(|| anyhow!("--results is required"))?;
    let gold_path = a.gold.as_ref().ok_or_else(|| anyhow!("--gold is required"))?;
    let results: Vec<ScoreInput> = eval::read_jsonl(results_path)?;
    if results.is_empty() {
        bail!("{} contains no results", results_path.display());
    }
    let tasks = load_tasks(gold_path)?;
    let table = reward_table(&a.reward_config)?;
    let rules = FormatRules::new(
        a.start_marker.as_deref().unwrap_or(DEFAULT_START_MARKER),
        a.end_marker.as_deref().unwrap_or(DEFAULT_END_MARKER),
        None,
        DEFAULT_ANSWER_PATTERN,
    )?;

    let mut items = Vec::new();
    let mut unmatched = Vec::new();
    for input in &results {
        match tasks.get(&input.task_id) {
            Some(task) => items.push(score_item(input, task, &table, &rules)?),
            None => unmatched.push(input.task_id.clone()),
        }
    }
    if !unmatched.is_empty() {
        eprintln!("warning: {} result(s) have no gold task and were skipped: {}", unmatched.len(), unmatched.join(", "));
    }
    if items.is_empty() {
        bail!("no result matched a gold task id");
    }

    let mut overall = Aggregate::default();
    let mut by_cat: BTreeMap<String, Aggregate> = BTreeMap::new();
    for it in &items {
        for agg in [&mut overall, by_cat.entry(it.category.clone()).or_default()] {
            agg.n += 1;
            agg.r += it.r;
            agg.r_format += it.r_format;
            agg.r_ans += it.r_ans;
            agg.r_ret += it.r_ret;
            agg.p_density += it.p_density;
            agg.p_correct += it.p_correct;
        }
    }
    for agg in std::iter::once(&mut overall).chain(by_cat.values_mut()) {
        let n = agg.n as f64;
        agg.r /= n;
        agg.r_format /= n;
        agg.r_ans /= n;
        agg.r_ret /= n;
        agg.p_density /= n;
        agg.p_correct /= n;
    }
    let report = serde_json::json!({
        "items": items,
        "aggregate": overall,
        "per_category": by_cat,
        "unmatched": unmatched,
    });
    let mut out = output(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct PrefixLine {
    #[serde(alias = "task_id")]
    id: String,
    prefix: String,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let tasks_path = a.tasks.as_ref().ok_or_else(|| anyhow!("--tasks is required"))?;
    let tasks: Vec<TaskInstance> = eval::read_jsonl(tasks_path)?;
    let d = EndpointConfig::default();
    let endpoint = EndpointConfig {
        base_url: a.base_url.clone().unwrap_or(d.base_url),
        model: a.model.clone().unwrap_or(d.model),
        api_key_env: if a.no_auth { None } else { a.api_key_env.clone().or(d.api_key_env) },
        temperature: a.temperature.unwrap_or(d.temperature),
        top_p: a.top_p.unwrap_or(d.top_p),
        max_tokens: a.max_tokens.unwrap_or(d.max_tokens),
        timeout_secs: a.timeout.unwrap_or(d.timeout_secs),
        max_concurrent: a.concurrency.unwrap_or(d.max_concurrent),
        retries: a.retries.unwrap_or(d.retries),
    };
    let mut opts = BatchOptions::from_endpoint(&endpoint);
    opts.table = reward_table(&a.reward_config)?;
    if let Some(p) = &a.system_prompt_file {
        opts.system_prompt = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    } else if let Some(s) = &a.system_prompt {
        opts.system_prompt = s.clone();
    }
    if let Some(p) = &a.inject_prefix_at {
        let lines: Vec<PrefixLine> = eval::read_jsonl(p)?;
        opts.prefixes = lines.into_iter().map(|l| (l.id, l.prefix)).collect();
    }

    let rt = tokio::runtime::Runtime::new()?;
    let results: Vec<EvalResult> = if a.stub {
        rt.block_on(eval::run_batch(&tasks, Arc::new(StubBackend::default()), &opts))
    } else {
        let backend = HttpBackend::new(&endpoint)?;
        rt.block_on(eval::run_batch(&tasks, Arc::new(backend), &opts))
    };

    let mut out = output(&a.out)?;
    eval::write_jsonl(&results, &mut out)?;
    drop(out);
    let summary = serde_json::to_string_pretty(&eval::summarize(&results))?;
    match &a.summary {
        Some(p) => std::fs::write(p, summary + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => eprintln!("{summary}"),
    }
    if !results.is_empty() && results.iter().all(|r| r.completion.is_none()) {
        let first = results[0].error.as_deref().unwrap_or("unknown error");
        bail!("every request failed; first error: {first}");
    }
    Ok(())
}

fn cmd_mask_serve(a: ServeArgs) -> Result<()> {
    let svc = Arc::new(MaskService::new());
    let rt = tokio::runtime::Runtime::new()?;
    if a.stdio {
        return rt
            .block_on(service::serve_stdio(svc, tokio::io::stdin(), tokio::io::stdout()))
            .context("stdio service");
    }
    let bind = a.bind.as_deref().unwrap_or("127.0.0.1:8765");
    let addr: std::net::SocketAddr = bind.parse().with_context(|| format!("--bind {bind:?} is not a socket address"))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("mask service listening on http://{}/v1/mask", listener.local_addr()?);
        service::serve_listener(listener, svc).await.context("serving")
    })
}

fn cmd_simulate(a: SimArgs) -> Result<()> {
    let vocab = a.vocab.unwrap_or(256);
    if vocab < 3 {
        bail!("--vocab must be at least 3");
    }
    let cfg = DecoderConfig::new(vocab as u32 - 2, vocab as u32 - 1, vocab);
    let seed = a.seed.unwrap_or(0);
    let open_p = a.open_probability.unwrap_or(0.05);
    let close_p = a.close_probability.unwrap_or(0.1);
    let adversarial = match a.policy.as_deref().unwrap_or("random") {
        "random" => false,
        "adversarial" => true,
        other => bail!("--policy: unknown {other:?} (expected random or adversarial)"),
    };
    let (mut spans, mut violations, mut rejected) = (0usize, 0usize, 0usize);
    for i in 0..a.episodes.unwrap_or(100) {
        let s = seed.wrapping_add(i as u64);
        let prompt = sim::random_prompt(a.context_len.unwrap_or(4096), vocab, s);
        let policy = if adversarial {
            MockPolicy::Adversarial {
                seed: s,
                span_open_probability: open_p,
                span_close_probability: close_p,
            }
        } else {
            MockPolicy::SeededRandom {
                seed: s,
                span_open_probability: open_p,
                span_close_probability: close_p,
            }
        };
        let ep = sim::run_episode(prompt, &policy, cfg.clone(), a.max_steps.unwrap_or(512))?;
        if i == 0 {
            if let Some(p) = &a.trace {
                sim::write_trace(&ep.trace, std::io::BufWriter::new(std::fs::File::create(p)?))?;
            }
        }
        spans += ep.spans.len();
        violations += ep.spans.iter().filter(|sp| !sim::span_is_faithful(sp, ep.context())).count();
        rejected += ep.trace.iter().filter(|r| r.rejected.is_some()).count();
    }
    println!(
        "{}",
        serde_json::json!({ "spans": spans, "violations": violations, "rejected_attempts": rejected })
    );
    if violations > 0 {
        bail!("{violations} span(s) are not contiguous substrings of their context");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(merge(a, &config, "gen")?),
        Command::Score(a) => cmd_score(merge(a, &config, "score")?),
        Command::Eval(a) => cmd_eval(merge(a, &config, "eval")?),
        Command::MaskServe(a) => cmd_mask_serve(merge(a, &config, "mask_serve")?),
        Command::Simulate(a) => cmd_simulate(merge(a, &config, "simulate")?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
