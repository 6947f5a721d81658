use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use halluspan::backend::Cache;
use halluspan::combination::{combination_report, combine_all, SystemOutput};
use halluspan::config::{MapperKind, RunConfig};
use halluspan::dataset::{read_jsonl, read_predictions, render_predictions, KeyMap};
use halluspan::detectors::DetectorKind;
use halluspan::io::write_atomic;
use halluspan::metrics::{evaluate_corpus, Conventions};
use halluspan::optimizer::{leakage_violations, optimize, Objective};
use halluspan::pipeline::{render_manifest, Pipeline};
use halluspan::retrieval::ContextMode;

#[derive(Parser, Debug)]
#[command(name = "halluspan", version, about = "Detect, score and combine hallucinated spans in LLM answers")]
struct Cli {
    /// More log output on stderr (repeatable). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run retrieve, detect and map over a JSONL corpus.
    Detect(DetectArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Combine several systems' hard labels into agreement-based soft labels.
    Combine(CombineArgs),
    /// Search for a better detection prompt on labeled data.
    Optimize(OptimizeArgs),
    /// Inspect or empty the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Args, Debug)]
struct Overrides {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Where context comes from: none, from_question or from_claims.
    #[arg(long, value_parser = parse_enum::<ContextMode>)]
    context_mode: Option<ContextMode>,
    /// Detector: direct, kg or min_revision.
    #[arg(long, value_parser = parse_enum::<DetectorKind>)]
    detector: Option<DetectorKind>,
    /// Span mapper: substring, fact_to_span or edit_distance.
    #[arg(long, value_parser = parse_enum::<MapperKind>)]
    mapper: Option<MapperKind>,
    /// Translate non-English queries before searching.
    #[arg(long)]
    translate: Option<bool>,
    /// Comma-separated language codes to process.
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<String>>,
    /// Worker threads for instance processing.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Disable the response cache even if the config sets one.
    #[arg(long)]
    no_cache: bool,
    /// Run seed, also used by the optimizer.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(v) = self.context_mode {
            cfg.context_mode = v;
        }
        if let Some(v) = self.detector {
            cfg.detector = v;
            if self.mapper.is_none() {
                cfg.mapper = None;
            }
        }
        if let Some(v) = self.mapper {
            cfg.mapper = Some(v);
        }
        if let Some(v) = self.translate {
            cfg.translate = v;
        }
        if let Some(v) = &self.languages {
            cfg.languages = v.clone();
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = Some(v.clone());
        }
        if self.no_cache {
            cfg.cache_dir = None;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    run: Overrides,
    /// Input corpus (JSONL).
    #[arg(short, long)]
    input: PathBuf,
    /// Prediction file; `<output>.errors.jsonl` and `<output>.manifest.json`
    /// are written beside it.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction file (JSONL).
    #[arg(long)]
    pred: PathBuf,
    /// Gold corpus (JSONL).
    #[arg(long)]
    gold: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Read gold field names and metric conventions from a run config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CombineArgs {
    /// Member system as TAG=PATH (repeatable).
    #[arg(long = "member", value_name = "TAG=PATH")]
    members: Vec<String>,
    /// TOML file with `[[member]]` tables holding `tag` and `path`.
    #[arg(long)]
    members_file: Option<PathBuf>,
    /// Combined prediction file (JSONL).
    #[arg(short, long)]
    output: PathBuf,
    /// Gold corpus; prints a member-vs-combined comparison when given.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Write the comparison as JSON.
    #[arg(long, requires = "gold")]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[command(flatten)]
    run: Overrides,
    /// Labeled corpus (JSONL).
    #[arg(short, long)]
    input: PathBuf,
    /// Run state; an existing compatible file is resumed.
    #[arg(long)]
    trace: PathBuf,
    /// Where to write the winning system prompt.
    #[arg(long)]
    best_prompt: PathBuf,
    /// Objective: iou, corr, max_iou or iou+corr.
    #[arg(long)]
    objective: Option<Objective>,
    /// Number of candidates to evaluate.
    #[arg(long)]
    budget: Option<usize>,
    /// Instruction to start from instead of the built-in one.
    #[arg(long)]
    seed_prompt: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum CacheAction {
    Stats(CacheArgs),
    Clear(CacheArgs),
}

#[derive(Args, Debug)]
struct CacheArgs {
    /// Cache directory.
    #[arg(long, conflicts_with = "config")]
    dir: Option<PathBuf>,
    /// Take the cache directory from a run config.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Fatal errors that exit with status 2, as opposed to per-instance failures.
struct Fatal(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(Fatal(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Joins the error chain, skipping causes an outer message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}

fn run(command: Command) -> Result<ExitCode, Fatal> {
    match command {
        Command::Detect(a) => detect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Combine(a) => combine(a),
        Command::Optimize(a) => optimize_cmd(a),
        Command::Cache { action } => cache(action),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn detect(a: DetectArgs) -> Result<ExitCode, Fatal> {
    let cfg = a.run.load()?;
    let instances = read_jsonl(&a.input, &cfg.keys)?;
    let pipeline = Pipeline::from_config(cfg)?;
    let out = pipeline.run(&instances)?;
    write(&a.output, &render_predictions(&out.predictions))?;
    let mut errors = String::new();
    for f in &out.failures {
        errors.push_str(&serde_json::to_string(f).expect("failure serializes"));
        errors.push('\n');
    }
    write(&sidecar(&a.output, ".errors.jsonl"), &errors)?;
    write(&sidecar(&a.output, ".manifest.json"), &render_manifest(&out.manifest))?;
    eprintln!(
        "{} predictions written to {}, {} failed",
        out.predictions.len(),
        a.output.display(),
        out.failures.len()
    );
    Ok(if out.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode, Fatal> {
    let (keys, conv) = match &a.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            (cfg.keys, cfg.conventions)
        }
        None => (KeyMap::default(), Conventions::default()),
    };
    let golds = read_jsonl(&a.gold, &keys)?;
    let preds = read_predictions(&a.pred)?;
    let report = evaluate_corpus(&preds, &golds, &conv)?;
    print!("{}", report.to_table());
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    match &a.json {
        Some(p) => write(p, &format!("{json}\n"))?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct MembersFile {
    member: Vec<Member>,
}

#[derive(Deserialize)]
struct Member {
    tag: String,
    path: PathBuf,
}

fn combine(a: CombineArgs) -> Result<ExitCode, Fatal> {
    let mut members: Vec<(String, PathBuf)> = Vec::new();
    if let Some(f) = &a.members_file {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let parsed: MembersFile = toml::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
        let base = f.parent().map(Path::to_path_buf).unwrap_or_default();
        members.extend(parsed.member.into_iter().map(|m| (m.tag, base.join(m.path))));
    }
    for m in &a.members {
        let (tag, path) = m.split_once('=').ok_or_else(|| anyhow!("member {m:?} is not TAG=PATH"))?;
        members.push((tag.to_string(), PathBuf::from(path)));
    }
    if members.len() < 2 {
        return Err(anyhow!("combine needs at least two member systems, got {}", members.len()).into());
    }
    let outputs = members
        .iter()
        .map(|(tag, path)| {
            let preds = read_predictions(path)?;
            Ok(SystemOutput::from_predictions(tag.clone(), &preds)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let combined = combine_all(&outputs)?;
    write(&a.output, &render_predictions(&combined))?;
    if let Some(gold) = &a.gold {
        let golds = read_jsonl(gold, &KeyMap::default())?;
        let report = combination_report(&outputs, &golds, &Conventions::default())?;
        print!("{}", report.to_table());
        if let Some(p) = &a.report {
            let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
            write(p, &format!("{json}\n"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn optimize_cmd(a: OptimizeArgs) -> Result<ExitCode, Fatal> {
    let cfg = a.run.load()?;
    let mut opt = cfg.optimizer.clone();
    opt.seed = cfg.seed;
    opt.conventions = cfg.conventions;
    if let Some(o) = a.objective {
        opt.objective = o;
    }
    if let Some(b) = a.budget {
        opt.budget = b;
    }
    if cfg.detector != DetectorKind::Direct {
        return Err(anyhow!("prompt optimization applies to the direct detector only").into());
    }
    let instances = read_jsonl(&a.input, &cfg.keys)?;
    let seed_prompt = a
        .seed_prompt
        .as_ref()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let pipeline = Pipeline::from_config(cfg)?;
    let mut contexts = HashMap::new();
    for inst in &instances {
        if let (Some(ctx), _) = pipeline.context_for(inst)? {
            contexts.insert(inst.id.clone(), ctx);
        }
    }
    let llm = Arc::clone(&pipeline.backends().llm);
    let run = optimize(&instances, &contexts, llm.as_ref(), seed_prompt.as_deref(), &opt, Some(&a.trace))?;
    let leaks = leakage_violations(&run);
    if !leaks.is_empty() {
        return Err(anyhow!("demo leakage detected: {}", leaks.join("; ")).into());
    }
    let best = run.best.as_ref().ok_or_else(|| anyhow!("no candidate was evaluated"))?;
    write(&a.best_prompt, &best.deployment_prompt())?;
    eprintln!(
        "evaluated {} candidates; best {} scored {:.4} ({})",
        run.trace.len(),
        best.id,
        run.best_mean.unwrap_or(f64::NAN),
        opt.objective.name()
    );
    Ok(ExitCode::SUCCESS)
}

fn cache(action: CacheAction) -> Result<ExitCode, Fatal> {
    let (args, clear) = match action {
        CacheAction::Stats(a) => (a, false),
        CacheAction::Clear(a) => (a, true),
    };
    let dir = match (args.dir, args.config) {
        (Some(d), _) => d,
        (None, Some(c)) => RunConfig::load(&c)?
            .cache_dir
            .ok_or_else(|| anyhow!("{} does not set cache_dir", c.display()))?,
        (None, None) => return Err(anyhow!("pass --dir or --config").into()),
    };
    let cache = Cache::open(&dir).with_context(|| format!("opening cache {}", dir.display()))?;
    if clear {
        let n = cache.clear()?;
        println!("removed {n} entries from {}", dir.display());
    } else {
        let (n, bytes) = cache.disk_usage()?;
        println!("{}: {n} entries, {bytes} bytes", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}
