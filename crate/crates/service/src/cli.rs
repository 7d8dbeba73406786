//! Command-line entry points.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use habitus_core::corpus::{convert_nested, dataset_root_from_env, load_dataset, read_texts, run_pipeline, PipelineConfig, Split};
use habitus_core::gateway::CacheMode;
use habitus_core::generation::{DialogueState, GeneratedResponse, Generator, Mode, Turn};
use habitus_core::induction::Inducer;
use habitus_core::metrics::{evaluate_corpus, EvalReport, MetricMetadata};
use habitus_core::par::Exec;
use habitus_core::retrieval::EmbeddingIndex;
use habitus_core::schema::{Persona, PersonaFile, SchemaLibrary};

use crate::api::{serve, AppState};
use crate::config::{ProviderKind, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "habitus", version, about = "Persona dialogue grounded in habitual event schemas")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "HABITUS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Serve LLM calls only from this cache; never contact the provider.
    #[arg(long, global = true, value_name = "CACHE", conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Record LLM calls to this cache, reusing any already recorded.
    #[arg(long, global = true, value_name = "CACHE")]
    pub record: Option<PathBuf>,
    /// LLM provider: auto, mock or http.
    #[arg(long, global = true)]
    pub provider: Option<String>,
    /// Seed of the mock provider.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Induce schemas for every fact of a persona file.
    Induce(InduceArgs),
    /// Chat with a persona on stdin.
    Chat(ChatArgs),
    /// Generate a response for every item of a dataset.
    Generate(RunArgs),
    /// Like `generate`, with the dataset root taken from HABITUS_DATASET_ROOT by default.
    Run(RunArgs),
    /// Score generated responses against gold responses.
    Eval(EvalArgs),
    /// Convert a nested PersonaChat JSON file into per-split JSONL files.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory of the web client to serve at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InduceArgs {
    /// Persona JSON file: {"persona_id": .., "facts": [..]}.
    #[arg(long)]
    pub persona: PathBuf,
    /// Schema directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_passages: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub persona: PathBuf,
    #[arg(long, default_value = "uncs")]
    pub mode: Mode,
    /// Schema directory (defaults to the persona file's `schema_dir`).
    #[arg(long)]
    pub schemas: Option<PathBuf>,
    /// One raw utterance per line, used in order in paraphrase mode.
    #[arg(long)]
    pub raw_file: Option<PathBuf>,
    /// Where to write the JSON transcript (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = DialogueState::DEFAULT_SYSTEM_NAME)]
    pub system_name: String,
    #[arg(long, default_value = DialogueState::DEFAULT_USER_NAME)]
    pub user_name: String,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSONL file, or a directory holding `<split>.jsonl`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Keep existing output records and skip their items.
    #[arg(long)]
    pub resume: bool,
    /// Where induced schemas are kept per persona.
    #[arg(long)]
    pub schema_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Field of the gold file to read (defaults to text/response/gold_response/gold).
    #[arg(long)]
    pub gold_field: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip embedding similarity.
    #[arg(long)]
    pub no_st: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl Cli {
    pub fn service_config(&self) -> anyhow::Result<ServiceConfig> {
        let mut config = ServiceConfig::load(self.config.as_deref())?;
        if let Some(path) = &self.replay {
            config.cache.path = Some(path.clone());
            config.cache.mode = Some(CacheMode::Replay);
        }
        if let Some(path) = &self.record {
            config.cache.path = Some(path.clone());
            config.cache.mode = Some(CacheMode::Record);
        }
        if let Some(kind) = &self.provider {
            config.provider.kind = match kind.to_ascii_lowercase().as_str() {
                "auto" => ProviderKind::Auto,
                "mock" => ProviderKind::Mock,
                "http" => ProviderKind::Http,
                other => bail!("unknown provider {other:?} (expected auto, mock or http)"),
            };
        }
        if let Some(seed) = self.seed {
            config.provider.seed = seed;
        }
        Ok(config)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = cli.service_config()?;
    match &cli.command {
        Command::Serve(args) => {
            if let Some(bind) = &args.bind {
                config.bind = bind.clone();
            }
            if let Some(dir) = &args.data_dir {
                config.data_dir = dir.clone();
            }
            if let Some(dir) = &args.ui_dir {
                config.ui_dir = Some(dir.clone());
            }
            let state = AppState::new(config)?;
            tokio::runtime::Runtime::new()?.block_on(serve(state))
        }
        Command::Induce(args) => induce(&config, cli.exec(), args),
        Command::Chat(args) => chat(&config, args),
        Command::Generate(args) => {
            if args.dataset.is_none() {
                bail!("--dataset is required");
            }
            pipeline(&config, cli.exec(), args)
        }
        Command::Run(args) => pipeline(&config, cli.exec(), args),
        Command::Eval(args) => eval(&config, cli.exec(), args),
        Command::Ingest(args) => {
            for (split, n) in convert_nested(&args.input, &args.out_dir)? {
                eprintln!("{split}: {n} items");
            }
            Ok(())
        }
    }
}

/// `<out>.report.json` next to the schema directory.
fn report_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "schemas".into());
    name.push(".report.json");
    out.with_file_name(name)
}

fn induce(config: &ServiceConfig, exec: Exec, args: &InduceArgs) -> anyhow::Result<()> {
    let file = PersonaFile::read(&args.persona)?;
    let mut persona = Persona::new(file.persona_id.clone(), file.facts.clone());
    let library = SchemaLibrary::new(&args.out);
    if library.exists() {
        persona.schemas = library.load()?;
    }
    let mut induction = config.induction.clone();
    if let Some(n) = args.n_passages {
        induction.n_passages = n;
    }
    let gateway = config.build_gateway()?;
    let inducer = Inducer::new(&gateway, induction)
        .with_generation(config.generation.config.clone())
        .with_exec(exec);
    let (persona, report) = inducer.build_persona_schemas(persona);
    library.save(&persona.schemas)?;
    write_json(Some(&report_path(&args.out)), &report)?;
    eprintln!(
        "{}: {} induced, {} already present, {} failed",
        persona.persona_id,
        report.induced,
        report.skipped,
        report.failures.len()
    );
    for f in &report.failures {
        eprintln!("  fact {} ({:?}): {}", f.fact_index, f.fact, f.error);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ChatTranscript {
    persona_id: String,
    mode: Mode,
    system_name: String,
    user_name: String,
    turns: Vec<Turn>,
    responses: Vec<GeneratedResponse>,
}

fn chat(config: &ServiceConfig, args: &ChatArgs) -> anyhow::Result<()> {
    let file = PersonaFile::read(&args.persona)?;
    let mut persona = file.load_persona(&args.persona)?;
    let schema_dir = args.schemas.clone().or_else(|| file.resolved_schema_dir(&args.persona));
    if let Some(dir) = &args.schemas {
        persona.schemas = SchemaLibrary::new(dir).load()?;
    }
    let gateway = config.build_gateway()?;
    let embedder = config.build_embedder();
    let index = match args.mode {
        Mode::Baseline => None,
        _ if persona.schemas.is_empty() => bail!("persona has no schemas; run `habitus induce` first"),
        _ => Some(match &schema_dir {
            Some(dir) => EmbeddingIndex::load_or_build(&dir.join("embeddings.json"), &persona, &*embedder)?,
            None => EmbeddingIndex::build(&persona, &*embedder)?,
        }),
    };
    let mut raws = match &args.raw_file {
        Some(p) => fs::read_to_string(p)?.lines().map(str::to_owned).collect::<Vec<_>>().into_iter(),
        None => Vec::new().into_iter(),
    };
    let generator = Generator::new(&gateway, &*embedder)
        .with_settings(config.generation.clone())
        .with_examples(config.load_paraphrase_examples()?);
    let mut state = DialogueState::new(Arc::new(persona), args.mode).with_names(&args.system_name, &args.user_name);
    let mut responses = Vec::new();

    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        eprint!("{}> ", args.user_name);
        let Some(line) = lines.next().transpose()? else { break };
        let utterance = line.trim();
        if utterance.is_empty() {
            continue;
        }
        let raw = if args.mode == Mode::Paraphrase {
            match raws.next() {
                Some(r) => Some(r),
                None if args.raw_file.is_some() => bail!("raw file has fewer lines than the conversation"),
                None => {
                    eprint!("raw> ");
                    lines.next().transpose()?
                }
            }
        } else {
            None
        };
        let (next, response) = generator.take_turn(&state, index.as_ref(), utterance, raw.as_deref())?;
        println!("{}: {}", state.system_name, response.text);
        state = next;
        responses.push(response);
    }
    eprintln!();
    let transcript = ChatTranscript {
        persona_id: state.persona.persona_id.clone(),
        mode: state.mode,
        system_name: state.system_name.clone(),
        user_name: state.user_name.clone(),
        turns: state.turns.clone(),
        responses,
    };
    write_json(args.out.as_deref(), &transcript)
}

fn pipeline(config: &ServiceConfig, exec: Exec, args: &RunArgs) -> anyhow::Result<()> {
    let root = match &args.dataset {
        Some(p) => p.clone(),
        None => dataset_root_from_env()?,
    };
    let items = load_dataset(&root, args.split)?;
    let gateway = config.build_gateway()?;
    let embedder = config.build_embedder();
    let mut cfg = PipelineConfig::new(args.mode, &args.out);
    cfg.limit = args.limit;
    cfg.resume = args.resume;
    cfg.schema_root = args.schema_dir.clone();
    cfg.induction = config.induction.clone();
    cfg.generation = config.generation.clone();
    cfg.exec = exec;
    let summary = run_pipeline(items, &gateway, &*embedder, &cfg)?;
    eprintln!(
        "{} items: {} written ({} from an earlier run), {} failed, {} personas",
        summary.input,
        summary.output(),
        summary.resumed,
        summary.failures.len(),
        summary.personas
    );
    write_json(None, &summary)
}

fn eval(config: &ServiceConfig, exec: Exec, args: &EvalArgs) -> anyhow::Result<()> {
    let generated = read_texts(&args.generated, None)?;
    let gold = args.gold.as_deref().map(|p| read_texts(p, args.gold_field.as_deref())).transpose()?;
    let embedder = config.build_embedder();
    let st = !args.no_st && gold.is_some();
    let metrics = evaluate_corpus(&generated, gold.as_deref(), (!args.no_st).then_some(&*embedder), exec)?;
    let report = EvalReport { metadata: MetricMetadata::new(st.then(|| embedder.embedder_id())), metrics };
    write_json(args.out.as_deref(), &report)
}
