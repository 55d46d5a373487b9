use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use construct_core::config::{ConfigError, RunConfig};
use construct_core::gateway::{mock_router, MockBackend, MockFixture};
use construct_core::metrics::render_table;
use construct_core::pipeline::{derived_snapshot, Pipeline, PipelineError};
use construct_core::review::api::review_router;
use construct_core::review::{CandidateQuery, CandidateSort, DecisionInput};

#[derive(Parser)]
#[command(
    name = "construct",
    version,
    about = "LLM-assisted latent construct discovery and classification"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "construct.toml")]
    config: PathBuf,
    /// Run directory holding the event log and derived files.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read the corpus into documents.
    Ingest,
    /// Split documents into units and apply the token guard.
    Segment,
    /// Two-step construct detection (frame pipelines only).
    Detect,
    /// Short summaries for class generation.
    Summarize,
    /// Plan overlapping batches and propose candidate classes.
    Genclasses,
    /// Headless review of the candidate registry.
    Review {
        #[command(subcommand)]
        action: ReviewCommand,
    },
    /// Serve the review API over HTTP.
    ReviewServe {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Fit ratings and final label selection against the finalized class set.
    Classify,
    /// Score results against a two-coder gold table.
    Eval {
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Rebuild derived files from the event log and report which changed.
    Replay,
    /// All stages in order; review and classification need --decisions
    /// (or an already finalized review).
    Run {
        #[arg(long)]
        decisions: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Serve a mock fixture over the chat-completion wire format.
    MockServe {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: SocketAddr,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigCommand,
    },
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Print candidate classes as JSON.
    List {
        /// Filter by status (repeatable): proposed, kept, merged, discarded.
        #[arg(long)]
        status: Vec<String>,
        #[arg(long, default_value = "count_desc")]
        sort: String,
        /// Example texts per candidate.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Apply decisions from a file (a JSON array or one object per line).
    Apply {
        #[arg(long)]
        decisions: PathBuf,
    },
    /// Print the finalized class set.
    Export,
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Validate the config and print its hash.
    Check,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Pipeline(PipelineError::Config(_)) => "config",
            CliError::Pipeline(PipelineError::Review(_)) => "review",
            CliError::Pipeline(PipelineError::Store(_)) => "store",
            CliError::Pipeline(PipelineError::Corpus(_)) => "corpus",
            CliError::Pipeline(PipelineError::Metrics(_)) => "metrics",
            CliError::Pipeline(PipelineError::Backend(_) | PipelineError::Stage(_)) => "backend",
            CliError::Pipeline(_) => "pipeline",
            CliError::Input(_) => "input",
        }
    }

    fn to_json(&self) -> Value {
        let mut err = json!({"kind": self.kind(), "message": self.to_string()});
        let problems = match self {
            CliError::Config(c) | CliError::Pipeline(PipelineError::Config(c)) => c.problems(),
            _ => Vec::new(),
        };
        if !problems.is_empty() {
            err["problems"] = json!(problems);
        }
        json!({ "error": err })
    }

    fn exit_code(&self) -> u8 {
        if self.kind() == "config" {
            2
        } else {
            1
        }
    }
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn read_decisions(path: &Path) -> Result<Vec<DecisionInput>, CliError> {
    let src = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Input(format!("bad decision in {}: {e}", path.display()));
    if src.trim_start().starts_with('[') {
        return serde_json::from_str(&src).map_err(bad);
    }
    src.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(bad))
        .collect()
}

fn parse_word<T: serde::de::DeserializeOwned>(what: &str, word: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(word.to_string()))
        .map_err(|_| CliError::Input(format!("unknown {what} {word:?}")))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Input(format!("cannot start runtime: {e}")))
}

fn serve(router: axum::Router, addr: SocketAddr) -> Result<(), CliError> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Input(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{}", listener.local_addr().unwrap_or(addr));
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Input(e.to_string()))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::MockServe { fixture, addr } = &cli.command {
        let f = MockFixture::load(fixture).map_err(CliError::Input)?;
        let mock = MockBackend::new(f).map_err(CliError::Input)?;
        return serve(mock_router(Arc::new(mock)), *addr);
    }
    let config = RunConfig::load(&cli.config)?;
    if let Command::Config {
        action: ConfigCommand::Check,
    } = &cli.command
    {
        let templates =
            construct_core::prompts::TemplateSet::load(config.pipeline_kind, config.templates_dir.as_deref())
                .map_err(PipelineError::from)?;
        print(&json!({
            "ok": true,
            "pipeline_kind": config.pipeline_kind,
            "config_hash": config.config_hash(&templates)?,
        }));
        return Ok(());
    }
    let pipeline = Pipeline::open(config, &cli.run)?;
    match cli.command {
        Command::Ingest => print(&pipeline.ingest()?),
        Command::Segment => print(&pipeline.segment()?),
        Command::Detect => print(&pipeline.detect()?),
        Command::Summarize => print(&pipeline.summarize()?),
        Command::Genclasses => print(&pipeline.genclasses()?),
        Command::Review { action } => match action {
            ReviewCommand::List {
                status,
                sort,
                k,
                offset,
                limit,
            } => {
                let query = CandidateQuery {
                    status: status
                        .iter()
                        .map(|s| parse_word("status", s))
                        .collect::<Result<_, _>>()?,
                    sort: parse_word::<CandidateSort>("sort", &sort)?,
                    examples: Some(k),
                    offset,
                    limit,
                };
                print(&pipeline.review_service()?.list_candidates(&query));
            }
            ReviewCommand::Apply { decisions } => {
                let n = pipeline.apply_decisions(read_decisions(&decisions)?)?;
                let svc = pipeline.review_service()?;
                print(&json!({
                    "applied": n,
                    "finalized": svc.is_finalized(),
                    "registry_hash": svc.registry_hash(),
                }));
            }
            ReviewCommand::Export => print(&pipeline.final_set()?),
        },
        Command::ReviewServe { addr } => {
            let svc = pipeline.review_service()?;
            serve(review_router(Arc::new(Mutex::new(svc))), addr)?;
            pipeline.write_derived()?;
        }
        Command::Classify => print(&pipeline.classify()?),
        Command::Eval { gold } => {
            let report = pipeline.eval(gold.as_deref())?;
            print!("{}", render_table(&report));
        }
        Command::Replay => {
            let before = derived_snapshot(pipeline.dir()).map_err(|e| CliError::Input(e.to_string()))?;
            let written = pipeline.write_derived()?;
            let after = derived_snapshot(pipeline.dir()).map_err(|e| CliError::Input(e.to_string()))?;
            let files: Vec<Value> = written
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .map(|name| {
                    let same = before.get(&name) == after.get(&name);
                    json!({"file": name, "unchanged": same})
                })
                .collect();
            print(&json!({ "files": files }));
        }
        Command::Run { decisions, gold } => {
            let decisions = decisions.as_deref().map(read_decisions).transpose()?;
            print(&pipeline.run_all(decisions, gold.as_deref())?);
        }
        Command::MockServe { .. } | Command::Config { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("CONSTRUCT_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
