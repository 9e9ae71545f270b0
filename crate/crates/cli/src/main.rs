use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ragforge_core::corpus::ChunkConfig;
use ragforge_core::engine::{PipelineDef, Session, StepOutput, Trace};
use ragforge_core::evalstore::{display_similarity, run_suite, SuiteReport};
use ragforge_core::index::{IndexKey, RetrievalMethod};
use ragforge_core::project::Project;
use ragforge_server::{AppState, DEFAULT_PORT};

/// Interactive debugger for retrieval-augmented generation pipelines.
#[derive(Debug, Parser)]
#[command(name = "ragforge", version)]
struct Cli {
    /// Project directory holding ragforge.toml, the corpus and .ragforge/.
    #[arg(long, global = true, default_value = ".")]
    project: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Manage the pre-built index grid.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run the pipeline once and print each step.
    Run(RunArgs),
    /// Serve the debugging API.
    Serve(ServeArgs),
    /// Golden-answer regression suite.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// Build every missing index of the grid and print the manifest.
    Build(BuildArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Chunk configs as SIZE:OVERLAP, comma separated (default: project grid).
    #[arg(long, value_delimiter = ',', value_parser = parse_chunk_config)]
    configs: Vec<ChunkConfig>,
    /// Retrieval methods, comma separated (default: project grid).
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<RetrievalMethod>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Question to run (empty uses the pipeline's default query).
    #[arg(long, default_value = "")]
    query: String,
    /// Pipeline file (default: the project's).
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Print the full trace as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Re-run every golden query and score the answers.
    Run(EvalRunArgs),
    /// Run a query and save its answer (or the given text) as golden.
    Save(EvalSaveArgs),
}

#[derive(Debug, Args)]
struct EvalRunArgs {
    /// Pipeline file (default: the project's).
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Pass threshold on cosine similarity (default: project setting).
    #[arg(long, allow_negative_numbers = true, value_parser = parse_threshold)]
    threshold: Option<f64>,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalSaveArgs {
    #[arg(long)]
    query: String,
    /// Answer to save; when absent the pipeline is run and its answer saved.
    #[arg(long)]
    answer: Option<String>,
    /// Pipeline file (default: the project's).
    #[arg(long)]
    pipeline: Option<PathBuf>,
}

fn parse_chunk_config(s: &str) -> Result<ChunkConfig, String> {
    let (size, overlap) = s
        .split_once(':')
        .ok_or_else(|| format!("`{s}` is not SIZE:OVERLAP"))?;
    let size: usize = size.trim().parse().map_err(|e| format!("size in `{s}`: {e}"))?;
    let overlap: usize = overlap.trim().parse().map_err(|e| format!("overlap in `{s}`: {e}"))?;
    ChunkConfig::new(size, overlap).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<RetrievalMethod, String> {
    s.parse()
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (-1.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("{t} is outside [-1, 1]"))
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
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let project = Project::open(&cli.project)
        .with_context(|| format!("opening project {}", cli.project.display()))?;
    match cli.command {
        Command::Index(IndexCommand::Build(args)) => index_build(&project, args),
        Command::Run(args) => run(&project, args),
        Command::Serve(args) => serve(&project, args),
        Command::Eval(EvalCommand::Run(args)) => eval_run(&project, args),
        Command::Eval(EvalCommand::Save(args)) => eval_save(&project, args),
    }
}

fn load_pipeline(project: &Project, path: Option<&Path>) -> Result<PipelineDef> {
    match path {
        Some(p) => PipelineDef::load(p).with_context(|| format!("loading {}", p.display())),
        None => project.load_pipeline().context("loading the project pipeline"),
    }
}

fn index_build(project: &Project, args: BuildArgs) -> Result<ExitCode> {
    let cfg = project.config();
    let configs = if args.configs.is_empty() { cfg.grid_configs() } else { args.configs };
    let methods = if args.methods.is_empty() { cfg.grid.methods.clone() } else { args.methods };
    let report = project.build_indexes(&configs, &methods)?;
    let digest = project.corpus().digest();
    println!("{:<10} {:>6} {:>8} {:<10} {:>8} {:>9}", "size", "overlap", "chunks", "method", "nodes", "build_ms");
    for c in &configs {
        for &m in &methods {
            let key = IndexKey::new(digest, *c, m);
            if let Some(e) = report.manifest.get(&key) {
                println!(
                    "{:<10} {:>6} {:>8} {:<10} {:>8} {:>9}",
                    c.chunk_size(),
                    c.chunk_overlap(),
                    e.chunk_count,
                    m.as_str(),
                    e.node_count,
                    e.build_ms
                );
            }
        }
    }
    println!("{} built, {} reused", report.built.len(), report.reused.len());
    Ok(ExitCode::SUCCESS)
}

fn one_line(text: &str, max: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(max) {
        Some((b, _)) => format!("{}...", &flat[..b]),
        None => flat,
    }
}

fn print_trace(trace: &Trace) {
    for s in &trace.steps {
        let item = s.iteration.map(|i| format!(" #{}", i + 1)).unwrap_or_default();
        let summary = match &s.output {
            StepOutput::QueryText { text } => one_line(text, 100),
            StepOutput::Chunks { chunks, .. } => chunks
                .iter()
                .filter(|c| c.selected)
                .map(|c| format!("{} ({:.3})", c.chunk.chunk_id, c.score))
                .collect::<Vec<_>>()
                .join(", "),
            StepOutput::Generation { text, .. } => one_line(text, 100),
            StepOutput::FinalAnswer { .. } => String::new(),
        };
        println!("[{}] {} {}{} {}ms  {}", s.index, s.kind, s.step_name, item, s.duration_ms, summary);
    }
    if let Some(answer) = trace.final_answer() {
        println!("\nanswer:\n{answer}");
    }
}

fn run(project: &Project, args: RunArgs) -> Result<ExitCode> {
    let pipeline = load_pipeline(project, args.pipeline.as_deref())?;
    let session = Session::new(project.engine().clone(), pipeline)?;
    let result = session.run_pipeline(&args.query);
    // A failed run still leaves its partial trace.
    if let Some(trace) = session.active_trace() {
        if args.json {
            println!("{}", serde_json::to_string_pretty(&*trace)?);
        } else {
            print_trace(&trace);
        }
    }
    match result {
        Ok(_) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn serve(project: &Project, args: ServeArgs) -> Result<ExitCode> {
    let state = AppState::from_project(project).map_err(|e| anyhow::anyhow!("{}: {}", e.code, e.message))?;
    let loaded = project.store().warm(project.corpus().digest())?;
    tracing::info!(indexes = loaded, "index store warmed");
    let addr = SocketAddr::new(args.host, args.port);
    eprintln!("ragforge serving {} on http://{addr}", project.root().display());
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(ragforge_server::serve(state, addr))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &SuiteReport) {
    for r in &report.rows {
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        let score = r.similarity.map(display_similarity).unwrap_or_else(|| "-".into());
        println!("{verdict} {score:>5}  {}", one_line(&r.query_text, 70));
        if let Some(e) = &r.error {
            println!("      {}: {}", e.code, one_line(&e.message, 100));
        }
    }
    let mean = report.mean_similarity.map(display_similarity).unwrap_or_else(|| "-".into());
    println!(
        "{}/{} passed at threshold {}; mean similarity {mean}",
        report.pass_count,
        report.rows.len(),
        report.threshold
    );
}

fn eval_run(project: &Project, args: EvalRunArgs) -> Result<ExitCode> {
    let pipeline = load_pipeline(project, args.pipeline.as_deref())?;
    let threshold = args.threshold.unwrap_or(project.config().eval.threshold);
    let goldens = project.goldens().load()?;
    let engine = project.engine();
    let report = run_suite(engine, &pipeline, &goldens, engine.embedder(), threshold)?;
    print_report(&report);
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn eval_save(project: &Project, args: EvalSaveArgs) -> Result<ExitCode> {
    let pipeline = load_pipeline(project, args.pipeline.as_deref())?;
    let (answer, edited) = match args.answer {
        Some(a) => (a, true),
        None => {
            let session = Session::new(project.engine().clone(), pipeline.clone())?;
            let trace = session.run_pipeline(&args.query)?;
            let answer = trace.final_answer().context("the run produced no answer")?;
            (answer.to_string(), false)
        }
    };
    let g = project.goldens().save_answer(&args.query, &answer, &pipeline.digest(), edited)?;
    println!("saved golden {} for {:?}", g.query_id, g.query_text);
    Ok(ExitCode::SUCCESS)
}
