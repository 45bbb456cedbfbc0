use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use metamem::bench::{self, Report};
use metamem::{FilterExpr, KnowledgeId, RunOptions};
use metamem_cli::service::{self, AppState, MemoryView};
use metamem_cli::setup;

#[derive(Parser)]
#[command(name = "metamem", version, about = "Long-term memory with credibility tracking for LLM agents")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Append-only store log; created if missing.
    #[arg(long, global = true, default_value = "metamem.jsonl")]
    store: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer a query and print the validated response.
    Query {
        query: String,
        /// Offline scenario file with scripted replies, search results and documents.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        max_depth: Option<usize>,
        /// Print the full trace as JSON.
        #[arg(long)]
        trace: bool,
    },
    /// Inspect and edit long-term memory.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Run a desk-scale evaluation protocol.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MemoryCommand {
    /// Replace the store contents with a snapshot file.
    Import { file: PathBuf },
    /// Write a snapshot file.
    Export { file: PathBuf },
    List {
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// One JSON object per line instead of a table.
        #[arg(long)]
        json: bool,
    },
    Add {
        #[arg(long)]
        context: String,
        #[arg(long)]
        value: String,
    },
    Update {
        id: KnowledgeId,
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        value: Option<String>,
    },
    Rm { id: KnowledgeId },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Reasoning,
    Metabolism,
    Manipulation,
}

#[derive(Args)]
struct BenchArgs {
    protocol: Protocol,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory for `<protocol>.csv` and `<protocol>.txt`.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Cases (reasoning) or facts (manipulation).
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Probability of flipping each metabolism verdict.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Manipulation backend also knows the original facts.
    #[arg(long)]
    intrinsic: bool,
}

fn write<R: Report>(out: &Path, report: &R) -> anyhow::Result<()> {
    let (csv, _) = bench::write_report(out, report)?;
    print!("{}", report.summary());
    eprintln!("wrote {}", csv.display());
    Ok(())
}

fn run_bench(args: &BenchArgs) -> anyhow::Result<()> {
    match args.protocol {
        Protocol::Reasoning => write(&args.out, &bench::bench_reasoning(args.n, args.hops, args.seed)?),
        Protocol::Metabolism => write(
            &args.out,
            &bench::bench_metabolism(args.pairs, args.epochs, args.seed, args.noise)?,
        ),
        Protocol::Manipulation => {
            let r = if args.intrinsic {
                bench::bench_manipulation_intrinsic(args.n, args.seed)?
            } else {
                bench::bench_manipulation(args.n, args.seed)?
            };
            write(&args.out, &r)
        }
    }
}

fn run_memory(cli: &Cli, cmd: &MemoryCommand) -> anyhow::Result<()> {
    let cfg = setup::load_config(cli.config.as_deref())?;
    let store = setup::open_store(&cfg, Some(&cli.store))?;
    match cmd {
        MemoryCommand::Import { file } => {
            let n = store.import(file)?;
            println!("imported {n} records");
        }
        MemoryCommand::Export { file } => {
            let n = store.export(file)?;
            println!("exported {n} records");
        }
        MemoryCommand::List { filter, k, json } => {
            let records = match filter {
                Some(f) => store.keyword_search(&FilterExpr::parse(f)?),
                None => store.list(),
            };
            for t in records.iter().take(k.unwrap_or(usize::MAX)) {
                if *json {
                    println!("{}", serde_json::to_string(&MemoryView::from(t))?);
                } else {
                    println!("{}\t{:.3}\t{}\t{}", t.id, t.cred.score(), t.context, t.value);
                }
            }
        }
        MemoryCommand::Add { context, value } => println!("{}", store.create(context, value)?),
        MemoryCommand::Update { id, context, value } => {
            store.update(*id, context.as_deref(), value.as_deref())?;
        }
        MemoryCommand::Rm { id } => store.delete(*id)?,
    }
    Ok(())
}

/// Exit code 1 when the run ends without a validated answer.
fn run_query(
    cli: &Cli,
    query: &str,
    fixture: Option<&Path>,
    max_depth: Option<usize>,
    trace: bool,
) -> anyhow::Result<bool> {
    let cfg = setup::load_config(cli.config.as_deref())?;
    let engine = setup::engine(cfg, Some(&cli.store), fixture)?;
    let run = engine.run(query, RunOptions { max_depth })?;
    if trace {
        println!("{}", serde_json::to_string_pretty(&run.trace)?);
    }
    match run.answer {
        Ok(answer) => {
            if !trace {
                println!("{answer}");
            }
            Ok(true)
        }
        Err(failure) => {
            eprintln!("no answer: {failure}");
            Ok(false)
        }
    }
}

fn run_serve(cli: &Cli, addr: &str, fixture: Option<&Path>) -> anyhow::Result<()> {
    let cfg = setup::load_config(cli.config.as_deref())?;
    // blocking HTTP clients must be built outside the async runtime
    let engine = setup::engine(cfg, Some(&cli.store), fixture)?;
    let state = AppState::new(engine);
    tokio::runtime::Runtime::new()
        .context("starting runtime")?
        .block_on(service::serve(state, addr))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Query {
            query,
            fixture,
            max_depth,
            trace,
        } => run_query(&cli, query, fixture.as_deref(), *max_depth, *trace),
        Command::Memory(cmd) => run_memory(&cli, cmd).map(|_| true),
        Command::Bench(args) => run_bench(args).map(|_| true),
        Command::Serve { addr, fixture } => run_serve(&cli, addr, fixture.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
