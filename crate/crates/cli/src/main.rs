use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use carebot_core::catalog::Catalog;
use carebot_core::context::export_ndjson;
use carebot_cli::client::HttpClient;
use carebot_cli::runner::{run_scenario, Driver, InProcess, Outcome, Remote, RunOptions};
use carebot_cli::scenario::Scenario;
use carebot_cli::setup::{build_gateway, EngineOptions, SetupError, REMOTE, SCRIPTED};
use carebot_cli::{dump_catalog_file, replay, server};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "carebot", version, about = "Run, inspect and serve the carebot dialogue engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script and check its expectations.
    Run(RunArgs),
    /// Print the transcript of an exported event log.
    Replay { log: PathBuf },
    /// Print a catalog as canonical JSON.
    DumpCatalog(DumpArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; the `.scenario.json` suffix may be left off.
    script: PathBuf,
    /// Catalog file to run against and keep. Defaults to a temporary seeded copy.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Seed copied into the temporary catalog.
    #[arg(long)]
    seed_catalog: Option<PathBuf>,
    /// Scripted backend rules, when the scenario names none.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Extra task definitions.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// World config to use instead of the scenario's.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Run against a running service instead of in-process.
    #[arg(long)]
    connect: Option<String>,
    /// Write the event log as NDJSON.
    #[arg(long)]
    export_log: Option<PathBuf>,
    /// Print the transcript before the report.
    #[arg(long)]
    transcript: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DumpArgs {
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    file: Option<PathBuf>,
    /// The built-in seed catalog.
    #[arg(long)]
    seed: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Scripted,
    Remote,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value = "catalog.json")]
    catalog: PathBuf,
    #[arg(long, default_value = "config/carehome.json")]
    world: PathBuf,
    #[arg(long, default_value = "config/carehome.rules.json")]
    rules: PathBuf,
    /// Backend for sessions that do not name one.
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendChoice,
    #[arg(long)]
    tasks: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Replay { log } => match replay(&log) {
            Ok(text) => {
                print!("{text}");
                if !text.is_empty() {
                    println!();
                }
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => Err(SetupError(e)),
        },
        Command::DumpCatalog(args) => dump(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run(args: RunArgs) -> Result<ExitCode, SetupError> {
    let mut scenario = Scenario::load(&args.script)?;
    if let Some(world) = args.world {
        scenario.world = world;
    }
    let run = RunOptions {
        catalog: args.catalog,
        seed_catalog: args.seed_catalog,
        rules: args.rules,
        tasks: args.tasks,
    };
    let mut driver: Box<dyn Driver> = match &args.connect {
        Some(url) => Box::new(Remote::connect(url, &scenario)?),
        None => Box::new(InProcess::start(&scenario, &run)?),
    };
    let Outcome { report, log, .. } = run_scenario(&scenario, driver.as_mut())?;
    if let Some(path) = &args.export_log {
        let file = std::fs::File::create(path).map_err(|e| SetupError::new(path.display(), e))?;
        let events: Vec<_> = log.iter().map(|l| l.event.clone()).collect();
        export_ndjson(&events, std::io::BufWriter::new(file)).map_err(|e| SetupError::new(path.display(), e))?;
    }
    let mut out = std::io::stdout().lock();
    if args.transcript {
        for l in &log {
            let _ = writeln!(out, "{}", l.event.transcript_line());
        }
    }
    if args.json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        let _ = write!(out, "{}", report.render());
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    })
}

fn dump(args: DumpArgs) -> Result<ExitCode, SetupError> {
    let json = if let Some(url) = args.connect {
        let client = HttpClient::new(&url).map_err(|e| SetupError::new(&url, e))?;
        let body = client.catalog().map_err(|e| SetupError::new(&url, e))?;
        Catalog::from_json(&body)
            .map_err(|e| SetupError::new(&url, e))?
            .to_canonical_json()
    } else if let Some(path) = args.file {
        dump_catalog_file(&path).map_err(SetupError)?
    } else {
        Catalog::seed().to_canonical_json()
    };
    print!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode, SetupError> {
    let opts = EngineOptions {
        catalog: args.catalog,
        world: args.world,
        rules: Some(args.rules),
        tasks: args.tasks,
    };
    let gw = build_gateway(&opts)?;
    let default_backend = match args.backend {
        BackendChoice::Scripted => SCRIPTED,
        BackendChoice::Remote => REMOTE,
    };
    if !gw.backend_names().iter().any(|n| n == default_backend) {
        return Err(SetupError(format!("backend `{default_backend}` is not configured")));
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| SetupError::new("runtime", e))?;
    rt.block_on(async {
        let addr = format!("{}:{}", args.bind, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| SetupError::new(&addr, e))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| SetupError::new(&addr, e))?);
        server::serve(listener, Arc::new(gw), default_backend)
            .await
            .map_err(|e| SetupError::new("server", e))
    })?;
    Ok(ExitCode::SUCCESS)
}
