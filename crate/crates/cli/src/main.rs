use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spinflux_cli::config::{ExperimentConfig, ExperimentKind, Overrides, PRESET_NAMES};
use spinflux_cli::experiment::{self, Context};
use spinflux_cli::failure::{Failure, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "spinflux", version, about = "Stochastic open-system simulations of a driven spin in a heat bath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by the configuration.
    Simulate(RunArgs),
    /// Check a configuration without running it and list every violation.
    Validate(Source),
    /// Tabulate the bath correlation function on the configured grid.
    BathTable(RunArgs),
    /// Generate noise paths and compare their moments with the correlation targets.
    NoiseSelftest(RunArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct SourceChoice {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in figure preset.
    #[arg(long, value_parser = PRESET_NAMES)]
    preset: Option<String>,
}

#[derive(Debug, Args)]
struct Source {
    #[command(flatten)]
    choice: SourceChoice,
    /// Print the effective configuration as TOML.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    choice: SourceChoice,
    /// Worker threads; affects wall time only.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of realizations, overriding the configuration.
    #[arg(long)]
    realizations: Option<u64>,
}

/// Writes a JSON report to stdout; a closed pipe is not an error.
fn emit(value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load(choice: &SourceChoice) -> Result<(ExperimentConfig, String), Failure> {
    match (&choice.config, &choice.preset) {
        (Some(path), _) => Ok((ExperimentConfig::load(path)?, path.display().to_string())),
        (None, Some(name)) => Ok((ExperimentConfig::preset(name)?, format!("preset:{name}"))),
        (None, None) => Err(Failure::Parse("either --config or --preset is required".into())),
    }
}

fn validate(args: &Source) -> Result<i32, Failure> {
    let (config, source) = load(&args.choice)?;
    let violations = config.violations();
    if args.print_config {
        let _ = write!(std::io::stdout(), "{}", config.to_toml());
    }
    let report = json!({ "source": source, "valid": violations.is_empty(), "violations": violations });
    emit(&report)?;
    if violations.is_empty() {
        Ok(EXIT_OK)
    } else {
        Err(Failure::Config(violations))
    }
}

fn execute(args: &RunArgs, kind: Option<ExperimentKind>) -> Result<i32, Failure> {
    let (mut config, source) = load(&args.choice)?;
    config.apply(&Overrides {
        kind,
        master_seed: args.seed,
        n_realizations: args.realizations,
        output_dir: args.out.clone(),
    });
    let experiment = config.resolve()?;
    let context = Context { source, config, command: std::env::args().collect() };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.workers {
        if n == 0 {
            return Err(Failure::Config(vec![spinflux_cli::Violation {
                field: "--workers".into(),
                constraint: "must be >= 1, got 0".into(),
            }]));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::Io(format!("cannot start worker pool: {e}")))?;
    let outcome = pool.install(|| experiment::run(&experiment, &context))?;
    let report = json!({
        "status": "ok",
        "kind": experiment.kind,
        "output_dir": experiment.output_dir,
        "files": outcome.files,
        "summary": outcome.summary,
    });
    emit(&report)?;
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => execute(a, None),
        Command::Validate(a) => validate(a),
        Command::BathTable(a) => execute(a, Some(ExperimentKind::BathTable)),
        Command::NoiseSelftest(a) => execute(a, Some(ExperimentKind::NoiseSelftest)),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(failure) => {
            let report = failure.report();
            eprintln!("{}", serde_json::to_string_pretty(&report).unwrap_or_else(|_| failure.to_string()));
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
