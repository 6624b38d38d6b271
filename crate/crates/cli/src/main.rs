use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mesenchymal_cli::commands::{self, Options, Outcome};
use mesenchymal_cli::CliError;
use mesenchymal_core::Exec;

#[derive(Parser)]
#[command(name = "mesenchymal", version, about = "Kinetic model of mesenchymal cell motion in fibre networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (for `steady-check`: the spec file)
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `initial.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Only report errors
    #[arg(long)]
    quiet: bool,
    /// Run every sweep on the calling thread
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the coupled cell/fibre system
    Run(Common),
    /// Evaluate the characteristic solution for a prescribed fibre field
    Exact(Common),
    /// Classify an intersection or validate a patchy network
    SteadyCheck(Common),
    /// Compare scaled kinetic runs against the diffusion limit
    LimitStudy(Common),
}

type Handler = fn(&Options) -> Result<Outcome, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (f, common): (Handler, Common) = match cli.command {
        Command::Run(c) => (commands::run, c),
        Command::Exact(c) => (commands::exact, c),
        Command::SteadyCheck(c) => (commands::steady_check, c),
        Command::LimitStudy(c) => (commands::limit_study, c),
    };
    let level = if common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let opts = Options {
        config: common.config,
        out: common.out,
        seed: common.seed,
        exec: if common.sequential { Exec::Sequential } else { Exec::Parallel },
    };
    match f(&opts) {
        Ok(outcome) => {
            if !common.quiet || outcome.exit_code != 0 {
                print!("{}", outcome.summary);
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
