use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ringfed_cli::commands::{self, resolve_out, Options};
use ringfed_cli::{CliError, ScenarioConfig};

#[derive(Parser)]
#[command(name = "ringfed", version, about = "Federated continual learning on a ring of centers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every schedule listed in the scenario.
    Run(Common),
    /// Mixed-data training on growing fractions of the pooled data.
    Sweep(Common),
    /// Run several scenarios and tabulate their curves together.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Print the scenario file reference.
    Schema,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct Shared {
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, env = "RINGFED_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    no_plots: bool,
}

impl Shared {
    fn options(&self, cfg: &ScenarioConfig) -> Options {
        Options {
            seed_override: self.seed_override,
            workers: self.workers.max(1),
            out: resolve_out(self.out.as_deref(), cfg),
            plots: !self.no_plots,
        }
    }
}

fn dispatch(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, text) = ScenarioConfig::load(&c.config)?;
            Ok(commands::run(&cfg, &text, &c.shared.options(&cfg))?.out_dir)
        }
        Command::Sweep(c) => {
            let (cfg, text) = ScenarioConfig::load(&c.config)?;
            Ok(commands::sweep(&cfg, &text, &c.shared.options(&cfg))?.out_dir)
        }
        Command::Compare { configs, shared } => {
            let inputs = configs
                .iter()
                .map(|p| ScenarioConfig::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let mut opts = shared.options(&inputs[0].0);
            if shared.out.is_none() {
                opts.out = PathBuf::from("ringfed-out").join("compare");
            }
            commands::compare(&inputs, &opts)
        }
        Command::Schema => {
            print!("{}", ringfed_cli::SCHEMA);
            Ok(PathBuf::new())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = matches!(cli.command, Command::Schema);
    match dispatch(cli) {
        Ok(dir) => {
            if !quiet {
                println!("wrote {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ringfed: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
