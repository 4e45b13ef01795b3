use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tso_cli::{commands, CliError, LoadedConfig, Options};

#[derive(Parser)]
#[command(
    name = "tso",
    version,
    about = "Search for training-batch orderings that help a learner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization loop once per seed
    Run(Common),
    /// Compare strategy lengths (batch sizes)
    AblateLength(Common),
    /// Optimize for two learners and swap their outputs
    Transfer(Common),
    /// Measure the boost across learner sensitivities
    Sensitivity(Common),
    /// Parse and check a config without running it
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// comma-separated seeds (overrides `seeds`)
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// report accuracies in [0, 100]
    #[arg(long)]
    percent: bool,
}

impl Common {
    fn options(&self) -> Options {
        Options {
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            percent: self.percent,
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::ValidateConfig { config } => {
            let cfg = LoadedConfig::load(&config)?;
            println!("{}: ok ({})", config.display(), cfg.config.name);
            Ok(())
        }
        Command::Run(c) => {
            let report = commands::run(&LoadedConfig::load(&c.config)?, &c.options())?;
            println!("wrote {}", report.out.join("summary.csv").display());
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "{} of the seeds failed",
                    report.failures.len()
                )))
            }
        }
        Command::AblateLength(c) => {
            let rows = commands::ablate_length(&LoadedConfig::load(&c.config)?, &c.options())?;
            println!("{} ablation runs finished", rows.len());
            Ok(())
        }
        Command::Transfer(c) => {
            let rows = commands::transfer(&LoadedConfig::load(&c.config)?, &c.options())?;
            for r in &rows {
                println!(
                    "seed {}: a {:.4} -> {:.4}, b {:.4} -> {:.4}, distance {:.2} (random {:.2})",
                    r.seed,
                    r.report.a.on_source,
                    r.report.a.on_target,
                    r.report.b.on_source,
                    r.report.b.on_target,
                    r.report.distance,
                    r.null_distance
                );
            }
            Ok(())
        }
        Command::Sensitivity(c) => {
            for r in commands::sensitivity(&LoadedConfig::load(&c.config)?, &c.options())? {
                println!("{} seed {}: boost {:.3} AP", r.label, r.seed, r.boost_ap());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
