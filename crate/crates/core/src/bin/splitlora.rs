use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitlora::harness::runner::SummaryTable;
use splitlora::harness::{compare, run, sweep, ExperimentConfig, SweepParam};
use splitlora::scheduler::Policy;
use splitlora::Error;

#[derive(Parser)]
#[command(
    name = "splitlora",
    version,
    about = "Scheduling and training simulator for split federated LoRA over FDMA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this policy: online, allin, aaba or gs.
    #[arg(long)]
    policy: Option<Policy>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> splitlora::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.policy {
            cfg.policies = vec![p];
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured policy and seed; writes metrics.csv and bound/*.csv.
    Run(Overrides),
    /// Repeat a run for each value of a delay parameter.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// delay_budget (seconds) or delay_scale (multiplier of the configured budget).
        #[arg(long, default_value = "delay_budget")]
        param: SweepParam,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarize metrics files per policy and diff them against the first.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Exit with status 5 when the accuracy ordering is violated.
        #[arg(long)]
        enforce_ordering: bool,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Csv(_) => 3,
        Error::Schema { .. } | Error::NoData(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> splitlora::Result<ExitCode> {
    match command {
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let report = run(&cfg)?;
            println!(
                "delay budget {:.6} s, output {}",
                cfg.delay_budget(),
                report.output_dir.display()
            );
            print!("{}", SummaryTable(&report.summaries));
        }
        Command::Sweep {
            overrides,
            param,
            values,
        } => {
            let cfg = overrides.resolve()?;
            for point in sweep(&cfg, param, &values)? {
                println!(
                    "{}={} (budget {:.6} s) -> {}",
                    param.as_str(),
                    point.value,
                    point.delay_budget,
                    point.output_dir.display()
                );
                print!("{}", SummaryTable(&point.summaries));
            }
        }
        Command::Compare {
            files,
            enforce_ordering,
        } => {
            let report = compare(&files)?;
            print!("{report}");
            if enforce_ordering && !report.ordering_holds() {
                return Ok(ExitCode::from(5));
            }
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string()?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
