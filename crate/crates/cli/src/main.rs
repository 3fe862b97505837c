//! `fedsemi` command-line interface.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsemi::orchestrator::{self, read_config_value, set_json_path};
use fedsemi::{Error, ExperimentConfig, RunOptions, Strategy};

#[derive(Parser)]
#[command(
    name = "fedsemi",
    version,
    about = "Federated semi-supervised learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Leave-one-out valuation of every fully unlabeled client.
    Loo(Common),
    /// One run per value of a config parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted path into the config, e.g. `partition.alpha`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, each parsed as JSON (falls back to a string).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write the partition described by the config to a JSON file.
    Partition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the aggregation strategy (fedavg, fedavg_semi, semianagg).
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Worker threads (0 = all cores); defaults to FEDSEMI_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn from_error(config: &Path, e: Error) -> Self {
        let msg = format!("{}: {e}", config.display());
        if e.is_config_error() {
            Failure::Config(msg)
        } else {
            Failure::Runtime(msg)
        }
    }
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            threads: self.threads,
        }
    }

    /// Config JSON with command-line overrides applied.
    fn value(&self) -> Result<serde_json::Value, Failure> {
        let mut v = read_config_value(&self.config)
            .map_err(|e| Failure::Config(format!("{}: {e}", self.config.display())))?;
        let mut set = |path: &str, value: serde_json::Value| {
            set_json_path(&mut v, path, value)
                .map_err(|e| Failure::Config(format!("{}: {e}", self.config.display())))
        };
        if let Some(seed) = self.seed {
            set("seed", seed.into())?;
        }
        if let Some(s) = self.strategy {
            set("strategy", s.name().into())?;
        }
        Ok(v)
    }

    fn config(&self) -> Result<ExperimentConfig, Failure> {
        ExperimentConfig::from_value(self.value()?)
            .map_err(|e| Failure::Config(format!("{}: {e}", self.config.display())))
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.config()?;
            let dir = common.out_dir(&cfg);
            let result = orchestrator::run_experiment(&cfg, Some(&dir), common.options())
                .map_err(|e| Failure::from_error(&common.config, e))?;
            let m = result.final_metrics;
            println!(
                "{}: acc {:.4}  b_acc {:.4}  precision {:.4}  auc {:.4}  -> {}",
                cfg.strategy,
                m.accuracy,
                m.balanced_accuracy,
                m.macro_precision,
                m.macro_auc,
                dir.display()
            );
        }
        Command::Loo(common) => {
            let cfg = common.config()?;
            let dir = common.out_dir(&cfg);
            let table = orchestrator::leave_one_out(&cfg, Some(&dir), common.options())
                .map_err(|e| Failure::from_error(&common.config, e))?;
            print!("{}", table.to_csv());
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let base = common.value()?;
            let cfg = ExperimentConfig::from_value(base.clone())
                .map_err(|e| Failure::Config(format!("{}: {e}", common.config.display())))?;
            let dir = common.out_dir(&cfg);
            let dirs = orchestrator::sweep(&base, &param, &values, &dir, common.options())
                .map_err(|e| Failure::from_error(&common.config, e))?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Partition { common, out } => {
            let cfg = common.config()?;
            let data = orchestrator::prepare_data(&cfg)
                .map_err(|e| Failure::from_error(&common.config, e))?;
            data.save(&out)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{} clients -> {}", data.clients.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
