//! Command-line front end for the multi-user D-JSCC trainer.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use djscc_core::channel::ChannelKind;
use djscc_core::config::{ExperimentConfig, Schedule};
use djscc_core::experiment;
use djscc_core::Error;

#[derive(Parser)]
#[command(
    name = "djscc",
    about = "Multi-user deep joint source-channel coding: train, evaluate and compare schedules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train under a schedule; writes checkpoints, manifest and loss curves.
    Train {
        /// Config file (see `print-defaults` for the format)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override config keys, e.g. --set train.seed=7
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Override the output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the schedule
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Evaluate a finished run over its eval set; writes records.csv.
    Eval {
        /// Run directory produced by `train`
        #[arg(long)]
        run: PathBuf,
        /// Override the SNR sweep, e.g. 1,4,7,10,13
        #[arg(long)]
        snr: Option<String>,
        /// Override the channel: awgn | rayleigh
        #[arg(long)]
        channel: Option<String>,
    },
    /// Run the catastrophic-forgetting protocol on an iterative schedule.
    Forgetting {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse an existing iterative run instead of training
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Merge records from several runs into a schedule comparison.
    Compare {
        /// Run directories, comma separated
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    PrintDefaults,
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut pairs = Vec::new();
    let mut problems = Vec::new();
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => problems.push(format!("--set wants KEY=VALUE, got `{s}`")),
        }
    }
    if problems.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Config(problems))
    }
}

fn load_config(
    path: Option<&PathBuf>,
    sets: &[String],
    out: Option<&PathBuf>,
    schedule: Option<&str>,
) -> Result<ExperimentConfig, Error> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => ExperimentConfig::default().render(),
    };
    let mut overrides = parse_sets(sets)?;
    if let Some(s) = schedule {
        if Schedule::parse(s).is_none() {
            return Err(Error::Config(vec![format!(
                "--schedule expects two_stage | iterative | simultaneous, got `{s}`"
            )]));
        }
        overrides.push(("train.schedule".into(), s.to_string()));
    }
    if let Some(o) = out {
        overrides.push(("report.out_dir".into(), o.display().to_string()));
    }
    ExperimentConfig::parse(&text, &overrides)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            sets,
            out,
            schedule,
        } => {
            let cfg = load_config(config.as_ref(), &sets, out.as_ref(), schedule.as_deref())?;
            let run_dir = experiment::cmd_train(&cfg)?;
            println!("trained {} -> {}", cfg.schedule.as_str(), run_dir.display());
        }
        Command::Eval { run, snr, channel } => {
            let snrs = match snr {
                Some(s) => Some(
                    s.split(',')
                        .map(|p| {
                            p.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::Config(vec![format!("bad --snr entry `{p}`")]))
                        })
                        .collect::<Result<Vec<f64>, Error>>()?,
                ),
                None => None,
            };
            let kind = match channel {
                Some(c) => Some(
                    ChannelKind::parse(&c)
                        .ok_or_else(|| Error::Config(vec![format!("bad --channel `{c}`")]))?,
                ),
                None => None,
            };
            let path = experiment::cmd_eval(&run, snrs.as_deref(), kind)?;
            println!("records -> {}", path.display());
        }
        Command::Forgetting {
            config,
            sets,
            out,
            run,
        } => {
            let cfg = load_config(config.as_ref(), &sets, out.as_ref(), None)?;
            let path = experiment::cmd_forgetting(&cfg, run.as_deref())?;
            println!("forgetting report -> {}", path.display());
        }
        Command::Compare { runs, out } => {
            let path = experiment::cmd_compare(&runs, &out)?;
            println!("comparison -> {}", path.display());
        }
        Command::PrintDefaults => {
            print!("{}", ExperimentConfig::default().render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
