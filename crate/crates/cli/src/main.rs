use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use snnlr_cli::commands::{self, CmdResult, Failure};
use snnlr_cli::config::{apply_overrides, fill_policy, ConfigErrors, ExperimentConfig};
use snnlr_core::schedule::PolicyConfig;
use toml::{Table, Value};

#[derive(Parser, Debug)]
#[command(name = "snnlr", version, about = "Learning-rate policy experiments for spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.batch_size=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write its run log, weights and emissions.
    Train(RunArgs),
    /// Run the step-decay baseline once per learning rate in `sweep.lrs`.
    Sweep(RunArgs),
    /// Run the exploration grid against the step-decay baseline.
    Explore {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict the grid to these labels. Repeatable.
        #[arg(long)]
        only: Vec<String>,
    },
    /// Print or write the per-epoch learning rates of one policy.
    Schedule {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        init_lr: f64,
        /// Equal-length warm-restart cycles instead of geometric ones.
        #[arg(long)]
        peaks: Option<usize>,
        /// Policy parameter such as `h_cycle=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write `schedule.csv` here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild report tables from an explore output directory.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Directory previously written by `explore`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    DecreasingStep,
    ExponentialDecay,
    OneCycle,
    Cyclical,
    DecreasingCyclical,
    WarmRestarts,
}

impl Kind {
    fn tag(self) -> &'static str {
        match self {
            Kind::DecreasingStep => "DecreasingStep",
            Kind::ExponentialDecay => "ExponentialDecay",
            Kind::OneCycle => "OneCycle",
            Kind::Cyclical => "Cyclical",
            Kind::DecreasingCyclical => "DecreasingCyclical",
            Kind::WarmRestarts => "WarmRestarts",
        }
    }
}

fn load(args: &RunArgs) -> CmdResult<ExperimentConfig> {
    Ok(ExperimentConfig::load(args.config.as_deref(), &args.set)?)
}

fn policy_from_flags(kind: Kind, epochs: usize, init_lr: f64, peaks: Option<usize>, set: &[String]) -> CmdResult<PolicyConfig> {
    let mut t = Table::new();
    t.insert("kind".into(), Value::String(kind.tag().into()));
    t.insert("init_lr".into(), Value::Float(init_lr));
    t.insert("epochs".into(), Value::Integer(epochs as i64));
    if let Some(p) = peaks {
        let mut mode = Table::new();
        mode.insert("restart".into(), Value::String("equal-cycles".into()));
        mode.insert("peaks".into(), Value::Integer(p as i64));
        t.insert("mode".into(), Value::Table(mode));
    }
    apply_overrides(&mut t, set)?;
    fill_policy(&mut t, epochs as i64);
    Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Config(ConfigErrors(vec![e.to_string()])))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            let out = commands::resolve_out(args.out.as_deref(), Some(&cfg), "train");
            commands::cmd_train(&cfg, &out, args.jobs)
        }
        Command::Sweep(args) => {
            let cfg = load(&args)?;
            let out = commands::resolve_out(args.out.as_deref(), Some(&cfg), "sweep");
            commands::cmd_sweep(&cfg, &out, args.jobs)
        }
        Command::Explore { run, only } => {
            let cfg = load(&run)?;
            let out = commands::resolve_out(run.out.as_deref(), Some(&cfg), "explore");
            commands::cmd_explore(&cfg, &out, run.jobs, &only)
        }
        Command::Schedule { kind, epochs, init_lr, peaks, set, out } => {
            let policy = policy_from_flags(kind, epochs, init_lr, peaks, &set)?;
            if let Some(csv) = commands::cmd_schedule(&policy, out.as_deref())? {
                print!("{csv}");
            }
            Ok(())
        }
        Command::Report { config, set, out } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &set)?;
            let dir = commands::resolve_out(out.as_deref(), Some(&cfg), "explore");
            commands::cmd_report(&cfg, &dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
