mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::RunConfig;

/// Timestep-routed mixture-of-experts diffusion transformer on toy images.
#[derive(Parser, Debug)]
#[command(name = "switchdit", version = switchdit::BUILD_VERSION)]
pub struct Cli {
    /// INI configuration file; see the key list below.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the train, sample and eval seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory [default: runs]; falls back to $SWITCHDIT_OUT_DIR.
    #[arg(long, global = true, env = "SWITCHDIT_OUT_DIR", value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Enable an ablation (noisy-gating, load-balance, random-allocation);
    /// repeatable, adds to the config file's list.
    #[arg(long, global = true, value_name = "NAME")]
    ablation: Vec<String>,

    /// Override a config key, e.g. `--set train.steps=500`; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.swdt, metrics.csv and config.ini.
    Train {
        /// Continue from this checkpoint (its stored config is used).
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Total number of steps; overrides [train] steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw images with the EMA parameters; writes samples/*.pgm.
    Sample {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Overrides [sample] count.
        #[arg(long)]
        count: Option<usize>,
        /// Class label; overrides [sample] label.
        #[arg(long)]
        label: Option<usize>,
        /// Guidance scale; overrides [sample] guidance.
        #[arg(long)]
        guidance: Option<f64>,
        /// Reverse steps; overrides [sample] steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export stacked gate and prior activation maps and the denoising-path
    /// summary to routing/.
    InspectRouting {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Write the matching cost matrix, assignment and per-timestep prior loss
    /// to match.json.
    MatchDebug {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Compare samples with held-out data by MMD²; writes eval.json.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Use the online parameters instead of the EMA copy.
    #[arg(long)]
    online: bool,
}

/// Failure classes mapped to exit codes 1 (usage) and 2 (runtime).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<switchdit::Error> for CliError {
    fn from(e: switchdit::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    for spec in &cli.ablation {
        let extra = switchdit::Ablations::parse(spec).map_err(CliError::Usage)?;
        let a = &mut cfg.train.ablations;
        a.noisy_gating |= extra.noisy_gating;
        a.load_balance |= extra.load_balance;
        a.random_allocation |= extra.random_allocation;
    }
    for o in &cli.overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects SECTION.KEY=VALUE, got '{o}'")))?;
        let (sec, key) = path
            .split_once('.')
            .ok_or_else(|| CliError::Usage(format!("--set expects SECTION.KEY=VALUE, got '{o}'")))?;
        cfg.set(sec, key, value).map_err(CliError::Usage)?;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.sample.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli)?;
    let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::Train { resume, steps } => {
            if let (Some(s), None) = (steps, &resume) {
                cfg.train.steps = s;
            }
            commands::train(&cfg, &out, resume.as_deref(), steps)
        }
        Command::Sample {
            ckpt,
            count,
            label,
            guidance,
            steps,
        } => {
            if let Some(v) = count {
                cfg.sample.count = v;
            }
            if label.is_some() {
                cfg.sample.label = label;
            }
            if let Some(v) = guidance {
                cfg.sample.guidance = v;
            }
            if let Some(v) = steps {
                cfg.sample.steps = v;
            }
            commands::sample(&cfg, &out, &ckpt.checkpoint, ckpt.online)
        }
        Command::InspectRouting { ckpt } => commands::inspect_routing(&out, &ckpt.checkpoint, ckpt.online),
        Command::MatchDebug { ckpt } => commands::match_debug(&out, &ckpt.checkpoint, ckpt.online),
        Command::Eval { ckpt } => commands::eval(&cfg, &out, &ckpt.checkpoint, ckpt.online),
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(config::keys_help());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
