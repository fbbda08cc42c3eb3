//! `frp`: synthetic data generation, classifier and detector training,
//! detection, evaluation and the ablation benchmark.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use frp_core::error::ErrorClass;
use frp_core::FrpError;

use crate::config::{RunConfig, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(name = "frp", version, about = "Two-stage pedestrian detector with full-stage proposal refinement")]
struct Cli {
    /// Configuration file (`key = value` lines). Defaults to $FRP_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set eps_c=0.4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for per-image work; outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Sfrp,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate annotated synthetic scenes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Image id prefix.
        #[arg(long, default_value = "img")]
        prefix: String,
    },
    /// Train the patch classifier on an annotated directory.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector, with or without negative reselection.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.tfrp` from the configuration.
        #[arg(long, value_enum)]
        tfrp: Option<Switch>,
    },
    /// Run the detector over an image directory and write a detections file.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        /// Patch classifier; required by the full mode.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Directory with images (and a manifest or annotation files).
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `mode` from the configuration.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Evaluate a detections file against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Output directory for curve.csv, summary.txt and plots.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate baseline, compact and full variants for every seed.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig, FrpError> {
    let mut cfg = RunConfig::default();
    let file = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(path) = file {
        cfg.apply_file(&path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        return Err(FrpError::Config("--threads must be at least 1".into()).into());
    }
    let cfg = load_config(&cli).context("loading configuration")?;
    let done = match cli.command {
        Command::GenData { out, count, prefix } => commands::gen_data(&cfg, &out, count, &prefix),
        Command::TrainClassifier { data, out } => commands::train_classifier(&cfg, &data, &out),
        Command::TrainDetector {
            data,
            classifier,
            out,
            tfrp,
        } => commands::train_detector(&cfg, &data, &classifier, &out, tfrp.map(|t| t == Switch::On)),
        Command::Detect {
            weights,
            classifier,
            images,
            out,
            mode,
        } => {
            let mode = match mode {
                Some(ModeArg::Baseline) => frp_core::InferenceMode::BASELINE,
                Some(ModeArg::Sfrp) => frp_core::InferenceMode::COMPACT,
                Some(ModeArg::Full) => frp_core::InferenceMode::FULL,
                None => cfg.mode,
            };
            commands::detect(&cfg, &weights, classifier.as_deref(), &images, &out, mode, cli.threads)
        }
        Command::Eval {
            detections,
            annotations,
            out,
        } => commands::eval(&detections, &annotations, &out),
        Command::Bench { out } => commands::bench(&cfg, &out),
        Command::Config => {
            print!("{}", cfg.dump());
            Ok(())
        }
    };
    Ok(done?)
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            // errors that did not come from the core library are usage errors
            let (tag, class) = match e.downcast_ref::<FrpError>() {
                Some(core) => (core.tag(), core.class()),
                None => ("usage", ErrorClass::Config),
            };
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(exit_code(class))
        }
    }
}
