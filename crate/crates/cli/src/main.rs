#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod manifest;
mod wav;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use arise_core::beam::BfOption;
use arise_core::engine::ArInputs;
use arise_core::train::Method;
use clap::{Args, Parser, Subcommand};

use commands::EstimatorChoice;
use config::RunConfig;
use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "arise",
    version,
    about = "Frame-online auto-regressive multichannel speech enhancement"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set mics=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Renders synthetic scenes and a manifest.
    Simulate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Enhances one mixture WAV, or every scene of a manifest.
    Enhance {
        input: Option<PathBuf>,
        output: Option<PathBuf>,
        #[arg(long)]
        bf_option: Option<BfOption>,
        #[arg(long = "ar")]
        ar_inputs: Option<ArInputs>,
        /// `oracle` or a checkpoint path.
        #[arg(long, default_value = "oracle")]
        estimator: String,
        /// Clean target for the oracle; defaults to the sibling `*_target.wav`.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["input", "output"], requires = "out_dir")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Trains the compact estimator on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        /// Starting checkpoint, e.g. to fine-tune with bptt.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Loss log file; lines are also printed.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Scores enhanced files against the manifest targets.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        enhanced_dir: PathBuf,
        /// Report prefix; writes `<out>.csv` and `<out>_grouped.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the resolved configuration.
    ShowConfig,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ARISE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("ARISE_THREADS={v:?}"))?;
        if n == 0 {
            bail!("ARISE_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn log_config(cfg: &RunConfig) {
    for line in cfg.resolved().lines() {
        eprintln!("config: {line}");
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::Simulate { out_dir, count } => {
            log_config(&cfg);
            let entries = commands::simulate(&cfg, &out_dir, count)?;
            eprintln!("wrote {} scenes to {}", entries.len(), out_dir.display());
        }
        Command::Enhance {
            input,
            output,
            bf_option,
            ar_inputs,
            estimator,
            target,
            manifest,
            out_dir,
        } => {
            cfg.override_engine(bf_option, ar_inputs);
            cfg.validate()?;
            log_config(&cfg);
            let est = EstimatorChoice::from_arg(&estimator)?;
            match (manifest, input, output) {
                (Some(m), _, _) => {
                    let manifest = Manifest::load(&m)?;
                    let dir = out_dir.expect("clap requires out_dir with manifest");
                    commands::enhance_manifest(&cfg, &manifest, &dir, &est)?;
                }
                (None, Some(i), Some(o)) => {
                    commands::enhance_file(&cfg, &i, &o, &est, target.as_deref())?
                }
                _ => bail!("give INPUT and OUTPUT, or --manifest with --out-dir"),
            }
        }
        Command::Train {
            manifest,
            out,
            method,
            init,
            log,
        } => {
            cfg.override_method(method);
            cfg.validate()?;
            log_config(&cfg);
            let manifest = Manifest::load(&manifest)?;
            commands::train_command(
                &cfg,
                &manifest,
                &out,
                init.as_deref(),
                log.as_deref(),
                |l| println!("{l}"),
            )?;
        }
        Command::Evaluate {
            manifest,
            enhanced_dir,
            out,
        } => {
            log_config(&cfg);
            let manifest = Manifest::load(&manifest)?;
            let eval = commands::evaluate(&cfg, &manifest, &enhanced_dir)?;
            std::fs::write(with_suffix(&out, ".csv"), eval.report.to_csv())?;
            std::fs::write(with_suffix(&out, "_grouped.csv"), eval.report.grouped_csv())?;
            print!("{}", eval.report.to_text());
            if !eval.missing.is_empty() {
                for p in &eval.missing {
                    eprintln!("missing: {}", p.display());
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::ShowConfig => print!("{}", cfg.resolved()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
