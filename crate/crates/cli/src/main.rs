use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neurotouch_cli::{cmd_gen, cmd_preprocess, cmd_report, cmd_run, CliError, ConditionSel, PipelineSel, RunConfig};

/// Offline decoding of texture-touch EEG.
///
/// NEURO_THREADS caps the number of worker threads.
#[derive(Parser, Debug)]
#[command(name = "neurotouch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic session (actual.epo and imagery.epo).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to the configured out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Notch and band-pass an epoch file.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Epoch file to read.
        #[arg(long)]
        input: PathBuf,
        /// Epoch file to write.
        #[arg(long)]
        out: PathBuf,
        /// Keep every n-th sample after filtering.
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Cross-validate pipelines and write the report files.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to the configured out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory holding actual.epo and imagery.epo; generates when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        pipeline: Option<PipelineSel>,
        #[arg(long, value_enum)]
        condition: Option<ConditionSel>,
    },
    /// Print the table of an earlier run from its CSV files.
    Report {
        /// Directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NEURO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NEURO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load(&common)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_gen(&cfg, &dir)?;
        }
        Command::Preprocess {
            common,
            input,
            out,
            downsample,
        } => {
            if downsample == 0 {
                return Err(CliError::Config("--downsample must be at least 1".into()));
            }
            let cfg = load(&common)?;
            cmd_preprocess(&cfg, &input, &out, downsample)?;
        }
        Command::Run {
            common,
            out,
            input,
            pipeline,
            condition,
        } => {
            let mut cfg = load(&common)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if input.is_some() {
                cfg.run.input_dir = input;
            }
            if let Some(p) = pipeline {
                cfg.run.pipeline = p;
            }
            if let Some(c) = condition {
                cfg.run.condition = c;
            }
            let summary = cmd_run(&cfg)?;
            eprintln!("results in {}", summary.out_dir.display());
        }
        Command::Report { out } => {
            cmd_report(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as configuration errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
