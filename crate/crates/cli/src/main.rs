//! `ufp`: train, apply and evaluate universal frequency-domain perturbations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ufp_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "ufp", version, about = "Learn and apply universal frequency-domain voice perturbations")]
#[command(after_long_help = config::keys_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `[section]` headers and `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lambda=10`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Verification threshold (config key `eval.threshold`).
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Trial list for deriving the threshold (config key `eval.trials`).
    #[arg(long, global = true, value_name = "FILE")]
    trials: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize a perturbation on a corpus directory and write it to a file.
    Train {
        /// Directory of training WAV files.
        corpus: PathBuf,
        /// Output perturbation file.
        #[arg(short, long)]
        out: PathBuf,
        /// Only use files of this speaker index, read from the corpus manifest.
        #[arg(long)]
        speaker: Option<usize>,
        /// Training report path (default: <out>.report.txt, plus a .json twin).
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Perturbation strength (config key `ufp.noise_level`).
        #[arg(long)]
        noise_level: Option<f64>,
        /// Perturbation length in frames (config key `ufp.frame_len`).
        #[arg(long)]
        frame_len: Option<usize>,
        /// Optimization iterations (config key `train.iterations`).
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Apply a perturbation to a WAV file or every WAV file in a directory.
    Protect {
        /// Input file or directory.
        input: PathBuf,
        /// Perturbation file.
        #[arg(short, long)]
        ufp: PathBuf,
        /// Output file, or directory when the input is a directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score protected audio (and optional clones) against the originals.
    Evaluate {
        /// Directory of original WAV files.
        #[arg(long)]
        originals: PathBuf,
        /// Directory of protected WAV files with matching names.
        #[arg(long)]
        protected: PathBuf,
        /// Directory of cloned WAV files with matching names.
        #[arg(long)]
        cloned: Option<PathBuf>,
        /// Write the report as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Run the preprocessing attacks on protected audio and score each.
    Attack {
        /// Directory of protected WAV files.
        #[arg(long)]
        protected: PathBuf,
        /// Directory of original WAV files with matching names.
        #[arg(long)]
        originals: PathBuf,
        /// Perturbation file the protected audio was made with.
        #[arg(short, long)]
        ufp: PathBuf,
        /// Directory holding one clone directory per attack name.
        #[arg(long, value_name = "DIR")]
        cloned_root: Option<PathBuf>,
        /// Write the table as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Time the deploy-mode tiler and print parameter counts.
    Bench {
        /// Perturbation file; a seeded random one is used when omitted.
        #[arg(short, long)]
        ufp: Option<PathBuf>,
    },
    /// Generate the synthetic multi-speaker corpus.
    Synth {
        /// Output directory.
        out: PathBuf,
        /// Number of speakers (config key `synth.speakers`).
        #[arg(long)]
        speakers: Option<usize>,
        /// Utterances per speaker (config key `synth.utts`).
        #[arg(long)]
        utts: Option<usize>,
        /// Seconds per utterance (config key `synth.duration`).
        #[arg(long)]
        duration: Option<f64>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        cfg.merge_file(path)?;
    }
    cfg.merge_overrides(&cli.common.overrides)?;
    let mut flags: Vec<(&str, String)> = Vec::new();
    let c = &cli.common;
    let mut push = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("seed", c.seed.map(|v| v.to_string()));
    push("eval.threshold", c.threshold.map(|v| v.to_string()));
    push("eval.trials", c.trials.as_ref().map(|p| p.display().to_string()));
    match &cli.command {
        Command::Train {
            noise_level,
            frame_len,
            iterations,
            ..
        } => {
            push("ufp.noise_level", noise_level.map(|v| v.to_string()));
            push("ufp.frame_len", frame_len.map(|v| v.to_string()));
            push("train.iterations", iterations.map(|v| v.to_string()));
        }
        Command::Synth {
            speakers,
            utts,
            duration,
            ..
        } => {
            push("synth.speakers", speakers.map(|v| v.to_string()));
            push("synth.utts", utts.map(|v| v.to_string()));
            push("synth.duration", duration.map(|v| v.to_string()));
        }
        _ => {}
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("UFP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("UFP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("UFP_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Train {
            corpus,
            out,
            speaker,
            report,
            ..
        } => commands::train(corpus, out, *speaker, report.as_deref(), &cfg),
        Command::Protect { input, ufp, out } => commands::protect(input, ufp, out),
        Command::Evaluate {
            originals,
            protected,
            cloned,
            json,
        } => commands::evaluate(originals, protected, cloned.as_deref(), json.as_deref(), &cfg),
        Command::Attack {
            protected,
            originals,
            ufp,
            cloned_root,
            json,
        } => commands::attack(protected, originals, ufp, cloned_root.as_deref(), json.as_deref(), &cfg),
        Command::Bench { ufp } => commands::bench(ufp.as_deref(), &cfg),
        Command::Synth { out, .. } => commands::synth(out, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.tag());
            ExitCode::FAILURE
        }
    }
}
