//! Command-line driver: dataset synthesis, training, evaluation, the
//! split-point and suppression studies, and the latency benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;
use dualhead::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "dualhead", version, about = "Joint fingerprint spoof detection and matching")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic live/spoof dataset with a manifest
    Synth(SynthArgs),
    /// Dump minutia-centred patches of the eval split as PNG for inspection
    Patches(PatchesArgs),
    /// Train the dual-head model and evaluate it on the test split
    Train(OutArgs),
    /// Spoof detection report for a trained model
    EvalSpoof(OutArgs),
    /// Verification report (FRR at FAR targets) for a trained model
    EvalMatch(OutArgs),
    /// Latency, parameter and size comparison of series, parallel and joint pipelines
    Bench(BenchArgs),
    /// Train one model per split point and tabulate size and accuracy
    SweepSplit(SweepArgs),
    /// Train the joint model and the two gradient-suppressed variants
    Suppress(OutArgs),
    /// Train a shallow spoof classifier on frozen intermediate features
    Probe(ProbeArgs),
    /// Extract a minutiae template from one image
    Template(TemplateArgs),
    /// Match two templates
    Match(MatchArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_fingers: Option<usize>,
    #[arg(long)]
    n_impressions: Option<usize>,
    /// Fraction of live captures that also get a spoof
    #[arg(long)]
    spoof_ratio: Option<f64>,
    /// Fraction of fingers held out as the test split
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    synth_seed: Option<u64>,
    /// Write into a non-empty directory
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PatchesArgs {
    #[arg(long)]
    out: PathBuf,
    /// At most this many images
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Output directory, or a .json report path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    minutiae: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated split points (default: all)
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base depth to read features from (0 = stem output)
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    probe_epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct TemplateArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    minutiae: PathBuf,
    /// Template file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MatchArgs {
    a: PathBuf,
    b: PathBuf,
    /// Write the kept correspondences as CSV
    #[arg(long)]
    dump_pairs: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = cli.overrides.resolve()?;
    match cli.command {
        Command::Synth(a) => {
            if let Some(v) = a.n_fingers {
                cfg.synth.n_fingers = v;
            }
            if let Some(v) = a.n_impressions {
                cfg.synth.n_impressions = v;
            }
            if let Some(v) = a.spoof_ratio {
                cfg.synth.spoof_ratio = v;
            }
            if let Some(v) = a.test_fraction {
                cfg.synth.test_fraction = v;
            }
            if let Some(v) = a.synth_seed {
                cfg.synth.seed = v;
            }
            commands::synth(&cfg, &a.out, a.force)
        }
        Command::Patches(a) => commands::patches(&cfg, &a.out, a.limit),
        Command::Train(a) => commands::train(&cfg, &a.out),
        Command::EvalSpoof(a) => commands::eval_spoof(&cfg, &a.out),
        Command::EvalMatch(a) => commands::eval_match(&cfg, &a.out),
        Command::Bench(a) => {
            if let Some(v) = a.images {
                cfg.bench.n_images = v;
            }
            if let Some(v) = a.minutiae {
                cfg.bench.minutiae_per_image = v;
                cfg.bench.batch_size = v;
            }
            if let Some(v) = a.reps {
                cfg.bench.repetitions = v;
            }
            if let Some(v) = a.warmup {
                cfg.bench.warmup = v;
            }
            commands::bench(&cfg, &a.out)
        }
        Command::SweepSplit(a) => {
            if a.splits.is_some() {
                cfg.sweep_splits = a.splits;
            }
            commands::sweep_split(&cfg, &a.out)
        }
        Command::Suppress(a) => commands::suppress(&cfg, &a.out),
        Command::Probe(a) => {
            if a.depth.is_some() {
                cfg.probe_depth = a.depth;
            }
            if let Some(v) = a.probe_epochs {
                cfg.probe.epochs = v;
            }
            commands::probe(&cfg, &a.out)
        }
        Command::Template(a) => commands::template(&cfg, &a.image, &a.minutiae, &a.out),
        Command::Match(a) => commands::match_pair(&cfg, &a.a, &a.b, a.dump_pairs.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<dualhead::Error>().map(dualhead::Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numerical) => 4,
        Some(ErrorKind::Data) | None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
