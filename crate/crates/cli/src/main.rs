use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use phvae_core::experiment::{report, run_grid, ExperimentConfig, Overrides, Preset, WORKERS_ENV};
use phvae_core::fmt::fmt_f64;
use phvae_core::phdist::CanonicalPh;
use phvae_core::rng::{substream, tag};
use phvae_core::vae::{DecoderKind, GenMode};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "phvae", version, about = "Phase-type VAE experiments on Pareto data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the experiment grid.
    Run(RunArgs),
    /// Summarize a results directory.
    Report {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
    /// Draw samples from a series canonical PH distribution.
    SamplePh {
        /// Initial probabilities, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        init: Vec<f64>,
        /// Non-decreasing rates, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(short = 'n', default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Several seeds; metrics rows are kept per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = ["sample", "mean"])]
    gen_mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip: Option<f64>,
    /// Model x - x_m instead of x.
    #[arg(long)]
    shift: bool,
    /// Fill the runtime_s column of metrics.csv.
    #[arg(long)]
    timing: bool,
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let preset = args.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text, preset)?
        }
        None => ExperimentConfig::preset(preset.unwrap_or_default()),
    };
    let models = args
        .models
        .map(|m| m.iter().map(|s| s.parse::<DecoderKind>()).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    Overrides {
        alphas: args.alphas,
        dims: args.dims,
        models,
        seeds: args.seeds.or(args.seed.map(|s| vec![s])),
        gen_mode: args.gen_mode.as_deref().map(str::parse::<GenMode>).transpose()?,
        out_dir: args.out,
        epochs: args.epochs,
        n_train: args.n_train,
        clip_norm: args.clip,
        shift: args.shift,
        timing: args.timing,
    }
    .apply(&mut cfg)?;

    eprintln!(
        "running {} cells into {} ({} workers)",
        cfg.cells().len(),
        cfg.out_dir.display(),
        std::env::var(WORKERS_ENV).unwrap_or_else(|_| "all".into())
    );
    let record = run_grid(&cfg)?;
    for c in &record.cells {
        match c.metrics() {
            Some(m) => eprintln!(
                "{:<24} ks={:.4} ks_tail={:.4} q99_err={:.4} ({:.1}s)",
                c.cell.name(),
                m.ks,
                m.ks_tail,
                m.q99_err,
                c.runtime_s
            ),
            None => eprintln!("{:<24} FAILED", c.cell.name()),
        }
    }
    let failures = record.failures();
    if failures > 0 {
        eprintln!("{failures} cell(s) failed; see record.json");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Report { input } => {
            let r = report(&input)?;
            std::fs::write(input.join("report.txt"), &r.table)?;
            std::fs::write(input.join("ks_tail_series.csv"), &r.tail_series_csv)?;
            print!("{}", r.table);
            Ok(ExitCode::SUCCESS)
        }
        Command::SamplePh { init, rates, n, seed } => {
            if n == 0 {
                bail!("-n must be positive");
            }
            let ph = CanonicalPh::new(init, rates)?;
            let mut rng = substream(seed, &[tag::GENERATE]);
            let mut out = std::io::BufWriter::new(std::io::stdout().lock());
            for _ in 0..n {
                writeln!(out, "{}", fmt_f64(ph.sample(&mut rng)))?;
            }
            out.flush()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
