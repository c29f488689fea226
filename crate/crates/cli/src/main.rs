//! `sisa`: ingest, train, unlearn and evaluate sharded, sliced classifiers.

mod commands;
mod config;
mod failure;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "sisa", version, about = "Sharded, sliced training with exact unlearning", propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate a dataset and write the train/test split.
    Ingest(Common),
    /// Partition the training data and train one model per shard.
    Train(Common),
    /// Sample an unlearning request stream from the current plan.
    Request(RequestArgs),
    /// Apply a request stream, one request at a time.
    Unlearn(UnlearnArgs),
    /// Evaluate the ensemble on the test split.
    Eval(Common),
    /// Run the experiment grid and write the CSV report set.
    Simulate(Common),
    /// Summarize the ledger and checkpoint storage.
    Report(Common),
}

#[derive(Args)]
struct RequestArgs {
    #[command(flatten)]
    common: Common,
    /// Output file [default: <run-dir>/requests.txt]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UnlearnArgs {
    #[command(flatten)]
    common: Common,
    /// Request stream to apply [default: <run-dir>/requests.txt]
    #[arg(long)]
    stream: Option<PathBuf>,
}

/// Flags shared by every subcommand. Config keys resolve as: built-in
/// defaults, then `$SISA_CONFIG_DIR/sisa.conf`, then `<run-dir>/config`,
/// then `--config`, then flags.
#[derive(Args, Clone)]
struct Common {
    /// Run directory holding all state [default: sisa-run]
    #[arg(long, default_value = "sisa-run", hide_default_value = true)]
    run_dir: PathBuf,
    /// Extra `key = value` config file applied before flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or a GLUE-style TSV path [default: synthetic]
    #[arg(long)]
    dataset: Option<String>,
    /// Task schema for TSV input: sst2, qqp, mnli [default: sst2]
    #[arg(long)]
    task: Option<String>,
    /// Rows kept from a TSV file [default: 60000]
    #[arg(long)]
    limit: Option<usize>,
    /// Fraction held out for testing [default: 0.2]
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Leading fraction of the training split to use, in (0, 1] [default: 1.0]
    #[arg(long)]
    data_fraction: Option<f64>,
    /// Synthetic examples [default: 10000]
    #[arg(long)]
    synth_n: Option<usize>,
    /// Synthetic classes [default: 2]
    #[arg(long)]
    synth_classes: Option<usize>,
    /// Synthetic vocabulary size [default: 1000]
    #[arg(long)]
    synth_vocab: Option<usize>,
    /// Tokens per synthetic example [default: 20]
    #[arg(long)]
    synth_tokens: Option<usize>,
    /// Probability a synthetic token comes from its class block [default: 1.0]
    #[arg(long)]
    synth_separation: Option<f64>,
    /// Number of shards S [default: 5]
    #[arg(long)]
    shards: Option<usize>,
    /// Slices per shard R [default: 16]
    #[arg(long)]
    slices: Option<usize>,
    /// Partition strategy: uniform, sequential, risk [default: uniform]
    #[arg(long)]
    strategy: Option<String>,
    /// `id<TAB>score` file for the risk strategy [default: none]
    #[arg(long)]
    risk_file: Option<String>,
    /// Trainable blocks: full, fc, adapter, adapter:<k> [default: adapter]
    #[arg(long)]
    mode: Option<String>,
    /// Adapter bottleneck width [default: 16]
    #[arg(long)]
    bottleneck: Option<usize>,
    /// SGD learning rate [default: 0.005]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Batch size [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Epochs per slice [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Feature hashing dimension, a power of two [default: 4096]
    #[arg(long)]
    hash_dim: Option<usize>,
    /// Hidden width [default: 256]
    #[arg(long)]
    hidden: Option<usize>,
    /// Tokens kept per text field [default: 256]
    #[arg(long)]
    token_cap: Option<usize>,
    /// Global seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Request distribution: uniform, pareto, inverse-pareto [default: uniform]
    #[arg(long)]
    distribution: Option<String>,
    /// Pareto scale m [default: 1.0]
    #[arg(long)]
    pareto_m: Option<f64>,
    /// Pareto shape a [default: 1.16]
    #[arg(long)]
    pareto_a: Option<f64>,
    /// Requests per stream [default: 16]
    #[arg(long)]
    requests: Option<usize>,
    /// Slice step data: per-slice or cumulative [default: per-slice]
    #[arg(long)]
    slice_mode: Option<String>,
    /// Ensemble vote: hard or soft [default: hard]
    #[arg(long)]
    vote: Option<String>,
    /// Shards trained concurrently [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    /// Record wall-clock milliseconds in ledgers (false writes 0) [default: true]
    #[arg(long)]
    wall_clock: Option<bool>,
    /// Simulation modes, comma-separated [default: the configured mode]
    #[arg(long)]
    sim_modes: Option<String>,
    /// Simulation slice counts [default: 2,4,8,16]
    #[arg(long)]
    sim_slices: Option<String>,
    /// Request counts at which simulation measures accuracy [default: 16]
    #[arg(long)]
    sim_requests: Option<String>,
    /// Simulation distributions [default: uniform]
    #[arg(long)]
    sim_distributions: Option<String>,
    /// Simulation seeds [default: 0,1,2]
    #[arg(long)]
    sim_seeds: Option<String>,
    /// Train and score the monolithic baseline in simulations [default: true]
    #[arg(long)]
    sim_baseline: Option<bool>,
    /// Also compare request distributions by retraining cost [default: false]
    #[arg(long)]
    sim_compare: Option<bool>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                })*
            };
        }
        push!(
            dataset, task, limit, test_fraction, data_fraction, synth_n, synth_classes, synth_vocab, synth_tokens,
            synth_separation, shards, slices, strategy, risk_file, mode, bottleneck, learning_rate, batch, epochs,
            hash_dim, hidden, token_cap, seed, distribution, pareto_m, pareto_a, requests, slice_mode, vote, workers,
            wall_clock, sim_modes, sim_slices, sim_requests, sim_distributions, sim_seeds, sim_baseline, sim_compare
        );
        out
    }

    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(dir) = std::env::var_os(config::CONFIG_DIR_ENV) {
            let p = PathBuf::from(dir).join(config::CONFIG_FILE);
            if p.exists() {
                cfg.apply_file(&p).map_err(Failure::Usage)?;
            }
        }
        let saved = rundir::RunDir::new(&self.run_dir).config_path();
        if saved.exists() {
            cfg.apply_file(&saved).map_err(Failure::State)?;
        }
        if let Some(p) = &self.config {
            cfg.apply_file(p).map_err(Failure::Usage)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v).map_err(Failure::Usage)?;
        }
        cfg.validate().map_err(Failure::Usage)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = match &cli.command {
        Command::Ingest(c) | Command::Train(c) | Command::Eval(c) | Command::Simulate(c) | Command::Report(c) => c,
        Command::Request(a) => &a.common,
        Command::Unlearn(a) => &a.common,
    };
    let cfg = common.resolve()?;
    print!("# effective config\n{}", cfg.render());
    let dir = rundir::RunDir::new(&common.run_dir);
    match cli.command {
        Command::Ingest(_) => commands::ingest(&dir, &cfg),
        Command::Train(_) => commands::train(&dir, &cfg),
        Command::Request(a) => commands::request(&dir, &cfg, a.out),
        Command::Unlearn(a) => commands::unlearn(&dir, &cfg, a.stream),
        Command::Eval(_) => commands::eval(&dir, &cfg),
        Command::Simulate(_) => commands::simulate(&dir, &cfg),
        Command::Report(_) => commands::report(&dir, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
