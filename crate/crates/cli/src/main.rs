use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use aof_core::artifacts::{self, SWEEP_FILE};
use aof_core::bloom::{BloomParams, DEFAULT_BLOOM_BITS, DEFAULT_BLOOM_HASHES, MAX_FRAMES};
use aof_core::engine::CommitMode;
use aof_core::framer::FramerConfig;
use aof_core::pipeline::{self, RunConfig, RunOutput, DEFAULT_BLOCK_INTERVAL};
use aof_core::scheduler::{DivergenceMode, DEFAULT_MAX_RETRIES};
use aof_core::workload::{generate, WorkloadSpec};
use aof_core::{Transaction, TransferKind};

/// Ahead-of-formation scheduling benchmark.
///
/// Log verbosity comes from AOF_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "aof", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded workload file.
    Generate {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        skew: SkewArgs,
        /// Output file.
        #[arg(long, default_value = "workload.bin")]
        out: PathBuf,
    },
    /// Run the full pipeline and write metrics.json, blocks.json and trace.bin.
    Run(RunArgs),
    /// Frame and schedule only, with execution replaced by an echo.
    Ablate(RunArgs),
    /// Check a run directory against the serial and schedule oracles.
    Verify {
        /// Run directory.
        #[arg(long, default_value = "aof-out")]
        out: PathBuf,
    },
    /// One run per (alpha, gamma, workers) cell, written to sweep.csv.
    Sweep {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Comma-separated alpha values.
        #[arg(long = "alpha", value_delimiter = ',', default_value = "0,0.5,0.99")]
        alphas: Vec<f64>,
        /// Comma-separated gamma values.
        #[arg(long = "gamma", value_delimiter = ',', default_value = "1000")]
        gammas: Vec<u64>,
        /// Comma-separated worker counts.
        #[arg(long = "workers", value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        #[arg(long, default_value = "aof-out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Native,
    Erc20,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Strict,
    Subset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Commit {
    Full,
    Incremental,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, value_enum, default_value = "native")]
    kind: Kind,
    #[arg(long, default_value_t = 1 << 20)]
    accounts: u64,
    #[arg(long, default_value_t = 100_000)]
    txns: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transactions analyzed per snapshot.
    #[arg(long, default_value_t = 10_000)]
    batch_size: u64,
}

#[derive(Args, Clone)]
struct SkewArgs {
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1000)]
    gamma: u64,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = 1)]
    analyze_workers: usize,
    /// Kept transactions per block.
    #[arg(long, default_value_t = DEFAULT_BLOCK_INTERVAL)]
    block_interval: u64,
    #[arg(long, value_enum, default_value = "strict")]
    divergence_mode: Mode,
    /// Active frames in the pool.
    #[arg(long, default_value_t = MAX_FRAMES)]
    frames: usize,
    #[arg(long, default_value_t = DEFAULT_BLOOM_BITS)]
    bloom_bits: usize,
    #[arg(long, default_value_t = DEFAULT_BLOOM_HASHES)]
    bloom_hashes: u32,
    /// Eject a frame once it holds this many transactions.
    #[arg(long)]
    max_frame_txns: Option<usize>,
    /// Eject a frame this many transactions after it opened.
    #[arg(long)]
    max_frame_age: Option<u64>,
    #[arg(long, value_enum, default_value = "incremental")]
    commit: Commit,
    #[arg(long, default_value_t = DEFAULT_MAX_RETRIES)]
    max_retries: u32,
    /// Test hook: fraction of transactions whose first execution diverges.
    #[arg(long, default_value_t = 0.0)]
    inject_divergence: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Read the workload from a file instead of generating it.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[command(flatten)]
    gen: WorkloadArgs,
    #[command(flatten)]
    skew: SkewArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "aof-out")]
    out: PathBuf,
}

impl WorkloadArgs {
    fn spec(&self, skew: &SkewArgs) -> WorkloadSpec {
        WorkloadSpec {
            kind: match self.kind {
                Kind::Native => TransferKind::Native,
                Kind::Erc20 => TransferKind::Erc20,
            },
            total_accounts: self.accounts,
            gamma: skew.gamma,
            alpha: skew.alpha,
            txn_count: self.txns,
            seed: self.seed,
            batch_size: self.batch_size,
        }
    }
}

impl PipelineArgs {
    fn config(&self, workers: usize) -> RunConfig {
        RunConfig {
            workers,
            analyze_workers: self.analyze_workers,
            block_interval: self.block_interval,
            framer: FramerConfig {
                max_frame_txns: self.max_frame_txns,
                max_frame_age: self.max_frame_age,
                frames: self.frames,
                bloom: BloomParams {
                    bits: self.bloom_bits,
                    hashes: self.bloom_hashes,
                },
            },
            mode: match self.divergence_mode {
                Mode::Strict => DivergenceMode::Strict,
                Mode::Subset => DivergenceMode::SubsetSafe,
            },
            commit: match self.commit {
                Commit::Full => CommitMode::FullRecompute,
                Commit::Incremental => CommitMode::Incremental,
            },
            inject_divergence: self.inject_divergence,
            max_retries: self.max_retries,
        }
    }
}

fn load_workload(args: &RunArgs) -> Result<(WorkloadSpec, Vec<Transaction>)> {
    match &args.workload {
        Some(path) => Ok(artifacts::read_workload_file(path)?),
        None => {
            let spec = args.gen.spec(&args.skew);
            let txns = generate(&spec)?;
            Ok((spec, txns))
        }
    }
}

fn cmd_run(args: &RunArgs, ablate: bool) -> Result<()> {
    let (spec, txns) = load_workload(args)?;
    let cfg = args.pipeline.config(args.workers);
    log::info!("{} txns, {} workers", txns.len(), cfg.workers);
    let out: RunOutput = if ablate {
        pipeline::ablate(&cfg, &spec, txns.clone())?
    } else {
        pipeline::run_pipeline(&cfg, &spec, txns.clone())?
    };
    artifacts::write_run(&args.out, &out, &spec, &txns)?;

    let m = &out.metrics;
    println!(
        "{} txns kept, {} dropped, {} blocks",
        m.kept_count,
        m.drop_count,
        out.blocks.len()
    );
    println!(
        "tps {:.0}  measured_tlp {:.2}  mean_frame_size {:.2}  frames {}  fp_tlp_loss {:.1}%",
        m.tps, m.measured_tlp, m.mean_frame_size, m.frame_count, m.fp_tlp_loss_pct
    );
    if let Some(root) = m.block_roots.last() {
        println!("final root {root}");
    }
    if m.mean_frame_size_ratio() > m.measured_tlp_ratio() {
        bail!("scheduler stage: measured TLP below mean frame size");
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_verify(dir: &Path) -> Result<bool> {
    if !dir.is_dir() {
        bail!("run directory {} does not exist", dir.display());
    }
    let report = artifacts::verify_dir(dir)?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::Generate {
            workload,
            skew,
            out,
        } => {
            let spec = workload.spec(&skew);
            let txns = generate(&spec)?;
            artifacts::write_workload_file(&out, &spec, &txns)?;
            println!("wrote {} records to {}", txns.len(), out.display());
            Ok(true)
        }
        Command::Run(args) => cmd_run(&args, false).map(|()| true),
        Command::Ablate(args) => cmd_run(&args, true).map(|()| true),
        Command::Verify { out } => cmd_verify(&out),
        Command::Sweep {
            workload,
            pipeline: p,
            alphas,
            gammas,
            workers,
            out,
        } => {
            if alphas.is_empty() || gammas.is_empty() || workers.is_empty() {
                bail!("sweep grid is empty");
            }
            let spec = workload.spec(&SkewArgs {
                alpha: 0.0,
                gamma: 0,
            });
            let rows = pipeline::sweep(&p.config(1), &spec, &alphas, &gammas, &workers);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(SWEEP_FILE);
            artifacts::write_sweep_csv(&path, &rows)?;
            for r in &rows {
                match &r.error {
                    None => println!(
                        "alpha {} gamma {} workers {}: tps {:.0} tlp {:.2} frames {}",
                        r.alpha, r.gamma, r.workers, r.tps, r.tlp, r.frames
                    ),
                    Some(e) => println!(
                        "alpha {} gamma {} workers {}: failed: {e}",
                        r.alpha, r.gamma, r.workers
                    ),
                }
            }
            println!("wrote {}", path.display());
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AOF_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
