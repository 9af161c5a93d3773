//! `bench` command line: run modes over a workload, write workload files,
//! and run the built-in oracle checks.

pub mod config;

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use coopt_core::bench::{
    emit_report, generate_workload, run_benchmark, selftest, BenchReport, ReportFormat, Workload,
};

pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "bench", version, about = "Benchmark the paged FP8 attention engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a workload under each mode and write a report.
    Run(RunArgs),
    /// Generate a workload file from the [workload] section of a config.
    Workload(WorkloadArgs),
    /// Check paged attention against the dense reference and the FP8 codec.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags override the matching config fields.
#[derive(Debug, Default, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated: original, opt_kv, opt_gqa, opt_pa, coopt.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use a pre-generated workload file instead of [workload].
    #[arg(long)]
    pub workload: Option<PathBuf>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub workload_seed: Option<u64>,
    #[arg(long)]
    pub num_requests: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub max_batch_size: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct WorkloadArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    pub fn apply(&self, cfg: &mut Config) {
        let r = &mut cfg.run;
        if let Some(m) = &self.modes {
            r.modes = m.clone();
        }
        if let Some(f) = self.format {
            r.format = f;
        }
        if let Some(o) = &self.out {
            r.out = Some(o.clone());
        }
        if let Some(w) = &self.workload {
            r.workload_file = Some(w.clone());
        }
        if let Some(w) = self.warmup {
            r.warmup = w;
        }
        if let Some(n) = self.repeats {
            r.repeats = n;
        }
        if let Some(n) = self.max_batch_size {
            r.max_batch_size = n;
        }
        if let Some(b) = self.block_size {
            cfg.cache.block_size = b;
        }
        if let Some(c) = self.capacity {
            cfg.cache.capacity = Some(c);
        }
        if let Some(s) = self.model_seed {
            cfg.model.seed = s;
        }
        if let Some(s) = self.workload_seed {
            cfg.workload.seed = s;
        }
        if let Some(n) = self.num_requests {
            cfg.workload.num_requests = n;
        }
        if let Some(n) = self.max_new_tokens {
            cfg.workload.max_new_tokens = n;
        }
    }
}

/// Loads the config, applies flag overrides, runs every mode, and writes
/// the report (stdout when no output path is set).
pub fn run(args: &RunArgs) -> Result<BenchReport> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    args.apply(&mut cfg);
    let modes = cfg.modes()?;
    let workload = match &cfg.run.workload_file {
        Some(path) => Workload::read(path)?,
        None => generate_workload(&cfg.workload, cfg.model.vocab_size)?,
    };
    let report = run_benchmark(&workload, &modes, &cfg.bench_config())?;
    let expected = workload.checksum();
    for m in &report.modes {
        eprintln!("{}: workload sha256 {}", m.mode, m.workload_checksum);
        if let Some(e) = &m.error {
            eprintln!("{}: failed: {e}", m.mode);
        }
        if m.workload_checksum != expected {
            bail!("{} ran a different workload ({})", m.mode, m.workload_checksum);
        }
    }
    match &cfg.run.out {
        Some(path) => {
            emit_report(&report, cfg.run.format, path)?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let text = match cfg.run.format {
                ReportFormat::Json => report.to_json()? + "\n",
                ReportFormat::Csv => report.to_csv()?,
            };
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(report)
}

pub fn workload(args: &WorkloadArgs) -> Result<Workload> {
    let cfg = Config::load(&args.spec)?;
    let w = generate_workload(&cfg.workload, cfg.model.vocab_size)?;
    w.write(&args.out)
        .with_context(|| format!("writing workload {}", args.out.display()))?;
    eprintln!(
        "{} requests, {} prompt tokens, sha256 {}",
        w.requests.len(),
        w.total_prompt_tokens(),
        w.checksum()
    );
    Ok(w)
}

pub fn run_selftest(seed: u64) -> Result<()> {
    let summary = selftest(seed)?;
    println!(
        "{} checks, max paged-vs-reference error {:e}",
        summary.cases, summary.max_abs_error
    );
    for f in &summary.failures {
        println!("FAIL {f}");
    }
    if !summary.passed() {
        bail!("{} selftest checks failed", summary.failures.len());
    }
    println!("selftest passed");
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => run(args).map(drop),
        Command::Workload(args) => workload(args).map(drop),
        Command::Selftest { seed } => run_selftest(*seed),
    }
}
