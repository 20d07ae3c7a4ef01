//! Command-line front end: `train`, `sample`, `compare`, `sweep`, `verify`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Result;
use crate::harness::{self, fmt9, load_config, ExperimentConfig, SweepParam};
use crate::par::Execution;
use crate::verification::SuiteSizes;

#[derive(Parser, Debug)]
#[command(name = "datelab", about = "Adaptive conditioning embeddings for diffusion sampling on desk-scale models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to the desk task, prompt 0.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to the config's `output_dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the score network by denoising score matching.
    Train(Common),
    /// Sample with the configured method and write trajectories and metrics.
    Sample(Common),
    /// Fixed embedding vs DATE vs guidance baselines vs ablations.
    Compare(Common),
    /// One DATE run per parameter value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// rho, fraction, placement or iters.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run the verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run one check only.
        #[arg(long)]
        check: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reduced sample sizes.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        sequential: bool,
    },
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::desk(0),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(n) = self.samples {
            cfg.n_samples = n;
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), fmt9)
}

fn written(dir: &Path, files: &[&str]) {
    for f in files {
        println!("wrote {}", dir.join(f).display());
    }
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(common) => {
            let (cfg, out) = common.resolve()?;
            let outcome = harness::train(&cfg, &out, exec(common.sequential))?;
            println!(
                "trained {} parameters for {} steps, final loss {}",
                outcome.net.num_params(),
                outcome.losses.len(),
                opt(outcome.losses.last().copied())
            );
            written(&out, &["checkpoint.json", "losses.csv"]);
        }
        Command::Sample(common) => {
            let (cfg, out) = common.resolve()?;
            let m = harness::sample(&cfg, &out, exec(common.sequential))?;
            println!(
                "n={} mean_h={} se_h={} frechet={} updates={}",
                m.n,
                fmt9(m.mean_h),
                opt(m.se_h),
                fmt9(m.frechet),
                fmt9(m.mean_updates)
            );
            written(&out, &["trajectories.jsonl", "metrics.json", "trace.csv"]);
        }
        Command::Compare(common) => {
            let (cfg, out) = common.resolve()?;
            let r = harness::compare(&cfg, exec(common.sequential))?;
            harness::write_compare(&r, &out)?;
            println!(
                "{:<14}{:>16}{:>16}{:>16}{:>7}{:>9}{:>17}{:>17}",
                "method", "mean_h", "se_h", "frechet", "steps", "updates", "diff", "p"
            );
            for row in &r.rows {
                println!(
                    "{:<14}{:>16}{:>16}{:>16}{:>7}{:>9}{:>17}{:>17}",
                    row.method,
                    fmt9(row.mean_h),
                    opt(row.se_h),
                    fmt9(row.frechet),
                    row.steps,
                    fmt9(row.updates),
                    opt(row.diff_vs_fixed),
                    opt(row.p_vs_fixed)
                );
            }
            written(&out, &["compare.csv", "compare.json"]);
        }
        Command::Sweep { common, param, values } => {
            let (cfg, out) = common.resolve()?;
            let param: SweepParam = param.parse()?;
            let r = harness::sweep(&cfg, param, &values, exec(common.sequential))?;
            harness::write_sweep(&r, &out)?;
            println!("fixed: mean_h={} frechet={}", fmt9(r.fixed_mean_h), fmt9(r.fixed_frechet));
            print!("{}", std::fs::read_to_string(out.join("sweep.csv"))?);
            written(&out, &["sweep.csv", "sweep.json"]);
        }
        Command::Verify {
            seed,
            check,
            out,
            quick,
            sequential,
        } => {
            let sizes = if quick { SuiteSizes::quick() } else { SuiteSizes::default() };
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            let r = harness::verify(seed, check.as_deref(), &sizes, &out, exec(sequential))?;
            for c in &r.checks {
                println!("{:<20} {}  ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.tolerance);
            }
            written(&out, &["verify.json"]);
            return Ok(if r.all_passed { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on a runtime error or failed check,
/// 2 on a usage error.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    if argv.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_usage());
        eprintln!("subcommands: train, sample, compare, sweep, verify (see --help)");
        return 2;
    }
    match Cli::try_parse_from(argv) {
        Ok(cli) => match run(cli.command) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
