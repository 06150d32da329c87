use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdsvrg::harness::{
    contraction_experiment, lambda_sweep, run_experiment, speedup_experiment, write_outputs, ExperimentConfig,
    OptimumCache,
};
use fdsvrg::output::write_contraction_reports;
use fdsvrg::Error;

#[derive(Parser)]
#[command(
    name = "fdsvrg",
    version,
    about = "Distributed SVRG experiments with exact communication accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One run: trace.csv, ledger.csv, summary.txt and resolved.cfg.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// One run per lambda, each with its own curve file.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated regularization strengths.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Time to the gap threshold at several worker counts.
    Speedup {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts; must include 1.
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16")]
        worker_counts: Vec<usize>,
    },
    /// Monte-Carlo check of the one-outer-loop contraction bound.
    Contraction {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    servers: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// inproc or socket.
    #[arg(long)]
    backend: Option<String>,
    /// Reproducible schedule and zeroed time column.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    staleness: Option<usize>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        let here = Path::new(".");
        let overrides = [
            ("algorithm", self.algorithm.clone()),
            ("workers", self.workers.map(|v| v.to_string())),
            ("servers", self.servers.map(|v| v.to_string())),
            ("eta", self.eta.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("outer", self.outer.map(|v| v.to_string())),
            ("inner", self.inner.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("backend", self.backend.clone()),
            ("staleness", self.staleness.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v, here)?;
            }
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim(), here)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common } => {
            let cfg = common.config()?;
            let report = run_experiment(&cfg, &mut OptimumCache::default())?;
            write_outputs(&common.out, &cfg, &report)?;
            print!("{}", report.summary(&cfg));
        }
        Command::Sweep { common, lambdas } => {
            let cfg = common.config()?;
            for (lambda, report) in lambda_sweep(&cfg, &lambdas, &common.out)? {
                let c = ExperimentConfig { lambda, ..cfg.clone() };
                print!("{}", report.summary(&c));
            }
        }
        Command::Speedup { common, worker_counts } => {
            let cfg = common.config()?;
            let rows = speedup_experiment(&cfg, &worker_counts, &common.out)?;
            for r in &rows {
                match (r.seconds, r.speedup) {
                    (Some(s), Some(x)) => println!("workers={} seconds={s} speedup={x} ideal={}", r.workers, r.ideal),
                    _ => eprintln!(
                        "warning: workers={} did not reach the gap threshold; excluded",
                        r.workers
                    ),
                }
            }
        }
        Command::Contraction { common, trials } => {
            let cfg = common.config()?;
            let row = contraction_experiment(&cfg, trials)?;
            std::fs::create_dir_all(&common.out).map_err(Error::io(&common.out))?;
            let path = common.out.join("contraction.csv");
            let file = File::create(&path).map_err(Error::io(&path))?;
            write_contraction_reports(BufWriter::new(file), std::slice::from_ref(&row))?;
            let (_, r) = row;
            println!(
                "rho={} empirical_ratio={} allowed_ratio={} pass={}",
                r.bound.rho.map_or("undefined".into(), |x| x.to_string()),
                r.empirical_ratio,
                r.allowed_ratio,
                r.pass
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
