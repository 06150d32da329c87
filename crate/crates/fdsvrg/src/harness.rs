//! Experiment driver: flat `key = value` configs, one run per call, CSV and
//! summary outputs, lambda sweeps and speedup tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fdsvrg_core::analysis::{logistic_constants, solve_optimum, verify_contraction, ContractionReport};
use fdsvrg_core::comm::CommLedger;
use fdsvrg_core::config::{RunConfig, SvrgOption};
use fdsvrg_core::data::{partition_by_feature, partition_by_instance, LabeledDataset};
use fdsvrg_core::error::{AnalysisError, RunError};
use fdsvrg_core::fd::fd_svrg_run;
use fdsvrg_core::model::{LossKind, Regularizer};
use fdsvrg_core::ps::{worker_streams, AsyncSchedule, AsyncStats, Interleaving};
use fdsvrg_core::sampling::{IndexStream, Sampling};
use fdsvrg_core::svrg::{svrg_run_with, DotMode};
use fdsvrg_core::synth::{make_synthetic, SyntheticSpec};
use fdsvrg_core::trace::{first_below, Clock, NoClock, RunOptions, TraceRecord};

use crate::error::Error;
use crate::fabric::Backend;
use crate::libsvm::read_libsvm;
use crate::output::{write_ledger, write_trace};
use crate::threaded::{asysvrg_threaded, dsvrg_threaded, fd_svrg_threaded, synsvrg_threaded, AsyncMode, NetOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Serial,
    FdSvrg,
    SynSvrg,
    AsySvrg,
    DsvrgStyle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Serial,
        Algorithm::FdSvrg,
        Algorithm::SynSvrg,
        Algorithm::AsySvrg,
        Algorithm::DsvrgStyle,
    ];

    pub fn parse(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Serial => "serial",
            Algorithm::FdSvrg => "fd-svrg",
            Algorithm::SynSvrg => "synsvrg",
            Algorithm::AsySvrg => "asysvrg",
            Algorithm::DsvrgStyle => "dsvrg-style",
        }
    }

    /// Whether workers hold whole instances.
    pub fn by_instance(self) -> bool {
        matches!(self, Algorithm::SynSvrg | Algorithm::AsySvrg | Algorithm::DsvrgStyle)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Libsvm(PathBuf),
}

/// Where `f(w*)` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimumPolicy {
    /// Serial SVRG run until the gradient norm falls below the tolerance.
    LongRun,
    /// A file holding the optimal objective value.
    File(PathBuf),
    /// No optimum; the gap column is NaN.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: Option<DataSource>,
    /// Forced dimensionality for LIBSVM input.
    pub dim: Option<usize>,
    pub algorithm: Algorithm,
    pub workers: usize,
    pub servers: usize,
    pub eta: f64,
    pub lambda: f64,
    pub regularizer: String,
    pub loss: LossKind,
    pub batch: usize,
    pub outer: usize,
    /// Inner loop length; the per-worker instance count when absent.
    pub inner: Option<usize>,
    pub seed: u64,
    pub sampling: Sampling,
    pub option: SvrgOption,
    pub backend: Backend,
    pub deterministic: bool,
    pub staleness: usize,
    pub interleaving: Interleaving,
    pub optimum: OptimumPolicy,
    pub optimum_tol: f64,
    pub optimum_outer: usize,
    pub stop_gap: Option<f64>,
    pub gap_threshold: f64,
    pub timeout_secs: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: None,
            dim: None,
            algorithm: Algorithm::FdSvrg,
            workers: 1,
            servers: 1,
            eta: 0.1,
            lambda: 1e-3,
            regularizer: "l2".into(),
            loss: LossKind::Logistic,
            batch: 1,
            outer: 10,
            inner: None,
            seed: 0,
            sampling: Sampling::WithReplacement,
            option: SvrgOption::One,
            backend: Backend::InProc,
            deterministic: false,
            staleness: 0,
            interleaving: Interleaving::RoundRobin,
            optimum: OptimumPolicy::LongRun,
            optimum_tol: 1e-12,
            optimum_outer: 500,
            stop_gap: None,
            gap_threshold: 1e-4,
            timeout_secs: 60,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn synthetic(cfg: &mut ExperimentConfig) -> &mut SyntheticSpec {
    if !matches!(cfg.data, Some(DataSource::Synthetic(_))) {
        cfg.data = Some(DataSource::Synthetic(SyntheticSpec::new(100, 100, 0.1, 0)));
    }
    match &mut cfg.data {
        Some(DataSource::Synthetic(s)) => s,
        _ => unreachable!("set above"),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative dataset
    /// paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, Error> {
        let mut cfg = Self::default();
        for (k, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", k + 1)))?;
            cfg.set(key.trim(), value.trim(), base)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), Error> {
        match key {
            "dataset" => {
                self.data = Some(if value == "synthetic" {
                    match self.data.take() {
                        Some(DataSource::Synthetic(s)) => DataSource::Synthetic(s),
                        _ => DataSource::Synthetic(SyntheticSpec::new(100, 100, 0.1, 0)),
                    }
                } else {
                    DataSource::Libsvm(base.join(value))
                })
            }
            "dim" => self.dim = Some(num(key, value)?),
            "d" => synthetic(self).d = num(key, value)?,
            "n" => synthetic(self).n = num(key, value)?,
            "sparsity" => synthetic(self).sparsity = num(key, value)?,
            "data_seed" => synthetic(self).seed = num(key, value)?,
            "margin" => synthetic(self).margin = num(key, value)?,
            "flip" => synthetic(self).flip = num(key, value)?,
            "normalize" => synthetic(self).normalize = flag(key, value)?,
            "algorithm" => self.algorithm = Algorithm::parse(value)?,
            "workers" => self.workers = num(key, value)?,
            "servers" => self.servers = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "regularizer" => match value {
                "l2" | "l1" => self.regularizer = value.into(),
                _ => return Err(Error::Config(format!("unknown regularizer `{value}`"))),
            },
            "loss" => {
                self.loss = match value {
                    "logistic" => LossKind::Logistic,
                    "hinge" => LossKind::Hinge,
                    _ => return Err(Error::Config(format!("unknown loss `{value}`"))),
                }
            }
            "batch" => self.batch = num(key, value)?,
            "outer" => self.outer = num(key, value)?,
            "inner" => self.inner = if value == "auto" { None } else { Some(num(key, value)?) },
            "seed" => self.seed = num(key, value)?,
            "sampling" => {
                self.sampling = match value {
                    "with-replacement" => Sampling::WithReplacement,
                    "shuffled" => Sampling::Shuffled,
                    _ => return Err(Error::Config(format!("unknown sampling `{value}`"))),
                }
            }
            "option" => {
                self.option = match value {
                    "1" => SvrgOption::One,
                    "2" => SvrgOption::Two,
                    _ => return Err(Error::Config(format!("option must be 1 or 2, got `{value}`"))),
                }
            }
            "backend" => {
                self.backend =
                    Backend::parse(value).ok_or_else(|| Error::Config(format!("unknown backend `{value}`")))?
            }
            "deterministic" => self.deterministic = flag(key, value)?,
            "staleness" => self.staleness = num(key, value)?,
            "interleaving" => {
                self.interleaving = match value {
                    "round-robin" => Interleaving::RoundRobin,
                    "random" => Interleaving::Random,
                    _ => return Err(Error::Config(format!("unknown interleaving `{value}`"))),
                }
            }
            "optimum" => {
                self.optimum = match value {
                    "long-run" => OptimumPolicy::LongRun,
                    "none" => OptimumPolicy::None,
                    _ => match value.strip_prefix("file:") {
                        Some(p) => OptimumPolicy::File(base.join(p)),
                        None => return Err(Error::Config(format!("unknown optimum policy `{value}`"))),
                    },
                }
            }
            "optimum_tol" => self.optimum_tol = num(key, value)?,
            "optimum_outer" => self.optimum_outer = num(key, value)?,
            "stop_gap" => self.stop_gap = if value == "none" { None } else { Some(num(key, value)?) },
            "gap_threshold" => self.gap_threshold = num(key, value)?,
            "timeout_secs" => self.timeout_secs = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting, one per line, in a fixed order. Parsing the result
    /// gives back the same config.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.data {
            Some(DataSource::Synthetic(spec)) => {
                put("dataset", "synthetic".into());
                put("d", spec.d.to_string());
                put("n", spec.n.to_string());
                put("sparsity", spec.sparsity.to_string());
                put("data_seed", spec.seed.to_string());
                put("margin", spec.margin.to_string());
                put("flip", spec.flip.to_string());
                put("normalize", spec.normalize.to_string());
            }
            Some(DataSource::Libsvm(p)) => put("dataset", p.display().to_string()),
            None => {}
        }
        if let Some(d) = self.dim {
            put("dim", d.to_string());
        }
        put("algorithm", self.algorithm.as_str().into());
        put("workers", self.workers.to_string());
        put("servers", self.servers.to_string());
        put("eta", self.eta.to_string());
        put("lambda", self.lambda.to_string());
        put("regularizer", self.regularizer.clone());
        put(
            "loss",
            match self.loss {
                LossKind::Logistic => "logistic",
                LossKind::Hinge => "hinge",
            }
            .into(),
        );
        put("batch", self.batch.to_string());
        put("outer", self.outer.to_string());
        put("inner", self.inner.map_or("auto".into(), |m| m.to_string()));
        put("seed", self.seed.to_string());
        put(
            "sampling",
            match self.sampling {
                Sampling::WithReplacement => "with-replacement",
                Sampling::Shuffled => "shuffled",
            }
            .into(),
        );
        put(
            "option",
            match self.option {
                SvrgOption::One => "1",
                SvrgOption::Two => "2",
            }
            .into(),
        );
        put("backend", self.backend.as_str().into());
        put("deterministic", self.deterministic.to_string());
        put("staleness", self.staleness.to_string());
        put(
            "interleaving",
            match self.interleaving {
                Interleaving::RoundRobin => "round-robin",
                Interleaving::Random => "random",
            }
            .into(),
        );
        put(
            "optimum",
            match &self.optimum {
                OptimumPolicy::LongRun => "long-run".into(),
                OptimumPolicy::File(p) => format!("file:{}", p.display()),
                OptimumPolicy::None => "none".into(),
            },
        );
        put("optimum_tol", self.optimum_tol.to_string());
        put("optimum_outer", self.optimum_outer.to_string());
        put("stop_gap", self.stop_gap.map_or("none".into(), |g| g.to_string()));
        put("gap_threshold", self.gap_threshold.to_string());
        put("timeout_secs", self.timeout_secs.to_string());
        s
    }

    pub fn regularizer(&self) -> Regularizer {
        if self.regularizer == "l1" {
            Regularizer::L1(self.lambda)
        } else {
            Regularizer::L2(self.lambda)
        }
    }

    /// Inner loop length for a dataset of `n` instances.
    pub fn inner_for(&self, n: usize) -> usize {
        self.inner.unwrap_or(if self.algorithm.by_instance() {
            (n / self.workers.max(1)).max(1)
        } else {
            n
        })
    }

    pub fn run_config(&self, n: usize) -> RunConfig {
        RunConfig::new(self.eta, self.inner_for(n), self.outer, self.regularizer())
            .with_batch(self.batch)
            .with_seed(self.seed)
            .with_option(self.option)
            .with_loss(self.loss)
            .with_sampling(self.sampling)
    }

    pub fn load_data(&self) -> Result<LabeledDataset, Error> {
        match &self.data {
            None => Err(Error::Config("missing dataset".into())),
            Some(DataSource::Synthetic(spec)) => Ok(make_synthetic(spec)?.data),
            Some(DataSource::Libsvm(path)) => read_libsvm(path, self.dim),
        }
    }
}

/// FNV-1a, used to tag rows of aggregate reports with their config.
pub fn config_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Parses an optimum file: either a bare number or an `objective = x` line.
pub fn read_optimum(path: &Path) -> Result<f64, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Optimum(format!("{}: {e}", path.display())))?;
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let value = match body.split_once('=') {
            Some((k, v)) if k.trim() == "objective" => v.trim(),
            Some(_) => continue,
            None => body,
        };
        return value
            .parse()
            .map_err(|_| Error::Optimum(format!("{}: bad value `{value}`", path.display())));
    }
    Err(Error::Optimum(format!("{}: no objective value", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumValue {
    pub objective: f64,
    pub source: String,
    pub converged: bool,
}

/// Cache of long-run optima keyed by the data and objective settings.
#[derive(Debug, Default)]
pub struct OptimumCache(BTreeMap<u64, OptimumValue>);

/// Solver settings for the reference optimum. Smooth logistic problems use a
/// step of `1 / (4 L)`; anything else falls back to the run's step size.
fn oracle_config(cfg: &ExperimentConfig, data: &LabeledDataset) -> RunConfig {
    let reg = cfg.regularizer();
    let eta = match (cfg.loss, logistic_constants(data, reg)) {
        (LossKind::Logistic, Ok(c)) => 0.25 / c.l,
        _ => cfg.eta,
    };
    RunConfig::new(eta, data.n(), 1, reg)
        .with_loss(cfg.loss)
        .with_seed(cfg.seed)
}

fn objective_key(cfg: &ExperimentConfig) -> u64 {
    let mut key = ExperimentConfig {
        data: cfg.data.clone(),
        dim: cfg.dim,
        lambda: cfg.lambda,
        regularizer: cfg.regularizer.clone(),
        loss: cfg.loss,
        eta: cfg.eta,
        optimum_tol: cfg.optimum_tol,
        optimum_outer: cfg.optimum_outer,
        ..ExperimentConfig::default()
    }
    .resolved();
    key.push_str(&cfg.seed.to_string());
    config_hash(&key)
}

impl OptimumCache {
    pub fn resolve(&mut self, cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<Option<OptimumValue>, Error> {
        match &cfg.optimum {
            OptimumPolicy::None => Ok(None),
            OptimumPolicy::File(p) => Ok(Some(OptimumValue {
                objective: read_optimum(p)?,
                source: format!("file:{}", p.display()),
                converged: true,
            })),
            OptimumPolicy::LongRun => {
                let key = objective_key(cfg);
                if let Some(v) = self.0.get(&key) {
                    return Ok(Some(v.clone()));
                }
                let opt = solve_optimum(data, &oracle_config(cfg, data), cfg.optimum_tol, cfg.optimum_outer)
                    .map_err(|e| Error::Optimum(e.to_string()))?;
                let v = OptimumValue {
                    objective: opt.objective,
                    source: format!("long-run:{}", opt.outer_loops),
                    converged: opt.converged,
                };
                self.0.insert(key, v.clone());
                Ok(Some(v))
            }
        }
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trace: Vec<TraceRecord>,
    pub ledger: CommLedger,
    pub weights: Vec<f64>,
    pub optimum: Option<OptimumValue>,
    pub stats: Option<AsyncStats>,
    /// Wall-clock seconds for the whole run, zero when deterministic.
    pub seconds: f64,
}

impl RunReport {
    /// First row at or below the gap threshold.
    pub fn reached(&self, threshold: f64) -> Option<&TraceRecord> {
        first_below(&self.trace, threshold)
    }

    pub fn summary(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::new();
        let last = self.trace.last();
        let _ = write!(
            s,
            "algorithm={} workers={} servers={} eta={} lambda={} rows={} final_objective={} final_gap={}",
            cfg.algorithm.as_str(),
            cfg.workers,
            cfg.servers,
            cfg.eta,
            cfg.lambda,
            self.trace.len(),
            last.map_or(f64::NAN, |r| r.objective),
            last.map_or(f64::NAN, |r| r.gap),
        );
        let th = cfg.gap_threshold;
        match self.reached(th) {
            Some(r) => {
                let secs = if cfg.deterministic { 0.0 } else { r.seconds };
                let _ = write!(
                    s,
                    " time_to_gap_{th:e}={secs} loops_to_gap_{th:e}={} comm_to_gap_{th:e}={}",
                    r.t, r.comm_scalars
                );
            }
            None => {
                let _ = write!(
                    s,
                    " time_to_gap_{th:e}=DNF loops_to_gap_{th:e}=DNF comm_to_gap_{th:e}=DNF"
                );
            }
        }
        let _ = write!(
            s,
            " comm_total={} instrumentation={} wall_seconds={}",
            self.ledger.algorithm_total(),
            self.ledger.total() - self.ledger.algorithm_total(),
            self.seconds
        );
        if let Some(o) = &self.optimum {
            let _ = write!(
                s,
                " optimum={} optimum_source={} optimum_converged={}",
                o.objective, o.source, o.converged
            );
        }
        if let Some(st) = &self.stats {
            let _ = write!(
                s,
                " pulls={} pushes={} abandoned={} max_staleness={}",
                st.pulls, st.pushes, st.abandoned, st.max_staleness
            );
        }
        s.push('\n');
        s
    }
}

/// Runs one experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &mut OptimumCache) -> Result<RunReport, Error> {
    let data = cfg.load_data()?;
    run_on(cfg, &data, cache)
}

/// Runs one experiment on already loaded data.
pub fn run_on(cfg: &ExperimentConfig, data: &LabeledDataset, cache: &mut OptimumCache) -> Result<RunReport, Error> {
    let optimum = cache.resolve(cfg, data)?;
    if cfg.stop_gap.is_some() && optimum.is_none() {
        return Err(Error::Optimum("a stopping gap needs an optimum".into()));
    }
    if cfg.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let run = cfg.run_config(data.n());
    let start = Instant::now();
    let wall = WallClock(start);
    let clock: &dyn Clock = if cfg.deterministic { &NoClock } else { &wall };
    let mut opts = RunOptions::default().with_clock(clock);
    if let Some(o) = &optimum {
        opts = opts.with_optimum(o.objective);
    }
    if let Some(g) = cfg.stop_gap {
        opts = opts.with_stop_gap(g);
    }
    let net = NetOptions {
        backend: cfg.backend,
        timeout: Duration::from_secs(cfg.timeout_secs),
    };
    let q = cfg.workers;
    let (trace, ledger, weights, stats) = match cfg.algorithm {
        Algorithm::Serial => {
            let out = svrg_run_with(
                data,
                &run,
                IndexStream::new(run.seed),
                &DotMode::for_workers(data.d(), q),
                &opts,
            )?;
            (out.trace, CommLedger::new(), out.weights, None)
        }
        Algorithm::FdSvrg => {
            let shards = partition_by_feature(data, q)?;
            let out = fd_svrg_threaded(shards, &run, IndexStream::new(run.seed), &opts, &net)?;
            (out.trace, out.ledger, out.weights, None)
        }
        Algorithm::SynSvrg => {
            let shards = partition_by_instance(data, q)?;
            let streams = worker_streams(run.seed, q);
            let out = synsvrg_threaded(&shards, cfg.servers, &run, &streams, &opts, &net)?;
            (out.trace, out.ledger, out.weights, None)
        }
        Algorithm::AsySvrg => {
            let shards = partition_by_instance(data, q)?;
            let streams = worker_streams(run.seed, q);
            let mode = if cfg.deterministic {
                AsyncMode::Scheduled(AsyncSchedule::new(run.seed, cfg.staleness, cfg.interleaving))
            } else {
                AsyncMode::FreeRunning {
                    staleness: cfg.staleness,
                }
            };
            let out = asysvrg_threaded(&shards, cfg.servers, &run, &streams, mode, &opts, &net)?;
            (out.trace, out.ledger, out.weights, out.stats)
        }
        Algorithm::DsvrgStyle => {
            let shards = partition_by_instance(data, q)?;
            let streams = worker_streams(run.seed, q);
            let out = dsvrg_threaded(&shards, &run, &streams, &opts, &net)?;
            (out.trace, out.ledger, out.weights, None)
        }
    };
    let seconds = if cfg.deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    };
    Ok(RunReport {
        trace,
        ledger,
        weights,
        optimum,
        stats,
        seconds,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

/// Writes `trace.csv`, `ledger.csv`, `summary.txt` and `resolved.cfg`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, report: &RunReport) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_trace(create(&dir.join("trace.csv"))?, &report.trace, cfg.deterministic)?;
    write_ledger(create(&dir.join("ledger.csv"))?, &report.ledger)?;
    let summary = dir.join("summary.txt");
    fs::write(&summary, report.summary(cfg)).map_err(Error::io(&summary))?;
    let resolved = dir.join("resolved.cfg");
    fs::write(&resolved, cfg.resolved()).map_err(Error::io(&resolved))?;
    Ok(())
}

/// Runs `cfg` once per lambda. Each run gets its own output directory and a
/// `curve_lambda_<x>.csv` copy of its trace in `dir`.
pub fn lambda_sweep(cfg: &ExperimentConfig, lambdas: &[f64], dir: &Path) -> Result<Vec<(f64, RunReport)>, Error> {
    let data = cfg.load_data()?;
    let mut cache = OptimumCache::default();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let c = ExperimentConfig { lambda, ..cfg.clone() };
        let report = run_on(&c, &data, &mut cache)?;
        write_outputs(&dir.join(format!("lambda_{lambda:e}")), &c, &report)?;
        write_trace(
            create(&dir.join(format!("curve_lambda_{lambda:e}.csv")))?,
            &report.trace,
            c.deterministic,
        )?;
        out.push((lambda, report));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub workers: usize,
    /// Seconds to reach the gap threshold; `None` marks DNF.
    pub seconds: Option<f64>,
    pub speedup: Option<f64>,
    pub ideal: f64,
}

/// `seconds(q=1) / seconds(q)` for every run. Runs that missed the
/// threshold are kept as DNF rows without a speedup.
pub fn speedup_report(runs: &[(usize, Option<f64>)]) -> Result<Vec<SpeedupRow>, Error> {
    let base = runs
        .iter()
        .find(|(q, _)| *q == 1)
        .and_then(|(_, s)| *s)
        .ok_or(Error::MissingBaseline)?;
    Ok(runs
        .iter()
        .map(|&(q, s)| SpeedupRow {
            workers: q,
            seconds: s,
            speedup: s.map(|x| base / x),
            ideal: q as f64,
        })
        .collect())
}

pub fn write_speedup<W: Write>(out: W, rows: &[SpeedupRow]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["workers", "seconds", "speedup", "ideal"])?;
    for r in rows {
        w.write_record([
            r.workers.to_string(),
            r.seconds.map_or("DNF".into(), |s| s.to_string()),
            r.speedup.map_or("DNF".into(), |s| s.to_string()),
            r.ideal.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io("<csv>"))?;
    Ok(())
}

/// Runs `cfg` at each worker count and tabulates time to the gap threshold.
pub fn speedup_experiment(cfg: &ExperimentConfig, workers: &[usize], dir: &Path) -> Result<Vec<SpeedupRow>, Error> {
    let data = cfg.load_data()?;
    let mut cache = OptimumCache::default();
    let mut runs = Vec::with_capacity(workers.len());
    for &q in workers {
        let c = ExperimentConfig {
            workers: q,
            ..cfg.clone()
        };
        let report = run_on(&c, &data, &mut cache)?;
        write_outputs(&dir.join(format!("workers_{q}")), &c, &report)?;
        runs.push((q, report.reached(cfg.gap_threshold).map(|r| r.seconds)));
    }
    let rows = speedup_report(&runs)?;
    write_speedup(create(&dir.join("speedup.csv"))?, &rows)?;
    Ok(rows)
}

/// Monte-Carlo check of the one-outer-loop contraction bound with analytic
/// logistic constants. Each trial runs one outer loop from zero with its own
/// seed. Returns the config hash with the report.
pub fn contraction_experiment(cfg: &ExperimentConfig, trials: usize) -> Result<(u64, ContractionReport), Error> {
    if cfg.loss != LossKind::Logistic {
        return Err(AnalysisError::Unsupported.into());
    }
    let data = cfg.load_data()?;
    let consts = logistic_constants(&data, cfg.regularizer())?;
    let run = RunConfig {
        outer: 1,
        ..cfg.run_config(data.n())
    };
    let opt = solve_optimum(&data, &oracle_config(cfg, &data), cfg.optimum_tol, cfg.optimum_outer)?;
    if !opt.converged {
        return Err(Error::Optimum(format!(
            "gradient norm {} after {} outer loops",
            opt.gradient_norm, opt.outer_loops
        )));
    }
    let w0 = vec![0.0; data.d()];
    let q = cfg.workers;
    let algorithm = cfg.algorithm;
    let dot = DotMode::for_workers(data.d(), q);
    let runner = |trial: u64| -> Result<Vec<f64>, RunError> {
        let stream = IndexStream::new(cfg.seed.wrapping_add(trial));
        let opts = RunOptions::default().with_start(&w0);
        match algorithm {
            Algorithm::FdSvrg => Ok(fd_svrg_run(partition_by_feature(&data, q)?, &run, stream, &opts)?.weights),
            _ => Ok(svrg_run_with(&data, &run, stream, &dot, &opts)?.weights),
        }
    };
    if !matches!(algorithm, Algorithm::Serial | Algorithm::FdSvrg) {
        return Err(Error::Config(format!(
            "no contraction check for {}",
            algorithm.as_str()
        )));
    }
    let report = verify_contraction(runner, &consts, cfg.eta, run.inner_steps(), trials, &w0, &opt.weights)?;
    Ok((config_hash(&cfg.resolved()), report))
}
