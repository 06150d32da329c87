use std::thread;

use fdsvrg_core::comm::{Endpoint, Phase, TreePlan};
use fdsvrg_core::config::RunConfig;
use fdsvrg_core::data::FeatureShard;
use fdsvrg_core::error::{ConfigError, ModelError, RunError};
use fdsvrg_core::fd::{check_shards, objective_from_margins, validate_fd, FdOutcome, FdWorker};
use fdsvrg_core::sampling::IndexStream;
use fdsvrg_core::svrg::diverged;
use fdsvrg_core::trace::RunOptions;

use super::{assemble, run_endpoint, settle, NetOptions, RowMarks, StopRule};
use crate::error::Error;
use crate::fabric::{tree_relay, tree_sum, Port};

/// Feature-distributed SVRG with one thread per worker and the coordinator on
/// the calling thread. Same trace, ledger and weights as
/// [`fdsvrg_core::fd::fd_svrg_run`], bit for bit.
pub fn fd_svrg_threaded(
    shards: Vec<FeatureShard>,
    cfg: &RunConfig,
    stream: IndexStream,
    opts: &RunOptions<'_>,
    net: &NetOptions,
) -> Result<FdOutcome, Error> {
    validate_fd(cfg)?;
    check_shards(&shards)?;
    let q = shards.len();
    let n = shards[0].matrix.n();
    if n == 0 {
        return Err(RunError::from(ConfigError::ZeroCount("instance count")).into());
    }
    let mut workers: Vec<FdWorker> = shards.into_iter().map(|s| FdWorker::new(s, cfg)).collect();
    if let Some(w0) = opts.start {
        let d: usize = workers.iter().map(|w| w.shard().len()).sum();
        if w0.len() != d {
            let e = ModelError::DimensionMismatch {
                expected: d,
                actual: w0.len(),
            };
            return Err(RunError::from(e).into());
        }
        for w in workers.iter_mut() {
            let rows = w.shard().rows.clone();
            w.set_weights(&w0[rows]);
        }
    }
    let labels = workers[0].shard().labels.clone();
    let plan = TreePlan::new(q);
    let stop = StopRule::new(opts);

    let mut endpoints = vec![Endpoint::Coordinator];
    endpoints.extend(workers.iter().map(FdWorker::endpoint));
    let (_fabric, mut ports) = net.start(&endpoints)?;
    let coordinator = ports.remove(0);

    let (driver, reports) = thread::scope(|s| {
        let handles: Vec<_> = ports
            .into_iter()
            .zip(workers)
            .map(|(port, worker)| {
                let plan = &plan;
                s.spawn(move || run_endpoint(port, |p, marks| worker_loop(p, marks, worker, plan, cfg, stream, stop)))
            })
            .collect();
        let driver = run_endpoint(coordinator, |p, marks| coordinator_loop(p, marks, &labels, cfg, opts));
        settle(driver, handles)
    })?;

    let (coord_tally, mut trace) = driver;
    let ledger = assemble(
        &mut trace,
        std::iter::once(&coord_tally).chain(reports.iter().map(|(t, _)| t)),
    );
    let shards: Vec<FeatureShard> = reports.into_iter().map(|(_, w)| w.into_shard()).collect();
    Ok(FdOutcome {
        weights: FeatureShard::assemble_weights(&shards),
        trace,
        ledger,
        shards,
    })
}

fn check_finite(values: &[f64], t: usize, m: usize) -> Result<(), RunError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RunError::Divergence { t, m })
    }
}

fn coordinator_loop(
    port: &mut Port,
    marks: &mut RowMarks,
    labels: &[f64],
    cfg: &RunConfig,
    opts: &RunOptions<'_>,
) -> Result<Vec<fdsvrg_core::trace::TraceRecord>, RunError> {
    let steps = cfg.inner_steps();
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    let evaluate = |port: &mut Port, phase: Phase, t: usize| -> Result<f64, RunError> {
        let reg_sum = tree_relay(port, Phase::Instrumentation)?[0];
        let margins = tree_relay(port, phase)?;
        check_finite(&margins, t, 0)?;
        let f = objective_from_margins(cfg, labels, &margins, reg_sum).map_err(diverged(t, 0))?;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(RunError::Divergence { t, m: 0 })
        }
    };
    for t in 0..cfg.outer {
        marks.mark(port);
        let rec = opts.record(t, evaluate(port, Phase::FullGradient, t)?, 0);
        trace.push(rec);
        if opts.should_stop(&rec) {
            return Ok(trace);
        }
        let mut m = 0;
        while m < steps {
            check_finite(&tree_relay(port, Phase::InnerLoop)?, t, m)?;
            m += cfg.batch;
        }
    }
    marks.mark(port);
    trace.push(opts.record(cfg.outer, evaluate(port, Phase::Instrumentation, cfg.outer)?, 0));
    Ok(trace)
}

fn worker_loop(
    port: &mut Port,
    marks: &mut RowMarks,
    mut worker: FdWorker,
    plan: &TreePlan,
    cfg: &RunConfig,
    stream: IndexStream,
    stop: StopRule,
) -> Result<FdWorker, RunError> {
    let n = worker.n();
    let steps = cfg.inner_steps();
    let mut batch = Vec::with_capacity(cfg.batch);
    for t in 0..cfg.outer {
        marks.mark(port);
        let reg_sum = tree_sum(port, plan, vec![worker.regularizer_partial()], Phase::Instrumentation)?[0];
        let margins = tree_sum(port, plan, worker.full_partials(), Phase::FullGradient)?;
        let f = objective_from_margins(cfg, &worker.shard().labels, &margins, reg_sum).map_err(diverged(t, 0))?;
        worker.absorb_full_margins(margins).map_err(diverged(t, 0))?;
        if !f.is_finite() {
            return Err(RunError::Divergence { t, m: 0 });
        }
        if stop.hit(f) {
            return Ok(worker);
        }
        let mut indices = stream.epoch(t, n, cfg.sampling);
        let mut m = 0;
        while m < steps {
            batch.clear();
            batch.extend((0..cfg.batch).map(|_| indices.next_index()));
            let partials = worker.batch_partials(&batch)?;
            let margins = tree_sum(port, plan, partials, Phase::InnerLoop)?;
            worker.apply_batch(&batch, &margins).map_err(diverged(t, m))?;
            m += cfg.batch;
        }
    }
    marks.mark(port);
    tree_sum(port, plan, vec![worker.regularizer_partial()], Phase::Instrumentation)?;
    tree_sum(port, plan, worker.full_partials(), Phase::Instrumentation)?;
    Ok(worker)
}
