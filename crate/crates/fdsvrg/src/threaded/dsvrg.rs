use std::ops::Range;
use std::thread;

use fdsvrg_core::comm::{Endpoint, Phase};
use fdsvrg_core::config::RunConfig;
use fdsvrg_core::data::InstanceShard;
use fdsvrg_core::dsvrg::DsvrgOutcome;
use fdsvrg_core::error::{CommError, ConfigError, ModelError, RunError};
use fdsvrg_core::ps::{check_instance_shards, InstanceWorker};
use fdsvrg_core::sampling::IndexStream;
use fdsvrg_core::svrg::diverged;
use fdsvrg_core::trace::{RunOptions, TraceRecord};

use super::{assemble, expect_len, run_endpoint, settle, NetOptions, RowMarks};
use crate::error::Error;
use crate::fabric::Port;

/// Rotating-active-machine SVRG with one thread per worker; same results as
/// [`fdsvrg_core::dsvrg::dsvrg_style_run`].
pub fn dsvrg_threaded(
    shards: &[InstanceShard],
    cfg: &RunConfig,
    streams: &[IndexStream],
    opts: &RunOptions<'_>,
    net: &NetOptions,
) -> Result<DsvrgOutcome, Error> {
    cfg.validate().map_err(RunError::from)?;
    let (d, n) = check_instance_shards(shards)?;
    let q = shards.len();
    if streams.len() != q {
        return Err(RunError::from(ConfigError::Mismatch("need one index stream per worker")).into());
    }
    let w0 = opts.initial(d);
    if w0.len() != d {
        let e = ModelError::DimensionMismatch {
            expected: d,
            actual: w0.len(),
        };
        return Err(RunError::from(e).into());
    }
    let inner = n / q;

    let mut endpoints = vec![Endpoint::Coordinator];
    endpoints.extend((1..=q).map(Endpoint::Worker));
    let (_fabric, mut ports) = net.start(&endpoints)?;
    let coordinator = ports.remove(0);

    let (driver, reports) = thread::scope(|s| {
        let handles: Vec<_> = ports
            .into_iter()
            .zip(shards)
            .zip(streams)
            .map(|((port, shard), &stream)| {
                let worker = InstanceWorker::new(shard.clone(), cfg);
                s.spawn(move || run_endpoint(port, |port, marks| worker_loop(port, marks, worker, inner, cfg, stream)))
            })
            .collect();
        let driver = run_endpoint(coordinator, |port, marks| {
            coordinator_loop(port, marks, w0, q, n, cfg, opts)
        });
        settle(driver, handles)
    })?;

    let (tally, (mut trace, weights, active)) = driver;
    let ledger = assemble(
        &mut trace,
        std::iter::once(&tally).chain(reports.iter().map(|(t, _)| t)),
    );
    let mut touched = Vec::with_capacity(active.len());
    let mut local: Vec<std::vec::IntoIter<Range<usize>>> = reports.into_iter().map(|(_, r)| r.into_iter()).collect();
    for &a in &active {
        let base = shards[a - 1].columns.start;
        let r = local[a - 1]
            .next()
            .ok_or(CommError::Frame("missing inner-loop report"))?;
        touched.push(base + r.start..base + r.end);
    }
    let loops = active.len() as u64;
    let full_passes = trace.len().min(cfg.outer) as u64;
    let evaluations = full_passes * n as u64 + loops * inner as u64;
    Ok(DsvrgOutcome {
        weights,
        trace,
        ledger,
        inner,
        gradient_evaluations: evaluations,
        active,
        touched,
    })
}

type CoordinatorResult = (Vec<TraceRecord>, Vec<f64>, Vec<usize>);

fn coordinator_loop(
    port: &mut Port,
    marks: &mut RowMarks,
    mut w: Vec<f64>,
    q: usize,
    n: usize,
    cfg: &RunConfig,
    opts: &RunOptions<'_>,
) -> Result<CoordinatorResult, RunError> {
    let d = w.len();
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    let mut active = Vec::with_capacity(cfg.outer);
    let objective = |port: &mut Port, w: &[f64], t: usize| -> Result<f64, RunError> {
        let mut loss = 0.0;
        for l in 1..=q {
            loss += expect_len(port, Endpoint::Worker(l), Phase::Instrumentation, 1)?[0];
        }
        let f = loss / n as f64 + cfg.reg.value(w);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(RunError::Divergence { t, m: 0 })
        }
    };
    for t in 0..cfg.outer {
        marks.mark(port);
        for l in 1..=q {
            port.send(Endpoint::Worker(l), Phase::FullGradient, &w)?;
        }
        let mut z = vec![0.0; d];
        for l in 1..=q {
            let part = expect_len(port, Endpoint::Worker(l), Phase::FullGradient, d)?;
            for (a, b) in z.iter_mut().zip(&part) {
                *a += b;
            }
        }
        z.iter_mut().for_each(|v| *v /= n as f64);
        let rec = opts.record(t, objective(port, &w, t)?, 0);
        trace.push(rec);
        if opts.should_stop(&rec) {
            for l in 1..=q {
                port.signal(Endpoint::Worker(l), Phase::FullGradient)?;
            }
            return Ok((trace, w, active));
        }
        let a = Endpoint::Worker(t % q + 1);
        port.send(a, Phase::ParameterExchange, &z)?;
        w = expect_len(port, a, Phase::ParameterExchange, d)?;
        active.push(t % q + 1);
    }
    marks.mark(port);
    for l in 1..=q {
        port.send(Endpoint::Worker(l), Phase::Instrumentation, &w)?;
    }
    let rec = opts.record(cfg.outer, objective(port, &w, cfg.outer)?, 0);
    trace.push(rec);
    Ok((trace, w, active))
}

/// Returns the local sample range of every inner loop this worker ran.
fn worker_loop(
    port: &mut Port,
    marks: &mut RowMarks,
    mut wk: InstanceWorker,
    inner: usize,
    cfg: &RunConfig,
    stream: IndexStream,
) -> Result<Vec<Range<usize>>, RunError> {
    let coord = Endpoint::Coordinator;
    let mut ranges = Vec::new();
    let mut t = 0;
    let mut w = Vec::new();
    loop {
        let m = port.recv_from(coord)?;
        match (m.phase, m.payload.is_empty()) {
            (Phase::FullGradient, true) => return Ok(ranges),
            (Phase::FullGradient, false) => {
                marks.mark(port);
                w = m.payload;
                let part = wk.begin_outer(w.clone()).map_err(diverged(t, 0))?;
                port.send(coord, Phase::FullGradient, &part)?;
                port.send(coord, Phase::Instrumentation, &[wk.loss_sum()])?;
                t += 1;
            }
            (Phase::ParameterExchange, false) => {
                let z = m.payload;
                let lt = t - 1;
                let mut idx = stream.epoch(lt, wk.n(), cfg.sampling);
                let (mut lo, mut hi) = (usize::MAX, 0);
                for step in 0..inner {
                    let i = idx.next_index();
                    lo = lo.min(i);
                    hi = hi.max(i + 1);
                    let g = wk.correction(i, &w).map_err(diverged(lt, step))?;
                    for ((wj, gj), zj) in w.iter_mut().zip(&g).zip(&z) {
                        *wj -= cfg.eta * (gj + zj);
                    }
                }
                port.send(coord, Phase::ParameterExchange, &w)?;
                ranges.push(if inner == 0 { 0..0 } else { lo..hi });
            }
            (Phase::Instrumentation, false) => {
                marks.mark(port);
                let loss = wk.loss_sum_at(&m.payload).map_err(diverged(cfg.outer, 0))?;
                port.send(coord, Phase::Instrumentation, &[loss])?;
                return Ok(ranges);
            }
            _ => return Err(CommError::Frame("unexpected message at worker").into()),
        }
    }
}
