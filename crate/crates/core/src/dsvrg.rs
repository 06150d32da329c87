//! Instance-distributed SVRG with a rotating active machine.
//!
//! Each outer loop computes the full gradient with one round trip between
//! the coordinator and every worker. The coordinator then hands `z` to a
//! single active machine, which runs the inner loop on its own instances and
//! returns the new parameter. The machine holding the active role rotates
//! with `t`.

use alloc::vec::Vec;
use core::ops::Range;

use crate::comm::{CommLedger, Endpoint, Phase};
use crate::config::RunConfig;
use crate::data::InstanceShard;
use crate::error::{ConfigError, ModelError, RunError};
use crate::ps::{check_instance_shards, InstanceWorker};
use crate::sampling::IndexStream;
use crate::svrg::diverged;
use crate::trace::{RunOptions, TraceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct DsvrgOutcome {
    pub weights: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub ledger: CommLedger,
    /// Inner-loop length actually used: `floor(N / q)`.
    pub inner: usize,
    /// Component gradient evaluations, `N + M` per outer loop.
    pub gradient_evaluations: u64,
    /// Active worker id per outer loop.
    pub active: Vec<usize>,
    /// Smallest global instance range covering the active machine's samples,
    /// per outer loop.
    pub touched: Vec<Range<usize>>,
}

/// `2qd + 2d`: the full-gradient round trip plus `z` down to the active
/// machine and its parameter back.
pub fn dsvrg_cost_per_outer_loop(q: usize, d: usize) -> u64 {
    2 * q as u64 * d as u64 + 2 * d as u64
}

pub fn dsvrg_style_run(
    shards: &[InstanceShard],
    cfg: &RunConfig,
    streams: &[IndexStream],
    opts: &RunOptions<'_>,
) -> Result<DsvrgOutcome, RunError> {
    cfg.validate()?;
    let (d, n) = check_instance_shards(shards)?;
    let q = shards.len();
    if streams.len() != q {
        return Err(ConfigError::Mismatch("need one index stream per worker").into());
    }
    let inner = n / q;
    let mut w = opts.initial(d);
    if w.len() != d {
        return Err(ModelError::DimensionMismatch {
            expected: d,
            actual: w.len(),
        }
        .into());
    }
    let mut workers: Vec<InstanceWorker> = shards.iter().cloned().map(|s| InstanceWorker::new(s, cfg)).collect();
    let coord = Endpoint::Coordinator;
    let mut ledger = CommLedger::new();
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    let mut out = DsvrgOutcome {
        weights: Vec::new(),
        trace: Vec::new(),
        ledger: CommLedger::new(),
        inner,
        gradient_evaluations: 0,
        active: Vec::with_capacity(cfg.outer),
        touched: Vec::with_capacity(cfg.outer),
    };
    let objective = |ledger: &mut CommLedger, sums: &[f64], w: &[f64], t: usize| -> Result<f64, RunError> {
        let mut loss = 0.0;
        for (l, s) in sums.iter().enumerate() {
            ledger.record(Phase::Instrumentation, Endpoint::Worker(l + 1), coord, 1);
            loss += s;
        }
        let f = loss / n as f64 + cfg.reg.value(w);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(RunError::Divergence { t, m: 0 })
        }
    };

    for t in 0..cfg.outer {
        let scalars = ledger.algorithm_total();
        let mut z = alloc::vec![0.0; d];
        for wk in workers.iter_mut() {
            ledger.record(Phase::FullGradient, coord, wk.endpoint(), d as u64);
            let part = wk.begin_outer(w.clone()).map_err(diverged(t, 0))?;
            ledger.record(Phase::FullGradient, wk.endpoint(), coord, d as u64);
            for (a, b) in z.iter_mut().zip(&part) {
                *a += b;
            }
        }
        z.iter_mut().for_each(|v| *v /= n as f64);
        out.gradient_evaluations += n as u64;
        let sums: Vec<f64> = workers.iter().map(|wk| wk.loss_sum()).collect();
        let rec = opts.record(t, objective(&mut ledger, &sums, &w, t)?, scalars);
        trace.push(rec);
        if opts.should_stop(&rec) {
            out.weights = w;
            out.trace = trace;
            out.ledger = ledger;
            return Ok(out);
        }

        let a = t % q;
        let active = &workers[a];
        ledger.record(Phase::ParameterExchange, coord, active.endpoint(), d as u64);
        let mut idx = streams[a].epoch(t, active.n(), cfg.sampling);
        let (mut lo, mut hi) = (usize::MAX, 0);
        for m in 0..inner {
            let i = idx.next_index();
            lo = lo.min(i);
            hi = hi.max(i + 1);
            let g = active.correction(i, &w).map_err(diverged(t, m))?;
            for ((wj, gj), zj) in w.iter_mut().zip(&g).zip(&z) {
                *wj -= cfg.eta * (gj + zj);
            }
        }
        ledger.record(Phase::ParameterExchange, active.endpoint(), coord, d as u64);
        out.gradient_evaluations += inner as u64;
        out.active.push(active.id());
        let base = shards[a].columns.start;
        out.touched
            .push(if inner == 0 { base..base } else { base + lo..base + hi });
    }

    let scalars = ledger.algorithm_total();
    let mut sums = Vec::with_capacity(q);
    for wk in &workers {
        ledger.record(Phase::Instrumentation, coord, wk.endpoint(), d as u64);
        sums.push(wk.loss_sum_at(&w).map_err(diverged(cfg.outer, 0))?);
    }
    let rec = opts.record(cfg.outer, objective(&mut ledger, &sums, &w, cfg.outer)?, scalars);
    trace.push(rec);
    out.weights = w;
    out.trace = trace;
    out.ledger = ledger;
    Ok(out)
}
