//! Feature-distributed SVRG.
//!
//! Each worker owns a row block `D^(l)` and the matching parameter slice
//! `w^(l)`. The only values that cross worker boundaries are inner products:
//! one length-`N` tree sum per outer loop for `w_t^T D`, and one length-`u`
//! tree sum per inner batch for the current margins. The snapshot margins
//! from the full pass are cached, so `w~_0^T x_i` is never sent again.
//!
//! [`FdWorker`] is the per-worker state machine. [`fd_svrg_run`] drives `q` of
//! them round-robin in a single context; the `fdsvrg` crate drives the same
//! state machines from one thread per worker.

use alloc::vec::Vec;

use crate::comm::{CommLedger, Endpoint, Phase, TreePlan};
use crate::config::{RunConfig, SvrgOption};
use crate::data::FeatureShard;
use crate::error::{ConfigError, DataError, ModelError, RunError};
use crate::model::{accumulate_loss_gradient, loss_coefficient, mean_loss};
use crate::sampling::IndexStream;
use crate::svrg::{diverged, variance_reduced_step};
use crate::trace::{RunOptions, TraceRecord};

/// State held by worker `l`.
#[derive(Debug, Clone)]
pub struct FdWorker {
    shard: FeatureShard,
    cfg: RunConfig,
    /// `w~_0^T D` from the latest full pass, identical on all workers.
    snapshot_margins: Vec<f64>,
    /// `phi'(y_i w~_0^T x_i) y_i` derived from the cache.
    snapshot_coef: Vec<f64>,
    /// Loss part of the full gradient restricted to this shard, `z^(l)`.
    z: Vec<f64>,
}

impl FdWorker {
    pub fn new(shard: FeatureShard, cfg: &RunConfig) -> Self {
        let n = shard.matrix.n();
        let dl = shard.len();
        Self {
            shard,
            cfg: cfg.clone(),
            snapshot_margins: alloc::vec![0.0; n],
            snapshot_coef: alloc::vec![0.0; n],
            z: alloc::vec![0.0; dl],
        }
    }

    pub fn id(&self) -> usize {
        self.shard.id
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::Worker(self.shard.id)
    }

    pub fn n(&self) -> usize {
        self.shard.matrix.n()
    }

    pub fn shard(&self) -> &FeatureShard {
        &self.shard
    }

    pub fn weights(&self) -> &[f64] {
        &self.shard.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        self.shard.weights.copy_from_slice(w);
    }

    pub fn into_shard(self) -> FeatureShard {
        self.shard
    }

    pub fn snapshot_margins(&self) -> &[f64] {
        &self.snapshot_margins
    }

    pub fn local_full_gradient(&self) -> &[f64] {
        &self.z
    }

    /// `w^(l)T D^(l)`, one partial per instance.
    pub fn full_partials(&self) -> Vec<f64> {
        let w = &self.shard.weights;
        self.shard.matrix.columns().map(|c| c.dot(w)).collect()
    }

    /// Stores the global margins of the full pass and computes `z^(l)`.
    pub fn absorb_full_margins(&mut self, margins: Vec<f64>) -> Result<(), ModelError> {
        let labels = &self.shard.labels;
        for (i, (&y, &m)) in labels.iter().zip(&margins).enumerate() {
            self.snapshot_coef[i] = loss_coefficient(self.cfg.loss, y, m)?;
        }
        accumulate_loss_gradient(&self.shard.matrix, labels, &margins, self.cfg.loss, &mut self.z)?;
        self.snapshot_margins = margins;
        Ok(())
    }

    /// `w~_m^(l)T x_i^(l)` for each index in the batch.
    pub fn batch_partials(&self, indices: &[usize]) -> Result<Vec<f64>, RunError> {
        let n = self.n();
        indices
            .iter()
            .map(|&i| {
                if i >= n {
                    Err(RunError::IndexOutOfRange { index: i, n })
                } else {
                    Ok(self.shard.matrix.column(i).dot(&self.shard.weights))
                }
            })
            .collect()
    }

    /// Applies the batch's updates in order, all with margins taken at the
    /// batch start.
    pub fn apply_batch(&mut self, indices: &[usize], margins: &[f64]) -> Result<(), ModelError> {
        for (&i, &mg) in indices.iter().zip(margins) {
            let c_now = loss_coefficient(self.cfg.loss, self.shard.labels[i], mg)?;
            variance_reduced_step(
                &mut self.shard.weights,
                &self.z,
                self.shard.matrix.column(i),
                c_now,
                self.snapshot_coef[i],
                self.cfg.eta,
                self.cfg.reg,
            );
        }
        Ok(())
    }

    /// Regularizer value of this slice, for trace instrumentation.
    pub fn regularizer_partial(&self) -> f64 {
        self.cfg.reg.value(&self.shard.weights)
    }
}

/// Objective from global margins and the summed regularizer partials. Every
/// participant that holds both computes the same bits.
pub fn objective_from_margins(
    cfg: &RunConfig,
    labels: &[f64],
    margins: &[f64],
    reg_sum: f64,
) -> Result<f64, ModelError> {
    Ok(mean_loss(cfg.loss, labels, margins)? + reg_sum)
}

/// Checks that shards are numbered `1..=q` and tile `0..d` in order.
pub fn check_shards(shards: &[FeatureShard]) -> Result<(), RunError> {
    if shards.is_empty() {
        return Err(ConfigError::ZeroCount("worker count").into());
    }
    let n = shards[0].matrix.n();
    let mut next = 0;
    for (l, s) in shards.iter().enumerate() {
        if s.id != l + 1
            || s.rows.start != next
            || s.matrix.d() != s.len()
            || s.matrix.n() != n
            || s.weights.len() != s.len()
            || s.labels.len() != n
        {
            return Err(DataError::BadShards.into());
        }
        next = s.rows.end;
    }
    Ok(())
}

fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| &x[..]).collect()
}

/// Full-gradient phase: one length-`N` tree sum of `w_t^(l)T D^(l)`, then every
/// worker computes `z^(l)`. Returns the global margins.
pub fn fd_full_gradient_phase(
    workers: &mut [FdWorker],
    plan: &TreePlan,
    ledger: &mut CommLedger,
) -> Result<Vec<f64>, RunError> {
    let partials: Vec<Vec<f64>> = workers.iter().map(|w| w.full_partials()).collect();
    let margins = plan.reduce(&as_slices(&partials), Phase::FullGradient, ledger)?;
    for w in workers.iter_mut() {
        w.absorb_full_margins(margins.clone())?;
    }
    Ok(margins)
}

/// One inner batch: a length-`u` tree sum of local partials, then every worker
/// updates its slice.
pub fn fd_inner_step(
    workers: &mut [FdWorker],
    indices: &[usize],
    plan: &TreePlan,
    ledger: &mut CommLedger,
) -> Result<(), RunError> {
    let partials = workers
        .iter()
        .map(|w| w.batch_partials(indices))
        .collect::<Result<Vec<_>, _>>()?;
    let margins = plan.reduce(&as_slices(&partials), Phase::InnerLoop, ledger)?;
    for w in workers.iter_mut() {
        w.apply_batch(indices, &margins)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdOutcome {
    /// Parameter slices concatenated in worker order.
    pub weights: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub ledger: CommLedger,
    pub shards: Vec<FeatureShard>,
}

/// Per-outer-loop cost of the algorithm proper: `2qN + 2q ceil(M/u) u`.
pub fn fd_cost_per_outer_loop(q: usize, n: usize, cfg: &RunConfig) -> u64 {
    2 * q as u64 * (n as u64 + cfg.inner_steps() as u64)
}

pub fn validate_fd(cfg: &RunConfig) -> Result<(), RunError> {
    cfg.validate()?;
    if cfg.option != SvrgOption::One {
        return Err(ConfigError::Mismatch("feature-distributed SVRG only supports option I").into());
    }
    Ok(())
}

/// Runs the whole algorithm with a round-robin single-context scheduler.
///
/// Trace row `t` carries `f(w_t)` and the algorithm's cumulative scalars at
/// the moment `w_t` exists. Objectives are evaluated from the margins of the
/// following full pass, plus a length-1 tree sum of regularizer partials that
/// is booked under [`Phase::Instrumentation`]. The final iterate needs its own
/// instrumentation pass of length `N`.
pub fn fd_svrg_run(
    shards: Vec<FeatureShard>,
    cfg: &RunConfig,
    stream: IndexStream,
    opts: &RunOptions<'_>,
) -> Result<FdOutcome, RunError> {
    validate_fd(cfg)?;
    check_shards(&shards)?;
    let q = shards.len();
    let n = shards[0].matrix.n();
    if n == 0 {
        return Err(ConfigError::ZeroCount("instance count").into());
    }
    let labels = shards[0].labels.clone();
    let plan = TreePlan::new(q);
    let mut ledger = CommLedger::new();
    let mut workers: Vec<FdWorker> = shards.into_iter().map(|s| FdWorker::new(s, cfg)).collect();
    if let Some(w0) = opts.start {
        let d: usize = workers.iter().map(|w| w.shard.len()).sum();
        if w0.len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                actual: w0.len(),
            }
            .into());
        }
        for w in workers.iter_mut() {
            let rows = w.shard.rows.clone();
            w.set_weights(&w0[rows]);
        }
    }
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    let steps = cfg.inner_steps();
    let mut batch = Vec::with_capacity(cfg.batch);

    let regularizer_sum = |workers: &[FdWorker], ledger: &mut CommLedger| -> Result<f64, RunError> {
        let parts: Vec<Vec<f64>> = workers.iter().map(|w| alloc::vec![w.regularizer_partial()]).collect();
        Ok(plan.reduce(&as_slices(&parts), Phase::Instrumentation, ledger)?[0])
    };

    let mut stopped = false;
    for t in 0..cfg.outer {
        let scalars = ledger.algorithm_total();
        let reg_sum = regularizer_sum(&workers, &mut ledger)?;
        let margins = fd_full_gradient_phase(&mut workers, &plan, &mut ledger).map_err(|e| match e {
            RunError::Model(_) => RunError::Divergence { t, m: 0 },
            other => other,
        })?;
        let f = objective_from_margins(cfg, &labels, &margins, reg_sum).map_err(diverged(t, 0))?;
        if !f.is_finite() {
            return Err(RunError::Divergence { t, m: 0 });
        }
        let rec = opts.record(t, f, scalars);
        trace.push(rec);
        if opts.should_stop(&rec) {
            stopped = true;
            break;
        }

        let mut indices = stream.epoch(t, n, cfg.sampling);
        let mut m = 0;
        while m < steps {
            batch.clear();
            batch.extend((0..cfg.batch).map(|_| indices.next_index()));
            fd_inner_step(&mut workers, &batch, &plan, &mut ledger).map_err(|e| match e {
                RunError::Model(_) => RunError::Divergence { t, m },
                other => other,
            })?;
            m += cfg.batch;
        }
    }

    if !stopped {
        let scalars = ledger.algorithm_total();
        let reg_sum = regularizer_sum(&workers, &mut ledger)?;
        let partials: Vec<Vec<f64>> = workers.iter().map(|w| w.full_partials()).collect();
        let margins = plan.reduce(&as_slices(&partials), Phase::Instrumentation, &mut ledger)?;
        let f = objective_from_margins(cfg, &labels, &margins, reg_sum).map_err(diverged(cfg.outer, 0))?;
        if !f.is_finite() {
            return Err(RunError::Divergence { t: cfg.outer, m: 0 });
        }
        trace.push(opts.record(cfg.outer, f, scalars));
    }

    let shards: Vec<FeatureShard> = workers.into_iter().map(FdWorker::into_shard).collect();
    Ok(FdOutcome {
        weights: FeatureShard::assemble_weights(&shards),
        trace,
        ledger,
        shards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_by_feature, LabeledDataset, SparseColumnMatrix};
    use crate::model::{full_gradient, Regularizer};
    use alloc::vec;

    fn toy() -> LabeledDataset {
        let m = SparseColumnMatrix::from_columns(
            5,
            [
                vec![(0, 0.5), (3, -1.0)],
                vec![(1, 1.0), (2, 0.25), (4, 0.5)],
                vec![(0, -0.3), (4, 1.0)],
            ],
        )
        .unwrap();
        LabeledDataset::new(m, vec![1.0, -1.0, 1.0]).unwrap()
    }

    #[test]
    fn single_shard_full_gradient_matches_model() {
        let data = toy();
        let cfg = RunConfig::new(0.1, 3, 1, Regularizer::L2(0.3));
        let mut shards = partition_by_feature(&data, 1).unwrap();
        let w = [0.2, -0.1, 0.4, 0.0, 0.3];
        shards[0].weights.copy_from_slice(&w);
        let mut workers: Vec<FdWorker> = shards.into_iter().map(|s| FdWorker::new(s, &cfg)).collect();
        let mut ledger = CommLedger::new();
        fd_full_gradient_phase(&mut workers, &TreePlan::new(1), &mut ledger).unwrap();
        let g = full_gradient(&data, &w, cfg.loss, cfg.reg).unwrap();
        for (j, (&zj, &gj)) in workers[0].local_full_gradient().iter().zip(&g).enumerate() {
            assert_eq!(zj + cfg.reg.gradient_at(w[j]), gj);
        }
        assert_eq!(ledger.total(), 2 * 3);
    }

    #[test]
    fn ledger_per_phase() {
        let data = toy();
        let cfg = RunConfig::new(0.1, 3, 1, Regularizer::L2(0.0)).with_batch(2);
        let shards = partition_by_feature(&data, 4).unwrap();
        let mut workers: Vec<FdWorker> = shards.into_iter().map(|s| FdWorker::new(s, &cfg)).collect();
        let plan = TreePlan::new(4);
        let mut ledger = CommLedger::new();
        fd_full_gradient_phase(&mut workers, &plan, &mut ledger).unwrap();
        assert_eq!(ledger.total(), 2 * 4 * 3);
        fd_inner_step(&mut workers, &[0, 2], &plan, &mut ledger).unwrap();
        assert_eq!(ledger.phase(Phase::InnerLoop), 2 * 4 * 2);
    }

    #[test]
    fn out_of_range_index() {
        let data = toy();
        let cfg = RunConfig::new(0.1, 3, 1, Regularizer::L2(0.0));
        let shards = partition_by_feature(&data, 2).unwrap();
        let mut workers: Vec<FdWorker> = shards.into_iter().map(|s| FdWorker::new(s, &cfg)).collect();
        let mut ledger = CommLedger::new();
        let err = fd_inner_step(&mut workers, &[3], &TreePlan::new(2), &mut ledger).unwrap_err();
        assert_eq!(err, RunError::IndexOutOfRange { index: 3, n: 3 });
    }

    #[test]
    fn rejects_option_two_and_bad_shards() {
        let data = toy();
        let shards = partition_by_feature(&data, 2).unwrap();
        let cfg = RunConfig::new(0.1, 3, 1, Regularizer::L2(0.0)).with_option(SvrgOption::Two);
        assert!(fd_svrg_run(shards.clone(), &cfg, IndexStream::new(0), &RunOptions::default()).is_err());
        let cfg = RunConfig::new(0.1, 3, 1, Regularizer::L2(0.0));
        let mut swapped = shards;
        swapped.swap(0, 1);
        assert_eq!(
            fd_svrg_run(swapped, &cfg, IndexStream::new(0), &RunOptions::default()).unwrap_err(),
            RunError::Data(DataError::BadShards)
        );
    }
}
