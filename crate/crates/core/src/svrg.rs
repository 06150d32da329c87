//! Serial SVRG with both end-of-loop options.
//!
//! This runner doubles as the correctness oracle for the feature-distributed
//! algorithm. With [`DotMode::Sharded`] it computes every inner product as
//! per-shard partial sums combined in tree order, which is exactly what the
//! distributed workers see, so trajectories can be compared bit for bit.

use alloc::vec::Vec;

use crate::comm::TreePlan;
use crate::config::{RunConfig, SvrgOption};
use crate::data::{block_bounds, Column, LabeledDataset};
use crate::error::{ModelError, RunError};
use crate::model::{accumulate_loss_gradient, loss_coefficient, mean_loss, Regularizer};
use crate::sampling::IndexStream;
use crate::trace::{RunOptions, TraceRecord};

/// How inner products `w^T x_i` and regularizer values are summed.
#[derive(Debug, Clone, PartialEq)]
pub enum DotMode {
    /// One left-to-right pass over the column.
    Contiguous,
    /// Per-block partials over `q` contiguous feature blocks, combined in
    /// tree order.
    Sharded { bounds: Vec<usize>, plan: TreePlan },
}

impl DotMode {
    /// Blocks matching `partition_by_feature(data, q)`.
    pub fn sharded(d: usize, q: usize) -> Self {
        DotMode::Sharded {
            bounds: block_bounds(d, q),
            plan: TreePlan::new(q),
        }
    }

    /// `Contiguous` for one shard, `Sharded` otherwise.
    pub fn for_workers(d: usize, q: usize) -> Self {
        if q <= 1 {
            DotMode::Contiguous
        } else {
            Self::sharded(d, q)
        }
    }

    fn scratch(&self) -> Vec<f64> {
        match self {
            DotMode::Contiguous => Vec::new(),
            DotMode::Sharded { plan, .. } => alloc::vec![0.0; plan.workers()],
        }
    }

    fn margin(&self, x: Column<'_>, w: &[f64], scratch: &mut [f64]) -> f64 {
        match self {
            DotMode::Contiguous => x.dot(w),
            DotMode::Sharded { bounds, plan } => {
                for (l, b) in bounds.windows(2).enumerate() {
                    scratch[l] = x.restrict(b[0]..b[1]).dot(w);
                }
                plan.combine_in_place(scratch)
            }
        }
    }

    fn reg_value(&self, reg: Regularizer, w: &[f64], scratch: &mut [f64]) -> f64 {
        match self {
            DotMode::Contiguous => reg.value(w),
            DotMode::Sharded { bounds, plan } => {
                for (l, b) in bounds.windows(2).enumerate() {
                    scratch[l] = reg.value(&w[b[0]..b[1]]);
                }
                plan.combine_in_place(scratch)
            }
        }
    }
}

/// One variance-reduced update of a parameter slice:
/// `w_j -= eta * (c_now x_j - c_snap x_j + z_j + g'(w_j))`.
///
/// `x` is indexed in the slice's own coordinates and `z` holds only the loss
/// part of the full gradient. Both the serial and the sharded runners go
/// through here so that their floating point operations coincide.
#[inline]
pub(crate) fn variance_reduced_step(
    w: &mut [f64],
    z: &[f64],
    x: Column<'_>,
    c_now: f64,
    c_snap: f64,
    eta: f64,
    reg: Regularizer,
) {
    let mut k = 0;
    for j in 0..w.len() {
        let dir = if k < x.rows.len() && x.rows[k] == j {
            let v = x.values[k];
            k += 1;
            c_now * v - c_snap * v + z[j] + reg.gradient_at(w[j])
        } else {
            z[j] + reg.gradient_at(w[j])
        };
        w[j] -= eta * dir;
    }
}

/// Maps a model error at `(t, m)` to a divergence.
pub fn diverged(t: usize, m: usize) -> impl Fn(ModelError) -> RunError {
    move |_| RunError::Divergence { t, m }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrgOutcome {
    pub weights: Vec<f64>,
    /// One record per outer loop start, plus one for the final iterate.
    pub trace: Vec<TraceRecord>,
    /// Component gradients evaluated: `N` per full pass plus one per inner
    /// step.
    pub gradient_evaluations: u64,
}

pub fn svrg_run(data: &LabeledDataset, cfg: &RunConfig, stream: IndexStream) -> Result<SvrgOutcome, RunError> {
    svrg_run_with(data, cfg, stream, &DotMode::Contiguous, &RunOptions::default())
}

pub fn svrg_run_with(
    data: &LabeledDataset,
    cfg: &RunConfig,
    stream: IndexStream,
    dot: &DotMode,
    opts: &RunOptions<'_>,
) -> Result<SvrgOutcome, RunError> {
    cfg.validate()?;
    let (d, n) = (data.d(), data.n());
    if n == 0 {
        return Err(RunError::Config(crate::error::ConfigError::ZeroCount("instance count")));
    }
    let mut w = opts.initial(d);
    if w.len() != d {
        return Err(ModelError::DimensionMismatch {
            expected: d,
            actual: w.len(),
        }
        .into());
    }
    let features = data.features();
    let labels = data.labels();
    let mut scratch = dot.scratch();
    let mut margins = alloc::vec![0.0; n];
    let mut snap_coef = alloc::vec![0.0; n];
    let mut z = alloc::vec![0.0; d];
    let mut batch_idx = Vec::with_capacity(cfg.batch);
    let mut batch_margin = Vec::with_capacity(cfg.batch);
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    let mut evals = 0u64;
    let steps = cfg.inner_steps();

    let objective = |w: &[f64], margins: &mut [f64], scratch: &mut [f64], t: usize| {
        for (i, col) in features.columns().enumerate() {
            margins[i] = dot.margin(col, w, scratch);
        }
        let f = mean_loss(cfg.loss, labels, margins).map_err(diverged(t, 0))? + dot.reg_value(cfg.reg, w, scratch);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(RunError::Divergence { t, m: 0 })
        }
    };

    for t in 0..cfg.outer {
        let f = objective(&w, &mut margins, &mut scratch, t)?;
        let rec = opts.record(t, f, 0);
        trace.push(rec);
        if opts.should_stop(&rec) {
            return Ok(SvrgOutcome {
                weights: w,
                trace,
                gradient_evaluations: evals,
            });
        }

        // full gradient at the snapshot
        for i in 0..n {
            snap_coef[i] = loss_coefficient(cfg.loss, labels[i], margins[i]).map_err(diverged(t, 0))?;
        }
        accumulate_loss_gradient(features, labels, &margins, cfg.loss, &mut z).map_err(diverged(t, 0))?;
        evals += n as u64;

        let pick = match cfg.option {
            SvrgOption::One => steps,
            SvrgOption::Two => stream.pick_snapshot(t, steps),
        };
        let mut picked = None;
        let mut indices = stream.epoch(t, n, cfg.sampling);
        let mut m = 0;
        while m < steps {
            batch_idx.clear();
            batch_margin.clear();
            for _ in 0..cfg.batch {
                let i = indices.next_index();
                batch_idx.push(i);
                batch_margin.push(dot.margin(features.column(i), &w, &mut scratch));
            }
            for (&i, &mg) in batch_idx.iter().zip(&batch_margin) {
                let c_now = loss_coefficient(cfg.loss, labels[i], mg).map_err(diverged(t, m))?;
                variance_reduced_step(&mut w, &z, features.column(i), c_now, snap_coef[i], cfg.eta, cfg.reg);
                evals += 1;
                m += 1;
                if m == pick && cfg.option == SvrgOption::Two {
                    picked = Some(w.clone());
                }
            }
        }
        if let Some(p) = picked {
            w = p;
        }
    }

    let f = objective(&w, &mut margins, &mut scratch, cfg.outer)?;
    trace.push(opts.record(cfg.outer, f, 0));
    Ok(SvrgOutcome {
        weights: w,
        trace,
        gradient_evaluations: evals,
    })
}

/// The stochastic direction `grad f_i(w) - grad f_i(w0) + grad f(w0)`, dense,
/// with the regularizer folded into every term.
pub fn variance_reduced_direction(
    data: &LabeledDataset,
    i: usize,
    w: &[f64],
    w0: &[f64],
    full_grad_w0: &[f64],
    cfg: &RunConfig,
) -> Result<Vec<f64>, ModelError> {
    let now = crate::model::component_gradient(data, i, w, cfg.loss, cfg.reg)?;
    let snap = crate::model::component_gradient(data, i, w0, cfg.loss, cfg.reg)?;
    Ok(now
        .iter()
        .zip(&snap)
        .zip(full_grad_w0)
        .map(|((a, b), z)| a - b + z)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseColumnMatrix;
    use crate::model::{full_gradient, LossKind};
    use alloc::vec;

    fn single() -> LabeledDataset {
        let m = SparseColumnMatrix::from_columns(2, [vec![(0, 1.0), (1, 2.0)]]).unwrap();
        LabeledDataset::new(m, vec![1.0]).unwrap()
    }

    #[test]
    fn zero_step_freezes() {
        let data = single();
        let cfg = RunConfig::new(0.0, 4, 3, Regularizer::L2(0.1));
        let out = svrg_run(&data, &cfg, IndexStream::new(1)).unwrap();
        assert_eq!(out.weights, vec![0.0, 0.0]);
        assert_eq!(out.trace.len(), 4);
        assert!(out.trace.iter().all(|r| r.objective == out.trace[0].objective));
    }

    #[test]
    fn single_instance_is_gradient_descent() {
        // N = 1, M = 1: w <- w - eta * grad f(w) each outer loop.
        let data = single();
        let reg = Regularizer::L2(0.5);
        let cfg = RunConfig::new(0.3, 1, 3, reg);
        let out = svrg_run(&data, &cfg, IndexStream::new(9)).unwrap();
        let mut w = vec![0.0, 0.0];
        for _ in 0..3 {
            let g = full_gradient(&data, &w, LossKind::Logistic, reg).unwrap();
            for (wj, gj) in w.iter_mut().zip(&g) {
                *wj -= 0.3 * gj;
            }
        }
        for (a, b) in out.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // first step by hand: grad at 0 = -0.5 * (1, 2), so w1 = (0.15, 0.3)
        let one = svrg_run(&data, &RunConfig { outer: 1, ..cfg }, IndexStream::new(9)).unwrap();
        assert!((one.weights[0] - 0.15).abs() < 1e-15);
        assert!((one.weights[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn options_agree_for_single_step() {
        let m =
            SparseColumnMatrix::from_columns(3, [vec![(0, 1.0)], vec![(1, -1.0), (2, 0.5)], vec![(0, 0.3), (2, 2.0)]])
                .unwrap();
        let data = LabeledDataset::new(m, vec![1.0, -1.0, 1.0]).unwrap();
        let cfg = RunConfig::new(0.2, 1, 6, Regularizer::L2(0.01));
        let a = svrg_run(&data, &cfg, IndexStream::new(3)).unwrap();
        let b = svrg_run(&data, &cfg.clone().with_option(SvrgOption::Two), IndexStream::new(3)).unwrap();
        assert_eq!(a.weights, b.weights);
        let fa: Vec<f64> = a.trace.iter().map(|r| r.objective).collect();
        let fb: Vec<f64> = b.trace.iter().map(|r| r.objective).collect();
        assert_eq!(fa, fb);
    }

    #[test]
    fn divergence_reported() {
        let m = SparseColumnMatrix::from_columns(1, [vec![(0, 1.0)]]).unwrap();
        let data = LabeledDataset::new(m, vec![1.0]).unwrap();
        let cfg = RunConfig::new(1e200, 5, 5, Regularizer::L2(1.0));
        let err = svrg_run(&data, &cfg, IndexStream::new(0)).unwrap_err();
        assert!(matches!(err, RunError::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn first_direction_is_full_gradient() {
        let m = SparseColumnMatrix::from_columns(
            3,
            [vec![(0, 1.0), (2, -1.0)], vec![(1, 2.0)], vec![(0, -0.5), (1, 0.25)]],
        )
        .unwrap();
        let data = LabeledDataset::new(m, vec![1.0, -1.0, -1.0]).unwrap();
        let cfg = RunConfig::new(0.1, 3, 1, Regularizer::L2(0.2));
        let w0 = [0.3, -0.2, 0.7];
        let z = full_gradient(&data, &w0, cfg.loss, cfg.reg).unwrap();
        for i in 0..3 {
            let dir = variance_reduced_direction(&data, i, &w0, &w0, &z, &cfg).unwrap();
            assert_eq!(dir, z);
        }
    }
}
