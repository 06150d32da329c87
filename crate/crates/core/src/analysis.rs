//! Linear-convergence constants for one outer loop of SVRG and a
//! Monte-Carlo check of the resulting contraction.
//!
//! With `f` `mu`-strongly convex and each component `L`-smooth, one outer
//! loop of `M` steps satisfies
//! `E||w_M - w*||^2 <= (a^M + b / (1 - a)) ||w_0 - w*||^2` where
//! `a = 1 - mu eta + 2 L^2 eta^2` and `b = 2 L^2 eta^2`.

use alloc::vec::Vec;

use crate::config::RunConfig;
use crate::data::LabeledDataset;
use crate::error::{AnalysisError, RunError};
use crate::model::{full_gradient, full_objective, LossKind, Regularizer};
use crate::sampling::IndexStream;
use crate::svrg::{svrg_run_with, DotMode};
use crate::trace::RunOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantsSource {
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityConstants {
    pub mu: f64,
    pub l: f64,
    pub source: ConstantsSource,
}

impl ConvexityConstants {
    pub fn new(mu: f64, l: f64, source: ConstantsSource) -> Result<Self, AnalysisError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(AnalysisError::NotStronglyConvex(mu));
        }
        if !(l >= mu && l.is_finite()) {
            return Err(AnalysisError::NotStronglyConvex(mu));
        }
        Ok(Self { mu, l, source })
    }
}

/// `mu = lambda`, `L = lambda + max_i ||x_i||^2 / 4` for L2-regularized
/// logistic loss.
pub fn logistic_constants(data: &LabeledDataset, reg: Regularizer) -> Result<ConvexityConstants, AnalysisError> {
    let Regularizer::L2(lambda) = reg else {
        return Err(AnalysisError::Unsupported);
    };
    ConvexityConstants::new(
        lambda,
        lambda + 0.25 * data.max_squared_norm(),
        ConstantsSource::Analytic,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionBound {
    pub a: f64,
    pub b: f64,
    /// `a^M + b / (1 - a)`; `None` when `a >= 1`.
    pub rho: Option<f64>,
}

impl ContractionBound {
    pub fn is_defined(&self) -> bool {
        self.rho.is_some()
    }

    pub fn is_contractive(&self) -> bool {
        self.rho.is_some_and(|r| r < 1.0)
    }
}

pub fn contraction_bound(
    consts: &ConvexityConstants,
    eta: f64,
    inner: usize,
) -> Result<ContractionBound, AnalysisError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(AnalysisError::StepSize(eta));
    }
    let b = 2.0 * consts.l * consts.l * eta * eta;
    let a = 1.0 - consts.mu * eta + b;
    let rho = (a < 1.0).then(|| libm::pow(a, inner as f64) + b / (1.0 - a));
    Ok(ContractionBound { a, b, rho })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub bound: ContractionBound,
    pub trials: usize,
    /// `||w_0 - w*||^2`.
    pub initial: f64,
    /// Mean of `||w_M - w*||^2` over the trials.
    pub mean_final: f64,
    /// `mean_final / initial`.
    pub empirical_ratio: f64,
    /// `rho (1 + 3 / sqrt(R))`.
    pub allowed_ratio: f64,
    pub pass: bool,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Runs `trials` independent outer loops through `runner(trial)` (each
/// returning `w_M` from the common start `w0`) and compares the mean squared
/// distance to `w_star` against the bound, with slack `3 / sqrt(R)`.
pub fn verify_contraction<F>(
    mut runner: F,
    consts: &ConvexityConstants,
    eta: f64,
    inner: usize,
    trials: usize,
    w0: &[f64],
    w_star: &[f64],
) -> Result<ContractionReport, AnalysisError>
where
    F: FnMut(u64) -> Result<Vec<f64>, RunError>,
{
    if trials == 0 {
        return Err(AnalysisError::NoTrials);
    }
    if w_star.len() != w0.len() {
        return Err(AnalysisError::MissingOptimum {
            expected: w0.len(),
            actual: w_star.len(),
        });
    }
    let bound = contraction_bound(consts, eta, inner)?;
    let rho = bound.rho.ok_or(AnalysisError::BoundUndefined(bound.a))?;
    let initial = squared_distance(w0, w_star);
    let mut total = 0.0;
    for trial in 0..trials {
        let w = runner(trial as u64)?;
        if w.len() != w_star.len() {
            return Err(AnalysisError::MissingOptimum {
                expected: w.len(),
                actual: w_star.len(),
            });
        }
        total += squared_distance(&w, w_star);
    }
    let mean_final = total / trials as f64;
    let empirical_ratio = mean_final / initial;
    let allowed_ratio = rho * (1.0 + 3.0 / libm::sqrt(trials as f64));
    Ok(ContractionReport {
        bound,
        trials,
        initial,
        mean_final,
        empirical_ratio,
        allowed_ratio,
        pass: mean_final <= rho * initial * (1.0 + 3.0 / libm::sqrt(trials as f64)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub outer_loops: usize,
    pub converged: bool,
}

/// Reference minimizer: serial SVRG one outer loop at a time until the full
/// gradient norm drops below `tol` or `max_outer` loops have run.
///
/// For non-smooth objectives the gradient norm need not vanish; the best
/// objective seen is returned with `converged == false`.
pub fn solve_optimum(data: &LabeledDataset, cfg: &RunConfig, tol: f64, max_outer: usize) -> Result<Optimum, RunError> {
    let one = RunConfig {
        outer: 1,
        ..cfg.clone()
    };
    let stream = IndexStream::new(cfg.seed);
    let grad_norm = |w: &[f64]| -> Result<f64, RunError> {
        let g = full_gradient(data, w, cfg.loss, cfg.reg)?;
        Ok(libm::sqrt(g.iter().map(|v| v * v).sum::<f64>()))
    };
    let mut w = alloc::vec![0.0; data.d()];
    let mut best = (full_objective(data, &w, cfg.loss, cfg.reg)?, w.clone());
    let smooth = cfg.loss == LossKind::Logistic && matches!(cfg.reg, Regularizer::L2(_));
    for t in 0..max_outer {
        let g = grad_norm(&w)?;
        if smooth && g < tol {
            return Ok(Optimum {
                objective: full_objective(data, &w, cfg.loss, cfg.reg)?,
                weights: w,
                gradient_norm: g,
                outer_loops: t,
                converged: true,
            });
        }
        let opts = RunOptions::default().with_start(&w);
        let step = svrg_run_with(data, &one, stream.lane(t as u64 + 1), &DotMode::Contiguous, &opts)?;
        w = step.weights;
        let f = *step.trace.last().map(|r| &r.objective).unwrap_or(&f64::INFINITY);
        if f < best.0 {
            best = (f, w.clone());
        }
    }
    let g = grad_norm(&w)?;
    if smooth {
        let converged = g < tol;
        return Ok(Optimum {
            objective: full_objective(data, &w, cfg.loss, cfg.reg)?,
            weights: w,
            gradient_norm: g,
            outer_loops: max_outer,
            converged,
        });
    }
    let (objective, weights) = best;
    let gradient_norm = grad_norm(&weights)?;
    Ok(Optimum {
        weights,
        objective,
        gradient_norm,
        outer_loops: max_outer,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> ConvexityConstants {
        ConvexityConstants::new(1.0, 1.0, ConstantsSource::Analytic).unwrap()
    }

    #[test]
    fn long_inner_loop_limit() {
        let b = contraction_bound(&unit(), 0.1, 10_000).unwrap();
        assert!((b.a - 0.92).abs() < 1e-15);
        assert!((b.b - 0.02).abs() < 1e-15);
        assert!((b.rho.unwrap() - 0.25).abs() < 1e-12);
        assert!(b.is_contractive());
    }

    #[test]
    fn large_step_is_not_contractive() {
        let b = contraction_bound(&unit(), 0.25, 100).unwrap();
        assert_eq!(b.a, 0.875);
        assert!(b.rho.unwrap() >= 1.0);
        assert!(!b.is_contractive());
    }

    #[test]
    fn vanishing_step_is_undefined() {
        let b = contraction_bound(&unit(), 1e-20, 100).unwrap();
        assert!(!b.is_defined());
        assert!(contraction_bound(&unit(), 0.0, 100).is_err());
    }

    #[test]
    fn constants_guard() {
        assert!(ConvexityConstants::new(0.0, 1.0, ConstantsSource::Analytic).is_err());
        assert!(ConvexityConstants::new(2.0, 1.0, ConstantsSource::Analytic).is_err());
    }
}
