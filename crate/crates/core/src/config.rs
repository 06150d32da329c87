use crate::error::ConfigError;
use crate::model::{LossKind, Regularizer};
use crate::sampling::Sampling;

/// How serial SVRG picks `w_{t+1}` at the end of an outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SvrgOption {
    /// Last inner iterate.
    #[default]
    One,
    /// Inner iterate at a uniformly drawn `m` in `1..=M`.
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub eta: f64,
    /// Inner loop length `M`.
    pub inner: usize,
    /// Outer loop count `T`.
    pub outer: usize,
    /// Mini-batch size `u`.
    pub batch: usize,
    pub option: SvrgOption,
    pub seed: u64,
    pub loss: LossKind,
    pub reg: Regularizer,
    pub sampling: Sampling,
}

impl RunConfig {
    pub fn new(eta: f64, inner: usize, outer: usize, reg: Regularizer) -> Self {
        Self {
            eta,
            inner,
            outer,
            batch: 1,
            option: SvrgOption::One,
            seed: 0,
            loss: LossKind::Logistic,
            reg,
            sampling: Sampling::WithReplacement,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_option(mut self, option: SvrgOption) -> Self {
        self.option = option;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    /// Zero step size is accepted; it freezes the iterate.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(ConfigError::StepSize(self.eta));
        }
        if self.inner == 0 {
            return Err(ConfigError::ZeroCount("inner loop length"));
        }
        if self.outer == 0 {
            return Err(ConfigError::ZeroCount("outer loop count"));
        }
        if self.batch == 0 {
            return Err(ConfigError::ZeroCount("batch size"));
        }
        let lambda = self.reg.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ConfigError::Lambda(lambda));
        }
        Ok(())
    }

    /// Inner steps actually executed per outer loop: `ceil(M/u) * u`.
    pub fn inner_steps(&self) -> usize {
        self.inner.div_ceil(self.batch) * self.batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = RunConfig::new(0.1, 5, 3, Regularizer::L2(1e-3));
        assert!(ok.validate().is_ok());
        assert!(RunConfig { eta: 0.0, ..ok.clone() }.validate().is_ok());
        assert!(RunConfig {
            eta: -1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            eta: f64::NAN,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(RunConfig { inner: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { outer: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { batch: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig {
            reg: Regularizer::L2(-1.0),
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rounded_inner_steps() {
        let cfg = RunConfig::new(0.1, 10, 1, Regularizer::L2(0.0));
        assert_eq!(cfg.inner_steps(), 10);
        assert_eq!(cfg.clone().with_batch(3).inner_steps(), 12);
        assert_eq!(cfg.with_batch(10).inner_steps(), 10);
    }
}
