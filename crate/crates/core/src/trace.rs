use alloc::vec::Vec;

/// Wall-clock source. The core has no clock of its own.
pub trait Clock {
    /// Seconds since the run started.
    fn seconds(&self) -> f64;
}

/// Always reports zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub objective: f64,
    /// `objective - f(w*)`, NaN when no optimum is known.
    pub gap: f64,
    pub comm_scalars: u64,
    pub seconds: f64,
}

/// Knobs shared by every runner that do not change the algorithm.
#[derive(Clone, Copy)]
pub struct RunOptions<'a> {
    /// `f(w*)` for the gap column.
    pub optimum: Option<f64>,
    pub clock: &'a dyn Clock,
    /// Starting point; zero when absent.
    pub start: Option<&'a [f64]>,
    /// Stop after the first outer loop whose gap is at or below this.
    pub stop_gap: Option<f64>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            optimum: None,
            clock: &NoClock,
            start: None,
            stop_gap: None,
        }
    }
}

impl<'a> RunOptions<'a> {
    pub fn with_optimum(mut self, f_star: f64) -> Self {
        self.optimum = Some(f_star);
        self
    }

    pub fn with_start(mut self, w0: &'a [f64]) -> Self {
        self.start = Some(w0);
        self
    }

    pub fn with_clock(mut self, clock: &'a dyn Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_stop_gap(mut self, gap: f64) -> Self {
        self.stop_gap = Some(gap);
        self
    }

    /// Trace row stamped with the clock.
    pub fn record(&self, t: usize, objective: f64, comm_scalars: u64) -> TraceRecord {
        TraceRecord {
            t,
            objective,
            gap: self.optimum.map_or(f64::NAN, |f| objective - f),
            comm_scalars,
            seconds: self.clock.seconds(),
        }
    }

    /// Whether `rec` meets the stop gap.
    pub fn should_stop(&self, rec: &TraceRecord) -> bool {
        self.stop_gap.is_some_and(|g| rec.gap <= g)
    }

    /// Starting point, zero when none was given.
    pub fn initial(&self, d: usize) -> Vec<f64> {
        match self.start {
            Some(w) => w.to_vec(),
            None => alloc::vec![0.0; d],
        }
    }
}

/// First record whose gap is at or below `threshold`.
pub fn first_below(trace: &[TraceRecord], threshold: f64) -> Option<&TraceRecord> {
    trace.iter().find(|r| r.gap <= threshold)
}
