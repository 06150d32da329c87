//! Runners with one thread per endpoint, talking only through a [`Fabric`].
//!
//! Each runner drives the same per-endpoint state machines as the
//! single-context drivers in `fdsvrg-core` and, where the schedule is fixed,
//! produces the same bits. Trace rows get their communication column by
//! summing, over endpoints, what each endpoint had sent when it reached that
//! row; this needs no shared counter and no barrier.

use std::thread::ScopedJoinHandle;
use std::time::Duration;

use fdsvrg_core::comm::{CommLedger, Endpoint, Phase};
use fdsvrg_core::error::{CommError, RunError};
use fdsvrg_core::trace::{RunOptions, TraceRecord};

use crate::error::Error;
use crate::fabric::{Backend, Fabric, Port, DEFAULT_TIMEOUT};

mod dsvrg;
mod fd;
mod ps;

pub use dsvrg::dsvrg_threaded;
pub use fd::fd_svrg_threaded;
pub use ps::{asysvrg_threaded, synsvrg_threaded, AsyncMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetOptions {
    pub backend: Backend,
    /// How long any endpoint waits for a message before giving up.
    pub timeout: Duration,
}

impl Default for NetOptions {
    fn default() -> Self {
        Self {
            backend: Backend::InProc,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl NetOptions {
    pub fn new(backend: Backend) -> Self {
        Self {
            backend,
            ..Self::default()
        }
    }

    pub(crate) fn start(&self, endpoints: &[Endpoint]) -> Result<(Fabric, Vec<Port>), Error> {
        Ok(Fabric::start(self.backend, endpoints, self.timeout)?)
    }
}

/// Send totals one endpoint recorded over a run.
pub(crate) struct Tally {
    pub ledger: CommLedger,
    /// Algorithm scalars this endpoint had sent when it reached each row.
    pub sent_at_row: Vec<u64>,
}

/// Row bookkeeping for one port.
#[derive(Default)]
pub(crate) struct RowMarks(Vec<u64>);

impl RowMarks {
    /// Call on reaching a row, before sending any of that row's traffic.
    pub fn mark(&mut self, port: &Port) {
        self.0.push(port.ledger().algorithm_total());
    }

    fn tally(self, port: Port) -> Tally {
        Tally {
            ledger: port.into_ledger(),
            sent_at_row: self.0,
        }
    }
}

/// Runs one endpoint. On failure every peer is told to abort so nobody
/// waits out the timeout.
pub(crate) fn run_endpoint<T>(
    mut port: Port,
    body: impl FnOnce(&mut Port, &mut RowMarks) -> Result<T, RunError>,
) -> Result<(Tally, T), RunError> {
    let mut marks = RowMarks::default();
    match body(&mut port, &mut marks) {
        Ok(v) => Ok((marks.tally(port), v)),
        Err(e) => {
            port.abort_all();
            Err(e)
        }
    }
}

/// Like [`run_endpoint`] for several endpoints driven by one thread.
pub(crate) fn run_group<T>(
    mut ports: Vec<Port>,
    body: impl FnOnce(&mut [Port], &mut [RowMarks]) -> Result<T, RunError>,
) -> Result<(Vec<Tally>, T), RunError> {
    let mut marks: Vec<RowMarks> = ports.iter().map(|_| RowMarks::default()).collect();
    match body(&mut ports, &mut marks) {
        Ok(v) => Ok((marks.into_iter().zip(ports).map(|(m, p)| m.tally(p)).collect(), v)),
        Err(e) => {
            ports.iter_mut().for_each(Port::abort_all);
            Err(e)
        }
    }
}

/// Fills the communication column and merges ledgers.
pub(crate) fn assemble<'a>(rows: &mut [TraceRecord], tallies: impl IntoIterator<Item = &'a Tally>) -> CommLedger {
    let mut ledger = CommLedger::new();
    let tallies: Vec<&Tally> = tallies.into_iter().collect();
    for t in &tallies {
        ledger.merge(&t.ledger);
    }
    for (k, row) in rows.iter_mut().enumerate() {
        row.comm_scalars = tallies.iter().filter_map(|t| t.sent_at_row.get(k)).sum();
    }
    ledger
}

/// The stop test of [`RunOptions`] as plain data, for threads that cannot
/// hold the clock.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StopRule {
    optimum: Option<f64>,
    stop_gap: Option<f64>,
}

impl StopRule {
    pub fn new(opts: &RunOptions<'_>) -> Self {
        Self {
            optimum: opts.optimum,
            stop_gap: opts.stop_gap,
        }
    }

    pub fn hit(&self, objective: f64) -> bool {
        let gap = self.optimum.map_or(f64::NAN, |f| objective - f);
        self.stop_gap.is_some_and(|g| gap <= g)
    }
}

fn is_fallout(e: &RunError) -> bool {
    matches!(
        e,
        RunError::Comm(CommError::Timeout(_) | CommError::Closed | CommError::Aborted(_))
    )
}

/// Joins worker threads and picks the most informative error: the failure
/// that started it beats the aborts and timeouts it caused.
pub(crate) fn settle<C, T>(
    driver: Result<C, RunError>,
    handles: Vec<ScopedJoinHandle<'_, Result<T, RunError>>>,
) -> Result<(C, Vec<T>), Error> {
    let mut errors = Vec::new();
    let driver = driver.map_err(|e| errors.push(e)).ok();
    let mut workers = Vec::with_capacity(handles.len());
    let mut panicked = false;
    for h in handles {
        match h.join() {
            Ok(Ok(v)) => workers.push(v),
            Ok(Err(e)) => errors.push(e),
            Err(_) => panicked = true,
        }
    }
    if panicked {
        return Err(Error::Panic);
    }
    if let Some(pos) = errors.iter().position(|e| !is_fallout(e)) {
        return Err(Error::Run(errors.swap_remove(pos)));
    }
    if let Some(e) = errors.into_iter().next() {
        return Err(Error::Run(e));
    }
    Ok((driver.expect("no errors means the driver finished"), workers))
}

/// Next message from `from`, which must be in `phase`.
pub(crate) fn expect(port: &mut Port, from: Endpoint, phase: Phase) -> Result<Vec<f64>, RunError> {
    let m = port.recv_from(from)?;
    if m.phase != phase {
        return Err(CommError::Frame("unexpected phase").into());
    }
    Ok(m.payload)
}

/// [`expect`] with a fixed payload length.
pub(crate) fn expect_len(port: &mut Port, from: Endpoint, phase: Phase, len: usize) -> Result<Vec<f64>, RunError> {
    let v = expect(port, from, phase)?;
    if v.len() != len {
        return Err(CommError::LengthMismatch {
            first: len,
            other: v.len(),
        }
        .into());
    }
    Ok(v)
}
