use std::collections::VecDeque;
use std::ops::Range;
use std::thread;

use fdsvrg_core::comm::{Endpoint, Phase};
use fdsvrg_core::config::RunConfig;
use fdsvrg_core::data::InstanceShard;
use fdsvrg_core::error::{CommError, ConfigError, ModelError, RunError};
use fdsvrg_core::ps::{
    check_instance_shards, gather, make_servers, Action, AsyncSchedule, AsyncScheduler, AsyncStats, InstanceWorker,
    PsOutcome, ServerState, StalenessGate,
};
use fdsvrg_core::sampling::IndexStream;
use fdsvrg_core::svrg::diverged;
use fdsvrg_core::trace::{RunOptions, TraceRecord};

use super::{assemble, expect_len, run_endpoint, run_group, settle, NetOptions, RowMarks};
use crate::error::Error;
use crate::fabric::Port;

/// How the server group orders asynchronous pulls and pushes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsyncMode {
    /// Events are taken in the order chosen by the seeded scheduler, so the
    /// run is reproducible and matches [`fdsvrg_core::ps::asysvrg_run`].
    Scheduled(AsyncSchedule),
    /// Events are taken in arrival order, subject to the staleness bound.
    FreeRunning { staleness: usize },
}

#[derive(Clone, Copy)]
enum Variant {
    Sync,
    Async(AsyncMode),
}

/// Synchronous parameter-server SVRG; same results as
/// [`fdsvrg_core::ps::synsvrg_run`].
pub fn synsvrg_threaded(
    shards: &[InstanceShard],
    p: usize,
    cfg: &RunConfig,
    streams: &[IndexStream],
    opts: &RunOptions<'_>,
    net: &NetOptions,
) -> Result<PsOutcome, Error> {
    run(shards, p, cfg, streams, Variant::Sync, opts, net)
}

/// Asynchronous parameter-server SVRG. Pull requests and the end signal are
/// empty control messages and cost nothing.
pub fn asysvrg_threaded(
    shards: &[InstanceShard],
    p: usize,
    cfg: &RunConfig,
    streams: &[IndexStream],
    mode: AsyncMode,
    opts: &RunOptions<'_>,
    net: &NetOptions,
) -> Result<PsOutcome, Error> {
    run(shards, p, cfg, streams, Variant::Async(mode), opts, net)
}

fn run(
    shards: &[InstanceShard],
    p: usize,
    cfg: &RunConfig,
    streams: &[IndexStream],
    variant: Variant,
    opts: &RunOptions<'_>,
    net: &NetOptions,
) -> Result<PsOutcome, Error> {
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
    let servers = make_servers(d, p, &w0)?;
    let ranges: Vec<Range<usize>> = servers.iter().map(|s| s.range.clone()).collect();

    let mut endpoints: Vec<Endpoint> = servers.iter().map(ServerState::endpoint).collect();
    endpoints.extend((1..=q).map(Endpoint::Worker));
    let (_fabric, mut ports) = net.start(&endpoints)?;
    let worker_ports = ports.split_off(p);

    let (driver, reports) = thread::scope(|s| {
        let handles: Vec<_> = worker_ports
            .into_iter()
            .zip(shards)
            .zip(streams)
            .map(|((port, shard), &stream)| {
                let worker = InstanceWorker::new(shard.clone(), cfg);
                let ranges = &ranges;
                s.spawn(move || {
                    run_endpoint(port, |port, marks| {
                        worker_loop(port, marks, worker, ranges, cfg, stream, variant)
                    })
                })
            })
            .collect();
        let driver = run_group(ports, |ports, marks| {
            let mut g = ServerGroup {
                ports,
                marks,
                servers,
                q,
                n,
                cfg,
            };
            g.drive(variant, opts)
        });
        settle(driver, handles)
    })?;

    let (tallies, (mut trace, weights, stats)) = driver;
    let ledger = assemble(&mut trace, tallies.iter().chain(reports.iter().map(|(t, _)| t)));
    Ok(PsOutcome {
        weights,
        trace,
        ledger,
        stats,
    })
}

type GroupResult = (Vec<TraceRecord>, Vec<f64>, Option<AsyncStats>);

/// All `p` servers, driven from one thread.
struct ServerGroup<'a> {
    ports: &'a mut [Port],
    marks: &'a mut [RowMarks],
    servers: Vec<ServerState>,
    q: usize,
    n: usize,
    cfg: &'a RunConfig,
}

fn worker(l: usize) -> Endpoint {
    Endpoint::Worker(l + 1)
}

impl ServerGroup<'_> {
    fn mark(&mut self) {
        for (m, p) in self.marks.iter_mut().zip(self.ports.iter()) {
            m.mark(p);
        }
    }

    /// Each server sends its slice to worker `l`.
    fn send_parameters(&mut self, l: usize, phase: Phase) -> Result<(), RunError> {
        for (port, s) in self.ports.iter_mut().zip(&self.servers) {
            port.send(worker(l), phase, &s.w)?;
        }
        Ok(())
    }

    fn broadcast(&mut self, phase: Phase) -> Result<(), RunError> {
        for (port, s) in self.ports.iter_mut().zip(&self.servers) {
            for l in 0..self.q {
                port.send(worker(l), phase, &s.w)?;
            }
        }
        Ok(())
    }

    /// Loss sums from the workers and regularizer partials from the other
    /// servers, all collected at server 1.
    fn objective(&mut self, t: usize) -> Result<f64, RunError> {
        let reg = self.cfg.reg;
        for (port, s) in self.ports.iter_mut().zip(&self.servers).skip(1) {
            port.send(Endpoint::Server(1), Phase::Instrumentation, &[reg.value(&s.w)])?;
        }
        let head = &mut self.ports[0];
        let mut loss = 0.0;
        for l in 0..self.q {
            loss += expect_len(head, worker(l), Phase::Instrumentation, 1)?[0];
        }
        let mut total_reg = 0.0;
        total_reg += reg.value(&self.servers[0].w);
        for k in 1..self.servers.len() {
            total_reg += expect_len(head, Endpoint::Server(k + 1), Phase::Instrumentation, 1)?[0];
        }
        let f = loss / self.n as f64 + total_reg;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(RunError::Divergence { t, m: 0 })
        }
    }

    fn full_gradient(&mut self, t: usize, opts: &RunOptions<'_>) -> Result<TraceRecord, RunError> {
        self.mark();
        self.broadcast(Phase::FullGradient)?;
        for (port, s) in self.ports.iter_mut().zip(self.servers.iter_mut()) {
            let parts = (0..self.q)
                .map(|l| expect_len(port, worker(l), Phase::FullGradient, s.len()))
                .collect::<Result<Vec<_>, _>>()?;
            let parts: Vec<&[f64]> = parts.iter().map(Vec::as_slice).collect();
            s.set_full_gradient(&parts, self.n);
        }
        let f = self.objective(t)?;
        Ok(opts.record(t, f, 0))
    }

    fn final_record(&mut self, t: usize, opts: &RunOptions<'_>) -> Result<TraceRecord, RunError> {
        self.mark();
        self.broadcast(Phase::Instrumentation)?;
        let f = self.objective(t)?;
        Ok(opts.record(t, f, 0))
    }

    fn stop_workers(&mut self) -> Result<(), RunError> {
        for l in 0..self.q {
            self.ports[0].signal(worker(l), Phase::FullGradient)?;
        }
        Ok(())
    }

    fn sync_round(&mut self) -> Result<(), RunError> {
        self.broadcast(Phase::InnerLoop)?;
        let qf = self.q as f64;
        for (port, s) in self.ports.iter_mut().zip(self.servers.iter_mut()) {
            let mut avg = vec![0.0; s.len()];
            for l in 0..self.q {
                let g = expect_len(port, worker(l), Phase::InnerLoop, s.len())?;
                for (a, v) in avg.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= qf);
            s.apply(&avg, self.cfg.eta);
        }
        Ok(())
    }

    /// Consumes worker `l`'s pull request on every server but `skip`.
    fn take_request(&mut self, l: usize, skip: Option<usize>) -> Result<(), RunError> {
        for (k, port) in self.ports.iter_mut().enumerate() {
            if Some(k) != skip {
                expect_len(port, worker(l), Phase::InnerLoop, 0)?;
            }
        }
        Ok(())
    }

    /// Takes worker `l`'s push on every server but `skip`, whose slice is
    /// `first`, and applies it if asked.
    fn take_push(&mut self, l: usize, skip: Option<(usize, Vec<f64>)>, apply: bool) -> Result<(), RunError> {
        let eta = self.cfg.eta;
        let (skip_k, mut first) = match skip {
            Some((k, g)) => (Some(k), Some(g)),
            None => (None, None),
        };
        for (k, (port, s)) in self.ports.iter_mut().zip(self.servers.iter_mut()).enumerate() {
            let g = if Some(k) == skip_k {
                first.take().expect("skipped slice is supplied")
            } else {
                expect_len(port, worker(l), Phase::InnerLoop, s.len())?
            };
            if g.len() != s.len() {
                return Err(CommError::LengthMismatch {
                    first: s.len(),
                    other: g.len(),
                }
                .into());
            }
            if apply {
                s.apply(&g, eta);
            }
        }
        Ok(())
    }

    /// Ends an asynchronous inner loop: in-flight pushes are received and
    /// dropped, every outstanding pull request is answered with the end
    /// signal.
    fn end_inner_loop(
        &mut self,
        in_flight: &[usize],
        deferred: &[usize],
        stats: &mut AsyncStats,
    ) -> Result<(), RunError> {
        for &l in in_flight {
            self.take_push(l, None, false)?;
            stats.abandoned += 1;
        }
        for l in 0..self.q {
            if !deferred.contains(&l) {
                self.take_request(l, None)?;
            }
            self.ports[0].signal(worker(l), Phase::InnerLoop)?;
            stats.end_signals[l] += 1;
        }
        Ok(())
    }

    fn scheduled_loop(&mut self, schedule: &AsyncSchedule, t: usize, stats: &mut AsyncStats) -> Result<(), RunError> {
        let mut sched = AsyncScheduler::new(schedule, self.q, t);
        let mut m = 0;
        while m < self.cfg.inner {
            match sched.next(m) {
                Action::Pull(l) => {
                    self.take_request(l, None)?;
                    self.send_parameters(l, Phase::InnerLoop)?;
                    stats.pulls += 1;
                }
                Action::Push { worker: l, staleness } => {
                    check_staleness(staleness, schedule.staleness)?;
                    self.take_push(l, None, true)?;
                    stats.max_staleness = stats.max_staleness.max(staleness);
                    stats.pushes += 1;
                    m += 1;
                }
            }
        }
        let in_flight = sched.finish();
        self.end_inner_loop(&in_flight, &[], stats)
    }

    fn free_loop(&mut self, bound: usize, stats: &mut AsyncStats) -> Result<(), RunError> {
        let mut gate = StalenessGate::new(self.q, bound);
        let mut deferred = VecDeque::new();
        let mut m = 0;
        while m < self.cfg.inner {
            let msg = self.ports[0].recv_any()?;
            let l = match msg.from {
                Endpoint::Worker(l) if (1..=self.q).contains(&l) && msg.phase == Phase::InnerLoop => l - 1,
                _ => return Err(CommError::Frame("unexpected message at server 1").into()),
            };
            if msg.payload.is_empty() {
                self.take_request(l, Some(0))?;
                deferred.push_back(l);
            } else {
                if !gate.in_flight(l) {
                    return Err(CommError::Frame("push without pull").into());
                }
                let staleness = gate.push(l, m);
                check_staleness(staleness, bound)?;
                self.take_push(l, Some((0, msg.payload)), true)?;
                stats.max_staleness = stats.max_staleness.max(staleness);
                stats.pushes += 1;
                m += 1;
            }
            if m < self.cfg.inner {
                // serve waiting pulls in arrival order while the gate admits them
                while let Some(pos) = deferred.iter().position(|&l| gate.can_pull(l, m)) {
                    let l = deferred.remove(pos).expect("position is in range");
                    gate.pull(l, m);
                    self.send_parameters(l, Phase::InnerLoop)?;
                    stats.pulls += 1;
                }
            }
        }
        let in_flight: Vec<usize> = (0..self.q).filter(|&l| gate.in_flight(l)).collect();
        gate.reset();
        let deferred: Vec<usize> = deferred.into_iter().collect();
        self.end_inner_loop(&in_flight, &deferred, stats)
    }

    fn drive(&mut self, variant: Variant, opts: &RunOptions<'_>) -> Result<GroupResult, RunError> {
        let mut stats = match variant {
            Variant::Sync => None,
            Variant::Async(_) => Some(AsyncStats {
                end_signals: vec![0; self.q],
                ..AsyncStats::default()
            }),
        };
        let mut trace = Vec::with_capacity(self.cfg.outer + 1);
        for t in 0..self.cfg.outer {
            let rec = self.full_gradient(t, opts)?;
            trace.push(rec);
            if opts.should_stop(&rec) {
                self.stop_workers()?;
                return Ok((trace, gather(&self.servers), stats));
            }
            match (variant, stats.as_mut()) {
                (Variant::Sync, _) => {
                    for _ in 0..self.cfg.inner {
                        self.sync_round()?;
                    }
                }
                (Variant::Async(AsyncMode::Scheduled(s)), Some(st)) => self.scheduled_loop(&s, t, st)?,
                (Variant::Async(AsyncMode::FreeRunning { staleness }), Some(st)) => self.free_loop(staleness, st)?,
                (Variant::Async(_), None) => unreachable!("async runs carry stats"),
            }
        }
        let rec = self.final_record(self.cfg.outer, opts)?;
        trace.push(rec);
        Ok((trace, gather(&self.servers), stats))
    }
}

fn check_staleness(staleness: usize, bound: usize) -> Result<(), RunError> {
    if staleness > bound {
        Err(RunError::Staleness { staleness, bound })
    } else {
        Ok(())
    }
}

/// What a worker reads from server 1 before acting.
enum Head {
    Stop,
    Params(Phase, Vec<f64>),
    End,
}

fn head(port: &mut Port) -> Result<Head, RunError> {
    let m = port.recv_from(Endpoint::Server(1))?;
    Ok(match (m.phase, m.payload.is_empty()) {
        (Phase::FullGradient, true) => Head::Stop,
        (Phase::InnerLoop, true) => Head::End,
        (phase, false) => Head::Params(phase, m.payload),
        _ => return Err(CommError::Frame("unexpected control message").into()),
    })
}

/// Rest of the parameter after server 1's slice.
fn assemble_parameter(
    port: &mut Port,
    first: Vec<f64>,
    phase: Phase,
    ranges: &[Range<usize>],
) -> Result<Vec<f64>, RunError> {
    if first.len() != ranges[0].len() {
        return Err(CommError::LengthMismatch {
            first: ranges[0].len(),
            other: first.len(),
        }
        .into());
    }
    let mut w = first;
    for (k, r) in ranges.iter().enumerate().skip(1) {
        w.extend(expect_len(port, Endpoint::Server(k + 1), phase, r.len())?);
    }
    Ok(w)
}

fn push_slices(port: &mut Port, g: &[f64], phase: Phase, ranges: &[Range<usize>]) -> Result<(), RunError> {
    for (k, r) in ranges.iter().enumerate() {
        port.send(Endpoint::Server(k + 1), phase, &g[r.clone()])?;
    }
    Ok(())
}

fn request_pull(port: &mut Port, servers: usize) -> Result<(), RunError> {
    for k in 1..=servers {
        port.signal(Endpoint::Server(k), Phase::InnerLoop)?;
    }
    Ok(())
}

fn worker_loop(
    port: &mut Port,
    marks: &mut RowMarks,
    mut wk: InstanceWorker,
    ranges: &[Range<usize>],
    cfg: &RunConfig,
    stream: IndexStream,
    variant: Variant,
) -> Result<(), RunError> {
    let p = ranges.len();
    for t in 0..cfg.outer {
        let w_t = match head(port)? {
            Head::Stop => return Ok(()),
            Head::Params(Phase::FullGradient, first) => {
                marks.mark(port);
                assemble_parameter(port, first, Phase::FullGradient, ranges)?
            }
            _ => return Err(CommError::Frame("expected a full-gradient broadcast").into()),
        };
        let z = wk.begin_outer(w_t).map_err(diverged(t, 0))?;
        push_slices(port, &z, Phase::FullGradient, ranges)?;
        port.send(Endpoint::Server(1), Phase::Instrumentation, &[wk.loss_sum()])?;

        let mut sampler = stream.epoch(t, wk.n(), cfg.sampling);
        let mut m = 0;
        loop {
            if let Variant::Sync = variant {
                if m == cfg.inner {
                    break;
                }
            } else {
                request_pull(port, p)?;
            }
            let w = match head(port)? {
                Head::Stop => return Ok(()),
                Head::End => break,
                Head::Params(Phase::InnerLoop, first) => assemble_parameter(port, first, Phase::InnerLoop, ranges)?,
                Head::Params(..) => return Err(CommError::Frame("expected parameters").into()),
            };
            let g = wk.correction(sampler.next_index(), &w).map_err(diverged(t, m))?;
            push_slices(port, &g, Phase::InnerLoop, ranges)?;
            m += 1;
        }
    }
    let w = match head(port)? {
        Head::Params(Phase::Instrumentation, first) => {
            marks.mark(port);
            assemble_parameter(port, first, Phase::Instrumentation, ranges)?
        }
        _ => return Err(CommError::Frame("expected the final broadcast").into()),
    };
    let loss = wk.loss_sum_at(&w).map_err(diverged(cfg.outer, 0))?;
    port.send(Endpoint::Server(1), Phase::Instrumentation, &[loss])?;
    Ok(())
}
