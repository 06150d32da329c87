//! Instance-distributed SVRG on a simulated parameter server.
//!
//! `p` servers each own a contiguous slice of `w`; `q` workers each own a
//! contiguous block of instances. Workers pull parameters and push dense
//! gradients. Every vector is charged at its dense length.
//!
//! Synchronous rounds average one variance-reduced gradient per worker.
//! The asynchronous variant applies each push as it arrives; here the arrival
//! order comes from a seeded discrete scheduler that never lets a push be
//! more than `tau` updates stale.

use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::comm::{CommLedger, Endpoint, Phase};
use crate::config::RunConfig;
use crate::data::{block_bounds, InstanceShard, LabeledDataset};
use crate::error::{ConfigError, DataError, ModelError, RunError};
use crate::model::{loss_coefficient, margin_loss};
use crate::sampling::{EpochIndices, IndexStream};
use crate::svrg::diverged;
use crate::trace::{RunOptions, TraceRecord};

/// A worker holding whole instances.
#[derive(Debug, Clone)]
pub struct InstanceWorker {
    id: usize,
    data: LabeledDataset,
    cfg: RunConfig,
    snapshot: Vec<f64>,
    snapshot_coef: Vec<f64>,
    loss_sum: f64,
}

impl InstanceWorker {
    pub fn new(shard: InstanceShard, cfg: &RunConfig) -> Self {
        let n = shard.data.n();
        Self {
            id: shard.id,
            data: shard.data,
            cfg: cfg.clone(),
            snapshot: Vec::new(),
            snapshot_coef: alloc::vec![0.0; n],
            loss_sum: 0.0,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::Worker(self.id)
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    pub fn snapshot(&self) -> &[f64] {
        &self.snapshot
    }

    /// Takes the new snapshot `w_t` and returns the local gradient sum
    /// `sum_{i in D_l} grad f_i(w_t)`, regularizer included.
    pub fn begin_outer(&mut self, w_t: Vec<f64>) -> Result<Vec<f64>, ModelError> {
        let d = w_t.len();
        let mut z = alloc::vec![0.0; d];
        let mut loss_sum = 0.0;
        for (i, col) in self.data.features().columns().enumerate() {
            let y = self.data.labels()[i];
            let margin = col.dot(&w_t);
            loss_sum += margin_loss(self.cfg.loss, y * margin)?;
            let c = loss_coefficient(self.cfg.loss, y, margin)?;
            self.snapshot_coef[i] = c;
            for (r, v) in col.iter() {
                z[r] += c * v;
            }
        }
        let count = self.n() as f64;
        for (zj, &wj) in z.iter_mut().zip(&w_t) {
            *zj += count * self.cfg.reg.gradient_at(wj);
        }
        self.loss_sum = loss_sum;
        self.snapshot = w_t;
        Ok(z)
    }

    /// Sum of the losses at the current snapshot, for trace instrumentation.
    pub fn loss_sum(&self) -> f64 {
        self.loss_sum
    }

    /// Loss sum at an arbitrary point, without touching the snapshot.
    pub fn loss_sum_at(&self, w: &[f64]) -> Result<f64, ModelError> {
        let mut acc = 0.0;
        for (i, col) in self.data.features().columns().enumerate() {
            let y = self.data.labels()[i];
            acc += margin_loss(self.cfg.loss, y * col.dot(w))?;
        }
        Ok(acc)
    }

    /// `grad f_i(w) - grad f_i(w_t)` for local instance `i`, dense.
    pub fn correction(&self, i: usize, w: &[f64]) -> Result<Vec<f64>, ModelError> {
        let (x, y) = self.data.instance(i);
        let c_now = loss_coefficient(self.cfg.loss, y, x.dot(w))?;
        let c_snap = self.snapshot_coef[i];
        let reg = self.cfg.reg;
        let mut g: Vec<f64> = w
            .iter()
            .zip(&self.snapshot)
            .map(|(&a, &b)| reg.gradient_at(a) - reg.gradient_at(b))
            .collect();
        for (r, v) in x.iter() {
            g[r] += c_now * v - c_snap * v;
        }
        Ok(g)
    }
}

/// Server `k` and its parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub id: usize,
    pub range: Range<usize>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    /// Updates applied in the current outer loop.
    pub m: usize,
}

impl ServerState {
    pub fn endpoint(&self) -> Endpoint {
        Endpoint::Server(self.id)
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    /// `z^(k) = (1/N) sum_l z_l^(k)`, summed in worker order.
    pub fn set_full_gradient(&mut self, parts: &[&[f64]], n: usize) {
        self.z.iter_mut().for_each(|v| *v = 0.0);
        for part in parts {
            for (zj, &v) in self.z.iter_mut().zip(*part) {
                *zj += v;
            }
        }
        let n = n as f64;
        self.z.iter_mut().for_each(|v| *v /= n);
        self.m = 0;
    }

    /// `w~^(k) -= eta (g^(k) + z^(k))`.
    pub fn apply(&mut self, g: &[f64], eta: f64) {
        for ((wj, &gj), &zj) in self.w.iter_mut().zip(g).zip(&self.z) {
            *wj -= eta * (gj + zj);
        }
        self.m += 1;
    }
}

/// Servers for a `d`-dimensional parameter split `p` ways.
pub fn make_servers(d: usize, p: usize, w0: &[f64]) -> Result<Vec<ServerState>, RunError> {
    if p == 0 {
        return Err(ConfigError::ZeroCount("server count").into());
    }
    if p > d {
        return Err(DataError::TooManyParts {
            what: "parameters",
            parts: p,
            available: d,
        }
        .into());
    }
    Ok(block_bounds(d, p)
        .windows(2)
        .enumerate()
        .map(|(k, b)| ServerState {
            id: k + 1,
            range: b[0]..b[1],
            w: w0[b[0]..b[1]].to_vec(),
            z: alloc::vec![0.0; b[1] - b[0]],
            m: 0,
        })
        .collect())
}

pub fn gather(servers: &[ServerState]) -> Vec<f64> {
    servers.iter().flat_map(|s| s.w.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsOutcome {
    pub weights: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub ledger: CommLedger,
    /// Present for asynchronous runs.
    pub stats: Option<AsyncStats>,
}

/// `2qd(1 + M)`.
pub fn synsvrg_cost_per_outer_loop(q: usize, d: usize, inner: usize) -> u64 {
    2 * q as u64 * d as u64 * (1 + inner as u64)
}

/// Default per-worker streams: lane `l` of the run seed.
pub fn worker_streams(seed: u64, q: usize) -> Vec<IndexStream> {
    (1..=q).map(|l| IndexStream::new(seed).lane(l as u64)).collect()
}

/// Checks that shards are numbered `1..=q`, non-empty, and tile `0..N` in
/// order. Returns `(d, N)`.
pub fn check_instance_shards(shards: &[InstanceShard]) -> Result<(usize, usize), RunError> {
    if shards.is_empty() {
        return Err(ConfigError::ZeroCount("worker count").into());
    }
    let d = shards[0].data.d();
    let mut next = 0;
    for (l, s) in shards.iter().enumerate() {
        if s.id != l + 1 || s.columns.start != next || s.data.d() != d || s.data.n() != s.columns.len() || s.is_empty()
        {
            return Err(DataError::BadShards.into());
        }
        next = s.columns.end;
    }
    Ok((d, next))
}

struct PsCluster<'o> {
    workers: Vec<InstanceWorker>,
    servers: Vec<ServerState>,
    ledger: CommLedger,
    n: usize,
    d: usize,
    cfg: RunConfig,
    opts: &'o RunOptions<'o>,
}

impl<'o> PsCluster<'o> {
    fn new(shards: &[InstanceShard], p: usize, cfg: &RunConfig, opts: &'o RunOptions<'o>) -> Result<Self, RunError> {
        cfg.validate()?;
        let (d, n) = check_instance_shards(shards)?;
        let w0 = opts.initial(d);
        if w0.len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                actual: w0.len(),
            }
            .into());
        }
        Ok(Self {
            workers: shards.iter().cloned().map(|s| InstanceWorker::new(s, cfg)).collect(),
            servers: make_servers(d, p, &w0)?,
            ledger: CommLedger::new(),
            n,
            d,
            cfg: cfg.clone(),
            opts,
        })
    }

    fn q(&self) -> usize {
        self.workers.len()
    }

    /// Every server sends its slice to every worker.
    fn broadcast_parameters(&mut self, phase: Phase) -> Vec<f64> {
        for s in &self.servers {
            for w in &self.workers {
                self.ledger.record(phase, s.endpoint(), w.endpoint(), s.len() as u64);
            }
        }
        gather(&self.servers)
    }

    /// Objective from worker loss sums (one scalar each to server 1) and
    /// server regularizer partials (one scalar each to server 1).
    fn objective(&mut self, loss_sums: &[f64], t: usize) -> Result<f64, RunError> {
        let head = Endpoint::Server(1);
        let mut loss = 0.0;
        for (w, &s) in self.workers.iter().zip(loss_sums) {
            self.ledger.record(Phase::Instrumentation, w.endpoint(), head, 1);
            loss += s;
        }
        let mut reg = 0.0;
        for s in &self.servers {
            if s.id != 1 {
                self.ledger.record(Phase::Instrumentation, s.endpoint(), head, 1);
            }
            reg += self.cfg.reg.value(&s.w);
        }
        let f = loss / self.n as f64 + reg;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(RunError::Divergence { t, m: 0 })
        }
    }

    /// Full-gradient phase shared by both variants. Returns the trace record
    /// for `w_t`.
    fn full_gradient(&mut self, t: usize) -> Result<TraceRecord, RunError> {
        let scalars = self.ledger.algorithm_total();
        let w_t = self.broadcast_parameters(Phase::FullGradient);
        let mut sums = Vec::with_capacity(self.q());
        for w in self.workers.iter_mut() {
            sums.push(w.begin_outer(w_t.clone()).map_err(diverged(t, 0))?);
        }
        for s in self.servers.iter_mut() {
            let parts: Vec<&[f64]> = sums.iter().map(|z| &z[s.range.clone()]).collect();
            for w in &self.workers {
                self.ledger
                    .record(Phase::FullGradient, w.endpoint(), s.endpoint(), s.len() as u64);
            }
            s.set_full_gradient(&parts, self.n);
        }
        let loss_sums: Vec<f64> = self.workers.iter().map(|w| w.loss_sum()).collect();
        let f = self.objective(&loss_sums, t)?;
        Ok(self.opts.record(t, f, scalars))
    }

    fn final_record(&mut self, t: usize) -> Result<TraceRecord, RunError> {
        let scalars = self.ledger.algorithm_total();
        let w = self.broadcast_parameters(Phase::Instrumentation);
        let loss_sums = self
            .workers
            .iter()
            .map(|wk| wk.loss_sum_at(&w))
            .collect::<Result<Vec<_>, _>>()
            .map_err(diverged(t, 0))?;
        let f = self.objective(&loss_sums, t)?;
        Ok(self.opts.record(t, f, scalars))
    }

    fn push_to_servers(&mut self, from: Endpoint, grad: &[f64], apply: bool) {
        for s in self.servers.iter_mut() {
            self.ledger.record(Phase::InnerLoop, from, s.endpoint(), s.len() as u64);
            if apply {
                s.apply(&grad[s.range.clone()], self.cfg.eta);
            }
        }
    }

    fn finish(self, trace: Vec<TraceRecord>, stats: Option<AsyncStats>) -> PsOutcome {
        PsOutcome {
            weights: gather(&self.servers),
            trace,
            ledger: self.ledger,
            stats,
        }
    }
}

/// Synchronous parameter-server SVRG. Each of the `M` rounds broadcasts
/// `w~_m`, collects one correction per worker, and steps with their mean.
pub fn synsvrg_run(
    shards: &[InstanceShard],
    p: usize,
    cfg: &RunConfig,
    streams: &[IndexStream],
    opts: &RunOptions<'_>,
) -> Result<PsOutcome, RunError> {
    let mut cl = PsCluster::new(shards, p, cfg, opts)?;
    let q = cl.q();
    if streams.len() != q {
        return Err(ConfigError::Mismatch("need one index stream per worker").into());
    }
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    for t in 0..cfg.outer {
        let rec = cl.full_gradient(t)?;
        trace.push(rec);
        if opts.should_stop(&rec) {
            return Ok(cl.finish(trace, None));
        }
        let mut samplers: Vec<EpochIndices> = cl
            .workers
            .iter()
            .zip(streams)
            .map(|(w, s)| s.epoch(t, w.n(), cfg.sampling))
            .collect();
        for m in 0..cfg.inner {
            let w_m = cl.broadcast_parameters(Phase::InnerLoop);
            let mut pushed = Vec::with_capacity(q);
            for (w, idx) in cl.workers.iter().zip(samplers.iter_mut()) {
                let i = idx.next_index();
                pushed.push(w.correction(i, &w_m).map_err(diverged(t, m))?);
            }
            let eta = cfg.eta;
            for s in cl.servers.iter_mut() {
                let mut avg = alloc::vec![0.0; s.len()];
                for (w, g) in cl.workers.iter().zip(&pushed) {
                    cl.ledger
                        .record(Phase::InnerLoop, w.endpoint(), s.endpoint(), s.len() as u64);
                    for (a, &v) in avg.iter_mut().zip(&g[s.range.clone()]) {
                        *a += v;
                    }
                }
                let qf = q as f64;
                avg.iter_mut().for_each(|a| *a /= qf);
                s.apply(&avg, eta);
            }
        }
    }
    let rec = cl.final_record(cfg.outer)?;
    trace.push(rec);
    Ok(cl.finish(trace, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interleaving {
    /// Cycle through workers, each taking its next enabled action.
    #[default]
    RoundRobin,
    /// Uniform choice among enabled actions.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsyncSchedule {
    pub seed: u64,
    /// Largest number of updates a push may miss between its pull and its
    /// application.
    pub staleness: usize,
    pub policy: Interleaving,
}

impl AsyncSchedule {
    pub fn new(seed: u64, staleness: usize, policy: Interleaving) -> Self {
        Self {
            seed,
            staleness,
            policy,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AsyncStats {
    pub pulls: u64,
    pub pushes: u64,
    pub max_staleness: usize,
    /// End signals received, per worker.
    pub end_signals: Vec<u64>,
    /// Pushes that arrived after the loop ended and were discarded.
    pub abandoned: u64,
}

/// Admission control for pulls that keeps every push within the staleness
/// bound.
///
/// With `k` workers in flight, a worker that pulled at version `v` can see at
/// most `(m - v) + (k - 1)` further updates before its own push lands. A pull
/// is admitted only if that quantity stays `<= tau` for everyone, including
/// the newcomer. Pushes are always admitted and never break the invariant.
#[derive(Debug, Clone)]
pub struct StalenessGate {
    bound: usize,
    in_flight: Vec<Option<usize>>,
}

impl StalenessGate {
    pub fn new(workers: usize, bound: usize) -> Self {
        Self {
            bound,
            in_flight: alloc::vec![None; workers],
        }
    }

    pub fn in_flight(&self, worker: usize) -> bool {
        self.in_flight[worker].is_some()
    }

    pub fn can_pull(&self, worker: usize, version: usize) -> bool {
        if self.in_flight[worker].is_some() {
            return false;
        }
        let others = self.in_flight.iter().flatten().count();
        let worst = self.in_flight.iter().flatten().map(|&v| version - v).max().unwrap_or(0);
        worst + others <= self.bound
    }

    pub fn pull(&mut self, worker: usize, version: usize) {
        debug_assert!(self.can_pull(worker, version));
        self.in_flight[worker] = Some(version);
    }

    /// Returns the staleness of the push landing at `version`.
    pub fn push(&mut self, worker: usize, version: usize) -> usize {
        let pulled = self.in_flight[worker].take().expect("push without pull");
        version - pulled
    }

    /// Drops everything in flight; returns how many were dropped.
    pub fn reset(&mut self) -> usize {
        let n = self.in_flight.iter().flatten().count();
        self.in_flight.iter_mut().for_each(|s| *s = None);
        n
    }
}

/// Next event chosen by an [`AsyncScheduler`]. Worker indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// The worker pulls the current parameter.
    Pull(usize),
    /// The worker's pending gradient lands.
    Push { worker: usize, staleness: usize },
}

/// Seeded choice of which worker acts next within one outer loop.
///
/// Each idle worker may pull if the gate admits it; each in-flight worker may
/// push. Round-robin takes the next enabled worker after the last one to act;
/// random picks uniformly among enabled workers.
#[derive(Debug, Clone)]
pub struct AsyncScheduler {
    policy: Interleaving,
    rng: rand_chacha::ChaCha8Rng,
    cursor: usize,
    gate: StalenessGate,
    enabled: Vec<usize>,
}

impl AsyncScheduler {
    pub fn new(schedule: &AsyncSchedule, workers: usize, t: usize) -> Self {
        Self {
            policy: schedule.policy,
            rng: IndexStream::new(schedule.seed).aux_rng(t),
            cursor: 0,
            gate: StalenessGate::new(workers, schedule.staleness),
            enabled: Vec::with_capacity(workers),
        }
    }

    pub fn gate(&self) -> &StalenessGate {
        &self.gate
    }

    /// Picks and commits the next action with `m` updates applied so far.
    pub fn next(&mut self, m: usize) -> Action {
        let q = self.gate.in_flight.len();
        let gate = &self.gate;
        self.enabled.clear();
        self.enabled
            .extend((0..q).filter(|&l| gate.in_flight(l) || gate.can_pull(l, m)));
        let l = match self.policy {
            Interleaving::RoundRobin => {
                let pick = (0..q)
                    .map(|k| (self.cursor + k) % q)
                    .find(|l| self.enabled.contains(l))
                    .expect("an idle cluster always admits a pull");
                self.cursor = (pick + 1) % q;
                pick
            }
            Interleaving::Random => self.enabled[self.rng.random_range(0..self.enabled.len())],
        };
        if self.gate.in_flight(l) {
            Action::Push {
                worker: l,
                staleness: self.gate.push(l, m),
            }
        } else {
            self.gate.pull(l, m);
            Action::Pull(l)
        }
    }

    /// Ends the loop; returns the workers still in flight, ascending.
    pub fn finish(&mut self) -> Vec<usize> {
        let out = (0..self.gate.in_flight.len())
            .filter(|&l| self.gate.in_flight(l))
            .collect();
        self.gate.reset();
        out
    }
}

/// Asynchronous parameter-server SVRG under a seeded discrete scheduler.
///
/// Servers apply each push on arrival and count it; after `M` pushes they
/// answer every pull with the end signal, and pushes still in flight are
/// received and discarded. A push is treated as reaching all `p` servers
/// together.
pub fn asysvrg_run(
    shards: &[InstanceShard],
    p: usize,
    cfg: &RunConfig,
    streams: &[IndexStream],
    schedule: AsyncSchedule,
    opts: &RunOptions<'_>,
) -> Result<PsOutcome, RunError> {
    let mut cl = PsCluster::new(shards, p, cfg, opts)?;
    let q = cl.q();
    if streams.len() != q {
        return Err(ConfigError::Mismatch("need one index stream per worker").into());
    }
    let mut stats = AsyncStats {
        end_signals: alloc::vec![0; q],
        ..AsyncStats::default()
    };
    let mut trace = Vec::with_capacity(cfg.outer + 1);
    for t in 0..cfg.outer {
        let rec = cl.full_gradient(t)?;
        trace.push(rec);
        if opts.should_stop(&rec) {
            return Ok(cl.finish(trace, Some(stats)));
        }
        let mut samplers: Vec<EpochIndices> = cl
            .workers
            .iter()
            .zip(streams)
            .map(|(w, s)| s.epoch(t, w.n(), cfg.sampling))
            .collect();
        let mut sched = AsyncScheduler::new(&schedule, q, t);
        let mut pending: Vec<Option<Vec<f64>>> = alloc::vec![None; q];
        let mut m = 0;
        while m < cfg.inner {
            match sched.next(m) {
                Action::Push { worker: l, staleness } => {
                    if staleness > schedule.staleness {
                        return Err(RunError::Staleness {
                            staleness,
                            bound: schedule.staleness,
                        });
                    }
                    let g = pending[l].take().expect("in-flight worker has a gradient");
                    stats.max_staleness = stats.max_staleness.max(staleness);
                    stats.pushes += 1;
                    let from = cl.workers[l].endpoint();
                    cl.push_to_servers(from, &g, true);
                    m += 1;
                }
                Action::Pull(l) => {
                    stats.pulls += 1;
                    let mut w_m = Vec::with_capacity(cl.d);
                    for s in &cl.servers {
                        cl.ledger
                            .record(Phase::InnerLoop, s.endpoint(), cl.workers[l].endpoint(), s.len() as u64);
                        w_m.extend_from_slice(&s.w);
                    }
                    let i = samplers[l].next_index();
                    pending[l] = Some(cl.workers[l].correction(i, &w_m).map_err(diverged(t, m))?);
                }
            }
        }
        // in-flight pushes still arrive and are discarded
        for l in sched.finish() {
            let g = pending[l].take().expect("in-flight worker has a gradient");
            let from = cl.workers[l].endpoint();
            cl.push_to_servers(from, &g, false);
            stats.abandoned += 1;
        }
        stats.end_signals.iter_mut().for_each(|c| *c += 1);
    }
    let rec = cl.final_record(cfg.outer)?;
    trace.push(rec);
    Ok(cl.finish(trace, Some(stats)))
}
