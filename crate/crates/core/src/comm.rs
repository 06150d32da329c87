//! Endpoints, the scalar ledger, and the tree-structured global sum.
//!
//! A length-`k` vector costs `k` scalars on every edge it crosses. The tree
//! pairs workers level by level (worker 2 into 1, 4 into 3, then 3 into 1, ...),
//! the apex forwards to the coordinator, and the coordinator's result travels
//! back down the same edges. That is `q` edges up and `q` edges down, so every
//! summed scalar costs `2q`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::error::CommError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Coordinator,
    /// 1-based.
    Worker(usize),
    /// 1-based.
    Server(usize),
}

const SERVER_BIT: u16 = 0x8000;

impl Endpoint {
    /// Two-byte id used on the wire: coordinator 0, workers `l`, servers
    /// `0x8000 | k`.
    pub fn wire_id(self) -> u16 {
        match self {
            Endpoint::Coordinator => 0,
            Endpoint::Worker(l) => l as u16,
            Endpoint::Server(k) => SERVER_BIT | k as u16,
        }
    }

    pub fn from_wire_id(id: u16) -> Self {
        if id == 0 {
            Endpoint::Coordinator
        } else if id & SERVER_BIT != 0 {
            Endpoint::Server((id & !SERVER_BIT) as usize)
        } else {
            Endpoint::Worker(id as usize)
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Coordinator => write!(f, "coordinator"),
            Endpoint::Worker(l) => write!(f, "worker{l}"),
            Endpoint::Server(k) => write!(f, "server{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    FullGradient,
    InnerLoop,
    ParameterExchange,
    /// Objective evaluation for traces. Not part of any algorithm's cost.
    Instrumentation,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::FullGradient,
        Phase::InnerLoop,
        Phase::ParameterExchange,
        Phase::Instrumentation,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::FullGradient => "full_gradient",
            Phase::InnerLoop => "inner_loop",
            Phase::ParameterExchange => "parameter_exchange",
            Phase::Instrumentation => "instrumentation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.as_str() == s)
    }
}

/// Monotone count of scalars moved, by phase and by directed edge.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    total: u64,
    per_phase: [u64; 4],
    edges: BTreeMap<(Phase, Endpoint, Endpoint), u64>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: Phase, from: Endpoint, to: Endpoint, scalars: u64) {
        self.total += scalars;
        self.per_phase[phase as usize] += scalars;
        *self.edges.entry((phase, from, to)).or_insert(0) += scalars;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn phase(&self, phase: Phase) -> u64 {
        self.per_phase[phase as usize]
    }

    /// Everything except instrumentation traffic.
    pub fn algorithm_total(&self) -> u64 {
        self.total - self.phase(Phase::Instrumentation)
    }

    /// Scalars sent from `from` to `to`, all phases.
    pub fn edge(&self, from: Endpoint, to: Endpoint) -> u64 {
        self.edges
            .iter()
            .filter(|((_, f, t), _)| *f == from && *t == to)
            .map(|(_, &v)| v)
            .sum()
    }

    /// `(phase, sender, receiver, scalars)` in a stable order.
    pub fn entries(&self) -> impl Iterator<Item = (Phase, Endpoint, Endpoint, u64)> + '_ {
        self.edges.iter().map(|(&(p, f, t), &v)| (p, f, t, v))
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for (p, f, t, v) in other.entries() {
            self.record(p, f, t, v);
        }
    }

    /// Checks that the three views agree.
    pub fn is_consistent(&self) -> bool {
        let by_phase: u64 = self.per_phase.iter().sum();
        let by_edge: u64 = self.edges.values().sum();
        by_phase == self.total && by_edge == self.total
    }
}

/// Pairing schedule of the reduction tree over `q` workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreePlan {
    q: usize,
    /// Per level, `(sender, receiver)` pairs of 1-based worker ids.
    levels: Vec<Vec<(usize, usize)>>,
}

impl TreePlan {
    pub fn new(q: usize) -> Self {
        assert!(q >= 1, "tree needs at least one worker");
        let mut active: Vec<usize> = (1..=q).collect();
        let mut levels = Vec::new();
        while active.len() > 1 {
            let mut level = Vec::new();
            let mut next = Vec::with_capacity(active.len().div_ceil(2));
            for pair in active.chunks(2) {
                match *pair {
                    [recv, send] => {
                        level.push((send, recv));
                        next.push(recv);
                    }
                    [alone] => next.push(alone),
                    _ => unreachable!(),
                }
            }
            levels.push(level);
            active = next;
        }
        Self { q, levels }
    }

    pub fn workers(&self) -> usize {
        self.q
    }

    pub fn levels(&self) -> &[Vec<(usize, usize)>] {
        &self.levels
    }

    /// Edges in the upward sweep, ending with apex -> coordinator.
    pub fn up_edges(&self) -> Vec<(Endpoint, Endpoint)> {
        let mut out: Vec<_> = self
            .levels
            .iter()
            .flatten()
            .map(|&(s, r)| (Endpoint::Worker(s), Endpoint::Worker(r)))
            .collect();
        out.push((Endpoint::Worker(1), Endpoint::Coordinator));
        out
    }

    /// Edges in the broadcast, starting with coordinator -> apex.
    pub fn down_edges(&self) -> Vec<(Endpoint, Endpoint)> {
        let mut out = alloc::vec![(Endpoint::Coordinator, Endpoint::Worker(1))];
        for level in self.levels.iter().rev() {
            for &(s, r) in level {
                out.push((Endpoint::Worker(r), Endpoint::Worker(s)));
            }
        }
        out
    }

    /// Scalars charged for summing vectors of length `k`.
    pub fn cost(&self, k: usize) -> u64 {
        2 * self.q as u64 * k as u64
    }

    /// Reduces one value per worker in tree order, overwriting `values`.
    /// `values[l - 1]` belongs to worker `l`.
    #[inline]
    pub fn combine_in_place(&self, values: &mut [f64]) -> f64 {
        debug_assert_eq!(values.len(), self.q);
        for level in &self.levels {
            for &(s, r) in level {
                values[r - 1] += values[s - 1];
            }
        }
        values[0]
    }

    /// Tree-structured global sum over `q` contributions of equal length,
    /// charging every edge of the literal topology to `ledger`.
    pub fn reduce(
        &self,
        contributions: &[&[f64]],
        phase: Phase,
        ledger: &mut CommLedger,
    ) -> Result<Vec<f64>, CommError> {
        if contributions.len() != self.q {
            return Err(CommError::WrongParticipants {
                expected: self.q,
                actual: contributions.len(),
            });
        }
        let k = contributions[0].len();
        if let Some(bad) = contributions.iter().find(|c| c.len() != k) {
            return Err(CommError::LengthMismatch {
                first: k,
                other: bad.len(),
            });
        }
        let mut partials: Vec<Vec<f64>> = contributions.iter().map(|c| c.to_vec()).collect();
        for level in &self.levels {
            for &(s, r) in level {
                let sent = core::mem::take(&mut partials[s - 1]);
                for (acc, v) in partials[r - 1].iter_mut().zip(&sent) {
                    *acc += v;
                }
            }
        }
        let scalars = k as u64;
        for (from, to) in self.up_edges().into_iter().chain(self.down_edges()) {
            ledger.record(phase, from, to, scalars);
        }
        Ok(core::mem::take(&mut partials[0]))
    }
}
