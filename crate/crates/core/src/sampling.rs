//! Seeded, counter-addressed index streams.
//!
//! Every `(seed, lane, epoch)` triple names an independent ChaCha8 stream, so
//! two consumers holding the same [`IndexStream`] draw the same instance
//! indices without exchanging anything. Serial SVRG and every feature shard
//! read lane 0; instance-distributed workers read their own lane.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LANE_SHIFT: u32 = 40;
const AUX_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Uniform with replacement.
    #[default]
    WithReplacement,
    /// Fresh permutation of `0..n` per pass, passes chained as needed.
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexStream {
    seed: u64,
    lane: u64,
}

impl IndexStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, lane: 0 }
    }

    /// Independent stream for another consumer, e.g. worker `l`.
    pub fn lane(self, lane: u64) -> Self {
        assert!(lane < 1 << (63 - LANE_SHIFT), "lane out of range");
        Self { lane, ..self }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng(&self, t: usize, aux: bool) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut stream = (self.lane << LANE_SHIFT) | (t as u64 & ((1 << LANE_SHIFT) - 1));
        if aux {
            stream |= AUX_BIT;
        }
        rng.set_stream(stream);
        rng
    }

    /// Indices for outer loop `t` over `n` instances.
    pub fn epoch(&self, t: usize, n: usize, sampling: Sampling) -> EpochIndices {
        EpochIndices {
            rng: self.rng(t, false),
            n,
            sampling,
            perm: Vec::new(),
            pos: 0,
        }
    }

    /// Uniform draw from `1..=m_max` for outer loop `t`, on a stream disjoint
    /// from the instance indices.
    pub fn pick_snapshot(&self, t: usize, m_max: usize) -> usize {
        self.rng(t, true).random_range(1..=m_max as u64) as usize
    }

    /// Generic auxiliary generator for outer loop `t` (schedulers, trials).
    pub fn aux_rng(&self, t: usize) -> ChaCha8Rng {
        self.rng(t, true)
    }
}

#[derive(Debug, Clone)]
pub struct EpochIndices {
    rng: ChaCha8Rng,
    n: usize,
    sampling: Sampling,
    perm: Vec<usize>,
    pos: usize,
}

impl EpochIndices {
    pub fn next_index(&mut self) -> usize {
        match self.sampling {
            Sampling::WithReplacement => self.rng.random_range(0..self.n as u64) as usize,
            Sampling::Shuffled => {
                if self.pos == self.perm.len() {
                    self.perm = (0..self.n).collect();
                    self.perm.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            }
        }
    }
}

impl Iterator for EpochIndices {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_indices() {
        let s = IndexStream::new(42);
        let a: Vec<usize> = s.epoch(3, 17, Sampling::WithReplacement).take(50).collect();
        let b: Vec<usize> = s.epoch(3, 17, Sampling::WithReplacement).take(50).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i < 17));
        let c: Vec<usize> = s.epoch(4, 17, Sampling::WithReplacement).take(50).collect();
        assert_ne!(a, c);
        let d: Vec<usize> = s.lane(1).epoch(3, 17, Sampling::WithReplacement).take(50).collect();
        assert_ne!(a, d);
    }

    #[test]
    fn shuffled_covers_each_pass() {
        let mut e = IndexStream::new(1).epoch(0, 9, Sampling::Shuffled);
        for _ in 0..3 {
            let mut pass: Vec<usize> = (0..9).map(|_| e.next_index()).collect();
            pass.sort_unstable();
            assert_eq!(pass, (0..9).collect::<Vec<_>>());
        }
    }

    #[test]
    fn snapshot_pick_in_range() {
        let s = IndexStream::new(5);
        for t in 0..200 {
            let m = s.pick_snapshot(t, 7);
            assert!((1..=7).contains(&m));
        }
        assert_eq!(s.pick_snapshot(0, 1), 1);
    }
}
