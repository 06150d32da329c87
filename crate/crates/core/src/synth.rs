//! Deterministic sparse classification problems with a planted hyperplane.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};

use crate::data::{LabeledDataset, SparseColumnMatrix};
use crate::error::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    /// Probability that a given feature of an instance is stored.
    pub sparsity: f64,
    pub seed: u64,
    /// Instances with `|w_planted^T x| < margin` are redrawn.
    pub margin: f64,
    /// Probability of flipping each label after planting.
    pub flip: f64,
    /// Scale every instance to unit Euclidean norm.
    pub normalize: bool,
}

impl SyntheticSpec {
    pub fn new(d: usize, n: usize, sparsity: f64, seed: u64) -> Self {
        Self {
            d,
            n,
            sparsity,
            seed,
            margin: 0.0,
            flip: 0.0,
            normalize: true,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn with_flip(mut self, flip: f64) -> Self {
        self.flip = flip;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub data: LabeledDataset,
    /// The hyperplane the labels were drawn from.
    pub planted: Vec<f64>,
}

const MAX_REDRAWS_PER_INSTANCE: usize = 1000;

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Synthetic, DataError> {
    if spec.d == 0 || spec.n == 0 {
        return Err(DataError::Synthetic("d and N must be at least 1"));
    }
    if !(spec.sparsity > 0.0 && spec.sparsity <= 1.0) {
        return Err(DataError::Synthetic("sparsity must lie in (0, 1]"));
    }
    if !(spec.margin >= 0.0 && spec.margin.is_finite()) {
        return Err(DataError::Synthetic("margin must be non-negative"));
    }
    if !(0.0..=1.0).contains(&spec.flip) {
        return Err(DataError::Synthetic("flip probability must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let skip = if spec.sparsity < 1.0 {
        Some(Geometric::new(spec.sparsity).map_err(|_| DataError::Synthetic("bad sparsity"))?)
    } else {
        None
    };

    let mut features = SparseColumnMatrix::empty(spec.d);
    let mut labels = Vec::with_capacity(spec.n);
    let mut column: Vec<(usize, f64)> = Vec::new();
    for _ in 0..spec.n {
        let mut redraws = 0;
        let score = loop {
            column.clear();
            match &skip {
                None => column.extend((0..spec.d).map(|r| (r, StandardNormal.sample(&mut rng)))),
                Some(geo) => {
                    let mut r = geo.sample(&mut rng);
                    while r < spec.d as u64 {
                        column.push((r as usize, StandardNormal.sample(&mut rng)));
                        r += 1 + geo.sample(&mut rng);
                    }
                }
            }
            if column.is_empty() {
                let r = rng.random_range(0..spec.d as u64) as usize;
                column.push((r, StandardNormal.sample(&mut rng)));
            }
            if spec.normalize {
                let norm = libm::sqrt(column.iter().map(|(_, v)| v * v).sum::<f64>());
                if norm > 0.0 {
                    column.iter_mut().for_each(|(_, v)| *v /= norm);
                }
            }
            let s: f64 = column.iter().map(|&(r, v)| planted[r] * v).sum();
            if s != 0.0 && libm::fabs(s) >= spec.margin {
                break s;
            }
            redraws += 1;
            if redraws > MAX_REDRAWS_PER_INSTANCE {
                return Err(DataError::Synthetic("margin too large to satisfy"));
            }
        };
        let mut y = if score > 0.0 { 1.0 } else { -1.0 };
        if spec.flip > 0.0 && rng.random_bool(spec.flip) {
            y = -y;
        }
        features.push_column(column.iter().copied())?;
        labels.push(y);
    }
    Ok(Synthetic {
        data: LabeledDataset::new(features, labels)?,
        planted,
    })
}
