//! Losses, regularizers and the regularized empirical risk
//! `f(w) = (1/N) sum_i phi(y_i w^T x_i) + g(w)`.
//!
//! All sums over instances run in ascending instance order starting from zero.
//! Other modules rely on that order to reproduce these values bit for bit.

use alloc::vec::Vec;

use crate::data::LabeledDataset;
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    L2(f64),
    L1(f64),
}

impl Regularizer {
    pub fn lambda(&self) -> f64 {
        match *self {
            Regularizer::L2(l) | Regularizer::L1(l) => l,
        }
    }

    /// Derivative for a single coordinate. `sign(0) = 0` for L1.
    #[inline]
    pub fn gradient_at(&self, w: f64) -> f64 {
        match *self {
            Regularizer::L2(l) => l * w,
            Regularizer::L1(l) => {
                if w > 0.0 {
                    l
                } else if w < 0.0 {
                    -l
                } else {
                    0.0
                }
            }
        }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter().map(|&x| self.gradient_at(x)).collect()
    }

    /// `(lambda/2) ||w||^2` or `lambda ||w||_1` over the given slice.
    pub fn value(&self, w: &[f64]) -> f64 {
        match *self {
            Regularizer::L2(l) => {
                let mut acc = 0.0;
                for &x in w {
                    acc += x * x;
                }
                0.5 * l * acc
            }
            Regularizer::L1(l) => {
                let mut acc = 0.0;
                for &x in w {
                    acc += x.abs();
                }
                l * acc
            }
        }
    }
}

/// `phi(z)` for margin `z = y w^T x`.
pub fn margin_loss(kind: LossKind, z: f64) -> Result<f64, ModelError> {
    if !z.is_finite() {
        return Err(ModelError::Domain(z));
    }
    Ok(match kind {
        // log(1 + e^{-z}) without overflow on either side
        LossKind::Logistic => {
            if z >= 0.0 {
                libm::log1p(libm::exp(-z))
            } else {
                -z + libm::log1p(libm::exp(z))
            }
        }
        LossKind::Hinge => (1.0 - z).max(0.0),
    })
}

/// `d phi / dz`. For hinge the tie at `z = 1` resolves to 0.
pub fn margin_loss_derivative(kind: LossKind, z: f64) -> Result<f64, ModelError> {
    if !z.is_finite() {
        return Err(ModelError::Domain(z));
    }
    Ok(match kind {
        LossKind::Logistic => -1.0 / (1.0 + libm::exp(z)),
        LossKind::Hinge => {
            if z < 1.0 {
                -1.0
            } else {
                0.0
            }
        }
    })
}

pub fn regularizer_gradient(reg: Regularizer, w: &[f64]) -> Vec<f64> {
    reg.gradient(w)
}

/// Scalar that multiplies `x_i` in the loss part of `grad f_i`:
/// `phi'(y * margin) * y`.
#[inline]
pub fn loss_coefficient(kind: LossKind, y: f64, margin: f64) -> Result<f64, ModelError> {
    Ok(margin_loss_derivative(kind, y * margin)? * y)
}

fn check_dim(data: &LabeledDataset, w: &[f64]) -> Result<(), ModelError> {
    if w.len() != data.d() {
        return Err(ModelError::DimensionMismatch {
            expected: data.d(),
            actual: w.len(),
        });
    }
    Ok(())
}

/// Mean loss over precomputed margins `w^T x_i`, ascending instance order.
pub fn mean_loss(kind: LossKind, labels: &[f64], margins: &[f64]) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for (&y, &m) in labels.iter().zip(margins) {
        acc += margin_loss(kind, y * m)?;
    }
    Ok(if labels.is_empty() {
        0.0
    } else {
        acc / labels.len() as f64
    })
}

pub fn full_objective(data: &LabeledDataset, w: &[f64], loss: LossKind, reg: Regularizer) -> Result<f64, ModelError> {
    check_dim(data, w)?;
    let margins: Vec<f64> = data.features().columns().map(|c| c.dot(w)).collect();
    Ok(mean_loss(loss, data.labels(), &margins)? + reg.value(w))
}

/// Loss part of the full gradient, `(1/N) sum_i phi'(z_i) y_i x_i`, given the
/// margins. Writes into `out` (length `d` of `data`'s features).
pub fn accumulate_loss_gradient(
    features: &crate::data::SparseColumnMatrix,
    labels: &[f64],
    margins: &[f64],
    loss: LossKind,
    out: &mut [f64],
) -> Result<(), ModelError> {
    out.iter_mut().for_each(|g| *g = 0.0);
    for (i, col) in features.columns().enumerate() {
        let c = loss_coefficient(loss, labels[i], margins[i])?;
        for (r, v) in col.iter() {
            out[r] += c * v;
        }
    }
    let n = labels.len();
    if n > 0 {
        let n = n as f64;
        out.iter_mut().for_each(|g| *g /= n);
    }
    Ok(())
}

pub fn full_gradient(
    data: &LabeledDataset,
    w: &[f64],
    loss: LossKind,
    reg: Regularizer,
) -> Result<Vec<f64>, ModelError> {
    check_dim(data, w)?;
    let margins: Vec<f64> = data.features().columns().map(|c| c.dot(w)).collect();
    let mut g = alloc::vec![0.0; data.d()];
    accumulate_loss_gradient(data.features(), data.labels(), &margins, loss, &mut g)?;
    for (gj, &wj) in g.iter_mut().zip(w) {
        *gj += reg.gradient_at(wj);
    }
    Ok(g)
}

/// Gradient of the single component `f_i(w) = phi(y_i w^T x_i) + g(w)`,
/// dense.
pub fn component_gradient(
    data: &LabeledDataset,
    i: usize,
    w: &[f64],
    loss: LossKind,
    reg: Regularizer,
) -> Result<Vec<f64>, ModelError> {
    check_dim(data, w)?;
    let (x, y) = data.instance(i);
    let c = loss_coefficient(loss, y, x.dot(w))?;
    let mut g: Vec<f64> = w.iter().map(|&wj| reg.gradient_at(wj)).collect();
    for (r, v) in x.iter() {
        g[r] += c * v;
    }
    Ok(g)
}
