//! Stable nonlinearities and their vector-Jacobian products.

use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on the total mass of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::dim("probability vector must have dim >= 1"));
        }
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "probability entry {v} outside [0, 1]"
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(p))
    }

    pub fn uniform(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    pub fn one_hot(dim: usize, k: usize) -> Self {
        let mut p = vec![0.0; dim];
        p[k] = 1.0;
        Self(p)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("softmax input is not finite".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DenseMatrix) -> Result<DenseMatrix> {
    if logits.cols() == 0 {
        return Err(Error::dim("softmax over zero columns"));
    }
    logits.ensure_finite("softmax input")?;
    let mut out = DenseMatrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), out.row_mut(r));
    }
    Ok(out)
}

/// Shannon entropy in nats with the `LOG_EPS` floor.
pub fn entropy_nats(p: &ProbVector) -> f64 {
    entropy_slice(p.as_slice())
}

pub(crate) fn entropy_slice(p: &[f64]) -> f64 {
    let s: f64 = p.iter().map(|&pk| pk * pk.max(LOG_EPS).ln()).sum();
    0.0 - s
}

/// Row entropies as a rows×1 column.
pub fn entropy_rows(p: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(p.rows(), 1, |r, _| entropy_slice(p.row(r)))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pullback of row-wise softmax: `p ⊙ (g − ⟨g, p⟩)` per row.
pub fn softmax_rows_vjp(p: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let gr = g.row(r);
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &pk), &gk) in out.row_mut(r).iter_mut().zip(pr).zip(gr) {
            *o = pk * (gk - dot);
        }
    }
    out
}

/// Pullback of `entropy_rows`; `g` is rows×1.
pub fn entropy_rows_vjp(p: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(p.rows(), p.cols(), |r, c| {
        let pk = p.get(r, c);
        let d = if pk > LOG_EPS {
            -(pk.ln() + 1.0)
        } else {
            -LOG_EPS.ln()
        };
        g.get(r, 0) * d
    })
}
