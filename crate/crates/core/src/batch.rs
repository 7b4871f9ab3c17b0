//! Batched token embeddings.

use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

/// A B×N×D block of token embeddings, stored as a (B·N)×D matrix with
/// batch-major rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    tokens: DenseMatrix,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let tokens = DenseMatrix::new(batch * seq, dim, data)?;
        Self::from_matrix(batch, seq, tokens)
    }

    pub fn from_matrix(batch: usize, seq: usize, tokens: DenseMatrix) -> Result<Self> {
        if tokens.rows() != batch * seq {
            return Err(Error::dim(format!(
                "{} token rows do not form a {batch}x{seq} batch",
                tokens.rows()
            )));
        }
        tokens.ensure_finite("token batch")?;
        Ok(Self { batch, seq, tokens })
    }

    /// One sequence holding every row of `tokens`.
    pub fn single(tokens: DenseMatrix) -> Result<Self> {
        let n = tokens.rows();
        Self::from_matrix(1, n, tokens)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Total number of tokens, B·N.
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn tokens(&self) -> &DenseMatrix {
        &self.tokens
    }

    pub fn token(&self, b: usize, n: usize) -> &[f64] {
        self.tokens.row(b * self.seq + n)
    }

    /// (batch, position) of flat row `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        if self.seq == 0 {
            (0, 0)
        } else {
            (i / self.seq, i % self.seq)
        }
    }
}
