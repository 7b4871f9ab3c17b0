//! Token role taxonomy and the role classifier.
//!
//! The classifier is a single affine map followed by a softmax. Its output is
//! a soft distribution over the nine roles for every token, and it is
//! supervised with a masked cross-entropy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::numeric::ops::{argmax, softmax_rows, LOG_EPS};
use crate::numeric::DenseMatrix;

/// Bumped whenever the role list or its order changes.
pub const TAXONOMY_VERSION: u32 = 1;

pub const NUM_ROLES: usize = 9;

/// Semantic role of a table token. The discriminant is the stable index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Header = 0,
    Data = 1,
    Axis = 2,
    Unit = 3,
    Total = 4,
    Formula = 5,
    Annotation = 6,
    Text = 7,
    Empty = 8,
}

impl Role {
    pub const ALL: [Role; NUM_ROLES] = [
        Role::Header,
        Role::Data,
        Role::Axis,
        Role::Unit,
        Role::Total,
        Role::Formula,
        Role::Annotation,
        Role::Text,
        Role::Empty,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Role> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Header => "HEADER",
            Role::Data => "DATA",
            Role::Axis => "AXIS",
            Role::Unit => "UNIT",
            Role::Total => "TOTAL",
            Role::Formula => "FORMULA",
            Role::Annotation => "ANNOTATION",
            Role::Text => "TEXT",
            Role::Empty => "EMPTY",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown role name {s:?}")))
    }
}

/// Parameters of the affine role classifier: logits = x·W + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleClassifierParams {
    /// D×R weights.
    pub weight: DenseMatrix,
    /// 1×R bias.
    pub bias: DenseMatrix,
}

impl RoleClassifierParams {
    pub fn zeros(dim: usize, roles: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(dim, roles),
            bias: DenseMatrix::zeros(1, roles),
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(dim: usize, roles: usize, sigma: f64, rng: &mut R) -> Self {
        Self {
            weight: DenseMatrix::gaussian(dim, roles, sigma, rng),
            bias: DenseMatrix::zeros(1, roles),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn roles(&self) -> usize {
        self.weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.bias.ensure_shape(1, self.roles(), "role bias")?;
        self.weight.ensure_finite("role weight")?;
        self.bias.ensure_finite("role bias")
    }
}

/// Per-token role probabilities, one row per token (batch-major).
#[derive(Debug, Clone, PartialEq)]
pub struct RoleDistribution {
    pub batch: usize,
    pub seq: usize,
    pub probs: DenseMatrix,
}

impl RoleDistribution {
    pub fn from_probs(batch: usize, seq: usize, probs: DenseMatrix) -> Result<Self> {
        if probs.rows() != batch * seq {
            return Err(Error::dim(format!(
                "{} rows for a {batch}x{seq} batch",
                probs.rows()
            )));
        }
        Ok(Self { batch, seq, probs })
    }

    pub fn roles(&self) -> usize {
        self.probs.cols()
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }
}

/// Role logits `x·W + b` for every token.
pub fn role_logits(x: &TokenBatch, params: &RoleClassifierParams) -> Result<DenseMatrix> {
    if x.dim() != params.dim() {
        return Err(Error::dim(format!(
            "tokens have D={}, classifier expects D={}",
            x.dim(),
            params.dim()
        )));
    }
    params.validate()?;
    x.tokens().matmul(&params.weight)?.add_row(&params.bias)
}

pub fn predict_roles(x: &TokenBatch, params: &RoleClassifierParams) -> Result<RoleDistribution> {
    let probs = softmax_rows(&role_logits(x, params)?)?;
    RoleDistribution::from_probs(x.batch(), x.seq(), probs)
}

/// Mean of `−ln max(p[label], ε)` over tokens with `mask` set; 0 if none are.
pub fn role_loss(pred: &RoleDistribution, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != pred.len() || mask.len() != pred.len() {
        return Err(Error::dim(format!(
            "{} labels / {} mask entries for {} tokens",
            labels.len(),
            mask.len(),
            pred.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= pred.roles()) {
        return Err(Error::Validation(format!(
            "role label {l} at token {i} outside [0, {})",
            pred.roles()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&l, &m)) in labels.iter().zip(mask).enumerate() {
        if m {
            total -= pred.token(i)[l].max(LOG_EPS).ln();
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Most probable role index per token; ties resolve to the lower index.
pub fn role_argmax(dist: &RoleDistribution) -> Vec<usize> {
    (0..dist.len()).map(|i| argmax(dist.token(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn batch(b: usize, n: usize, d: usize, seed: u64) -> TokenBatch {
        let mut s = rng::stream(seed);
        TokenBatch::from_matrix(b, n, DenseMatrix::gaussian(b * n, d, 1.0, &mut s)).unwrap()
    }

    #[test]
    fn taxonomy_is_stable() {
        let names: Vec<&str> = Role::ALL.iter().map(|r| r.name()).collect();
        assert_eq!(
            names,
            [
                "HEADER",
                "DATA",
                "AXIS",
                "UNIT",
                "TOTAL",
                "FORMULA",
                "ANNOTATION",
                "TEXT",
                "EMPTY"
            ]
        );
        for (i, r) in Role::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(Role::from_index(i), Some(*r));
            assert_eq!(r.name().parse::<Role>().unwrap(), *r);
        }
        assert!("BOGUS".parse::<Role>().is_err());
        assert!("header".parse::<Role>().is_err());
        assert_eq!(
            serde_json::to_string(&Role::Formula).unwrap(),
            "\"FORMULA\""
        );
    }

    #[test]
    fn zero_params_give_uniform_roles() {
        let x = batch(2, 3, 4, 1);
        let dist = predict_roles(&x, &RoleClassifierParams::zeros(4, NUM_ROLES)).unwrap();
        for i in 0..dist.len() {
            for &p in dist.token(i) {
                assert!((p - 1.0 / 9.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn header_bias_dominates() {
        let x = batch(2, 5, 3, 2);
        let mut params = RoleClassifierParams::zeros(3, NUM_ROLES);
        params.bias.set(0, 0, 10.0);
        let dist = predict_roles(&x, &params).unwrap();
        // e^10 / (e^10 + 8)
        let expected = 10f64.exp() / (10f64.exp() + 8.0);
        assert!(expected > 0.999);
        for i in 0..dist.len() {
            assert!((dist.token(i)[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_routes_to_header() {
        let x = TokenBatch::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let mut params = RoleClassifierParams::zeros(2, NUM_ROLES);
        params.weight.set(0, 0, 5.0);
        let dist = predict_roles(&x, &params).unwrap();
        assert_eq!(role_argmax(&dist), vec![Role::Header.index()]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let x = batch(1, 2, 5, 3);
        assert!(matches!(
            predict_roles(&x, &RoleClassifierParams::zeros(4, NUM_ROLES)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn role_loss_examples() {
        let one_hot = RoleDistribution::from_probs(
            1,
            3,
            DenseMatrix::from_fn(3, 9, |r, c| if c == r + 2 { 1.0 } else { 0.0 }),
        )
        .unwrap();
        let loss = role_loss(&one_hot, &[2, 3, 4], &[true; 3]).unwrap();
        assert!(loss <= 1e-9);

        let uniform =
            RoleDistribution::from_probs(1, 4, DenseMatrix::filled(4, 9, 1.0 / 9.0)).unwrap();
        let loss = role_loss(&uniform, &[0, 3, 8, 1], &[true, true, false, true]).unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-12);
        assert!((loss - 2.197225).abs() < 1e-6);

        assert_eq!(role_loss(&uniform, &[0; 4], &[false; 4]).unwrap(), 0.0);
        assert!(matches!(
            role_loss(&uniform, &[0, 9, 0, 0], &[true; 4]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn argmax_examples() {
        let mut rows = vec![vec![1.0 / 9.0; 9]];
        let mut r = vec![0.0125; 9];
        r[0] = 0.1;
        r[1] = 0.8;
        rows.push(r);
        let mut r = vec![0.0; 9];
        r[3] = 0.4;
        r[5] = 0.4;
        r[0] = 0.2;
        rows.push(r);
        let dist =
            RoleDistribution::from_probs(1, 3, DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(role_argmax(&dist), vec![0, 1, 3]);
    }

    proptest! {
        #[test]
        fn predictions_are_valid_distributions(seed in any::<u64>(), d in 1usize..10) {
            let mut s = rng::stream(seed);
            let params = RoleClassifierParams {
                weight: DenseMatrix::gaussian(d, NUM_ROLES, 2.0, &mut s),
                bias: DenseMatrix::gaussian(1, NUM_ROLES, 2.0, &mut s),
            };
            let x = batch(2, 4, d, seed ^ 1);
            let dist = predict_roles(&x, &params).unwrap();
            for i in 0..dist.len() {
                let row = dist.token(i);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn argmax_survives_positive_rescaling(seed in any::<u64>(), c in 0.01f64..50.0) {
            let mut s = rng::stream(seed);
            let logits = DenseMatrix::gaussian(16, NUM_ROLES, 3.0, &mut s);
            let before = RoleDistribution::from_probs(1, 16, softmax_rows(&logits).unwrap()).unwrap();
            let after =
                RoleDistribution::from_probs(1, 16, softmax_rows(&logits.scale(c)).unwrap()).unwrap();
            prop_assert_eq!(role_argmax(&before), role_argmax(&after));
        }
    }
}
