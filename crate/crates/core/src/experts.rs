//! Connector experts: two-layer rectifier MLPs applied token-wise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;
use crate::rng;

pub const NUM_EXPERTS: usize = 4;

/// Perturbation applied to the specialized experts at warm start.
pub const DEFAULT_SIGMA_PERT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    #[serde(rename = "HTML", alias = "html")]
    Html,
    #[serde(rename = "JSON", alias = "json")]
    Json,
    #[serde(alias = "code")]
    Code,
    #[serde(alias = "general")]
    General,
}

impl ExpertKind {
    /// Registry order; also the column order of the compatibility matrix.
    pub const ALL: [ExpertKind; NUM_EXPERTS] = [
        ExpertKind::Html,
        ExpertKind::Json,
        ExpertKind::Code,
        ExpertKind::General,
    ];

    pub fn index(self) -> usize {
        match self {
            ExpertKind::Html => 0,
            ExpertKind::Json => 1,
            ExpertKind::Code => 2,
            ExpertKind::General => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Html => "HTML",
            ExpertKind::Json => "JSON",
            ExpertKind::Code => "Code",
            ExpertKind::General => "General",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExpertKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown expert {s:?}")))
    }
}

/// `y = relu(x·W1 + b1)·W2 + b2`, one token per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub kind: ExpertKind,
    /// D×H
    pub w1: DenseMatrix,
    /// 1×H
    pub b1: DenseMatrix,
    /// H×D
    pub w2: DenseMatrix,
    /// 1×D
    pub b2: DenseMatrix,
}

impl ExpertParams {
    pub fn zeros(kind: ExpertKind, dim: usize, hidden: usize) -> Self {
        Self {
            kind,
            w1: DenseMatrix::zeros(dim, hidden),
            b1: DenseMatrix::zeros(1, hidden),
            w2: DenseMatrix::zeros(hidden, dim),
            b2: DenseMatrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.dim(), self.hidden());
        self.b1.ensure_shape(1, h, "expert b1")?;
        self.w2.ensure_shape(h, d, "expert w2")?;
        self.b2.ensure_shape(1, d, "expert b2")?;
        for (m, what) in [
            (&self.w1, "w1"),
            (&self.b1, "b1"),
            (&self.w2, "w2"),
            (&self.b2, "b2"),
        ] {
            m.ensure_finite(what)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&DenseMatrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseMatrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Runs one expert over every token of the batch; returns (B·N)×D rows.
pub fn expert_forward(x: &TokenBatch, params: &ExpertParams) -> Result<DenseMatrix> {
    expert_forward_rows(x.tokens(), params)
}

pub(crate) fn expert_forward_rows(x: &DenseMatrix, params: &ExpertParams) -> Result<DenseMatrix> {
    if x.cols() != params.dim() {
        return Err(Error::dim(format!(
            "tokens have D={}, expert {} expects D={}",
            x.cols(),
            params.kind,
            params.dim()
        )));
    }
    params.validate()?;
    let hidden = x
        .matmul(&params.w1)?
        .add_row(&params.b1)?
        .map(|v| v.max(0.0));
    hidden.matmul(&params.w2)?.add_row(&params.b2)
}

/// The four experts in fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ExpertParams>", into = "Vec<ExpertParams>")]
pub struct ExpertRegistry {
    experts: Vec<ExpertParams>,
}

impl ExpertRegistry {
    pub fn new(experts: Vec<ExpertParams>) -> Result<Self> {
        if experts.len() != NUM_EXPERTS {
            return Err(Error::Validation(format!(
                "registry needs {NUM_EXPERTS} experts, got {}",
                experts.len()
            )));
        }
        for (e, kind) in experts.iter().zip(ExpertKind::ALL) {
            if e.kind != kind {
                return Err(Error::Validation(format!(
                    "expert slot {} holds {}, expected {kind}",
                    kind.index(),
                    e.kind
                )));
            }
            e.validate()?;
            if (e.dim(), e.hidden()) != (experts[0].dim(), experts[0].hidden()) {
                return Err(Error::dim("experts disagree on D or H"));
            }
        }
        Ok(Self { experts })
    }

    pub fn get(&self, kind: ExpertKind) -> &ExpertParams {
        &self.experts[kind.index()]
    }

    pub fn get_mut(&mut self, kind: ExpertKind) -> &mut ExpertParams {
        &mut self.experts[kind.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExpertParams> {
        self.experts.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ExpertParams> {
        self.experts.iter_mut()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].dim()
    }

    pub fn hidden(&self) -> usize {
        self.experts[0].hidden()
    }
}

impl TryFrom<Vec<ExpertParams>> for ExpertRegistry {
    type Error = Error;

    fn try_from(v: Vec<ExpertParams>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ExpertRegistry> for Vec<ExpertParams> {
    fn from(r: ExpertRegistry) -> Self {
        r.experts
    }
}

/// The shared base parameter draw: weights ~ N(0, 1/D), biases zero.
pub fn base_draw(seed: u64, dim: usize, hidden: usize) -> ExpertParams {
    let mut s = rng::stream(rng::derive_label(seed, "expert-base"));
    let sigma = 1.0 / (dim as f64).sqrt();
    ExpertParams {
        kind: ExpertKind::General,
        w1: DenseMatrix::gaussian(dim, hidden, sigma, &mut s),
        b1: DenseMatrix::zeros(1, hidden),
        w2: DenseMatrix::gaussian(hidden, dim, sigma, &mut s),
        b2: DenseMatrix::zeros(1, dim),
    }
}

/// Copies one base draw into all four experts, then perturbs every expert
/// except General with independent N(0, sigma_pert²) noise.
pub fn init_warm_start(
    seed: u64,
    dim: usize,
    hidden: usize,
    sigma_pert: f64,
) -> Result<ExpertRegistry> {
    if dim == 0 || hidden == 0 {
        return Err(Error::Config("expert D and H must be >= 1".into()));
    }
    if !(sigma_pert >= 0.0 && sigma_pert.is_finite()) {
        return Err(Error::Config(format!(
            "sigma_pert must be >= 0, got {sigma_pert}"
        )));
    }
    let base = base_draw(seed, dim, hidden);
    let experts = ExpertKind::ALL
        .iter()
        .map(|&kind| {
            let mut e = base.clone();
            e.kind = kind;
            if kind != ExpertKind::General && sigma_pert > 0.0 {
                let mut s = rng::stream(rng::derive(
                    rng::derive_label(seed, "expert-perturb"),
                    kind.index() as u64,
                ));
                for t in e.tensors_mut() {
                    let noise = DenseMatrix::gaussian(t.rows(), t.cols(), sigma_pert, &mut s);
                    *t = t.add(&noise).expect("same shape");
                }
            }
            e
        })
        .collect();
    ExpertRegistry::new(experts)
}
