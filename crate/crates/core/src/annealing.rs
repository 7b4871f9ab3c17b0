//! Annealed neuro-symbolic objective and curriculum control.
//!
//! The objective interpolates between the task loss and the symbolic terms:
//!
//! ```text
//! L(t) = (1 − λ(t)) · L_task + λ(t) · (λ1 · L_role + λ2 · L_struct)
//! ```
//!
//! with `λ(t)` drawn from a linear, sigmoid or step schedule over epochs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ops::argmax;
use crate::numeric::DenseMatrix;
use crate::roles::RoleDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Sigmoid,
    Step,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "sigmoid" => Ok(Self::Sigmoid),
            "step" => Ok(Self::Step),
            _ => Err(Error::Config(format!("unknown schedule kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub kind: ScheduleKind,
    /// Sigmoid midpoint epoch.
    pub midpoint: f64,
    /// Sigmoid slope; must be positive.
    pub slope: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total_epochs: usize,
    /// `(epoch, value)` pairs for the step schedule, strictly increasing in
    /// epoch. Before the first break the value is 0.
    #[serde(default)]
    pub step_breaks: Vec<(f64, f64)>,
    /// Put `λ(t)` on the task term and `1 − λ(t)` on the symbolic terms.
    #[serde(default)]
    pub swap_weights: bool,
}

impl AnnealConfig {
    /// Sigmoid centred on the middle of training with slope `T/10`,
    /// `λ1 = 1`, `λ2 = 0.5`.
    pub fn default_for(total_epochs: usize) -> Self {
        let t = total_epochs as f64;
        Self {
            kind: ScheduleKind::Sigmoid,
            midpoint: t / 2.0,
            slope: if total_epochs >= 10 { t / 10.0 } else { 1.0 },
            lambda1: 1.0,
            lambda2: 0.5,
            total_epochs,
            step_breaks: Vec::new(),
            swap_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        match self.kind {
            ScheduleKind::Sigmoid => {
                if !(self.slope > 0.0 && self.slope.is_finite()) {
                    return Err(Error::Config(format!(
                        "sigmoid slope must be > 0, got {}",
                        self.slope
                    )));
                }
                if !self.midpoint.is_finite() {
                    return Err(Error::Config("sigmoid midpoint must be finite".into()));
                }
            }
            ScheduleKind::Linear => {
                if self.total_epochs == 0 {
                    return Err(Error::Config(
                        "linear schedule needs total_epochs > 0".into(),
                    ));
                }
            }
            ScheduleKind::Step => {
                for pair in self.step_breaks.windows(2) {
                    if pair[1].0 <= pair[0].0 {
                        return Err(Error::Config("step breaks must increase strictly".into()));
                    }
                }
                if self
                    .step_breaks
                    .iter()
                    .any(|&(_, v)| !(0.0..=1.0).contains(&v))
                {
                    return Err(Error::Config("step values must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Multipliers `(task, role, struct)` at a given `λ`.
    pub fn term_weights(&self, lambda_t: f64) -> (f64, f64, f64) {
        let (neural, symbolic) = if self.swap_weights {
            (lambda_t, 1.0 - lambda_t)
        } else {
            (1.0 - lambda_t, lambda_t)
        };
        (neural, symbolic * self.lambda1, symbolic * self.lambda2)
    }
}

/// `λ(t)`, always within [0, 1].
pub fn lambda_at(t: f64, cfg: &AnnealConfig) -> Result<f64> {
    cfg.validate()?;
    let raw = match cfg.kind {
        ScheduleKind::Sigmoid => 1.0 / (1.0 + ((cfg.midpoint - t) / cfg.slope).exp()),
        ScheduleKind::Linear => t / cfg.total_epochs as f64,
        ScheduleKind::Step => cfg
            .step_breaks
            .iter()
            .take_while(|&&(epoch, _)| epoch <= t)
            .last()
            .map_or(0.0, |&(_, v)| v),
    };
    Ok(raw.clamp(0.0, 1.0))
}

/// Routing-confidence gain: linear from 1 at the first epoch to `beta_max`
/// at the last.
pub fn beta_at(epoch: usize, total_epochs: usize, beta_max: f64) -> f64 {
    if total_epochs <= 1 {
        1.0
    } else {
        1.0 + (beta_max - 1.0) * epoch as f64 / (total_epochs - 1) as f64
    }
}

/// `epoch,lambda` rows for epochs `0..=total_epochs`.
pub fn schedule_csv(cfg: &AnnealConfig) -> Result<String> {
    let mut out = String::from("epoch,lambda\n");
    for epoch in 0..=cfg.total_epochs {
        let l = lambda_at(epoch as f64, cfg)?;
        writeln!(out, "{epoch},{l}").expect("write to string");
    }
    Ok(out)
}

/// Loss components and their annealed total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub role: f64,
    pub struct_align: f64,
    pub lambda_t: f64,
    pub total: f64,
}

pub fn nsa_loss(
    task: f64,
    role: f64,
    struct_align: f64,
    t: f64,
    cfg: &AnnealConfig,
) -> Result<LossBreakdown> {
    for (v, name) in [(task, "task"), (role, "role"), (struct_align, "struct")] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Validation(format!(
                "{name} loss must be finite and >= 0, got {v}"
            )));
        }
    }
    let lambda_t = lambda_at(t, cfg)?;
    let (wt, wr, ws) = cfg.term_weights(lambda_t);
    Ok(LossBreakdown {
        task,
        role,
        struct_align,
        lambda_t,
        total: wt * task + wr * role + ws * struct_align,
    })
}

/// Checks a binary R×E role→expert graph and returns `1 − C` (the
/// incompatibility mask).
pub fn incompatibility(compat_graph: &DenseMatrix) -> Result<DenseMatrix> {
    for r in 0..compat_graph.rows() {
        let row = compat_graph.row(r);
        if row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "compatibility graph row {r} has entries outside {{0, 1}}"
            )));
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation(format!(
                "compatibility graph row {r} allows no expert"
            )));
        }
    }
    Ok(compat_graph.map(|v| 1.0 - v))
}

/// Per-token penalty rows: row `i` is `1 − C[argmax r_i, ·]`. The argmax is
/// a fixed index, not differentiated.
pub fn penalty_rows(roles: &RoleDistribution, compat_graph: &DenseMatrix) -> Result<DenseMatrix> {
    if compat_graph.rows() != roles.roles() {
        return Err(Error::dim(format!(
            "graph has {} role rows, distribution has {} roles",
            compat_graph.rows(),
            roles.roles()
        )));
    }
    let incompat = incompatibility(compat_graph)?;
    let idx: Vec<usize> = (0..roles.len()).map(|i| argmax(roles.token(i))).collect();
    Ok(incompat.select_rows(&idx))
}

/// Confidence-weighted routing mass on experts the symbolic graph marks as
/// incompatible with each token's most likely role, averaged over tokens.
pub fn struct_loss(
    weights: &DenseMatrix,
    roles: &RoleDistribution,
    alpha: &DenseMatrix,
    compat_graph: &DenseMatrix,
) -> Result<f64> {
    let penalty = penalty_rows(roles, compat_graph)?;
    if weights.shape() != penalty.shape() || alpha.shape() != (weights.rows(), 1) {
        return Err(Error::dim(
            "routing weights, confidence and roles disagree in shape",
        ));
    }
    if weights.rows() == 0 {
        return Ok(0.0);
    }
    let per_token = weights.hadamard(&penalty)?.sum_cols().hadamard(alpha)?;
    Ok(per_token.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// First epoch of the stage.
    pub start: usize,
    /// One past the last epoch.
    pub end: usize,
    pub severity: f64,
    pub label_mask_rate: f64,
}

/// Ordered curriculum stages covering `[0, total_epochs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Stage>", into = "Vec<Stage>")]
pub struct CurriculumPlan {
    stages: Vec<Stage>,
}

impl CurriculumPlan {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("curriculum needs at least one stage".into()));
        }
        let mut expected_start = 0;
        let mut last_severity = f64::NEG_INFINITY;
        for s in &stages {
            if s.start != expected_start || s.end < s.start {
                return Err(Error::Config(format!(
                    "stage {:?} covers [{}, {}), expected to start at {expected_start}",
                    s.name, s.start, s.end
                )));
            }
            if !(0.0..=1.0).contains(&s.severity) || !(0.0..=1.0).contains(&s.label_mask_rate) {
                return Err(Error::Config(format!(
                    "stage {:?}: severity and label mask rate must lie in [0, 1]",
                    s.name
                )));
            }
            if s.severity < last_severity {
                return Err(Error::Config(format!(
                    "stage {:?} lowers severity from {last_severity} to {}",
                    s.name, s.severity
                )));
            }
            expected_start = s.end;
            last_severity = s.severity;
        }
        Ok(Self { stages })
    }

    /// clean → mild → wild, split at one and two thirds of training.
    pub fn default_for(total_epochs: usize) -> Self {
        let a = total_epochs / 3;
        let b = 2 * total_epochs / 3;
        let stage = |name: &str, start, end, severity, label_mask_rate| Stage {
            name: name.into(),
            start,
            end,
            severity,
            label_mask_rate,
        };
        Self::new(vec![
            stage("clean", 0, a, 0.0, 0.0),
            stage("mild", a, b, 0.5, 0.25),
            stage("wild", b, total_epochs, 1.0, 0.5),
        ])
        .expect("default plan is valid")
    }

    /// A single stage with no degradation.
    pub fn clean(total_epochs: usize) -> Self {
        Self::new(vec![Stage {
            name: "clean".into(),
            start: 0,
            end: total_epochs,
            severity: 0.0,
            label_mask_rate: 0.0,
        }])
        .expect("single clean stage is valid")
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.last().map_or(0, |s| s.end)
    }
}

impl TryFrom<Vec<Stage>> for CurriculumPlan {
    type Error = Error;

    fn try_from(v: Vec<Stage>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CurriculumPlan> for Vec<Stage> {
    fn from(p: CurriculumPlan) -> Self {
        p.stages
    }
}

pub fn curriculum_stage(epoch: usize, plan: &CurriculumPlan) -> Result<&Stage> {
    plan.stages
        .iter()
        .find(|s| s.start <= epoch && epoch < s.end)
        .ok_or_else(|| {
            Error::Validation(format!(
                "epoch {epoch} outside the curriculum [0, {})",
                plan.total_epochs()
            ))
        })
}
