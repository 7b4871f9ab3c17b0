//! Role-aware soft routing over the connector experts.
//!
//! For token `i` with role distribution `r_i`:
//!
//! ```text
//! a_i     = r_i · C                       affinities, C is R×E
//! α_i     = clamp(1 − H(r_i) / ln R, 0, 1) confidence
//! w_i     = softmax(β · α_i · a_i)         routing weights
//! x̂_i     = Σ_e w_ie · f_e(x_i)           fused output
//! ```
//!
//! `β` is the routing-confidence gain; `β = 1` gives the unscaled rule.
//! [`oracle_forward`] recomputes the same pipeline with scalar loops and is
//! used to cross-check [`forward`].

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::experts::{expert_forward_rows, ExpertKind, ExpertRegistry, NUM_EXPERTS};
use crate::numeric::ops::{argmax, entropy_rows, softmax_rows, LOG_EPS};
use crate::numeric::DenseMatrix;
use crate::roles::{
    predict_roles, role_argmax, Role, RoleClassifierParams, RoleDistribution, NUM_ROLES,
};

/// Noise added to the prior when the compatibility matrix is initialized.
pub const COMPAT_INIT_SIGMA: f64 = 0.01;

/// Expert each role is sent to by the symbolic prior.
pub fn prior_expert(role: Role) -> ExpertKind {
    match role {
        Role::Header | Role::Axis => ExpertKind::Html,
        Role::Data | Role::Unit | Role::Total => ExpertKind::Json,
        Role::Formula => ExpertKind::Code,
        Role::Text | Role::Annotation | Role::Empty => ExpertKind::General,
    }
}

/// Binary R×E role→expert graph of the symbolic prior.
pub fn prior_graph() -> DenseMatrix {
    DenseMatrix::from_fn(NUM_ROLES, NUM_EXPERTS, |r, e| {
        let role = Role::from_index(r).expect("role index");
        if prior_expert(role).index() == e {
            1.0
        } else {
            0.0
        }
    })
}

/// Learned R×E map from role probabilities to expert affinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompatibilityMatrix(pub DenseMatrix);

impl CompatibilityMatrix {
    pub fn prior() -> Self {
        Self(prior_graph())
    }

    /// Prior plus i.i.d. N(0, sigma²) noise.
    pub fn init<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Self {
        let noise = DenseMatrix::gaussian(NUM_ROLES, NUM_EXPERTS, sigma, rng);
        Self(prior_graph().add(&noise).expect("same shape"))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn roles(&self) -> usize {
        self.0.rows()
    }

    pub fn experts(&self) -> usize {
        self.0.cols()
    }
}

/// Every learned tensor of the routing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub role: RoleClassifierParams,
    pub compat: CompatibilityMatrix,
    pub experts: ExpertRegistry,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.role.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.role.validate()?;
        if self.compat.roles() != self.role.roles() {
            return Err(Error::dim(format!(
                "compatibility matrix has {} rows, classifier has {} roles",
                self.compat.roles(),
                self.role.roles()
            )));
        }
        if self.compat.experts() != NUM_EXPERTS {
            return Err(Error::dim(format!(
                "compatibility matrix has {} columns, registry has {NUM_EXPERTS} experts",
                self.compat.experts()
            )));
        }
        self.compat.0.ensure_finite("compatibility matrix")?;
        if self.experts.dim() != self.dim() {
            return Err(Error::dim(format!(
                "experts expect D={}, classifier D={}",
                self.experts.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// How routing weights are produced. The non-learned variants are ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Learned,
    /// Equal weight on every expert.
    Uniform,
    /// All weight on one expert.
    Single(ExpertKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteOptions {
    /// Routing-confidence gain β ≥ 0.
    pub beta: f64,
    /// Force α = 1 for every token.
    pub no_confidence: bool,
    pub mode: RoutingMode,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            no_confidence: false,
            mode: RoutingMode::Learned,
        }
    }
}

impl RouteOptions {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Intermediate routing quantities, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub batch: usize,
    pub seq: usize,
    /// (B·N)×E
    pub affinities: DenseMatrix,
    /// (B·N)×1
    pub alpha: DenseMatrix,
    /// (B·N)×E, rows on the simplex.
    pub weights: DenseMatrix,
    pub beta: f64,
}

impl RoutingState {
    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }
}

/// Fused token representations, same shape as the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch {
    pub batch: usize,
    pub seq: usize,
    pub values: DenseMatrix,
}

pub fn affinity(roles: &RoleDistribution, compat: &CompatibilityMatrix) -> Result<DenseMatrix> {
    if roles.roles() != compat.roles() {
        return Err(Error::dim(format!(
            "{} role probabilities against a {}-row compatibility matrix",
            roles.roles(),
            compat.roles()
        )));
    }
    roles.probs.matmul(compat.matrix())
}

/// `α = clamp(1 − H/ln R, 0, 1)` per token, as a column.
pub fn confidence(roles: &RoleDistribution) -> Result<DenseMatrix> {
    let r = roles.roles();
    if r < 2 {
        return Err(Error::Config(format!(
            "confidence needs at least 2 roles, got {r}"
        )));
    }
    let log_r = (r as f64).ln();
    Ok(entropy_rows(&roles.probs).map(|h| (1.0 - h / log_r).clamp(0.0, 1.0)))
}

/// `w_i = softmax(β · α_i · a_i)`.
pub fn routing_weights(
    affinities: &DenseMatrix,
    alpha: &DenseMatrix,
    beta: f64,
) -> Result<DenseMatrix> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    softmax_rows(&affinities.scale_rows(alpha)?.scale(beta))
}

/// Convex combination of expert outputs, `x̂_i = Σ_e w_ie · y_e,i`.
pub fn fuse(expert_outputs: &[DenseMatrix], weights: &DenseMatrix) -> Result<DenseMatrix> {
    if expert_outputs.len() != weights.cols() {
        return Err(Error::dim(format!(
            "{} expert outputs for {} routing columns",
            expert_outputs.len(),
            weights.cols()
        )));
    }
    let mut acc: Option<DenseMatrix> = None;
    for (e, y) in expert_outputs.iter().enumerate() {
        if y.rows() != weights.rows() {
            return Err(Error::dim(format!(
                "expert {e} produced {} rows for {} tokens",
                y.rows(),
                weights.rows()
            )));
        }
        let term = y.scale_rows(&DenseMatrix::col_vector(&weights.col(e)))?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::dim("fuse needs at least one expert"))
}

/// Routing weights forced by an ablation, or `None` for learned routing.
pub(crate) fn fixed_weights(mode: RoutingMode, tokens: usize) -> Option<DenseMatrix> {
    match mode {
        RoutingMode::Learned => None,
        RoutingMode::Uniform => Some(DenseMatrix::filled(
            tokens,
            NUM_EXPERTS,
            1.0 / NUM_EXPERTS as f64,
        )),
        RoutingMode::Single(k) => Some(DenseMatrix::from_fn(tokens, NUM_EXPERTS, |_, e| {
            if e == k.index() {
                1.0
            } else {
                0.0
            }
        })),
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub fused: FusedBatch,
    pub state: RoutingState,
    pub roles: RoleDistribution,
    /// Per-expert outputs in registry order.
    pub expert_outputs: Vec<DenseMatrix>,
}

pub fn forward(x: &TokenBatch, params: &ModelParams, opts: &RouteOptions) -> Result<ForwardOutput> {
    params.validate()?;
    opts.validate()?;
    let roles = predict_roles(x, &params.role)?;
    let affinities = affinity(&roles, &params.compat)?;
    let alpha = if opts.no_confidence {
        DenseMatrix::filled(x.len(), 1, 1.0)
    } else {
        confidence(&roles)?
    };
    let weights = match fixed_weights(opts.mode, x.len()) {
        Some(w) => w,
        None => routing_weights(&affinities, &alpha, opts.beta)?,
    };
    let expert_outputs = params
        .experts
        .iter()
        .map(|e| expert_forward_rows(x.tokens(), e))
        .collect::<Result<Vec<_>>>()?;
    let values = fuse(&expert_outputs, &weights)?;
    values.ensure_finite("fused output")?;
    Ok(ForwardOutput {
        fused: FusedBatch {
            batch: x.batch(),
            seq: x.seq(),
            values,
        },
        state: RoutingState {
            batch: x.batch(),
            seq: x.seq(),
            affinities,
            alpha,
            weights,
            beta: opts.beta,
        },
        roles,
        expert_outputs,
    })
}

/// Scalar-loop recomputation of [`forward`]'s fused output. Shares nothing
/// with the batched path beyond `exp` and `ln`.
pub fn oracle_forward(
    x: &TokenBatch,
    params: &ModelParams,
    opts: &RouteOptions,
) -> Result<FusedBatch> {
    params.validate()?;
    opts.validate()?;
    let d = x.dim();
    if d != params.dim() {
        return Err(Error::dim(format!(
            "tokens have D={d}, model expects D={}",
            params.dim()
        )));
    }
    let n_roles = params.role.roles();
    let n_experts = NUM_EXPERTS;
    let w_role = &params.role.weight;
    let b_role = &params.role.bias;
    let compat = params.compat.matrix();

    let mut out = vec![0.0; x.len() * d];
    for b in 0..x.batch() {
        for n in 0..x.seq() {
            let token = x.token(b, n);

            let mut logits = vec![0.0; n_roles];
            for k in 0..n_roles {
                let mut z = b_role.get(0, k);
                for j in 0..d {
                    z += token[j] * w_role.get(j, k);
                }
                logits[k] = z;
            }
            let mut top = logits[0];
            for &z in &logits {
                if z > top {
                    top = z;
                }
            }
            let mut probs = vec![0.0; n_roles];
            let mut total = 0.0;
            for k in 0..n_roles {
                probs[k] = (logits[k] - top).exp();
                total += probs[k];
            }
            for p in probs.iter_mut() {
                *p /= total;
            }

            let mut entropy = 0.0;
            for &p in &probs {
                let floored = if p > LOG_EPS { p } else { LOG_EPS };
                entropy -= p * floored.ln();
            }
            let alpha = if opts.no_confidence {
                1.0
            } else {
                let a = 1.0 - entropy / (n_roles as f64).ln();
                a.clamp(0.0, 1.0)
            };

            let mut weights = vec![0.0; n_experts];
            match opts.mode {
                RoutingMode::Uniform => {
                    weights.iter_mut().for_each(|w| *w = 1.0 / n_experts as f64)
                }
                RoutingMode::Single(k) => weights[k.index()] = 1.0,
                RoutingMode::Learned => {
                    let mut scaled = vec![0.0; n_experts];
                    for e in 0..n_experts {
                        let mut a = 0.0;
                        for k in 0..n_roles {
                            a += probs[k] * compat.get(k, e);
                        }
                        scaled[e] = opts.beta * alpha * a;
                    }
                    let mut top = scaled[0];
                    for &s in &scaled {
                        if s > top {
                            top = s;
                        }
                    }
                    let mut total = 0.0;
                    for e in 0..n_experts {
                        weights[e] = (scaled[e] - top).exp();
                        total += weights[e];
                    }
                    for w in weights.iter_mut() {
                        *w /= total;
                    }
                }
            }

            let row = (b * x.seq() + n) * d;
            for (e, expert) in params.experts.iter().enumerate() {
                let h = expert.hidden();
                let mut hidden = vec![0.0; h];
                for u in 0..h {
                    let mut z = expert.b1.get(0, u);
                    for j in 0..d {
                        z += token[j] * expert.w1.get(j, u);
                    }
                    hidden[u] = if z > 0.0 { z } else { 0.0 };
                }
                for j in 0..d {
                    let mut y = expert.b2.get(0, j);
                    for u in 0..h {
                        y += hidden[u] * expert.w2.get(u, j);
                    }
                    out[row + j] += weights[e] * y;
                }
            }
        }
    }
    Ok(FusedBatch {
        batch: x.batch(),
        seq: x.seq(),
        values: DenseMatrix::new(x.len(), d, out)?,
    })
}

/// One row of routing diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteRecord {
    pub batch: usize,
    pub pos: usize,
    pub role_argmax: Role,
    pub role_entropy_nats: f64,
    pub alpha: f64,
    pub weights: [f64; NUM_EXPERTS],
    pub top_expert: ExpertKind,
}

pub const REPORT_HEADER: &str =
    "batch,pos,role_argmax,role_entropy_nats,alpha,w_html,w_json,w_code,w_general,top_expert";

/// Per-token diagnostics in batch-major order.
pub fn routing_report(state: &RoutingState, roles: &RoleDistribution) -> Result<Vec<RouteRecord>> {
    if state.len() != roles.len() || state.weights.cols() != NUM_EXPERTS {
        return Err(Error::dim("routing state and role distribution disagree"));
    }
    let argmax_roles = role_argmax(roles);
    let entropies = entropy_rows(&roles.probs);
    let seq = state.seq.max(1);
    (0..state.len())
        .map(|i| {
            let w = state.weights.row(i);
            Ok(RouteRecord {
                batch: i / seq,
                pos: i % seq,
                role_argmax: Role::from_index(argmax_roles[i])
                    .ok_or_else(|| Error::dim("role index outside taxonomy"))?,
                role_entropy_nats: entropies.get(i, 0),
                alpha: state.alpha.get(i, 0),
                weights: [w[0], w[1], w[2], w[3]],
                top_expert: ExpertKind::ALL[argmax(w)],
            })
        })
        .collect()
}

pub fn write_report_csv<W: Write>(records: &[RouteRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.batch,
            r.pos,
            r.role_argmax,
            r.role_entropy_nats,
            r.alpha,
            r.weights[0],
            r.weights[1],
            r.weights[2],
            r.weights[3],
            r.top_expert
        )?;
    }
    Ok(())
}
