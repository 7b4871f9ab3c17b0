//! Parameter initialization and the differentiable training objective.
//!
//! [`nsa_objective`] records the whole routing pipeline on a [`GradTape`],
//! adds the task, role and structure losses with their annealed weights, and
//! returns the loss components together with gradients for every tensor in
//! [`ModelParams`].

use crate::annealing::penalty_rows;
use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::experts::{init_warm_start, ExpertKind};
use crate::numeric::{DenseMatrix, GradTape, Var};
use crate::rng;
use crate::roles::{RoleClassifierParams, RoleDistribution, NUM_ROLES};
use crate::routing::{
    fixed_weights, CompatibilityMatrix, ModelParams, RouteOptions, COMPAT_INIT_SIGMA,
};

/// Scale of the initial role-classifier weights. Small, so routing starts
/// close to uniform.
pub const ROLE_INIT_SIGMA: f64 = 0.01;

impl ModelParams {
    pub fn init(seed: u64, dim: usize, hidden: usize, sigma_pert: f64) -> Result<Self> {
        let mut role_rng = rng::stream(rng::derive_label(seed, "role-init"));
        let mut compat_rng = rng::stream(rng::derive_label(seed, "compat-init"));
        let params = Self {
            role: RoleClassifierParams::gaussian(dim, NUM_ROLES, ROLE_INIT_SIGMA, &mut role_rng),
            compat: CompatibilityMatrix::init(COMPAT_INIT_SIGMA, &mut compat_rng),
            experts: init_warm_start(rng::derive_label(seed, "experts"), dim, hidden, sigma_pert)?,
        };
        params.validate()?;
        Ok(params)
    }

    /// Stable tensor names, in the order of [`Self::tensors`].
    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["role.weight".into(), "role.bias".into(), "compat".into()];
        for kind in ExpertKind::ALL {
            for t in ["w1", "b1", "w2", "b2"] {
                names.push(format!("expert.{}.{t}", kind.name().to_lowercase()));
            }
        }
        names
    }

    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out = vec![&self.role.weight, &self.role.bias, &self.compat.0];
        for e in self.experts.iter() {
            out.extend(e.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![
            &mut self.role.weight,
            &mut self.role.bias,
            &mut self.compat.0,
        ];
        for e in self.experts.iter_mut() {
            out.extend(e.tensors_mut());
        }
        out
    }

    /// Rebuilds a parameter set of the same layout from a flat tensor list.
    pub fn with_tensors(&self, tensors: &[DenseMatrix]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::dim(format!(
                "{} tensors for {} parameter slots",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim("tensor shape differs from the parameter layout"));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    /// A parameter set of the same layout filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = DenseMatrix::zeros(t.rows(), t.cols());
        }
        out
    }
}

/// Multipliers applied to the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub task: f64,
    pub role: f64,
    pub struct_align: f64,
}

/// Supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    /// (B·N)×D regression targets.
    pub targets: &'a DenseMatrix,
    /// Role index per token; only read where `mask` is set.
    pub labels: &'a [usize],
    pub mask: &'a [bool],
    /// Binary R×E role→expert graph.
    pub compat_graph: &'a DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub task: f64,
    pub role: f64,
    pub struct_align: f64,
    pub total: f64,
}

struct Handles {
    leaves: Vec<Var>,
    task: Var,
    role: Var,
    struct_align: Var,
    total: Var,
}

fn record(
    tape: &mut GradTape,
    params: &ModelParams,
    x: &TokenBatch,
    sup: &Supervision<'_>,
    opts: &RouteOptions,
    weights: TermWeights,
) -> Result<Handles> {
    params.validate()?;
    opts.validate()?;
    let n = x.len();
    sup.targets.ensure_shape(n, x.dim(), "targets")?;

    let leaves: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let (w_role, b_role, compat) = (leaves[0], leaves[1], leaves[2]);
    let tokens = tape.leaf(x.tokens().clone());

    let logits = tape.matmul(tokens, w_role)?;
    let logits = tape.add_row(logits, b_role)?;
    let roles = tape.softmax_rows(logits)?;
    let affinities = tape.matmul(roles, compat)?;

    let alpha = if opts.no_confidence {
        tape.leaf(DenseMatrix::filled(n, 1, 1.0))
    } else {
        let log_r = (params.role.roles() as f64).ln();
        let h = tape.entropy_rows(roles)?;
        let a = tape.affine(h, -1.0 / log_r, 1.0)?;
        tape.clamp(a, 0.0, 1.0)?
    };

    let routing = match fixed_weights(opts.mode, n) {
        Some(w) => tape.leaf(w),
        None => {
            let scaled = tape.scale_rows(affinities, alpha)?;
            let scaled = tape.affine(scaled, opts.beta, 0.0)?;
            tape.softmax_rows(scaled)?
        }
    };

    let mut terms = Vec::with_capacity(params.experts.iter().count());
    for (e, expert_leaves) in leaves[3..].chunks(4).enumerate() {
        let z = tape.matmul(tokens, expert_leaves[0])?;
        let z = tape.add_row(z, expert_leaves[1])?;
        let h = tape.relu(z)?;
        let y = tape.matmul(h, expert_leaves[2])?;
        let y = tape.add_row(y, expert_leaves[3])?;
        let w_e = tape.column(routing, e)?;
        terms.push((tape.scale_rows(y, w_e)?, 1.0));
    }
    let fused = tape.combine(terms)?;

    let task = tape.mse(fused, sup.targets.clone())?;
    let role = tape.masked_nll(roles, sup.labels.to_vec(), sup.mask.to_vec())?;

    let dist = RoleDistribution::from_probs(x.batch(), x.seq(), tape.value(roles).clone())?;
    let penalty = penalty_rows(&dist, sup.compat_graph)?;
    let off_graph = tape.mul_const(routing, penalty)?;
    let off_graph = tape.sum_cols(off_graph)?;
    let off_graph = tape.hadamard(off_graph, alpha)?;
    let struct_align = tape.mean(off_graph)?;

    let total = tape.combine(vec![
        (task, weights.task),
        (role, weights.role),
        (struct_align, weights.struct_align),
    ])?;

    Ok(Handles {
        leaves,
        task,
        role,
        struct_align,
        total,
    })
}

/// Loss components and gradients of the weighted total.
pub fn nsa_objective(
    params: &ModelParams,
    x: &TokenBatch,
    sup: &Supervision<'_>,
    opts: &RouteOptions,
    weights: TermWeights,
) -> Result<(ObjectiveValue, ModelParams)> {
    let mut tape = GradTape::new();
    let h = record(&mut tape, params, x, sup, opts, weights)?;
    let value = ObjectiveValue {
        task: tape.scalar(h.task),
        role: tape.scalar(h.role),
        struct_align: tape.scalar(h.struct_align),
        total: tape.scalar(h.total),
    };
    let grads = tape.backward(h.total)?;
    let grad_tensors: Vec<DenseMatrix> = h.leaves.iter().map(|&v| grads.wrt(v)).collect();
    Ok((value, params.with_tensors(&grad_tensors)?))
}

/// Loss components only; no reverse sweep.
pub fn nsa_value(
    params: &ModelParams,
    x: &TokenBatch,
    sup: &Supervision<'_>,
    opts: &RouteOptions,
    weights: TermWeights,
) -> Result<ObjectiveValue> {
    let mut tape = GradTape::new();
    let h = record(&mut tape, params, x, sup, opts, weights)?;
    Ok(ObjectiveValue {
        task: tape.scalar(h.task),
        role: tape.scalar(h.role),
        struct_align: tape.scalar(h.struct_align),
        total: tape.scalar(h.total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annealing::struct_loss;
    use crate::numeric::finite_diff_check;
    use crate::roles::role_loss;
    use crate::routing::{forward, prior_graph, RoutingMode};
    use rand::Rng;

    struct Case {
        params: ModelParams,
        x: TokenBatch,
        targets: DenseMatrix,
        labels: Vec<usize>,
        mask: Vec<bool>,
        graph: DenseMatrix,
    }

    fn case(b: usize, n: usize, d: usize, seed: u64) -> Case {
        let mut s = rng::stream(seed);
        let mut params = ModelParams::init(seed, d, 2 * d, 0.3).unwrap();
        // Larger role weights than the training init, so confidence and the
        // structure term are far from their degenerate values.
        params.role = RoleClassifierParams::gaussian(d, NUM_ROLES, 0.8, &mut s);
        params.compat = CompatibilityMatrix(DenseMatrix::gaussian(NUM_ROLES, 4, 1.0, &mut s));
        let x =
            TokenBatch::from_matrix(b, n, DenseMatrix::gaussian(b * n, d, 1.0, &mut s)).unwrap();
        let targets = DenseMatrix::gaussian(b * n, d, 1.0, &mut s);
        let labels = (0..b * n).map(|_| s.random_range(0..NUM_ROLES)).collect();
        let mask = (0..b * n).map(|i| i % 3 != 1).collect();
        Case {
            params,
            x,
            targets,
            labels,
            mask,
            graph: prior_graph(),
        }
    }

    fn sup(c: &Case) -> Supervision<'_> {
        Supervision {
            targets: &c.targets,
            labels: &c.labels,
            mask: &c.mask,
            compat_graph: &c.graph,
        }
    }

    const MIXED: TermWeights = TermWeights {
        task: 0.4,
        role: 0.6,
        struct_align: 0.3,
    };

    fn grad_check(c: &Case, opts: RouteOptions, weights: TermWeights) -> f64 {
        let names = ModelParams::tensor_names();
        let bundle: Vec<(String, DenseMatrix)> = names
            .into_iter()
            .zip(c.params.tensors().into_iter().cloned())
            .collect();
        let report = finite_diff_check(
            |theta| {
                let p = c.params.with_tensors(theta)?;
                let (v, g) = nsa_objective(&p, &c.x, &sup(c), &opts, weights)?;
                Ok((v.total, g.tensors().into_iter().cloned().collect()))
            },
            &bundle,
            1e-5,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn components_match_the_direct_formulas() {
        let c = case(2, 5, 4, 1);
        let opts = RouteOptions::with_beta(2.0);
        let v = nsa_value(&c.params, &c.x, &sup(&c), &opts, MIXED).unwrap();
        let out = forward(&c.x, &c.params, &opts).unwrap();

        let diff = out.fused.values.sub(&c.targets).unwrap();
        let mse = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        assert!((v.task - mse).abs() < 1e-12);
        let rl = role_loss(&out.roles, &c.labels, &c.mask).unwrap();
        assert!((v.role - rl).abs() < 1e-12);
        let sl = struct_loss(&out.state.weights, &out.roles, &out.state.alpha, &c.graph).unwrap();
        assert!((v.struct_align - sl).abs() < 1e-12);
        let total = 0.4 * v.task + 0.6 * v.role + 0.3 * v.struct_align;
        assert!((v.total - total).abs() < 1e-12);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let c = case(2, 4, 8, 7);
        let err = grad_check(&c, RouteOptions::with_beta(1.7), MIXED);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn ablated_objective_gradients_match_finite_differences() {
        let c = case(1, 5, 3, 8);
        for opts in [
            RouteOptions {
                no_confidence: true,
                ..RouteOptions::with_beta(2.0)
            },
            RouteOptions {
                mode: RoutingMode::Uniform,
                ..RouteOptions::default()
            },
            RouteOptions {
                mode: RoutingMode::Single(ExpertKind::Json),
                ..RouteOptions::default()
            },
        ] {
            let err = grad_check(&c, opts, MIXED);
            assert!(err < 1e-4, "{opts:?}: max rel error {err}");
        }
    }

    #[test]
    fn role_loss_gradient_alone() {
        let c = case(1, 6, 4, 9);
        let only_role = TermWeights {
            task: 0.0,
            role: 1.0,
            struct_align: 0.0,
        };
        let err = grad_check(&c, RouteOptions::default(), only_role);
        assert!(err < 1e-4, "max rel error {err}");
        // The role loss does not reach the experts or the compatibility matrix.
        let (_, g) = nsa_objective(
            &c.params,
            &c.x,
            &sup(&c),
            &RouteOptions::default(),
            only_role,
        )
        .unwrap();
        assert_eq!(g.compat.0.max_abs(), 0.0);
        assert!(g
            .experts
            .iter()
            .all(|e| e.tensors().iter().all(|t| t.max_abs() == 0.0)));
        assert!(g.role.weight.max_abs() > 0.0);
    }

    #[test]
    fn task_loss_gradient_alone() {
        let c = case(2, 3, 5, 10);
        let only_task = TermWeights {
            task: 1.0,
            role: 0.0,
            struct_align: 0.0,
        };
        let err = grad_check(&c, RouteOptions::with_beta(3.0), only_task);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn struct_loss_gradient_alone() {
        let c = case(2, 3, 5, 11);
        let only_struct = TermWeights {
            task: 0.0,
            role: 0.0,
            struct_align: 1.0,
        };
        let err = grad_check(&c, RouteOptions::with_beta(1.0), only_struct);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn tensor_layout_round_trips() {
        let p = ModelParams::init(3, 4, 8, 0.05).unwrap();
        let names = ModelParams::tensor_names();
        assert_eq!(names.len(), p.tensors().len());
        assert_eq!(names[0], "role.weight");
        assert_eq!(names[3], "expert.html.w1");
        assert_eq!(names[18], "expert.general.b2");
        let flat: Vec<DenseMatrix> = p.tensors().into_iter().cloned().collect();
        assert_eq!(p.with_tensors(&flat).unwrap(), p);
        assert!(p.with_tensors(&flat[1..]).is_err());
        assert_eq!(ModelParams::init(3, 4, 8, 0.05).unwrap(), p);
    }
}
