//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! The tape records each primitive together with its forward value. A reverse
//! sweep from a 1×1 output then yields the gradient of every node. Only the
//! primitives that the routing pipeline and its losses need are provided.

use super::ops::{self, LOG_EPS};
use super::DenseMatrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    EntropyRows(Var),
    /// `scale · x + shift`, elementwise.
    Affine(Var, f64, f64),
    Clamp(Var, f64, f64),
    /// Row `r` of the first input times entry `r` of the second (rows×1).
    ScaleRows(Var, Var),
    Column(Var, usize),
    Add(Var, Var),
    Hadamard(Var, Var),
    MulConst(Var, DenseMatrix),
    SumCols(Var),
    Mean(Var),
    Mse(Var, DenseMatrix),
    MaskedNll(Var, Vec<usize>, Vec<bool>),
    /// Weighted sum of same-shape nodes.
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Gradients produced by [`GradTape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> DenseMatrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn entropy_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::EntropyRows(a))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine(a, scale, shift))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::ScaleRows(a, col))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        self.push(Op::Column(a, j))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Hadamard(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: DenseMatrix) -> Result<Var> {
        self.push(Op::MulConst(a, c))
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn mse(&mut self, a: Var, target: DenseMatrix) -> Result<Var> {
        self.push(Op::Mse(a, target))
    }

    /// Mean of `−ln max(p[label], ε)` over masked rows; 0 when none are masked.
    pub fn masked_nll(&mut self, probs: Var, labels: Vec<usize>, mask: Vec<bool>) -> Result<Var> {
        self.push(Op::MaskedNll(probs, labels, mask))
    }

    pub fn combine(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        self.push(Op::Combine(terms))
    }

    /// Re-evaluates the recorded program with new leaf values, given in leaf
    /// order. Returns the value of every node.
    pub fn replay(&self, leaves: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        let mut values: Vec<DenseMatrix> = Vec::with_capacity(self.nodes.len());
        let mut next_leaf = leaves.iter();
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => {
                    let leaf = next_leaf
                        .next()
                        .ok_or_else(|| Error::dim("replay: too few leaf values"))?;
                    if leaf.shape() != node.value.shape() {
                        return Err(Error::dim("replay: leaf shape changed"));
                    }
                    leaf.clone()
                }
                op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        if next_leaf.next().is_some() {
            return Err(Error::dim("replay: too many leaf values"));
        }
        Ok(values)
    }

    /// Reverse sweep from the 1×1 node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::dim("backward needs a 1x1 output"));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, contribution) in pullback(&node.op, &node.value, &g, |v| self.value(v))? {
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, g: DenseMatrix) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

fn eval<'a>(op: &Op, val: impl Fn(Var) -> &'a DenseMatrix) -> Result<DenseMatrix> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::AddRow(a, b) => val(*a).add_row(val(*b))?,
        Op::Relu(a) => val(*a).map(|v| v.max(0.0)),
        Op::SoftmaxRows(a) => ops::softmax_rows(val(*a))?,
        Op::EntropyRows(a) => ops::entropy_rows(val(*a)),
        Op::Affine(a, s, t) => val(*a).map(|v| s * v + t),
        Op::Clamp(a, lo, hi) => val(*a).map(|v| v.clamp(*lo, *hi)),
        Op::ScaleRows(a, c) => val(*a).scale_rows(val(*c))?,
        Op::Column(a, j) => {
            let m = val(*a);
            if *j >= m.cols() {
                return Err(Error::dim(format!("column {j} of {} columns", m.cols())));
            }
            DenseMatrix::col_vector(&m.col(*j))
        }
        Op::Add(a, b) => val(*a).add(val(*b))?,
        Op::Hadamard(a, b) => val(*a).hadamard(val(*b))?,
        Op::MulConst(a, c) => val(*a).hadamard(c)?,
        Op::SumCols(a) => val(*a).sum_cols(),
        Op::Mean(a) => DenseMatrix::filled(1, 1, val(*a).mean()),
        Op::Mse(a, t) => {
            let diff = val(*a).sub(t)?;
            let n = diff.len().max(1) as f64;
            DenseMatrix::filled(1, 1, diff.data().iter().map(|d| d * d).sum::<f64>() / n)
        }
        Op::MaskedNll(p, labels, mask) => {
            let p = val(*p);
            check_nll_inputs(p, labels, mask)?;
            let mut total = 0.0;
            let mut count = 0usize;
            for (r, (&l, &m)) in labels.iter().zip(mask).enumerate() {
                if m {
                    total -= p.get(r, l).max(LOG_EPS).ln();
                    count += 1;
                }
            }
            let loss = if count == 0 {
                0.0
            } else {
                total / count as f64
            };
            DenseMatrix::filled(1, 1, loss)
        }
        Op::Combine(terms) => {
            let Some(((first, w0), rest)) = terms.split_first() else {
                return Err(Error::dim("combine of zero terms"));
            };
            let mut acc = val(*first).scale(*w0);
            for (v, w) in rest {
                acc = acc.add(&val(*v).scale(*w))?;
            }
            acc
        }
    })
}

fn check_nll_inputs(p: &DenseMatrix, labels: &[usize], mask: &[bool]) -> Result<()> {
    if labels.len() != p.rows() || mask.len() != p.rows() {
        return Err(Error::dim(format!(
            "{} labels / {} mask entries for {} rows",
            labels.len(),
            mask.len(),
            p.rows()
        )));
    }
    if let Some((i, l)) = labels
        .iter()
        .zip(mask)
        .enumerate()
        .find_map(|(i, (&l, _))| (l >= p.cols()).then_some((i, l)))
    {
        return Err(Error::Validation(format!(
            "label {l} at row {i} outside [0, {})",
            p.cols()
        )));
    }
    Ok(())
}

fn pullback<'a>(
    op: &Op,
    out: &DenseMatrix,
    g: &DenseMatrix,
    val: impl Fn(Var) -> &'a DenseMatrix,
) -> Result<Vec<(Var, DenseMatrix)>> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))?), (*b, val(*a).t_matmul(g)?)],
        Op::AddRow(a, b) => vec![(*a, g.clone()), (*b, g.sum_rows())],
        Op::Relu(a) => {
            let x = val(*a);
            let mut d = g.clone();
            for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *dv = 0.0;
                }
            }
            vec![(*a, d)]
        }
        Op::SoftmaxRows(a) => vec![(*a, ops::softmax_rows_vjp(out, g))],
        Op::EntropyRows(a) => vec![(*a, ops::entropy_rows_vjp(val(*a), g))],
        Op::Affine(a, s, _) => vec![(*a, g.scale(*s))],
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            let mut d = g.clone();
            for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                if xv < *lo || xv > *hi {
                    *dv = 0.0;
                }
            }
            vec![(*a, d)]
        }
        Op::ScaleRows(a, c) => {
            let x = val(*a);
            vec![
                (*a, g.scale_rows(val(*c))?),
                (*c, g.hadamard(x)?.sum_cols()),
            ]
        }
        Op::Column(a, j) => {
            let x = val(*a);
            let mut d = DenseMatrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                d.set(r, *j, g.get(r, 0));
            }
            vec![(*a, d)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Hadamard(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
        Op::MulConst(a, c) => vec![(*a, g.hadamard(c)?)],
        Op::SumCols(a) => {
            let x = val(*a);
            vec![(
                *a,
                DenseMatrix::from_fn(x.rows(), x.cols(), |r, _| g.get(r, 0)),
            )]
        }
        Op::Mean(a) => {
            let x = val(*a);
            let n = x.len().max(1) as f64;
            vec![(*a, DenseMatrix::filled(x.rows(), x.cols(), g.get(0, 0) / n))]
        }
        Op::Mse(a, t) => {
            let diff = val(*a).sub(t)?;
            let n = diff.len().max(1) as f64;
            let k = 2.0 * g.get(0, 0) / n;
            vec![(*a, diff.scale(k))]
        }
        Op::MaskedNll(p, labels, mask) => {
            let probs = val(*p);
            let count = mask.iter().filter(|&&m| m).count();
            let mut d = DenseMatrix::zeros(probs.rows(), probs.cols());
            if count > 0 {
                let k = g.get(0, 0) / count as f64;
                for (r, (&l, &m)) in labels.iter().zip(mask).enumerate() {
                    let pv = probs.get(r, l);
                    if m && pv > LOG_EPS {
                        d.set(r, l, -k / pv);
                    }
                }
            }
            vec![(*p, d)]
        }
        Op::Combine(terms) => terms.iter().map(|(v, w)| (*v, g.scale(*w))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central-difference gradient of `f` at `x`, one entry at a time.
    fn numeric_grad(x: &DenseMatrix, f: impl Fn(&DenseMatrix) -> f64) -> DenseMatrix {
        let eps = 1e-5;
        let mut g = DenseMatrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn max_rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn uniform(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        use rand::Rng;
        let mut s = rng::stream(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| s.random_range(-2.0..2.0))
    }

    /// Builds `loss = Σ_ij weights_ij · f(x)_ij` so every output entry gets a
    /// distinct upstream gradient, then compares with finite differences.
    fn check_unary(build: impl Fn(&mut GradTape, Var) -> Var, rows: usize, cols: usize, seed: u64) {
        let x0 = uniform(rows, cols, seed);
        let run = |x: &DenseMatrix| -> (GradTape, Var, Var) {
            let mut t = GradTape::new();
            let x = t.leaf(x.clone());
            let y = build(&mut t, x);
            let (r, c) = t.value(y).shape();
            let w = uniform(r, c, seed + 1);
            let prod = t.mul_const(y, w).unwrap();
            let s = t.sum_cols(prod).unwrap();
            let n = t.value(s).len() as f64;
            let loss = t.mean(s).unwrap();
            let loss = t.affine(loss, n, 0.0).unwrap();
            (t, x, loss)
        };
        let (t, x, loss) = run(&x0);
        let analytic = t.backward(loss).unwrap().wrt(x);
        let numeric = numeric_grad(&x0, |xp| {
            let (t, _, l) = run(xp);
            t.scalar(l)
        });
        let err = max_rel(&analytic, &numeric);
        assert!(err < 1e-4, "rel error {err}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_unary(|t, x| t.softmax_rows(x).unwrap(), 3, 4, seed);
            check_unary(
                |t, x| {
                    let p = t.softmax_rows(x).unwrap();
                    t.entropy_rows(p).unwrap()
                },
                3,
                5,
                seed,
            );
            check_unary(|t, x| t.relu(x).unwrap(), 4, 3, seed);
            check_unary(|t, x| t.affine(x, -1.5, 0.3).unwrap(), 2, 2, seed);
            check_unary(|t, x| t.clamp(x, -1.0, 1.0).unwrap(), 3, 3, seed);
            check_unary(|t, x| t.column(x, 1).unwrap(), 3, 3, seed);
            check_unary(
                |t, x| {
                    let w = t.leaf(uniform(4, 2, 99));
                    t.matmul(x, w).unwrap()
                },
                3,
                4,
                seed,
            );
            check_unary(
                |t, x| {
                    let w = t.leaf(uniform(2, 3, 98));
                    t.matmul(w, x).unwrap()
                },
                3,
                4,
                seed,
            );
            check_unary(
                |t, x| {
                    let b = t.leaf(uniform(1, 4, 97));
                    t.add_row(x, b).unwrap()
                },
                3,
                4,
                seed,
            );
            check_unary(
                |t, x| {
                    let z = t.leaf(uniform(3, 1, 96));
                    t.add_row(z, x).unwrap()
                },
                1,
                1,
                seed,
            );
            check_unary(
                |t, x| {
                    let c = t.column(x, 0).unwrap();
                    t.scale_rows(x, c).unwrap()
                },
                3,
                3,
                seed,
            );
            check_unary(|t, x| t.hadamard(x, x).unwrap(), 2, 3, seed);
            check_unary(|t, x| t.mse(x, uniform(2, 3, 95)).unwrap(), 2, 3, seed);
            check_unary(
                |t, x| {
                    let y = t.affine(x, 2.0, 0.0).unwrap();
                    t.combine(vec![(x, 0.5), (y, -3.0)]).unwrap()
                },
                2,
                2,
                seed,
            );
            check_unary(
                |t, x| {
                    let p = t.softmax_rows(x).unwrap();
                    t.masked_nll(p, vec![0, 2, 1, 3], vec![true, false, true, true])
                        .unwrap()
                },
                4,
                4,
                seed,
            );
        }
    }

    #[test]
    fn replay_reproduces_forward_bit_exactly() {
        let mut t = GradTape::new();
        let x0 = uniform(5, 3, 1);
        let w0 = uniform(3, 4, 2);
        let x = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let z = t.matmul(x, w).unwrap();
        let p = t.softmax_rows(z).unwrap();
        let h = t.entropy_rows(p).unwrap();
        let s = t.scale_rows(p, h).unwrap();
        let out = t.mean(s).unwrap();

        let replayed = t.replay(&[x0, w0]).unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)), "node {i}");
        }
        assert_eq!(replayed[out.index()].get(0, 0), t.scalar(out));

        let moved = t.replay(&[uniform(5, 3, 7), uniform(3, 4, 8)]).unwrap();
        assert_ne!(moved[out.index()], *t.value(out));
        assert!(t.replay(&[uniform(5, 3, 7)]).is_err());
        assert!(t.replay(&[uniform(5, 2, 7), uniform(3, 4, 8)]).is_err());
    }

    #[test]
    fn unreached_leaves_get_zero_gradient() {
        let mut t = GradTape::new();
        let a = t.leaf(DenseMatrix::filled(2, 2, 1.0));
        let b = t.leaf(DenseMatrix::filled(3, 1, 1.0));
        let l = t.mean(a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(b), DenseMatrix::zeros(3, 1));
        assert_eq!(g.wrt(a), DenseMatrix::filled(2, 2, 0.25));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn masked_nll_edge_cases() {
        let mut t = GradTape::new();
        let p = t.leaf(DenseMatrix::filled(2, 3, 1.0 / 3.0));
        let empty = t.masked_nll(p, vec![0, 1], vec![false, false]).unwrap();
        assert_eq!(t.scalar(empty), 0.0);
        assert!(matches!(
            t.masked_nll(p, vec![0, 3], vec![true, true]),
            Err(Error::Validation(_))
        ));
        assert!(t.masked_nll(p, vec![0, 9], vec![true, false]).is_err());
    }
}
