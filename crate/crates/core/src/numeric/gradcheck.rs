//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Relative error floor used in the denominator.
const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

/// Compares the analytic gradient returned by `loss` against central
/// differences `(f(θ+εu) − f(θ−εu)) / 2ε`, probing one entry at a time.
///
/// `loss` maps the full parameter bundle to `(value, gradients)`, with one
/// gradient per parameter in the same order. Only the value is used at the
/// probe points.
pub fn finite_diff_check<F>(
    loss: F,
    params: &[(String, DenseMatrix)],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[DenseMatrix]) -> Result<(f64, Vec<DenseMatrix>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    let mut theta: Vec<DenseMatrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let (value, analytic) = loss(&theta)?;
    if !value.is_finite() {
        return Err(Error::NumericDomain(
            "loss is not finite at the base point".into(),
        ));
    }
    if analytic.len() != theta.len() {
        return Err(Error::dim(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::with_capacity(params.len()),
    };
    for (p, (name, _)) in params.iter().enumerate() {
        analytic[p].ensure_shape(theta[p].rows(), theta[p].cols(), name)?;
        let mut check = ParamCheck {
            name: name.clone(),
            entries: theta[p].len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..theta[p].len() {
            let orig = theta[p].data()[i];
            let probe = |delta: f64, theta: &mut Vec<DenseMatrix>| -> Result<f64> {
                theta[p].data_mut()[i] = orig + delta;
                let (v, _) = loss(theta)?;
                theta[p].data_mut()[i] = orig;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NumericDomain(format!(
                        "loss not finite when probing {name}[{i}]"
                    )))
                }
            };
            let plus = probe(eps, &mut theta)?;
            let minus = probe(-eps, &mut theta)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let rel = relative_error(a, numeric);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let params = vec![("w".to_string(), DenseMatrix::filled(1, 1, 3.0))];
        let report = finite_diff_check(
            |t| {
                let w = t[0].get(0, 0);
                Ok((w * w, vec![DenseMatrix::filled(1, 1, 2.0 * w)]))
            },
            &params,
            1e-5,
        )
        .unwrap();
        let p = &report.params[0];
        assert!((p.analytic_at_worst - 6.0).abs() < 1e-12);
        assert!((p.numeric_at_worst - 6.0).abs() < 1e-9);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let params = vec![
            ("a".to_string(), DenseMatrix::filled(2, 3, 0.7)),
            ("b".to_string(), DenseMatrix::filled(1, 4, -1.0)),
        ];
        let report = finite_diff_check(
            |t| {
                Ok((
                    4.2,
                    t.iter()
                        .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
                        .collect(),
                ))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.params.iter().all(|p| p.numeric_at_worst == 0.0));
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let params = vec![("w".to_string(), DenseMatrix::filled(1, 2, 1.0))];
        let report = finite_diff_check(
            |t| {
                let s: f64 = t[0].data().iter().map(|v| v * v).sum();
                Ok((s, vec![t[0].clone()]))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite_probes() {
        let params = vec![("w".to_string(), DenseMatrix::filled(1, 1, 0.0))];
        let f = |t: &[DenseMatrix]| Ok((t[0].get(0, 0), vec![DenseMatrix::filled(1, 1, 1.0)]));
        assert!(matches!(
            finite_diff_check(f, &params, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            finite_diff_check(f, &params, 0.1),
            Err(Error::Config(_))
        ));

        let log = |t: &[DenseMatrix]| {
            let w = t[0].get(0, 0);
            Ok((w.ln(), vec![DenseMatrix::filled(1, 1, 1.0 / w)]))
        };
        let params = vec![("weight".to_string(), DenseMatrix::filled(1, 1, 1e-6))];
        match finite_diff_check(log, &params, 1e-5) {
            Err(Error::NumericDomain(msg)) => assert!(msg.contains("weight[0]"), "{msg}"),
            other => panic!("expected numeric-domain error, got {other:?}"),
        }
    }
}
