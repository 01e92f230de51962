//! Central finite-difference verification of tape adjoints.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Folds several checks into one report carrying the worst error.
    pub fn worst(reports: impl IntoIterator<Item = GradCheckReport>) -> Option<GradCheckReport> {
        reports.into_iter().reduce(|a, b| {
            let pass = a.pass && b.pass;
            let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
            w.pass = pass;
            w
        })
    }
}

fn evaluate<F>(f: &F, point: Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let x = tape.constant(point);
    let y = f(&tape, x)?;
    let v = tape.value(y)?;
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    let mut grads = tape.backward(y)?;
    let analytic = grads
        .take(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let d = (evaluate(&f, plus)? - evaluate(&f, minus)?) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {i}"
            )));
        }
        numeric.push(d);
    }

    let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let (an, nn) = (norm(&analytic), norm(&numeric));
    let rel = norm(&diff) / an.max(nn).max(1e-12);
    Ok(GradCheckReport {
        max_rel_error: rel,
        analytic_norm: an,
        numeric_norm: nn,
        pass: rel < tol,
    })
}
