//! Central finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Element index where the maximum was observed.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose stencil crossed a branch point of a piecewise op.
    pub skipped: usize,
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x);
    let y = f(&mut g, v)?;
    if g.value(y).len() != 1 {
        return Err(Error::contract(format!("grad_check needs a scalar function, got shape {:?}", g.shape(y))));
    }
    if let Some((op, idx)) = g.first_non_finite() {
        return Err(Error::Numeric { op: op.to_string(), msg: format!("node {idx}") });
    }
    Ok((g.value(y)[0], g.branch_signature()))
}

/// Value of the scalar `f` at `x` and its tape gradient.
pub fn value_and_grad<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(Error::domain("grad_check input contains non-finite values"));
    }
    let mut g = Graph::new();
    let v = g.leaf(&x.clone().with_grad(true));
    let y = f(&mut g, v)?;
    if g.value(y).len() != 1 {
        return Err(Error::contract(format!("grad_check needs a scalar function, got shape {:?}", g.shape(y))));
    }
    if let Some((op, idx)) = g.first_non_finite() {
        return Err(Error::Numeric { op: op.to_string(), msg: format!("node {idx}") });
    }
    let value = g.value(y)[0];
    g.backward(y)?;
    let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((value, grad))
}

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`, over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all).map(|r| r.max_relative_error)
}

/// Same as [`grad_check`] restricted to the listed element indices.
///
/// An element is skipped (and counted in `skipped`) when `x + eps` and
/// `x - eps` take different branches of a leaky ReLU, since the central
/// difference is then not an estimate of the derivative.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(&f, x)?;

    let mut report = GradCheckReport { max_relative_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0, skipped: 0 };
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (up, sig_up) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let (down, sig_down) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if sig_up != sig_down {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if !rel.is_finite() {
            return Err(Error::Numeric { op: "grad_check".into(), msg: format!("element {i}") });
        }
        if rel > report.max_relative_error || report.checked == 0 {
            report = GradCheckReport { max_relative_error: rel, worst_index: i, analytic: a, numeric, checked: report.checked, skipped: report.skipped };
        }
        report.checked += 1;
    }
    Ok(report)
}
