//! Central finite-difference check of tape gradients.

use alloc::format;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_err: f64,
    /// Coordinate at which the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the reverse-mode gradient of the scalar `f` at `point` with
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh graph and the parameter node holding the (possibly
/// perturbed) point, and must return a one-element node.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.param(x)?;
        let out = f(&mut g, p)?;
        g.item(out)
    };

    let mut g = Graph::new();
    let p = g.param(point.clone())?;
    let out = f(&mut g, p)?;
    let analytic = g.backward(out)?.wrt(p);

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite gradient at coordinate {i}"
            )));
        }
        let denom = f64::max(f64::max(a.abs(), numeric.abs()), 1e-12);
        let rel = (a - numeric).abs() / denom;
        if rel > worst.max_rel_err {
            worst = GradCheck {
                max_rel_err: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}
