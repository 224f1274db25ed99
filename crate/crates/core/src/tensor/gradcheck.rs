//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Agreement between analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    /// Combines reports over disjoint coordinate sets.
    pub fn merge(&self, other: &GradReport) -> GradReport {
        let checked = self.checked + other.checked;
        let mean = if checked == 0 {
            0.0
        } else {
            (self.mean_rel_error * self.checked as f64 + other.mean_rel_error * other.checked as f64)
                / checked as f64
        };
        let (max_rel_error, worst_index) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index)
        } else {
            (self.max_rel_error, self.worst_index)
        };
        GradReport {
            max_rel_error,
            mean_rel_error: mean,
            worst_index,
            checked,
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every coordinate of `x`. `f` must return a scalar.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_gradients_at(f, x, h, &coords)
}

/// Checks the listed flat coordinates of `x`.
pub fn check_gradients_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf)?;
    let value = out.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "function value".into(),
            index: 0,
        });
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(leaf);

    let eval = |probe: Tensor, index: usize| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let y = f(&tape, v)?.value().item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite {
                what: "function value under perturbation".into(),
                index,
            })
        }
    };

    let mut max_rel = 0.0;
    let mut sum_rel = 0.0;
    let mut worst = None;
    for &i in coords {
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite {
                what: "analytic gradient".into(),
                index: i,
            });
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let rel = relative_error(a, numeric);
        sum_rel += rel;
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some(i);
        }
    }
    Ok(GradReport {
        max_rel_error: max_rel,
        mean_rel_error: if coords.is_empty() {
            0.0
        } else {
            sum_rel / coords.len() as f64
        },
        worst_index: worst,
        checked: coords.len(),
    })
}
