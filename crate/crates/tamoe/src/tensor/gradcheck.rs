//! Central-difference gradient checking for any scalar-valued tensor function.

use super::{backward, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// For every coordinate of every input, perturbs by `±eps`, evaluates `f`
/// twice, and reports the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// Gradient-tracked inputs are perturbed in place (and restored), so `f`
/// may ignore its argument and evaluate a captured structure that shares
/// these tensors — this is how whole models are checked. Untracked inputs
/// are replaced by tracked copies, which `f` receives as its argument.
///
/// Inputs with no gradient path through `f` are treated as having an
/// all-zero analytic gradient, which must then agree with the numeric one.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    debug_assert!((1e-7..=1e-3).contains(&eps), "eps {eps} outside [1e-7, 1e-3]");

    let work: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            if t.requires_grad() {
                t.clone()
            } else {
                t.detach().requires_grad_(true)
            }
        })
        .collect();
    for t in &work {
        t.zero_grad();
    }

    let loss = f(&work)?;
    if !loss.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = work
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (ti, t) in work.iter().enumerate() {
        for ci in 0..t.numel() {
            let orig = t.data()[ci];
            t.update_data(|d| d[ci] = orig + eps);
            let up = f(&work)?.item();
            t.update_data(|d| d[ci] = orig - eps);
            let down = f(&work)?.item();
            t.update_data(|d| d[ci] = orig);
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[ti][ci] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
