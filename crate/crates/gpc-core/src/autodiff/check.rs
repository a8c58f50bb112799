//! Central-difference verification of reverse-mode gradients.
//!
//! The expression under test is supplied as a builder closure so it can be
//! re-evaluated at perturbed inputs: one call per coordinate and direction.

use crate::error::{GpcError, Result};

use super::tape::Tape;
use super::tensor::{Shape, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Default relative-error tolerance.
pub const FD_TOL: f64 = 1e-6;

/// One coordinate whose autodiff and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct FdFailure {
    /// Index of the leaf in the slice passed to [`finite_diff_check`].
    pub leaf: usize,
    /// Flat coordinate within that leaf.
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of checking every coordinate of every leaf.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checks: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare the reverse-mode gradient of `build` against central differences
/// at every coordinate of every leaf.
///
/// `build` receives a fresh tape and the leaf tensors already registered on
/// it, and must return the scalar root. Relative error uses the denominator
/// `max(|autodiff|, |numeric|, 1)` so coordinates near zero are judged on
/// absolute error.
pub fn finite_diff_check<F>(build: F, leaves: &[Tensor], tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let taped: Vec<Tensor> = values.iter().map(|v| tape.leaf(v.detached())).collect();
        let root = build(&mut tape, &taped)?;
        if root.shape() != Shape::Scalar {
            return Err(GpcError::NonScalarRoot(format!(
                "checked expression has shape {}",
                root.shape()
            )));
        }
        Ok((tape, taped, root))
    };

    let (tape, taped, root) = eval(leaves)?;
    let grads = tape.backward(&root)?;
    let analytic: Vec<Tensor> = taped.iter().map(|t| grads.wrt_or_zero(t)).collect();

    let mut report = FdReport::default();
    let mut work: Vec<Tensor> = leaves.iter().map(Tensor::detached).collect();

    for li in 0..leaves.len() {
        for ci in 0..leaves[li].shape().len() {
            let orig = work[li].data()[ci];

            work[li].data_mut()[ci] = orig + FD_STEP;
            let plus = eval(&work)?.2.scalar_value();
            work[li].data_mut()[ci] = orig - FD_STEP;
            let minus = eval(&work)?.2.scalar_value();
            work[li].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let ad = analytic[li].data()[ci];
            let rel = (ad - numeric).abs() / ad.abs().max(numeric.abs()).max(1.0);

            report.checks += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > tol {
                report.failures.push(FdFailure {
                    leaf: li,
                    index: ci,
                    autodiff: ad,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }

    Ok(report)
}
