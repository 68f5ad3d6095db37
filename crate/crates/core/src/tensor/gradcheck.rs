//! Central finite-difference gradient checking in 64-bit arithmetic.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` perturbation flipped a non-smooth branch.
    pub skipped: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst
    /// coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Check the gradient of a scalar function of one tensor.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Check the gradient of a scalar function with respect to every
/// coordinate of every input tensor.
pub fn finite_diff_check_many(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, u64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new().with_branch_tracking();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Shape(format!(
                "gradient check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let value = tape.value(out).data()[0];
        let mut g = Vec::new();
        if grads {
            tape.backward(out)?;
            g = vars
                .iter()
                .zip(xs)
                .map(|(&v, x)| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(x.shape()))
                })
                .collect();
        }
        Ok((value, tape.branch_signature(), g))
    };

    let (_, base_sig, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..work[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let (plus, sig_plus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig - eps;
            let (minus, sig_minus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, i, grad.data()[i], numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
