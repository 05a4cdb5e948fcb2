//! Central-difference gradient oracle.
//!
//! Independent of the tape's backward pass: it only re-evaluates the forward
//! closure at perturbed inputs, so it can certify (or refute) any analytic
//! gradient the tape produces.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{NumericError, NumericResult};

/// Compares tape gradients against central differences.
///
/// `f` must build a scalar from the given leaf vars on the provided tape.
/// Returns the max over all input coordinates of
/// |analytic − numeric| / max(1, |numeric|).
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> NumericResult<f64>
where
    F: Fn(&Tape, &[Var]) -> NumericResult<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumericError::Invalid {
            op: "check_gradients",
            msg: format!("eps {} outside [1e-7, 1e-3]", eps),
        });
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(NumericError::Invalid {
            op: "check_gradients",
            msg: format!("objective must be scalar, got shape {:?}", out.shape()),
        });
    }
    tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> NumericResult<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + eps;
            let f_plus = eval(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let f_minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(NumericError::NonFiniteObjective { input: i, coord: c });
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i].data()[c];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
