//! Central finite-difference gradient checking.
//!
//! The checker only ever runs the forward pass when building the numerical
//! estimate, so it stays independent of the backward rules it verifies.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over all input entries of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    pub entries: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences with step `eps`, for every entry of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel_err: f64 = 0.0;
    let mut entries = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[which].len());
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[which].data()[j];
            work[which].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[which].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            max_rel_err = max_rel_err.max(relative_error(a, numeric));
            entries += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, entries })
}
