//! Central-difference gradient verification.

use crate::error::{contract_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with the floor used throughout the test suites.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of a scalar graph against central differences,
/// one coordinate of `x` at a time, and returns the worst relative error.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(contract_err!("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).expect("leaf is tracked");

    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
