//! Central finite-difference oracle for checking tape gradients.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the backward rules it is checking.

use super::{DenseArray, Tape, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)` for one gradient entry.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest relative error between reverse-mode gradients of the scalar
/// function `f` and central finite differences with step [`FD_STEP`], taken
/// over every entry of every input.
pub fn max_relative_error<F>(inputs: &[DenseArray], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<DenseArray> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |args: &[DenseArray]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = args.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut worst = 0.0f64;
    let mut args = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..args[i].len() {
            let orig = args[i].data()[j];
            args[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&args)?;
            args[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&args)?;
            args[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference for input {i} entry {j}"
                )));
            }
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}
