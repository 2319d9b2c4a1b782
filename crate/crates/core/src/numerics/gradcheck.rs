//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Below this magnitude both derivatives are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` attaining the maximum.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `f` at `x` against central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), h, tol)
}

/// Checks the gradient of a scalar function of several tensors with respect
/// to each of them.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        bail!(Config, "finite-difference step must be positive, got {}", h);
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            bail!(Usage, "gradient check needs a scalar function, got shape {:?}", v.shape());
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        bail!(Usage, "gradient check needs a scalar function, got shape {:?}", tape.shape(out));
    }
    let grads = tape.backward(out)?;

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = (0, 0);
    let mut coordinates = 0;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec());
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            perturbed[which].data_mut()[i] = orig + h;
            let plus = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig - h;
            let minus = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (which, i);
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        tol,
        passed: max_rel_error < tol,
    })
}
