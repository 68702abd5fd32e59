//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks `f` at a single input `x`.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, tol)
}

/// Checks a scalar function of several tensor inputs against central
/// differences in every input element.
pub fn check_gradients_multi<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v).cloned()).collect::<Result<_>>()?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut fd = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let d = (plus - minus) / (2.0 * h);
            fd.data_mut()[i] = d;
            let e = relative_error(analytic[k].data()[i], d);
            if e > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(e);
                worst = Some((k, i));
            }
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tol,
        passed: max_rel_error <= tol,
    })
}
