//! Central finite-difference gradient checking.
//!
//! The checked computation is a closure that receives a fresh [`Tape`] and
//! the probe point registered as a parameter, and returns a scalar node.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-12;

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.parameter(point.clone())?;
    let y = f(&mut tape, x)?;
    let v = tape.value(y).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Value and tape gradient of `f` at `point`.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.parameter(point.clone())?;
    let y = f(&mut tape, x)?;
    let value = tape.value(y).item()?;
    let mut grads = tape.backward(y)?;
    let g = grads.take(x).unwrap_or_else(|| Tensor::zeros(point.shape()));
    Ok((value, g))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for the listed coordinates.
pub fn numeric_gradient<F>(f: &F, point: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= point.len() {
            return Err(TensorError::dim("grad_check", format!("coordinate {i} out of {}", point.len())));
        }
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = x0 - h;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = x0;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Max relative error between tape and finite-difference gradients over every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// As [`grad_check`], restricted to a subset of coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, g) = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, h, coords)?;
    let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
    Ok(max_relative_error(&analytic, &numeric))
}
