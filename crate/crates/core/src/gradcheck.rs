//! Central finite-difference gradient checking.

use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `|g_analytic - g_fd| / max(1, |g_fd|)` over all coordinates.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let d = analytic.zip_map(numeric, |a, n| (a - n).abs() / n.abs().max(1.0))?;
    Ok(d.data().iter().cloned().fold(0.0, f64::max))
}

/// Central-difference gradient of a scalar function.
pub fn numerical_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Same as [`numerical_gradient`] but only at the listed coordinates.
pub fn numerical_gradient_at(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` records a computation on a fresh tape given the input variable and
/// must return a scalar variable. Returns the maximum relative error as
/// defined by [`max_relative_error`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(invalid(format!(
            "function output must be scalar, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let analytic = tape.backward(out)?.get_or_zeros(&tape, v);
    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone());
        let out = f(&mut t, v)?;
        t.value(out).item()
    };
    let numeric = numerical_gradient(eval, x, h)?;
    max_relative_error(&analytic, &numeric)
}
