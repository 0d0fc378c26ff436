//! Finite-difference gradient checking.
//!
//! The numerical side is central differences, `(f(x+h) - f(x-h)) / 2h`,
//! evaluated coordinate by coordinate. It is deliberately independent of the
//! tape: callers hand over a closure that rebuilds the forward pass from
//! plain tensors, so a bug in the tape's backward cannot hide in the oracle.

use crate::error::Result;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error floor: coordinates where both gradients are below this are
/// compared against it instead of their own magnitude.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` with respect to every coordinate of
/// `inputs[target]`.
pub fn numerical_gradient(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    target: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let n = work[target].numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[target].data()[i];
        work[target].data_mut()[i] = orig + h;
        let up = f(&work)?;
        work[target].data_mut()[i] = orig - h;
        let down = f(&work)?;
        work[target].data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)` per coordinate; returns the worst one and
/// its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = 0.0;
    let mut at = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > worst {
            worst = err;
            at = i;
        }
    }
    (worst, at)
}

/// Build a scalar loss from leaf inputs on a fresh tape, then verify the
/// tape's gradients for every input against central differences.
///
/// Returns `Err(String)` describing the first offending input/coordinate.
pub fn check_tape_gradients(
    build: &dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    floor: f64,
) -> std::result::Result<(), String> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()
        .map_err(|e| e.to_string())?;
    let loss = build(&mut tape, &ids).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    let mut eval = |ts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<VarId> = ts.iter().map(|x| t.leaf(x.clone())).collect::<Result<_>>()?;
        let l = build(&mut t, &ids)?;
        Ok(t.value(l).data()[0])
    };

    for (idx, _) in inputs.iter().enumerate() {
        let numeric = numerical_gradient(&mut eval, inputs, idx, h).map_err(|e| e.to_string())?;
        let analytic = grads.get(ids[idx]);
        let (err, at) = max_relative_error(analytic, &numeric, floor);
        if err > tol {
            return Err(format!(
                "input {idx} coordinate {at}: analytic {} vs numeric {} (rel err {err:.3e} > {tol:.1e})",
                analytic[at], numeric[at]
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_gradient_of_quadratic() {
        // f(x) = sum(x^2): df/dx = 2x.
        let mut f = |ts: &[Tensor]| -> Result<f64> {
            Ok(ts[0].data().iter().map(|v| v * v).sum())
        };
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = numerical_gradient(&mut f, &[x], 0, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&[1.0, -2.0, 0.5]) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_pairs() {
        let (err, _) = max_relative_error(&[1e-12], &[2e-12], 1e-6);
        assert!(err < 1e-5);
    }
}
