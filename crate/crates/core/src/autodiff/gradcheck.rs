//! Central finite-difference checks against the tape's analytic gradients.
//! Runs in `f64`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest of `|analytic - fd| / max(1, |analytic|)` over the coordinates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Check `f` at `x` over every coordinate of `x`.
///
/// `f` receives a fresh tape and a leaf holding the (possibly perturbed)
/// input and must return a scalar node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape());
    let analytic = grads.get(leaf).unwrap_or(&zero);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param(probe);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).item().ok_or_else(|| Error::invalid("checked function is not scalar"))?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let x = Tensor::from_f64([4], &[-1.5, -0.3, 0.4, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.leaky_relu(x, 0.01)?;
                t.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::from_f64([1], &[1.0]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
