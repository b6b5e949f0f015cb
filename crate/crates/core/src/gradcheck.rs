//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: Scalar = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Scalar>,
    pub numeric: Vec<Scalar>,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_rel_error: Scalar,
    /// Element where `max_rel_error` occurred.
    pub worst_index: usize,
    pub tolerance: Scalar,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn relative_error(a: Scalar, n: Scalar) -> Scalar {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of `f` at `x` with `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
///
/// `f` builds a scalar on the supplied tape from the leaf it is given, and
/// must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, h: Scalar, tol: Scalar) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let eval = |point: Tensor| -> Result<Scalar> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point, false);
        let out = f(&mut tape, leaf)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "grad_check needs a scalar function, got shape {:?}",
                value.shape()
            )));
        }
        value.item()
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 1.9, 0.01]).unwrap();
        let report = grad_check(
            |t, v| {
                let s = t.square(v)?;
                t.sum(s)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-3, 1e-4).unwrap();
        assert!(report.analytic.iter().all(|&g| g == 0.0));
        assert!(report.numeric.iter().all(|&g| g == 0.0));
        assert!(report.passed());
    }

    #[test]
    fn non_scalar_function_is_an_error() {
        let x = Tensor::ones(&[2]);
        assert!(grad_check(|t, v| t.square(v), &x, 1e-3, 1e-4).is_err());
    }
}
