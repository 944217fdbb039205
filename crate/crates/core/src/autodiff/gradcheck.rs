//! Central-difference gradient checking.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new().with_trap(false);
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Compare the tape gradient of the scalar function `f` at `x` against
/// central differences of every input coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new().with_trap(false);
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        checked: x.len(),
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let r = grad_check(
            |tape, _x| Ok(tape.constant(Tensor::scalar(4.2))),
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_vec(vec![0.5, 1.5]);
        let r = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
