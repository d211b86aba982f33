//! Finite-difference verification of tape gradients.

use crate::array::Array;
use crate::error::{GradError, Result};
use crate::tape::{Tape, Var};

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn gradcheck<F>(f: F, point: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(GradError::InvalidArgument(format!(
            "perturbation must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    let eval = |x: &Array| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let y = f(&mut tape, v)?;
        tape.value(y).item()
    };

    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(GradError::NotScalar {
            op: "gradcheck",
            shape: tape.value(y).shape().to_vec(),
        });
    }
    let analytic = tape.backward_scalar(y)?.get(x);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
