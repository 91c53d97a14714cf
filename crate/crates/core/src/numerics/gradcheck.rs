//! Central finite-difference gradient checking.

use super::{NumericsError, Tape, Tensor, Var};

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// fourth-order central differences with step `eps`, returning the largest
/// per-coordinate relative error.
///
/// `f` receives a fresh tape and the input variable and must return a
/// single-element output.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let eval = |point: &Tensor| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let v = tape.param(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { value });
        }
        Ok(value)
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(NumericsError::NonFinite { value });
    }
    tape.backward(out);
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64, NumericsError> {
            probe.data_mut()[i] = orig + offset;
            eval(&probe)
        };
        let (up2, up, down, down2) = (at(2.0 * eps)?, at(eps)?, at(-eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = orig;
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
        worst = worst.max(relative_error(numeric, analytic[i]));
    }
    Ok(worst)
}
