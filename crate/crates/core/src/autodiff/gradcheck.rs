//! Central finite-difference gradient checks.

use super::param::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error used by every gradient check:
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` at `x` against central differences
/// `(f(x + εe) − f(x − εe)) / 2ε`, returning the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(probe.clone());
        let out = f(&mut tape, input)?;
        scalar_of(&tape, out)
    };

    let mut worst = 0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over every value in a parameter store.
///
/// `f` builds the scalar loss from parameters bound on the given tape.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &work)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    work.accumulate(&tape, &grads);
    let analytic = work.flat_grads();

    let base = work.flat_values();
    let mut probe = base.clone();
    let mut worst = 0f64;
    for i in 0..base.len() {
        let mut eval = |value: f64| -> Result<f64> {
            probe[i] = value;
            work.set_flat_values(&probe)?;
            let mut tape = Tape::new();
            let out = f(&mut tape, &work)?;
            scalar_of(&tape, out)
        };
        let plus = eval(base[i] + eps)?;
        let minus = eval(base[i] - eps)?;
        probe[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
