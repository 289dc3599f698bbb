//! Finite-difference gradient checks with the fourth-order central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, which allows steps
//! large enough to keep rounding noise well below the tolerance.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{BoundParams, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    let denom = a.abs().max(b.abs()).max(T::of(RELATIVE_ERROR_FLOOR));
    (a - b).abs() / denom
}

fn check_step<T: Scalar>(h: T) -> Result<()> {
    if !(h > T::zero() && h <= T::of(1e-2)) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside (0, 1e-2]"
        )));
    }
    Ok(())
}

/// Derivative along one direction; `at(s)` evaluates `f` at offset `s`.
fn stencil<T: Scalar>(h: T, mut at: impl FnMut(T) -> Result<T>) -> Result<T> {
    let two = T::of(2.0);
    let eight = T::of(8.0);
    let (p2, p1, m1, m2) = (at(two * h)?, at(h)?, at(-h)?, at(-two * h)?);
    Ok((eight * (p1 - m1) - (p2 - m2)) / (T::of(12.0) * h))
}

fn eval<T: Scalar>(f: &impl Fn(&Tape<T>, Var) -> Result<Var>, x: Tensor<T>) -> Result<T> {
    let tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&tape, v)?;
    let y = tape.item(out);
    if !y.is_finite() {
        return Err(Error::NonFinite("finite-difference evaluation".into()));
    }
    Ok(y)
}

/// Compares the autodiff gradient of `f` at `x` with finite differences
/// along every coordinate and returns the worst relative error.
pub fn finite_difference_check<T: Scalar>(f: impl Fn(&Tape<T>, Var) -> Result<Var>, x: &Tensor<T>, h: T) -> Result<T> {
    check_step(h)?;
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(v);
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let numeric = stencil(h, |s| {
            let mut shifted = x.clone();
            shifted.data_mut()[i] = shifted.data()[i] + s;
            eval(&f, shifted)
        })?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheckReport<T> {
    pub max_relative_error: T,
    pub worst_parameter: String,
    pub coordinates_checked: usize,
    /// Relative error of the directional derivative along a random direction
    /// spanning every parameter.
    pub directional_error: T,
}

/// Finite-difference check of a loss over a whole parameter store.
///
/// Checks up to `per_param` randomly chosen coordinates of every parameter,
/// plus one directional derivative along a random unit direction of equal-
/// magnitude components over all parameters at once.
pub fn check_params<T: Scalar, R: Rng>(
    params: &ParamStore<T>,
    loss: impl Fn(&Tape<T>, &BoundParams) -> Result<Var>,
    h: T,
    per_param: usize,
    rng: &mut R,
) -> Result<ParamCheckReport<T>> {
    check_step(h)?;
    let value = |p: &ParamStore<T>| -> Result<T> {
        let tape = Tape::new();
        let b = p.bind_constant(&tape);
        let out = loss(&tape, &b)?;
        let y = tape.item(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite("finite-difference evaluation".into()))
        }
    };
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = loss(&tape, &bound)?;
    let mut grads = tape.backward(out)?;
    let analytic = params.collect_grads(&mut grads, &bound);
    let grad_of = |name: &str, i: usize| analytic.get(name).map_or(T::zero(), |g| g[i]);

    let mut report = ParamCheckReport {
        max_relative_error: T::zero(),
        worst_parameter: String::new(),
        coordinates_checked: 0,
        directional_error: T::zero(),
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.numel();
        for i in sample(rng, n, per_param.min(n)) {
            let orig = params.get(name)?.data()[i];
            let numeric = stencil(h, |s| {
                probe.get_mut(name)?.data_mut()[i] = orig + s;
                value(&probe)
            })?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let err = relative_error(grad_of(name, i), numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = format!("{name}[{i}]");
            }
            report.coordinates_checked += 1;
        }
    }

    let total: usize = names.iter().map(|n| params.get(n).map_or(0, |t| t.numel())).sum();
    let unit = T::one() / T::of(total as f64).sqrt();
    let mut directions = Vec::with_capacity(names.len());
    let mut directional = T::zero();
    for name in &names {
        let n = params.get(name)?.numel();
        let signs: Vec<T> = (0..n).map(|_| if rng.gen::<bool>() { unit } else { -unit }).collect();
        for (i, &s) in signs.iter().enumerate() {
            directional = directional + s * grad_of(name, i);
        }
        directions.push(signs);
    }
    let numeric = stencil(h, |step| {
        let mut shifted = params.clone();
        for (name, signs) in names.iter().zip(&directions) {
            for (x, &s) in shifted.get_mut(name)?.data_mut().iter_mut().zip(signs) {
                *x = *x + step * s;
            }
        }
        value(&shifted)
    })?;
    report.directional_error = relative_error(directional, numeric);
    Ok(report)
}
