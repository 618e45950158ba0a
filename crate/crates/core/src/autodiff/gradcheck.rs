//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::Rng;

use super::params::{HasParams, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Up to `count` distinct flat indices below `numel`.
pub fn sample_coords<R: Rng + ?Sized>(numel: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut picked = index::sample(rng, numel, count.min(numel)).into_vec();
    picked.sort_unstable();
    picked
}

fn scalar_of<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("function must return a scalar, got {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0].f64())
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences over `coords` (all coordinates when empty).
pub fn finite_diff_check<T, F>(x: &Tensor<T>, step: f64, coords: &[usize], f: F) -> Result<f64>
where
    T: Scalar,
    F: for<'a> Fn(&mut Tape<'a, T>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let store = ParamStore::<T>::new();
    let analytic = {
        let mut tape = Tape::new(&store);
        let xv = tape.leaf(x.clone(), true);
        let out = f(&mut tape, xv)?;
        scalar_of(&tape, out)?;
        let grads = tape.backward(out)?;
        grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros_like(x))
    };
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..x.numel()).collect();
        &all
    } else {
        coords
    };
    let eval_at = |i: usize, v: T| -> Result<f64> {
        let mut shifted = x.clone();
        shifted.data_mut()[i] = v;
        let mut tape = Tape::new(&store);
        let xv = tape.leaf(shifted, false);
        let out = f(&mut tape, xv)?;
        scalar_of(&tape, out)
    };
    let mut worst = 0f64;
    for &i in coords {
        let x0 = x.data()[i];
        let h = T::of(step * x0.f64().abs().max(1.0));
        let (xp, xm) = (x0 + h, x0 - h);
        let numeric = (eval_at(i, xp)? - eval_at(i, xm)?) / (xp - xm).f64();
        worst = worst.max(relative_error(analytic.data()[i].f64(), numeric));
    }
    Ok(worst)
}

/// Same check against stored parameters of `model`, perturbed in place.
pub fn param_diff_check<T, M, F>(
    model: &mut M,
    coords: &[(ParamId, usize)],
    step: f64,
    f: F,
) -> Result<f64>
where
    T: Scalar,
    M: HasParams<T>,
    F: for<'a> Fn(&'a M, &mut Tape<'a, T>) -> Result<Var>,
{
    let errs = param_diff_errors(model, coords, step, f)?;
    Ok(errs.iter().map(|e| e.error).fold(0.0, f64::max))
}

/// Outcome of one finite-difference coordinate.
#[derive(Clone, Copy, Debug)]
pub struct CoordCheck {
    pub error: f64,
    /// The stencil `x ± h` switched at least one ReLU or max-pool choice, so
    /// the loss is not differentiable across it and `error` is meaningless.
    pub crosses_kink: bool,
}

/// Per-coordinate relative errors of parameter gradients, flagging stencils
/// that straddle a kink of a piecewise-linear op.
pub fn param_diff_errors<T, M, F>(
    model: &mut M,
    coords: &[(ParamId, usize)],
    step: f64,
    f: F,
) -> Result<Vec<CoordCheck>>
where
    T: Scalar,
    M: HasParams<T>,
    F: for<'a> Fn(&'a M, &mut Tape<'a, T>) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (analytic, pattern): (Vec<f64>, u64) = {
        let mut tape = Tape::new(model.params());
        let out = f(model, &mut tape)?;
        scalar_of(&tape, out)?;
        let pattern = tape.activation_pattern();
        let grads = tape.backward(out)?;
        let a = coords
            .iter()
            .map(|&(id, i)| grads.param(id).map_or(0.0, |g| g.data()[i].f64()))
            .collect();
        (a, pattern)
    };
    let mut out = Vec::with_capacity(coords.len());
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let x0 = model.params().value(id).data()[i];
        let h = T::of(step * x0.f64().abs().max(1.0));
        let (xp, xm) = (x0 + h, x0 - h);
        let mut eval_at = |v: T| -> Result<(f64, u64)> {
            model.params_mut().get_mut(id).value.data_mut()[i] = v;
            let mut tape = Tape::new(model.params());
            let out = f(model, &mut tape)?;
            Ok((scalar_of(&tape, out)?, tape.activation_pattern()))
        };
        let (fp, pp) = eval_at(xp)?;
        let (fm, pm) = eval_at(xm)?;
        model.params_mut().get_mut(id).value.data_mut()[i] = x0;
        let numeric = (fp - fm) / (xp - xm).f64();
        out.push(CoordCheck {
            error: relative_error(a, numeric),
            crosses_kink: pp != pattern || pm != pattern,
        });
    }
    Ok(out)
}
