//! Central finite differences of the batch loss, used as an independent check on
//! [`super::backward`].

use ndarray::Array2;

use super::forward::{forward_train, loss};
use super::params::{Gradients, VaeParams};
use super::{Result, VaeError};

/// Denominator floor for [`max_relative_error`]. Gradients that are exactly zero
/// (biases feeding batch norm) come back from finite differences as roundoff of
/// order `eps * |L| / step ~ 1e-10`; below this floor entries are compared on an
/// absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Central-difference estimate `(L(p + h) - L(p - h)) / 2h` of the train-mode loss
/// gradient for every trainable scalar. The same `noise` is reused for all
/// evaluations.
pub fn finite_diff_grad(
    params: &VaeParams,
    x: &Array2<f64>,
    noise: &Array2<f64>,
    beta: f64,
    step: f64,
) -> Result<Gradients> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(VaeError::BadStep(step));
    }
    let latent_dim = params.config.latent_dim;
    let eval = |p: &VaeParams| -> Result<f64> {
        let pass = forward_train(p, x, noise.clone())?;
        Ok(loss(x, &pass.reconstruction, &pass.posterior, beta, latent_dim).total)
    };
    eval(params)?;

    let mut grads = Gradients::zeros_like(params);
    let mut work = params.clone();
    let shapes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
    let mut out = grads.tensors_mut();
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let original = work.trainable()[t][i];
            work.trainable_mut()[t][i] = original + step;
            let plus = eval(&work)?;
            work.trainable_mut()[t][i] = original - step;
            let minus = eval(&work)?;
            work.trainable_mut()[t][i] = original;
            out[t][i] = (plus - minus) / (2.0 * step);
        }
    }
    drop(out);
    Ok(grads)
}

/// `max |a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)` over all entries.
pub fn max_relative_error(a: &Gradients, b: &Gradients) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(ta, tb)| ta.iter().zip(tb.iter()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
