use ndarray::{Array2, Axis, Zip};

use super::forward::{clamp_log_var, DecoderCache, ForwardPass, HiddenCache};
use super::params::{Dense, DenseGrad, Gradients, HiddenGrad, HiddenLayer, VaeParams};
use super::{Mode, Result, VaeError, LOG_VAR_MAX, LOG_VAR_MIN};

/// Returns the gradient w.r.t. the layer input and fills `grad`.
fn dense_backward(dense: &Dense, input: &Array2<f64>, d_out: &Array2<f64>, grad: &mut DenseGrad) -> Array2<f64> {
    grad.weight = d_out.t().dot(input);
    grad.bias = d_out.sum_axis(Axis(0));
    d_out.dot(&dense.weight)
}

/// Backward through ReLU, train-mode batch norm and the affine map.
fn hidden_backward(layer: &HiddenLayer, cache: &HiddenCache, d_out: &Array2<f64>, grad: &mut HiddenGrad) -> Array2<f64> {
    let rows = d_out.nrows() as f64;
    let mut dy = d_out.clone();
    Zip::from(&mut dy).and(&cache.output).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    grad.gamma = (&dy * &cache.normalized).sum_axis(Axis(0));
    grad.beta = dy.sum_axis(Axis(0));

    let d_norm = &dy * &layer.bn.gamma;
    let sum_d = d_norm.sum_axis(Axis(0));
    let sum_d_xhat = (&d_norm * &cache.normalized).sum_axis(Axis(0));
    let d_pre = (&d_norm * rows - &sum_d - &cache.normalized * &sum_d_xhat) * &(&cache.inv_std / rows);
    dense_backward(&layer.dense, &cache.input, &d_pre, &mut grad.dense)
}

fn stack_backward(
    layers: &[HiddenLayer],
    caches: &[HiddenCache],
    mut d_out: Array2<f64>,
    grads: &mut [HiddenGrad],
) -> Array2<f64> {
    for ((layer, cache), grad) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d_out = hidden_backward(layer, cache, &d_out, grad);
    }
    d_out
}

/// Exact gradient of the batch-mean loss (see [`super::loss`]) with respect to every
/// trainable parameter, through the reparameterized sample and train-mode batch norm.
///
/// `pass` must come from [`super::forward_train`] on the same `params` and `x`.
pub fn backward(params: &VaeParams, pass: &ForwardPass, x: &Array2<f64>, beta: f64) -> Result<Gradients> {
    if pass.encoder.mode != Mode::Train || pass.decoder.mode != Mode::Train {
        return Err(VaeError::StaleCache);
    }
    if pass.encoder.input != *x {
        return Err(VaeError::CacheMismatch("encoder input differs from x"));
    }
    if pass.decoder.input != pass.sample.z {
        return Err(VaeError::CacheMismatch("decoder input differs from the latent sample"));
    }
    if pass.encoder.hidden.len() != params.encoder.len() || pass.decoder.hidden.len() != params.decoder.len() {
        return Err(VaeError::CacheMismatch("layer count"));
    }
    Ok(backward_to_target(params, pass, x, beta))
}

/// Backward pass with the reconstruction target given separately from the encoder
/// input; in the model both are `x`.
pub(crate) fn backward_to_target(params: &VaeParams, pass: &ForwardPass, x: &Array2<f64>, beta: f64) -> Gradients {
    let rows = x.nrows() as f64;
    let kl_weight = beta / params.config.latent_dim as f64;
    let mut grads = Gradients::zeros_like(params);

    let d_recon = (&pass.reconstruction - x) * (2.0 / rows);
    let d_dec_hidden = dense_backward(
        &params.output,
        pass.decoder.output_input(),
        &d_recon,
        &mut grads.output,
    );
    let d_z = stack_backward(&params.decoder, &pass.decoder.hidden, d_dec_hidden, &mut grads.decoder);

    let post = &pass.posterior;
    let mut d_mu = Array2::zeros(post.mu.raw_dim());
    Zip::from(&mut d_mu)
        .and(&d_z)
        .and(&post.mu)
        .for_each(|d, &dz, &m| *d = dz + kl_weight * m / rows);
    let mut d_log_var = Array2::zeros(post.log_var.raw_dim());
    Zip::from(&mut d_log_var)
        .and(&d_z)
        .and(&post.log_var)
        .and(&pass.sample.noise)
        .for_each(|d, &dz, &lv, &e| {
            *d = if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv) {
                let lv = clamp_log_var(lv);
                dz * e * 0.5 * (0.5 * lv).exp() - 0.5 * kl_weight * (1.0 - lv.exp()) / rows
            } else {
                0.0
            };
        });

    let head_input = DecoderCache::encoder_head_input(&pass.encoder);
    let d_head = dense_backward(&params.mu_head, head_input, &d_mu, &mut grads.mu_head)
        + dense_backward(&params.logvar_head, head_input, &d_log_var, &mut grads.logvar_head);
    stack_backward(&params.encoder, &pass.encoder.hidden, d_head, &mut grads.encoder);
    grads
}
