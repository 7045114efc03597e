use ndarray::{Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::params::{Dense, HiddenLayer, VaeParams};
use super::{Mode, Result, VaeError, LOG_VAR_MAX, LOG_VAR_MIN};

/// Parameters of the diagonal Gaussian posterior `q(z|x)`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
}

/// `z = mu + exp(0.5 * clamp(log_var)) * noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Array2<f64>,
    pub noise: Array2<f64>,
}

/// Intermediate values of one `FC -> BN -> ReLU` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenCache {
    pub input: Array2<f64>,
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    /// Biased batch variance (the one used for normalization).
    pub batch_var: Array1<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    pub mode: Mode,
    pub input: Array2<f64>,
    pub hidden: Vec<HiddenCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCache {
    pub mode: Mode,
    pub input: Array2<f64>,
    pub hidden: Vec<HiddenCache>,
}

impl EncoderCache {
    fn head_input(&self) -> &Array2<f64> {
        self.hidden.last().map_or(&self.input, |h| &h.output)
    }
}

impl DecoderCache {
    pub(crate) fn output_input(&self) -> &Array2<f64> {
        self.hidden.last().map_or(&self.input, |h| &h.output)
    }

    pub(crate) fn encoder_head_input(enc: &EncoderCache) -> &Array2<f64> {
        enc.head_input()
    }
}

/// Everything a train step needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub posterior: PosteriorParams,
    pub sample: LatentSample,
    pub reconstruction: Array2<f64>,
    pub encoder: EncoderCache,
    pub decoder: DecoderCache,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Batch mean of the per-sample objective.
    pub total: f64,
    /// Batch mean of the per-sample squared reconstruction error (summed over inputs).
    pub mse: f64,
    /// Batch mean of the per-sample KL divergence to `N(0, I)` (summed over latents).
    pub kld: f64,
}

fn affine(input: &Array2<f64>, dense: &Dense) -> Array2<f64> {
    input.dot(&dense.weight.t()) + &dense.bias
}

fn check_cols(what: &'static str, x: &Array2<f64>, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(VaeError::Shape {
            what,
            expected,
            got: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(VaeError::NonFinite(what));
    }
    Ok(())
}

fn hidden_forward(layer: &HiddenLayer, input: Array2<f64>, mode: Mode, eps: f64) -> HiddenCache {
    let pre = affine(&input, &layer.dense);
    let (mean, var) = match mode {
        Mode::Train => {
            let rows = pre.nrows() as f64;
            let mean = pre.sum_axis(Axis(0)) / rows;
            let centered = &pre - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
            (mean, var)
        }
        Mode::Eval => (layer.bn.running_mean.clone(), layer.bn.running_var.clone()),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let normalized = (&pre - &mean) * &inv_std;
    let output = (&normalized * &layer.bn.gamma + &layer.bn.beta).mapv(|v| v.max(0.0));
    HiddenCache {
        input,
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        output,
    }
}

fn stack_forward(layers: &[HiddenLayer], input: &Array2<f64>, mode: Mode, eps: f64) -> Vec<HiddenCache> {
    let mut caches: Vec<HiddenCache> = Vec::with_capacity(layers.len());
    for layer in layers {
        let layer_in = caches.last().map_or_else(|| input.clone(), |c| c.output.clone());
        caches.push(hidden_forward(layer, layer_in, mode, eps));
    }
    caches
}

fn check_mode(mode: Mode, rows: usize) -> Result<()> {
    if mode == Mode::Train && rows < 2 {
        return Err(VaeError::BatchTooSmall(rows));
    }
    Ok(())
}

/// Posterior parameters for `x` (`batch x input_dim`).
pub fn encode(params: &VaeParams, x: &Array2<f64>, mode: Mode) -> Result<(PosteriorParams, EncoderCache)> {
    check_cols("encoder input", x, params.config.input_dim)?;
    check_mode(mode, x.nrows())?;
    let hidden = stack_forward(&params.encoder, x, mode, params.config.bn_epsilon);
    let cache = EncoderCache {
        mode,
        input: x.clone(),
        hidden,
    };
    let h = cache.head_input();
    let posterior = PosteriorParams {
        mu: affine(h, &params.mu_head),
        log_var: affine(h, &params.logvar_head),
    };
    Ok((posterior, cache))
}

/// Reconstruction means for latent codes `z` (`batch x latent_dim`).
pub fn decode(params: &VaeParams, z: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, DecoderCache)> {
    check_cols("decoder input", z, params.config.latent_dim)?;
    check_mode(mode, z.nrows())?;
    let hidden = stack_forward(&params.decoder, z, mode, params.config.bn_epsilon);
    let cache = DecoderCache {
        mode,
        input: z.clone(),
        hidden,
    };
    let out = affine(cache.output_input(), &params.output);
    Ok((out, cache))
}

pub(crate) fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

pub fn standard_normal_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn reparameterize_with_noise(posterior: &PosteriorParams, noise: Array2<f64>) -> Result<LatentSample> {
    if noise.dim() != posterior.mu.dim() {
        return Err(VaeError::Shape {
            what: "reparameterization noise",
            expected: posterior.mu.ncols(),
            got: noise.ncols(),
        });
    }
    let mut z = Array2::zeros(noise.raw_dim());
    Zip::from(&mut z)
        .and(&posterior.mu)
        .and(&posterior.log_var)
        .and(&noise)
        .for_each(|z, &m, &lv, &e| *z = m + (0.5 * clamp_log_var(lv)).exp() * e);
    Ok(LatentSample { z, noise })
}

/// Draws `z ~ q(z|x)` with standard normal noise from a generator seeded by `seed`.
pub fn reparameterize(posterior: &PosteriorParams, seed: u64) -> LatentSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = posterior.mu.dim();
    let noise = standard_normal_noise(rows, cols, &mut rng);
    reparameterize_with_noise(posterior, noise).expect("noise shaped like the posterior")
}

/// Train-mode encode, reparameterize with `noise`, train-mode decode.
/// Running statistics are not touched.
pub fn forward_train(params: &VaeParams, x: &Array2<f64>, noise: Array2<f64>) -> Result<ForwardPass> {
    let (posterior, encoder) = encode(params, x, Mode::Train)?;
    let sample = reparameterize_with_noise(&posterior, noise)?;
    let (reconstruction, decoder) = decode(params, &sample.z, Mode::Train)?;
    Ok(ForwardPass {
        posterior,
        sample,
        reconstruction,
        encoder,
        decoder,
    })
}

/// Per-latent KL term `-0.5 (1 + log s^2 - mu^2 - s^2)`, written with `expm1`
/// so that it is never negative in floating point.
#[inline]
pub(crate) fn kl_term(mu: f64, log_var: f64) -> f64 {
    let lv = clamp_log_var(log_var);
    -0.5 * ((lv - lv.exp_m1()) - mu * mu)
}

/// Batch-mean objective: per sample, summed squared error plus `(beta / C)` times the
/// KL divergence of the posterior from the standard normal prior.
pub fn loss(
    x: &Array2<f64>,
    reconstruction: &Array2<f64>,
    posterior: &PosteriorParams,
    beta: f64,
    latent_dim: usize,
) -> LossValue {
    let rows = x.nrows();
    let weight = beta / latent_dim as f64;
    let mut total = 0.0;
    let mut mse = 0.0;
    let mut kld = 0.0;
    for i in 0..rows {
        let sq: f64 = x
            .row(i)
            .iter()
            .zip(reconstruction.row(i))
            .map(|(a, b)| (b - a) * (b - a))
            .sum();
        let kl: f64 = posterior
            .mu
            .row(i)
            .iter()
            .zip(posterior.log_var.row(i))
            .map(|(&m, &lv)| kl_term(m, lv))
            .sum();
        mse += sq;
        kld += kl;
        total += sq + weight * kl;
    }
    let n = rows.max(1) as f64;
    LossValue {
        total: total / n,
        mse: mse / n,
        kld: kld / n,
    }
}

impl VaeParams {
    /// Folds the batch statistics of a train-mode pass into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`, with the unbiased
    /// batch variance.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) -> Result<()> {
        if pass.encoder.mode != Mode::Train || pass.decoder.mode != Mode::Train {
            return Err(VaeError::StaleCache);
        }
        let momentum = self.config.bn_momentum;
        let layers = self.encoder.iter_mut().chain(self.decoder.iter_mut());
        let caches = pass.encoder.hidden.iter().chain(&pass.decoder.hidden);
        for (layer, cache) in layers.zip(caches) {
            let rows = cache.input.nrows() as f64;
            let unbiased = &cache.batch_var * (rows / (rows - 1.0));
            layer.bn.running_mean = &layer.bn.running_mean * (1.0 - momentum) + &cache.batch_mean * momentum;
            layer.bn.running_var = &layer.bn.running_var * (1.0 - momentum) + unbiased * momentum;
        }
        Ok(())
    }

    /// Eval-mode posterior means, the representation used for scoring.
    pub fn encode_mean(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(encode(self, x, Mode::Eval)?.0.mu)
    }
}
