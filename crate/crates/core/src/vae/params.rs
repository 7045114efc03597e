use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, VaeConfig};

/// Affine layer `y = x W^T + b`; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// `FC -> BN -> ReLU`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub dense: Dense,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub encoder: Vec<HiddenLayer>,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub decoder: Vec<HiddenLayer>,
    pub output: Dense,
}

fn hidden_stack(rng: &mut ChaCha8Rng, input: usize, widths: &[usize]) -> (Vec<HiddenLayer>, usize) {
    let mut fan_in = input;
    let mut layers = Vec::with_capacity(widths.len());
    for &width in widths {
        layers.push(HiddenLayer {
            dense: Dense::init(rng, fan_in, width),
            bn: BatchNorm::new(width),
        });
        fan_in = width;
    }
    (layers, fan_in)
}

/// Uniform fan-in initialization: weights and biases drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, batch-norm scale 1 and shift 0,
/// running mean 0 and running variance 1.
pub fn init_params(config: &VaeConfig, seed: u64) -> Result<VaeParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (encoder, enc_out) = hidden_stack(&mut rng, config.input_dim, &config.encoder_hidden);
    let mu_head = Dense::init(&mut rng, enc_out, config.latent_dim);
    let logvar_head = Dense::init(&mut rng, enc_out, config.latent_dim);
    let (decoder, dec_out) = hidden_stack(&mut rng, config.latent_dim, &config.decoder_hidden);
    let output = Dense::init(&mut rng, dec_out, config.input_dim);
    Ok(VaeParams {
        config: config.clone(),
        encoder,
        mu_head,
        logvar_head,
        decoder,
        output,
    })
}

impl VaeParams {
    /// Trainable tensors in canonical order: per encoder layer `W, b, gamma, beta`,
    /// then the mean head, the log-variance head, the decoder layers and the output layer.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        fn dense<'a>(d: &'a Dense, out: &mut Vec<&'a [f64]>) {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        for layer in &self.encoder {
            dense(&layer.dense, &mut out);
            out.push(layer.bn.gamma.as_slice().expect("standard layout"));
            out.push(layer.bn.beta.as_slice().expect("standard layout"));
        }
        dense(&self.mu_head, &mut out);
        dense(&self.logvar_head, &mut out);
        for layer in &self.decoder {
            dense(&layer.dense, &mut out);
            out.push(layer.bn.gamma.as_slice().expect("standard layout"));
            out.push(layer.bn.beta.as_slice().expect("standard layout"));
        }
        dense(&self.output, &mut out);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn dense<'a>(d: &'a mut Dense, out: &mut Vec<&'a mut [f64]>) {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        for layer in &mut self.encoder {
            dense(&mut layer.dense, &mut out);
            out.push(layer.bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(layer.bn.beta.as_slice_mut().expect("standard layout"));
        }
        dense(&mut self.mu_head, &mut out);
        dense(&mut self.logvar_head, &mut out);
        for layer in &mut self.decoder {
            dense(&mut layer.dense, &mut out);
            out.push(layer.bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(layer.bn.beta.as_slice_mut().expect("standard layout"));
        }
        dense(&mut self.output, &mut out);
        out
    }

    /// Every stored tensor (trainable and running statistics) with a stable name
    /// and shape, in the order checkpoints serialize them.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        type Named<'a> = Vec<(String, Vec<usize>, &'a [f64])>;
        fn dense<'a>(prefix: &str, d: &'a Dense, out: &mut Named<'a>) {
            out.push((
                format!("{prefix}.weight"),
                d.weight.shape().to_vec(),
                d.weight.as_slice().expect("standard layout"),
            ));
            out.push((format!("{prefix}.bias"), vec![d.bias.len()], d.bias.as_slice().expect("standard layout")));
        }
        fn bn<'a>(prefix: &str, b: &'a BatchNorm, out: &mut Named<'a>) {
            for (name, t) in [
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ] {
                out.push((format!("{prefix}.{name}"), vec![t.len()], t.as_slice().expect("standard layout")));
            }
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            dense(&format!("encoder.{i}.dense"), &layer.dense, &mut out);
            bn(&format!("encoder.{i}.bn"), &layer.bn, &mut out);
        }
        dense("mu_head", &self.mu_head, &mut out);
        dense("logvar_head", &self.logvar_head, &mut out);
        for (i, layer) in self.decoder.iter().enumerate() {
            dense(&format!("decoder.{i}.dense"), &layer.dense, &mut out);
            bn(&format!("decoder.{i}.bn"), &layer.bn, &mut out);
        }
        dense("output", &self.output, &mut out);
        out
    }

    /// Mutable view of the same tensors as [`Self::named_tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn dense<'a>(d: &'a mut Dense, out: &mut Vec<&'a mut [f64]>) {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        fn bn<'a>(b: &'a mut BatchNorm, out: &mut Vec<&'a mut [f64]>) {
            out.push(b.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.beta.as_slice_mut().expect("standard layout"));
            out.push(b.running_mean.as_slice_mut().expect("standard layout"));
            out.push(b.running_var.as_slice_mut().expect("standard layout"));
        }
        for layer in &mut self.encoder {
            dense(&mut layer.dense, &mut out);
            bn(&mut layer.bn, &mut out);
        }
        dense(&mut self.mu_head, &mut out);
        dense(&mut self.logvar_head, &mut out);
        for layer in &mut self.decoder {
            dense(&mut layer.dense, &mut out);
            bn(&mut layer.bn, &mut out);
        }
        dense(&mut self.output, &mut out);
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    pub(crate) fn zeros_like(d: &Dense) -> Self {
        Self {
            weight: Array2::zeros(d.weight.raw_dim()),
            bias: Array1::zeros(d.bias.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGrad {
    pub dense: DenseGrad,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Loss gradient with the same layout as the trainable part of [`VaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<HiddenGrad>,
    pub mu_head: DenseGrad,
    pub logvar_head: DenseGrad,
    pub decoder: Vec<HiddenGrad>,
    pub output: DenseGrad,
}

impl Gradients {
    pub fn zeros_like(params: &VaeParams) -> Self {
        let hidden = |layers: &[HiddenLayer]| {
            layers
                .iter()
                .map(|l| HiddenGrad {
                    dense: DenseGrad::zeros_like(&l.dense),
                    gamma: Array1::zeros(l.bn.gamma.len()),
                    beta: Array1::zeros(l.bn.beta.len()),
                })
                .collect()
        };
        Self {
            encoder: hidden(&params.encoder),
            mu_head: DenseGrad::zeros_like(&params.mu_head),
            logvar_head: DenseGrad::zeros_like(&params.logvar_head),
            decoder: hidden(&params.decoder),
            output: DenseGrad::zeros_like(&params.output),
        }
    }

    /// Same order as [`VaeParams::trainable`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        fn dense<'a>(d: &'a DenseGrad, out: &mut Vec<&'a [f64]>) {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        for g in &self.encoder {
            dense(&g.dense, &mut out);
            out.push(g.gamma.as_slice().expect("standard layout"));
            out.push(g.beta.as_slice().expect("standard layout"));
        }
        dense(&self.mu_head, &mut out);
        dense(&self.logvar_head, &mut out);
        for g in &self.decoder {
            dense(&g.dense, &mut out);
            out.push(g.gamma.as_slice().expect("standard layout"));
            out.push(g.beta.as_slice().expect("standard layout"));
        }
        dense(&self.output, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn dense<'a>(d: &'a mut DenseGrad, out: &mut Vec<&'a mut [f64]>) {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        for g in &mut self.encoder {
            dense(&mut g.dense, &mut out);
            out.push(g.gamma.as_slice_mut().expect("standard layout"));
            out.push(g.beta.as_slice_mut().expect("standard layout"));
        }
        dense(&mut self.mu_head, &mut out);
        dense(&mut self.logvar_head, &mut out);
        for g in &mut self.decoder {
            dense(&mut g.dense, &mut out);
            out.push(g.gamma.as_slice_mut().expect("standard layout"));
            out.push(g.beta.as_slice_mut().expect("standard layout"));
        }
        dense(&mut self.output, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_ranges_and_determinism() {
        let cfg = VaeConfig::default();
        let p = init_params(&cfg, 3).unwrap();
        let first = &p.encoder[0].dense;
        assert_eq!(first.weight.shape(), &[256, 512]);
        let bound = 1.0 / 512f64.sqrt();
        assert!((bound - 0.04419).abs() < 1e-5);
        assert!(first.weight.iter().chain(first.bias.iter()).all(|w| w.abs() <= 0.0442));
        assert!(first.weight.iter().any(|w| w.abs() > 0.04));
        for layer in p.encoder.iter().chain(&p.decoder) {
            assert!(layer.bn.gamma.iter().all(|&g| g == 1.0));
            assert!(layer.bn.beta.iter().all(|&b| b == 0.0));
            assert!(layer.bn.running_mean.iter().all(|&m| m == 0.0));
            assert!(layer.bn.running_var.iter().all(|&v| v == 1.0));
        }
        assert_eq!(p.mu_head.weight.shape(), &[18, 64]);
        assert_eq!(p.output.weight.shape(), &[512, 256]);
        assert_eq!(p, init_params(&cfg, 3).unwrap());
        assert_ne!(p, init_params(&cfg, 4).unwrap());
    }

    #[test]
    fn tensor_orders_agree() {
        let cfg = VaeConfig {
            input_dim: 5,
            encoder_hidden: vec![4, 3],
            decoder_hidden: vec![3],
            latent_dim: 2,
            ..VaeConfig::default()
        };
        let mut p = init_params(&cfg, 1).unwrap();
        let g = Gradients::zeros_like(&p);
        let shapes: Vec<usize> = p.trainable().iter().map(|t| t.len()).collect();
        let gshapes: Vec<usize> = g.tensors().iter().map(|t| t.len()).collect();
        assert_eq!(shapes, gshapes);
        assert_eq!(p.trainable_mut().len(), shapes.len());
        // 2 encoder layers * 4 + 2 heads * 2 + 1 decoder layer * 4 + output 2
        assert_eq!(shapes.len(), 18);
        let named = p.named_tensors().len();
        assert_eq!(named, p.tensors_mut().len());
        assert_eq!(named, 18 + 2 * 3);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = VaeConfig::default();
        cfg.latent_dim = 0;
        assert!(init_params(&cfg, 0).is_err());
        let mut cfg = VaeConfig::default();
        cfg.encoder_hidden = vec![8, 0];
        assert!(init_params(&cfg, 0).is_err());
        let mut cfg = VaeConfig::default();
        cfg.bn_momentum = 1.0;
        assert!(init_params(&cfg, 0).is_err());
    }
}
