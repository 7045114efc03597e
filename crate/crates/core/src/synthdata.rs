//! Synthetic datasets with known generative factors.
//!
//! Maps come from a fixed analytic generator. Each factor owns a Gaussian blob at a
//! seeded location, and the factor's value rotates that blob's channel profile
//! along a quarter circle spanned by two seeded directions. A smooth seeded
//! background sits underneath and a ReLU keeps the result non-negative, like real
//! post-activation feature maps.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{DfmDataset, FactorTable, StoreError};
use crate::metrics::{MetricError, RepresentationSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid factor spec: {0}")]
    InvalidSpec(String),
    #[error("factor grid of {size} rows exceeds the cap of {cap}")]
    GridTooLarge { size: u128, cap: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Largest factor grid [`gen_factor_grid`] will build by default.
pub const DEFAULT_GRID_CAP: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub cardinalities: Vec<u32>,
    pub map_channels: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub noise_dims: usize,
    pub grid_cap: usize,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            cardinalities: vec![6, 6, 4],
            map_channels: 64,
            map_h: 7,
            map_w: 7,
            noise_dims: 2,
            grid_cap: DEFAULT_GRID_CAP,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(SynthError::InvalidSpec("at least one factor is required".into()));
        }
        if let Some(c) = self.cardinalities.iter().find(|&&c| c < 2) {
            return Err(SynthError::InvalidSpec(format!("cardinalities must be at least 2, got {c}")));
        }
        if self.map_channels == 0 || self.map_h == 0 || self.map_w == 0 {
            return Err(SynthError::InvalidSpec("map dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> u128 {
        self.cardinalities.iter().map(|&c| u128::from(c)).product()
    }
}

/// Every factor combination in lexicographic order, last factor fastest.
pub fn gen_factor_grid(spec: &FactorSpec) -> Result<FactorTable> {
    spec.validate()?;
    let size = spec.grid_size();
    if size > spec.grid_cap as u128 {
        return Err(SynthError::GridTooLarge { size, cap: spec.grid_cap });
    }
    let f = spec.cardinalities.len();
    let mut values = Vec::with_capacity(size as usize * f);
    let mut row = vec![0u32; f];
    for _ in 0..size {
        values.extend_from_slice(&row);
        for k in (0..f).rev() {
            row[k] += 1;
            if row[k] < spec.cardinalities[k] {
                break;
            }
            row[k] = 0;
        }
    }
    Ok(FactorTable::new(spec.cardinalities.clone(), values)?)
}

/// Uniform draw in `[0, 1)` built from raw generator output, so the stream of
/// values depends only on the ChaCha keystream.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Seeded constants shared by every map of one generator instance.
struct Bases {
    parts: Vec<Part>,
    bg_freq: Vec<(f64, f64, f64)>,
}

/// One blob per factor: a fixed location and a channel profile the factor rotates.
struct Part {
    cx: f64,
    cy: f64,
    profile: Vec<f64>,
    cos_basis: Vec<f64>,
    sin_basis: Vec<f64>,
}

impl Bases {
    fn new(spec: &FactorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.map_channels;
        let span = |extent: usize| (extent as f64 - 1.0).max(0.0);
        let parts = spec
            .cardinalities
            .iter()
            .map(|_| {
                let cx = span(spec.map_w) * (0.15 + 0.7 * unit(&mut rng));
                let cy = span(spec.map_h) * (0.15 + 0.7 * unit(&mut rng));
                let profile = (0..c).map(|_| 0.1 + 0.2 * unit(&mut rng)).collect();
                let cos_basis = (0..c).map(|_| gaussian(&mut rng)).collect();
                let sin_basis = (0..c).map(|_| gaussian(&mut rng)).collect();
                Part {
                    cx,
                    cy,
                    profile,
                    cos_basis,
                    sin_basis,
                }
            })
            .collect();
        let bg_freq = (0..c)
            .map(|_| (PI * unit(&mut rng), PI * unit(&mut rng), 2.0 * PI * unit(&mut rng)))
            .collect();
        Self { parts, bg_freq }
    }

    fn map(&self, spec: &FactorSpec, factors: &[u32], out: &mut [f32]) {
        let (c, h, w) = (spec.map_channels, spec.map_h, spec.map_w);
        let amps: Vec<Vec<f64>> = self
            .parts
            .iter()
            .enumerate()
            .map(|(k, part)| {
                let theta = 0.5 * PI * f64::from(factors[k]) / f64::from(spec.cardinalities[k] - 1);
                (0..c)
                    .map(|ch| part.profile[ch] + theta.cos() * part.cos_basis[ch] + theta.sin() * part.sin_basis[ch])
                    .collect()
            })
            .collect();
        for ch in 0..c {
            let (fx, fy, phase) = self.bg_freq[ch];
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.1 * (fx * x as f64 + fy * y as f64 + phase).cos();
                    for (part, amp) in self.parts.iter().zip(&amps) {
                        let (dx, dy) = (x as f64 - part.cx, y as f64 - part.cy);
                        v += amp[ch] * (-(dx * dx + dy * dy) / 2.0).exp();
                    }
                    out[(ch * h + y) * w + x] = v.max(0.0) as f32;
                }
            }
        }
    }
}

/// One `c x h x w` map per factor row, labelled with those factors. Deterministic in
/// `(factors, spec, seed)`.
pub fn gen_feature_maps(factors: &FactorTable, spec: &FactorSpec, seed: u64) -> Result<DfmDataset> {
    spec.validate()?;
    if factors.cardinalities() != spec.cardinalities.as_slice() {
        return Err(SynthError::InvalidSpec(format!(
            "factor table cardinalities {:?} differ from spec {:?}",
            factors.cardinalities(),
            spec.cardinalities
        )));
    }
    let bases = Bases::new(spec, seed);
    let len = spec.map_channels * spec.map_h * spec.map_w;
    let n = factors.num_rows();
    let mut data = vec![0f32; n * len];
    for (i, chunk) in data.chunks_mut(len.max(1)).enumerate().take(n) {
        bases.map(spec, factors.row(i), chunk);
    }
    Ok(DfmDataset::new(
        n,
        spec.map_channels,
        spec.map_h,
        spec.map_w,
        data,
        Some(factors.clone()),
    )?)
}

/// Oracle code: latent `k` is factor `k` as a real number, followed by
/// `noise_dims` i.i.d. standard normal columns.
pub fn gen_identity_codes(factors: &FactorTable, noise_dims: usize, seed: u64) -> Result<RepresentationSet> {
    let n = factors.num_rows();
    let f = factors.num_factors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Array2::zeros((n, f + noise_dims));
    for i in 0..n {
        for (k, &v) in factors.row(i).iter().enumerate() {
            z[[i, k]] = f64::from(v);
        }
        for j in 0..noise_dims {
            z[[i, f + j]] = gaussian(&mut rng);
        }
    }
    Ok(RepresentationSet::new(z, factors.clone())?)
}

/// `n` factor rows drawn uniformly and independently per factor.
pub fn sample_factors(cardinalities: &[u32], n: usize, seed: u64) -> Result<FactorTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * cardinalities.len());
    for _ in 0..n {
        for &c in cardinalities {
            values.push((unit(&mut rng) * f64::from(c)) as u32);
        }
    }
    Ok(FactorTable::new(cardinalities.to_vec(), values)?)
}
