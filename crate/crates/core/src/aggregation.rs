//! Feature map aggregation: RMAC, global pooling and the PCA-whitened RMAC variant.
//!
//! Every method turns a `c x h x w` map into one unit-norm `c`-vector. Accumulation
//! happens in `f64`; datasets are written back as `f32`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{DfmDataset, StoreError};

/// Eigenvalues below this are treated as zero variance and dropped.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("kernel {kernel} does not fit a {h}x{w} map")]
    KernelTooLarge { kernel: usize, h: usize, w: usize },
    #[error("kernel and stride must be >= 1 (got kernel {kernel}, stride {stride})")]
    BadRegion { kernel: usize, stride: usize },
    #[error("window at ({row}, {col}) of size {kernel} leaves the {h}x{w} map")]
    OutOfBounds {
        row: usize,
        col: usize,
        kernel: usize,
        h: usize,
        w: usize,
    },
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("every region of the map is zero")]
    AllZeroMap,
    #[error("empty feature map")]
    EmptyMap,
    #[error("whitening needs more samples than dimensions ({samples} <= {dim})")]
    TooFewSamples { samples: usize, dim: usize },
    #[error("all {dropped} whitening components fall below the eigenvalue floor")]
    DegenerateWhitening { dropped: usize },
    #[error("whitening expects {expected}-dim vectors, got {got}")]
    WhiteningDim { expected: usize, got: usize },
    #[error("rmac-whitened needs a fitted whitening transform")]
    MissingWhitening,
    #[error("dataset is already aggregated (h = w = 1)")]
    NotAMapDataset,
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<AggregationError>,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// Borrowed `c x h x w` tensor in channel-major order.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'a> {
    data: &'a [f32],
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl<'a> FeatureMap<'a> {
    pub fn new(data: &'a [f32], c: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), c * h * w, "feature map buffer does not match c*h*w");
        Self { data, c, h, w }
    }

    #[inline]
    pub fn at(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.h + row) * self.w + col]
    }

    fn channel(&self, ch: usize) -> &'a [f32] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }
}

/// Square max-pooling window size and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub kernel: usize,
    pub stride: usize,
}

impl Region {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }
}

pub fn default_regions() -> Vec<Region> {
    vec![
        Region::new(1, 1),
        Region::new(3, 2),
        Region::new(5, 2),
        Region::new(7, 1),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmacConfig {
    pub regions: Vec<Region>,
    pub whitening: Option<WhiteningTransform>,
}

impl Default for RmacConfig {
    fn default() -> Self {
        Self {
            regions: default_regions(),
            whitening: None,
        }
    }
}

impl RmacConfig {
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        for r in &self.regions {
            if r.kernel == 0 || r.stride == 0 {
                return Err(AggregationError::BadRegion {
                    kernel: r.kernel,
                    stride: r.stride,
                });
            }
            if r.kernel > h || r.kernel > w {
                return Err(AggregationError::KernelTooLarge { kernel: r.kernel, h, w });
            }
        }
        Ok(())
    }

    /// Total number of windows the configuration pools on an `h x w` map.
    pub fn region_count(&self, h: usize, w: usize) -> Result<usize> {
        self.regions
            .iter()
            .map(|r| region_grid(h, w, r.kernel, r.stride).map(|g| g.len()))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMethod {
    Rmac,
    #[serde(alias = "rmac_whitened")]
    RmacWhitened,
    Avg,
    Max,
}

impl std::str::FromStr for AggregationMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rmac" => Ok(Self::Rmac),
            "rmac-whitened" | "rmac_whitened" => Ok(Self::RmacWhitened),
            "avg" => Ok(Self::Avg),
            "max" => Ok(Self::Max),
            other => Err(format!(
                "unknown aggregation method {other:?} (expected rmac, rmac-whitened, avg, max)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Origins `(row, col)` of every valid (unpadded) window, row-major.
pub fn region_grid(h: usize, w: usize, kernel: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if kernel == 0 || stride == 0 {
        return Err(AggregationError::BadRegion { kernel, stride });
    }
    if kernel > h || kernel > w {
        return Err(AggregationError::KernelTooLarge { kernel, h, w });
    }
    let rows = (h - kernel) / stride + 1;
    let cols = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((r * stride, c * stride));
        }
    }
    Ok(out)
}

/// Channel-wise maximum over the `kernel x kernel` window at `origin`.
pub fn max_pool_region(map: &FeatureMap<'_>, origin: (usize, usize), kernel: usize) -> Result<Vec<f64>> {
    let (row, col) = origin;
    if kernel == 0 || row + kernel > map.h || col + kernel > map.w {
        return Err(AggregationError::OutOfBounds {
            row,
            col,
            kernel,
            h: map.h,
            w: map.w,
        });
    }
    let mut out = Vec::with_capacity(map.c);
    for ch in 0..map.c {
        let plane = map.channel(ch);
        let mut best = f32::NEG_INFINITY;
        for r in row..row + kernel {
            for &v in &plane[r * map.w + col..r * map.w + col + kernel] {
                best = best.max(v);
            }
        }
        out.push(best as f64);
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(AggregationError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalized per-region vectors; zero regions are skipped.
pub fn normalized_region_vectors(map: &FeatureMap<'_>, regions: &[Region]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for region in regions {
        for origin in region_grid(map.h, map.w, region.kernel, region.stride)? {
            let pooled = max_pool_region(map, origin, region.kernel)?;
            match l2_normalize(&pooled) {
                Ok(v) => out.push(v),
                Err(AggregationError::ZeroNorm) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub fn rmac(map: &FeatureMap<'_>, config: &RmacConfig) -> Result<Vec<f64>> {
    config.validate_for(map.h, map.w)?;
    let regions = normalized_region_vectors(map, &config.regions)?;
    if regions.is_empty() {
        return Err(AggregationError::AllZeroMap);
    }
    let dim = match &config.whitening {
        Some(t) => t.output_dim(),
        None => map.c,
    };
    let mut sum = vec![0.0f64; dim];
    for v in regions {
        let v = match &config.whitening {
            Some(t) => match l2_normalize(&t.apply(&v)?) {
                Ok(v) => v,
                Err(AggregationError::ZeroNorm) => continue,
                Err(e) => return Err(e),
            },
            None => v,
        };
        for (acc, x) in sum.iter_mut().zip(&v) {
            *acc += x;
        }
    }
    l2_normalize(&sum).map_err(|_| AggregationError::AllZeroMap)
}

pub fn global_pool(map: &FeatureMap<'_>, mode: PoolMode) -> Result<Vec<f64>> {
    if map.c == 0 || map.h == 0 || map.w == 0 {
        return Err(AggregationError::EmptyMap);
    }
    let area = (map.h * map.w) as f64;
    let pooled: Vec<f64> = (0..map.c)
        .map(|ch| {
            let plane = map.channel(ch);
            match mode {
                PoolMode::Avg => plane.iter().map(|&v| v as f64).sum::<f64>() / area,
                PoolMode::Max => plane.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64,
            }
        })
        .collect();
    l2_normalize(&pooled)
}

/// PCA whitening `x -> P (x - mean)`, with the rows of `P` being eigenvectors
/// scaled by `1/sqrt(eigenvalue)`, in decreasing eigenvalue order.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// `output_dim x input_dim`, row-major.
    pub projection: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub dropped: usize,
}

impl WhiteningTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.input_dim();
        &self.projection[k * d..(k + 1) * d]
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(AggregationError::WhiteningDim {
                expected: self.input_dim(),
                got: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.output_dim())
            .map(|k| self.row(k).iter().zip(&centered).map(|(p, x)| p * x).sum())
            .collect())
    }
}

pub fn fit_whitening(sample: &[Vec<f64>]) -> Result<WhiteningTransform> {
    let dim = sample.first().map_or(0, Vec::len);
    if sample.len() <= dim || dim == 0 {
        return Err(AggregationError::TooFewSamples {
            samples: sample.len(),
            dim,
        });
    }
    if let Some(bad) = sample.iter().find(|v| v.len() != dim) {
        return Err(AggregationError::WhiteningDim {
            expected: dim,
            got: bad.len(),
        });
    }
    let n = sample.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in sample {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for v in sample {
        for (c, (x, m)) in centered.iter_mut().zip(v.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let c = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] >= EIGENVALUE_FLOOR)
        .collect();
    let dropped = dim - kept.len();
    if kept.is_empty() {
        return Err(AggregationError::DegenerateWhitening { dropped });
    }
    let mut projection = Vec::with_capacity(kept.len() * dim);
    let mut eigenvalues = Vec::with_capacity(kept.len());
    for &k in &kept {
        let lambda = eig.eigenvalues[k];
        let scale = 1.0 / lambda.sqrt();
        projection.extend(eig.eigenvectors.column(k).iter().map(|e| e * scale));
        eigenvalues.push(lambda);
    }
    Ok(WhiteningTransform {
        mean,
        projection,
        eigenvalues,
        dropped,
    })
}

/// Fits whitening on a seeded subsample of `sample_size` normalized region vectors
/// pooled from every map in `maps`.
pub fn fit_whitening_on_maps(
    maps: &DfmDataset,
    regions: &[Region],
    sample_size: usize,
    seed: u64,
) -> Result<WhiteningTransform> {
    let mut pool = Vec::new();
    for record in maps.records() {
        let map = FeatureMap::new(record, maps.c, maps.h, maps.w);
        pool.extend(normalized_region_vectors(&map, regions)?);
    }
    if pool.len() > sample_size {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, pool.len(), sample_size).into_vec();
        picked.sort_unstable();
        pool = picked.into_iter().map(|i| std::mem::take(&mut pool[i])).collect();
    }
    fit_whitening(&pool)
}

/// Aggregates a single record according to `method`.
pub fn aggregate_map(map: &FeatureMap<'_>, method: AggregationMethod, config: &RmacConfig) -> Result<Vec<f64>> {
    match method {
        AggregationMethod::Rmac => rmac(
            map,
            &RmacConfig {
                regions: config.regions.clone(),
                whitening: None,
            },
        ),
        AggregationMethod::RmacWhitened => {
            if config.whitening.is_none() {
                return Err(AggregationError::MissingWhitening);
            }
            rmac(map, config)
        }
        AggregationMethod::Avg => global_pool(map, PoolMode::Avg),
        AggregationMethod::Max => global_pool(map, PoolMode::Max),
    }
}

/// Aggregates every map of `maps` into a vector dataset (`h = w = 1`).
/// Records are processed in parallel; each is independent, so the output does not
/// depend on scheduling.
pub fn aggregate_dataset(maps: &DfmDataset, method: AggregationMethod, config: &RmacConfig) -> Result<DfmDataset> {
    if maps.h == 1 && maps.w == 1 {
        return Err(AggregationError::NotAMapDataset);
    }
    if method == AggregationMethod::RmacWhitened && config.whitening.is_none() {
        return Err(AggregationError::MissingWhitening);
    }
    let len = maps.record_len();
    let rows: Vec<Vec<f32>> = (0..maps.n)
        .into_par_iter()
        .map(|i| {
            let map = FeatureMap::new(&maps.data[i * len..(i + 1) * len], maps.c, maps.h, maps.w);
            aggregate_map(&map, method, config)
                .map(|v| v.into_iter().map(|x| x as f32).collect())
                .map_err(|e| AggregationError::Record {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let c = rows.first().map_or_else(
        || match (&config.whitening, method) {
            (Some(t), AggregationMethod::RmacWhitened) => t.output_dim(),
            _ => maps.c,
        },
        Vec::len,
    );
    let data = rows.into_iter().flatten().collect();
    Ok(DfmDataset::vectors(maps.n, c, data, maps.factors.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f32> {
        // post-ReLU-like: roughly a third of entries exactly zero
        (0..c * h * w)
            .map(|_| rng.random_range(-1.0f32..2.0).max(0.0))
            .collect()
    }

    /// Every window position tested independently of `region_grid`.
    fn brute_windows(h: usize, w: usize, k: usize, s: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut r = 0;
        while r + k <= h {
            let mut c = 0;
            while c + k <= w {
                out.push((r, c));
                c += s;
            }
            r += s;
        }
        out
    }

    #[test]
    fn grid_counts() {
        assert_eq!(region_grid(7, 7, 3, 2).unwrap().len(), 9);
        assert_eq!(region_grid(7, 7, 7, 1).unwrap(), vec![(0, 0)]);
        assert_eq!(region_grid(7, 7, 1, 1).unwrap().len(), 49);
        assert_eq!(region_grid(7, 7, 5, 2).unwrap().len(), 4);
        assert_eq!(RmacConfig::default().region_count(7, 7).unwrap(), 63);
        for (h, w, k, s) in [(7, 7, 3, 2), (9, 5, 2, 3), (6, 6, 6, 4), (10, 4, 1, 3)] {
            assert_eq!(region_grid(h, w, k, s).unwrap(), brute_windows(h, w, k, s));
        }
        assert!(matches!(
            region_grid(7, 7, 8, 1),
            Err(AggregationError::KernelTooLarge { .. })
        ));
        assert!(matches!(region_grid(7, 7, 3, 0), Err(AggregationError::BadRegion { .. })));
    }

    #[test]
    fn max_pool_basics() {
        let data = [1.0, 3.0, 2.0, 0.0];
        let map = FeatureMap::new(&data, 1, 2, 2);
        assert_eq!(max_pool_region(&map, (0, 0), 2).unwrap(), vec![3.0]);
        assert_eq!(max_pool_region(&map, (1, 0), 1).unwrap(), vec![2.0]);
        assert!(matches!(
            max_pool_region(&map, (1, 1), 2),
            Err(AggregationError::OutOfBounds { .. })
        ));
        let constant = vec![2.5f32; 3 * 4 * 4];
        let map = FeatureMap::new(&constant, 3, 4, 4);
        assert_eq!(max_pool_region(&map, (1, 2), 2).unwrap(), vec![2.5; 3]);
    }

    #[test]
    fn max_pool_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_map(&mut rng, 512, 7, 7);
        let map = FeatureMap::new(&data, 512, 7, 7);
        for region in default_regions() {
            for (r0, c0) in brute_windows(7, 7, region.kernel, region.stride) {
                let got = max_pool_region(&map, (r0, c0), region.kernel).unwrap();
                for ch in 0..512 {
                    let mut best = f32::MIN;
                    for r in r0..r0 + region.kernel {
                        for c in c0..c0 + region.kernel {
                            if data[ch * 49 + r * 7 + c] > best {
                                best = data[ch * 49 + r * 7 + c];
                            }
                        }
                    }
                    assert_eq!(got[ch], best as f64);
                }
            }
        }
    }

    #[test]
    fn normalize() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let unit = [0.6, 0.8];
        assert_eq!(l2_normalize(&unit).unwrap(), unit.to_vec());
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(AggregationError::ZeroNorm)));
    }

    #[test]
    fn constant_map_gives_normalized_channel_vector() {
        let channel = [1.0f32, 2.0, 2.0];
        let data: Vec<f32> = channel.iter().flat_map(|&v| std::iter::repeat_n(v, 49)).collect();
        let map = FeatureMap::new(&data, 3, 7, 7);
        let expected = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let out = rmac(&map, &RmacConfig::default()).unwrap();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let pooled = global_pool(&map, mode).unwrap();
            for (a, b) in pooled.iter().zip(&out) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn global_pool_values() {
        let data = [1.0, 3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 4.0];
        let map = FeatureMap::new(&data, 2, 2, 2);
        // avg pre-norm [1.5, 1.0]; max pre-norm [3, 4]
        let avg = global_pool(&map, PoolMode::Avg).unwrap();
        let n = (1.5f64 * 1.5 + 1.0).sqrt();
        assert!((avg[0] - 1.5 / n).abs() < 1e-15 && (avg[1] - 1.0 / n).abs() < 1e-15);
        assert_eq!(global_pool(&map, PoolMode::Max).unwrap(), vec![0.6, 0.8]);
        let zeros = [0.0f32; 8];
        assert!(global_pool(&FeatureMap::new(&zeros, 2, 2, 2), PoolMode::Avg).is_err());
    }

    #[test]
    fn zero_regions_are_skipped() {
        // only the bottom-right pixel is active
        let mut data = vec![0.0f32; 2 * 49];
        data[48] = 1.0;
        data[49 + 48] = 1.0;
        let map = FeatureMap::new(&data, 2, 7, 7);
        let out = rmac(&map, &RmacConfig::default()).unwrap();
        let s = 0.5f64.sqrt();
        assert!((out[0] - s).abs() < 1e-15 && (out[1] - s).abs() < 1e-15);

        let zeros = vec![0.0f32; 2 * 49];
        assert!(matches!(
            rmac(&FeatureMap::new(&zeros, 2, 7, 7), &RmacConfig::default()),
            Err(AggregationError::AllZeroMap)
        ));
        let small = vec![1.0f32; 2 * 9];
        assert!(matches!(
            rmac(&FeatureMap::new(&small, 2, 3, 3), &RmacConfig::default()),
            Err(AggregationError::KernelTooLarge { .. })
        ));
    }

    fn covariance(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scales = [0.5, 2.0, 3.0, 0.1, 1.0, 7.0];
        let offsets = [1.0, -2.0, 0.0, 5.0, 0.3, -1.0];
        let sample: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                (0..6)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        offsets[j] + scales[j] * z
                    })
                    .collect()
            })
            .collect();
        let t = fit_whitening(&sample).unwrap();
        assert_eq!(t.output_dim(), 6);
        assert_eq!(t.dropped, 0);
        for a in 0..6 {
            for b in (a + 1)..6 {
                let dot: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-8, "rows {a},{b}: {dot}");
            }
        }
        let white: Vec<Vec<f64>> = sample.iter().map(|v| t.apply(v).unwrap()).collect();
        let (mean, cov) = covariance(&white);
        for i in 0..6 {
            assert!(mean[i].abs() < 1e-8);
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i][j] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn whitening_white_data_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..4).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect())
            .collect();
        // make the sample exactly white first
        let pre = fit_whitening(&raw).unwrap();
        let white: Vec<Vec<f64>> = raw.iter().map(|v| pre.apply(v).unwrap()).collect();
        let t = fit_whitening(&white).unwrap();
        for k in 0..4 {
            assert!((t.eigenvalues[k] - 1.0).abs() < 1e-9);
            for l in 0..4 {
                let dot: f64 = t.row(k).iter().zip(t.row(l)).map(|(x, y)| x * y).sum();
                let target = if k == l { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn whitening_degenerate_inputs() {
        let constant = vec![vec![1.0, 2.0, 3.0]; 10];
        assert!(matches!(
            fit_whitening(&constant),
            Err(AggregationError::DegenerateWhitening { dropped: 3 })
        ));
        assert!(matches!(
            fit_whitening(&[vec![1.0, 2.0], vec![3.0, 1.0]]),
            Err(AggregationError::TooFewSamples { .. })
        ));
        // rank 1 sample in 3 dims: two components dropped
        let line: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let t = fit_whitening(&line).unwrap();
        assert_eq!((t.output_dim(), t.dropped), (1, 2));
    }

    #[test]
    fn whitened_rmac_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 8;
        let data: Vec<f32> = (0..20).flat_map(|_| random_map(&mut rng, c, 7, 7)).collect();
        let maps = DfmDataset::new(20, c, 7, 7, data, None).unwrap();
        let t = fit_whitening_on_maps(&maps, &default_regions(), 500, 1).unwrap();
        assert_eq!(t.input_dim(), c);
        let cfg = RmacConfig {
            regions: default_regions(),
            whitening: Some(t),
        };
        let out = aggregate_dataset(&maps, AggregationMethod::RmacWhitened, &cfg).unwrap();
        for row in out.records() {
            let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            aggregate_dataset(&maps, AggregationMethod::RmacWhitened, &RmacConfig::default()),
            Err(AggregationError::MissingWhitening)
        ));
    }

    #[test]
    fn dataset_aggregation_matches_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 16;
        let n = 10;
        let data: Vec<f32> = (0..n).flat_map(|_| random_map(&mut rng, c, 7, 7)).collect();
        let factors = crate::feature_store::FactorTable::new(vec![10], (0..n as u32).collect()).unwrap();
        let maps = DfmDataset::new(n, c, 7, 7, data, Some(factors.clone())).unwrap();
        let cfg = RmacConfig::default();
        for method in [AggregationMethod::Rmac, AggregationMethod::Avg, AggregationMethod::Max] {
            let out = aggregate_dataset(&maps, method, &cfg).unwrap();
            assert_eq!((out.n, out.c, out.h, out.w), (n, c, 1, 1));
            assert_eq!(out.factors.as_ref(), Some(&factors));
            for i in 0..n {
                let single = aggregate_map(&FeatureMap::new(maps.record(i), c, 7, 7), method, &cfg).unwrap();
                let single: Vec<u32> = single.iter().map(|&x| (x as f32).to_bits()).collect();
                let batch: Vec<u32> = out.record(i).iter().map(|x| x.to_bits()).collect();
                assert_eq!(single, batch);
            }
        }
    }

    #[test]
    fn aggregation_reports_offending_record() {
        let mut data = vec![1.0f32; 3 * 2 * 49];
        data[2 * 49..].fill(0.0);
        let maps = DfmDataset::new(3, 2, 7, 7, data, None).unwrap();
        match aggregate_dataset(&maps, AggregationMethod::Rmac, &RmacConfig::default()) {
            Err(AggregationError::Record { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let vecs = DfmDataset::vectors(1, 2, vec![1.0, 0.0], None).unwrap();
        assert!(matches!(
            aggregate_dataset(&vecs, AggregationMethod::Rmac, &RmacConfig::default()),
            Err(AggregationError::NotAMapDataset)
        ));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("rmac-whitened".parse(), Ok(AggregationMethod::RmacWhitened));
        assert_eq!("rmac_whitened".parse(), Ok(AggregationMethod::RmacWhitened));
        assert!("sum".parse::<AggregationMethod>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn rmac_invariants(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 12;
            let data = random_map(&mut rng, c, 7, 7);
            let cfg = RmacConfig::default();
            let base = rmac(&FeatureMap::new(&data, c, 7, 7), &cfg).unwrap();
            prop_assert!((l2_norm(&base) - 1.0).abs() < 1e-9);

            // f32 scaling rounds each entry; the relative perturbation is ~6e-8
            let scaled: Vec<f32> = data.iter().map(|x| x * scale).collect();
            let out = rmac(&FeatureMap::new(&scaled, c, 7, 7), &cfg).unwrap();
            for (a, b) in base.iter().zip(&out) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            // scaling by a power of two is exact in f32
            let exact: Vec<f32> = data.iter().map(|x| x * 8.0).collect();
            let out = rmac(&FeatureMap::new(&exact, c, 7, 7), &cfg).unwrap();
            for (a, b) in base.iter().zip(&out) {
                prop_assert!((a - b).abs() < 1e-10);
            }

            let mut perm: Vec<usize> = (0..c).collect();
            for i in (1..c).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f32> = perm.iter().flat_map(|&p| data[p * 49..(p + 1) * 49].to_vec()).collect();
            let out = rmac(&FeatureMap::new(&permuted, c, 7, 7), &cfg).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((out[i] - base[p]).abs() < 1e-12);
            }
        }
    }
}
