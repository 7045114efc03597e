//! Disentanglement scores over `(latent, factor)` pairs: FactorVAE, MIG, SAP, DCI
//! and IRS.
//!
//! Every score lies in `[0, 1]`. [`evaluate`] puts the rows into a canonical order
//! first, so results do not depend on sample order.

use std::cmp::Ordering;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{DfmDataset, FactorTable};
use crate::training::dataset_matrix;
use crate::vae::{VaeError, VaeParams};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite latent at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dataset has no factor labels")]
    MissingFactors,
    #[error("factor {0} takes a single value in the sample")]
    DegenerateFactor(usize),
    #[error("{metric} needs at least {need} rows, got {got}")]
    TooFewSamples { metric: &'static str, need: usize, got: usize },
    #[error("invalid metric config: {0}")]
    BadConfig(String),
    #[error("empty input")]
    Empty,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Latent codes paired with ground-truth factors, row for row.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    latents: Array2<f64>,
    factors: FactorTable,
}

impl RepresentationSet {
    pub fn new(latents: Array2<f64>, factors: FactorTable) -> Result<Self> {
        if latents.nrows() != factors.num_rows() {
            return Err(MetricError::Shape(format!(
                "{} latent rows vs {} factor rows",
                latents.nrows(),
                factors.num_rows()
            )));
        }
        if latents.nrows() == 0 || latents.ncols() == 0 {
            return Err(MetricError::Empty);
        }
        if let Some(((row, col), _)) = latents.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(MetricError::NonFinite { row, col });
        }
        Ok(Self { latents, factors })
    }

    pub fn latents(&self) -> &Array2<f64> {
        &self.latents
    }

    pub fn factors(&self) -> &FactorTable {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.latents.ncols()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.num_factors()
    }

    /// Rows reordered (or repeated) by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            latents: self.latents.select(Axis(0), indices),
            factors: self.factors.select(indices),
        }
    }

    /// The same rows in an order that depends only on their contents: by factor
    /// row, then by the sorted latent values, then by the latent row itself.
    pub fn canonicalized(&self) -> Self {
        let sorted: Vec<Vec<f64>> = self
            .latents
            .rows()
            .into_iter()
            .map(|r| {
                let mut v = r.to_vec();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        let lex = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| {
            self.factors
                .row(i)
                .cmp(self.factors.row(j))
                .then_with(|| lex(&sorted[i], &sorted[j]))
                .then_with(|| {
                    lex(
                        self.latents.row(i).as_slice().expect("standard layout"),
                        self.latents.row(j).as_slice().expect("standard layout"),
                    )
                })
        });
        self.select(&order)
    }
}

/// Eval-mode posterior means of every record in `dataset`, paired with its factors.
pub fn represent(params: &VaeParams, dataset: &DfmDataset) -> Result<RepresentationSet> {
    let factors = dataset.factors.clone().ok_or(MetricError::MissingFactors)?;
    if dataset.record_len() != params.config.input_dim {
        return Err(MetricError::Shape(format!(
            "records have {} values, model expects {}",
            dataset.record_len(),
            params.config.input_dim
        )));
    }
    let latents = params.encode_mean(&dataset_matrix(dataset))?;
    RepresentationSet::new(latents, factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    FactorVae,
    Mig,
    Sap,
    Dci,
    Irs,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::FactorVae, Metric::Mig, Metric::Sap, Metric::Dci, Metric::Irs];

    pub fn name(self) -> &'static str {
        match self {
            Metric::FactorVae => "factorvae",
            Metric::Mig => "mig",
            Metric::Sap => "sap",
            Metric::Dci => "dci",
            Metric::Irs => "irs",
        }
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| MetricError::UnknownMetric(s.to_string()))
    }
}

/// Parses a comma separated metric list such as `"mig,sap"`.
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(MetricError::BadConfig("empty metric list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub mig_bins: usize,
    pub factorvae_train_votes: usize,
    pub factorvae_eval_votes: usize,
    pub factorvae_probe_size: usize,
    pub dci_train_fraction: f64,
    pub dci_l1: f64,
    pub dci_iterations: usize,
    pub irs_zero_guard: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mig_bins: 20,
            factorvae_train_votes: 800,
            factorvae_eval_votes: 200,
            factorvae_probe_size: 64,
            dci_train_fraction: 0.8,
            dci_l1: 0.01,
            dci_iterations: 500,
            irs_zero_guard: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MetricError::BadConfig(m));
        if self.mig_bins < 2 {
            return bad(format!("mig_bins must be at least 2, got {}", self.mig_bins));
        }
        if self.factorvae_train_votes + self.factorvae_eval_votes < 100 || self.factorvae_eval_votes == 0 {
            return bad("factorvae needs at least 100 votes and a non-empty eval set".into());
        }
        if self.factorvae_probe_size < 2 {
            return bad("factorvae_probe_size must be at least 2".into());
        }
        if !(self.dci_train_fraction > 0.0 && self.dci_train_fraction < 1.0) {
            return bad(format!("dci_train_fraction must lie in (0, 1), got {}", self.dci_train_fraction));
        }
        if !(self.dci_l1.is_finite() && self.dci_l1 >= 0.0) {
            return bad(format!("dci_l1 must be non-negative, got {}", self.dci_l1));
        }
        if self.dci_iterations == 0 {
            return bad("dci_iterations must be positive".into());
        }
        Ok(())
    }
}

/// Scores of one evaluation. Metrics that were not requested stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub factorvae: Option<f64>,
    pub mig: Option<f64>,
    pub sap: Option<f64>,
    pub dci_disentanglement: Option<f64>,
    pub dci_completeness: Option<f64>,
    pub dci_informativeness: Option<f64>,
    pub irs: Option<f64>,
    /// Latents left out of the FactorVAE vote for having zero spread.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factorvae_excluded_latents: Vec<usize>,
}

/// Runs the requested metrics on the canonically ordered rows of `rep`.
pub fn evaluate(rep: &RepresentationSet, metrics: &[Metric], config: &MetricConfig, seed: u64) -> Result<MetricReport> {
    config.validate()?;
    let rep = rep.canonicalized();
    let mut report = MetricReport::default();
    for &m in metrics {
        match m {
            Metric::FactorVae => {
                let fv = factorvae_score(&rep, config, seed)?;
                report.factorvae = Some(fv.score);
                report.factorvae_excluded_latents = fv.excluded_latents;
            }
            Metric::Mig => report.mig = Some(mig(&rep, config.mig_bins)?),
            Metric::Sap => report.sap = Some(sap(&rep)?),
            Metric::Dci => {
                let d = dci(&rep, config, seed)?;
                report.dci_disentanglement = Some(d.disentanglement);
                report.dci_completeness = Some(d.completeness);
                report.dci_informativeness = Some(d.informativeness);
            }
            Metric::Irs => report.irs = Some(irs(&rep, config.irs_zero_guard)?),
        }
    }
    Ok(report)
}

/// Equal-frequency codes for every latent column.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    /// `n x C` codes; column `j` uses labels `0..bins_used[j]`.
    pub codes: Array2<u32>,
    pub bins_used: Vec<usize>,
}

/// Quantile binning per column: a value whose first occurrence in sorted order has
/// rank `r` goes to bin `floor(r * bins / n)`, so equal values share a bin. Bins
/// left empty by ties are dropped and the rest relabelled consecutively.
pub fn discretize(latents: &Array2<f64>, bins: usize) -> Result<Discretized> {
    if bins < 2 {
        return Err(MetricError::BadConfig(format!("bins must be at least 2, got {bins}")));
    }
    let n = latents.nrows();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let cols: Vec<(Vec<u32>, usize)> = (0..latents.ncols())
        .into_par_iter()
        .map(|j| discretize_column(latents.column(j), bins))
        .collect();
    let mut codes = Array2::zeros((n, latents.ncols()));
    let mut bins_used = Vec::with_capacity(cols.len());
    for (j, (c, used)) in cols.into_iter().enumerate() {
        codes.column_mut(j).assign(&Array1::from(c));
        bins_used.push(used);
    }
    Ok(Discretized { codes, bins_used })
}

fn discretize_column(col: ArrayView1<f64>, bins: usize) -> (Vec<u32>, usize) {
    let n = col.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut raw = vec![0usize; n];
    let mut first = 0;
    for r in 0..n {
        if r > 0 && col[order[r]] != col[order[r - 1]] {
            first = r;
        }
        raw[order[r]] = first * bins / n;
    }
    let mut label = vec![u32::MAX; bins];
    let mut used = 0u32;
    for &i in &order {
        if label[raw[i]] == u32::MAX {
            label[raw[i]] = used;
            used += 1;
        }
    }
    (raw.into_iter().map(|b| label[b]).collect(), used as usize)
}

fn counts(labels: &[u32]) -> Vec<usize> {
    let k = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut c = vec![0usize; k];
    for &l in labels {
        c[l as usize] += 1;
    }
    c
}

fn entropy_of_counts(counts: impl IntoIterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in entropy of a label sequence, in nats.
pub fn entropy(labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(entropy_of_counts(counts(labels), labels.len()))
}

/// Plug-in mutual information in nats, computed as `H(a) - H(a | b)`.
pub fn mutual_info(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |&m| m as usize + 1);
    let kb = b.iter().max().map_or(0, |&m| m as usize + 1);
    let mut joint = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[y as usize * ka + x as usize] += 1;
    }
    let h_a = entropy_of_counts(counts(a), n);
    let mut h_a_given_b = 0.0;
    for row in joint.chunks(ka) {
        let nb: usize = row.iter().sum();
        if nb > 0 {
            h_a_given_b += nb as f64 / n as f64 * entropy_of_counts(row.iter().copied(), nb);
        }
    }
    // roundoff can leave a tiny negative when a and b are independent
    Ok((h_a - h_a_given_b).max(0.0))
}

fn check_factors_vary(rep: &RepresentationSet) -> Result<Vec<Vec<u32>>> {
    (0..rep.num_factors())
        .map(|k| {
            let col = rep.factors().column(k);
            if col.iter().all(|&v| v == col[0]) {
                Err(MetricError::DegenerateFactor(k))
            } else {
                Ok(col)
            }
        })
        .collect()
}

/// Mutual information gap: per factor, the gap between the two latents that carry
/// the most information about it, relative to the factor entropy; averaged.
pub fn mig(rep: &RepresentationSet, bins: usize) -> Result<f64> {
    let factors = check_factors_vary(rep)?;
    let codes = discretize(rep.latents(), bins)?.codes;
    let columns: Vec<Vec<u32>> = codes.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
    let gaps: Vec<f64> = factors
        .par_iter()
        .map(|v| {
            let h = entropy(v)?;
            let mut mi: Vec<f64> = columns.iter().map(|z| mutual_info(v, z)).collect::<Result<_>>()?;
            mi.sort_by(|a, b| b.total_cmp(a));
            let second = mi.get(1).copied().unwrap_or(0.0);
            Ok((mi[0] - second) / h)
        })
        .collect::<Result<_>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

fn mean_var(x: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = x.clone().count() as f64;
    let mean = x.clone().sum::<f64>() / n;
    let var = x.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Coefficient of determination of the single-variable least-squares fit of `y`
/// on `x`, i.e. their squared correlation. Zero when either is constant.
pub fn r_squared(x: ArrayView1<f64>, y: &[f64]) -> f64 {
    let (mx, vx) = mean_var(x.iter().copied());
    let (my, vy) = mean_var(y.iter().copied());
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    let n = y.len() as f64;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    // Cauchy-Schwarz holds exactly; roundoff can push the ratio past 1
    (cov * cov / (vx * vy)).min(1.0)
}

/// `C x F` matrix of single-latent R^2 scores.
pub fn sap_matrix(rep: &RepresentationSet) -> Result<Array2<f64>> {
    if rep.len() < 10 {
        return Err(MetricError::TooFewSamples {
            metric: "sap",
            need: 10,
            got: rep.len(),
        });
    }
    let factors: Vec<Vec<f64>> = check_factors_vary(rep)?
        .into_iter()
        .map(|c| c.into_iter().map(f64::from).collect())
        .collect();
    let mut s = Array2::zeros((rep.latent_dim(), factors.len()));
    for (j, z) in rep.latents().axis_iter(Axis(1)).enumerate() {
        for (k, v) in factors.iter().enumerate() {
            s[[j, k]] = r_squared(z, v);
        }
    }
    Ok(s)
}

/// Separated attribute predictability: mean over factors of the gap between the
/// best and second best single-latent R^2.
pub fn sap(rep: &RepresentationSet) -> Result<f64> {
    let s = sap_matrix(rep)?;
    let gaps: Vec<f64> = s
        .axis_iter(Axis(1))
        .map(|col| {
            let mut v = col.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v.get(1).copied().unwrap_or(0.0)
        })
        .collect();
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Something that can hand out latent batches with one factor held fixed.
pub trait ProbeSource {
    fn num_factors(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Population standard deviation of each latent over the whole source.
    fn global_std(&self) -> Vec<f64>;
    /// `count` latent rows sharing a randomly drawn value of factor `k`.
    fn probe(&self, k: usize, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64>;
}

impl ProbeSource for RepresentationSet {
    fn num_factors(&self) -> usize {
        self.factors.num_factors()
    }

    fn latent_dim(&self) -> usize {
        self.latents.ncols()
    }

    fn global_std(&self) -> Vec<f64> {
        self.latents
            .axis_iter(Axis(1))
            .map(|c| mean_var(c.iter().copied()).1.sqrt())
            .collect()
    }

    fn probe(&self, k: usize, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let anchor = rng.random_range(0..self.len());
        let value = self.factors.row(anchor)[k];
        let group: Vec<usize> = (0..self.len()).filter(|&i| self.factors.row(i)[k] == value).collect();
        let picks: Vec<usize> = (0..count).map(|_| group[rng.random_range(0..group.len())]).collect();
        self.latents.select(Axis(0), &picks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorVaeResult {
    pub score: f64,
    pub excluded_latents: Vec<usize>,
}

/// Index of the smallest value, lowest index on ties.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn vote<S: ProbeSource + ?Sized>(source: &S, active: &[usize], std: &[f64], probe: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let k = rng.random_range(0..source.num_factors());
    let batch = source.probe(k, probe, rng);
    let vars: Vec<f64> = active
        .iter()
        .map(|&j| mean_var(batch.column(j).iter().map(|z| z / std[j])).1)
        .collect();
    (k, active[argmin(&vars)])
}

/// FactorVAE score: accuracy of a majority-vote classifier that guesses the fixed
/// factor from the latent with least normalized variance in a probe batch. The
/// classifier is fitted on the training votes and scored on fresh eval votes.
/// Latents with zero global spread cannot vote and are reported as excluded.
pub fn factorvae_score<S: ProbeSource + ?Sized>(source: &S, config: &MetricConfig, seed: u64) -> Result<FactorVaeResult> {
    config.validate()?;
    let std = source.global_std();
    let (active, excluded): (Vec<usize>, Vec<usize>) = (0..source.latent_dim()).partition(|&j| std[j] > 0.0);
    if active.is_empty() {
        return Ok(FactorVaeResult {
            score: 0.0,
            excluded_latents: excluded,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let f = source.num_factors();
    let mut table = vec![vec![0usize; f]; source.latent_dim()];
    for _ in 0..config.factorvae_train_votes {
        let (k, j) = vote(source, &active, &std, config.factorvae_probe_size, &mut rng);
        table[j][k] += 1;
    }
    let predict: Vec<usize> = table
        .iter()
        .map(|row| {
            let neg: Vec<f64> = row.iter().map(|&c| -(c as f64)).collect();
            argmin(&neg)
        })
        .collect();
    let correct = (0..config.factorvae_eval_votes)
        .filter(|_| {
            let (k, j) = vote(source, &active, &std, config.factorvae_probe_size, &mut rng);
            predict[j] == k
        })
        .count();
    Ok(FactorVaeResult {
        score: correct as f64 / config.factorvae_eval_votes as f64,
        excluded_latents: excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DciScores {
    pub disentanglement: f64,
    pub completeness: f64,
    pub informativeness: f64,
    /// `C x F` importance of each latent for each factor.
    pub importance: Array2<f64>,
}

/// `1 - H(p) / ln(base)` for a non-negative weight vector; 0 for an all-zero one.
fn one_minus_norm_entropy(w: impl Iterator<Item = f64> + Clone, base: usize) -> f64 {
    let total: f64 = w.clone().sum();
    if total <= 0.0 {
        return 0.0;
    }
    if base < 2 {
        return 1.0;
    }
    let h: f64 = w
        .filter(|&x| x > 0.0)
        .map(|x| {
            let p = x / total;
            -p * p.ln()
        })
        .sum();
    // roundoff can lift H a hair above ln(base)
    (1.0 - h / (base as f64).ln()).max(0.0)
}

/// Disentanglement and completeness of an importance matrix `R` (`C x F`).
///
/// Disentanglement weighs each latent's `1 - H_F(R[j, :])` by its share of the total
/// importance; completeness averages `1 - H_C(R[:, k])` over factors.
pub fn dci_from_importance(r: &Array2<f64>) -> (f64, f64) {
    let (c, f) = r.dim();
    let total: f64 = r.sum();
    let disentanglement = if total > 0.0 {
        r.axis_iter(Axis(0))
            .map(|row| row.sum() / total * one_minus_norm_entropy(row.iter().copied(), f))
            .sum()
    } else {
        0.0
    };
    let completeness = r
        .axis_iter(Axis(1))
        .map(|col| one_minus_norm_entropy(col.iter().copied(), c))
        .sum::<f64>()
        / f.max(1) as f64;
    (disentanglement, completeness)
}

/// Standardizes columns with the statistics of `train`; constant columns become 0.
fn standardize(train: &Array2<f64>, test: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut a = train.clone();
    let mut b = test.clone();
    for j in 0..train.ncols() {
        let (m, v) = mean_var(train.column(j).iter().copied());
        let s = v.sqrt();
        let scale = if s > 0.0 { 1.0 / s } else { 0.0 };
        a.column_mut(j).mapv_inplace(|x| (x - m) * scale);
        b.column_mut(j).mapv_inplace(|x| (x - m) * scale);
    }
    (a, b)
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Largest eigenvalue of `X^T X / n` for `X` with an appended ones column, by
/// power iteration.
fn gram_top_eigenvalue(x: &Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    let mut v = Array1::from_elem(d + 1, 1.0 / ((d + 1) as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let xv = x.dot(&v.slice(ndarray::s![..d])) + v[d];
        let mut w = Array1::zeros(d + 1);
        w.slice_mut(ndarray::s![..d]).assign(&x.t().dot(&xv));
        w[d] = xv.sum();
        w /= n as f64;
        lambda = w.dot(&w).sqrt();
        if lambda == 0.0 {
            break;
        }
        v = w / lambda;
    }
    lambda
}

/// L1-penalized multinomial logistic regression fitted by accelerated proximal
/// gradient. Returns `(W, b)` with `W` of shape `classes x d`.
pub fn fit_l1_logistic(x: &Array2<f64>, labels: &[u32], classes: usize, l1: f64, iterations: usize) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y as usize]] = 1.0;
    }
    // 0.5 * X^T X / n bounds the softmax cross-entropy Hessian
    let lipschitz = 0.5 * gram_top_eigenvalue(x) * 1.01 + 1e-12;
    let step = 1.0 / lipschitz;
    let mut w = Array2::<f64>::zeros((classes, d));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let mut p = x.dot(&yw.t()) + &yb;
        softmax_rows(&mut p);
        let g = (p - &onehot) / n as f64;
        let gw = g.t().dot(x);
        let gb = g.sum_axis(Axis(0));
        let thresh = step * l1;
        let w_next = (&yw - &(gw * step)).mapv(|v| v.signum() * (v.abs() - thresh).max(0.0));
        let b_next = &yb - &(gb * step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        yw = &w_next + &((&w_next - &w) * mom);
        yb = &b_next + &((&b_next - &b) * mom);
        w = w_next;
        b = b_next;
        t = t_next;
    }
    (w, b)
}

fn accuracy(x: &Array2<f64>, labels: &[u32], w: &Array2<f64>, b: &Array1<f64>) -> f64 {
    let logits = x.dot(&w.t()) + b;
    let hits = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            argmin(&neg) == y as usize
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// DCI scores from per-factor L1 logistic classifiers on standardized latents.
/// Importance is the mean absolute weight a latent receives across classes;
/// informativeness is the mean held-out accuracy.
pub fn dci(rep: &RepresentationSet, config: &MetricConfig, seed: u64) -> Result<DciScores> {
    config.validate()?;
    let n = rep.len();
    if n < 100 {
        return Err(MetricError::TooFewSamples {
            metric: "dci",
            need: 100,
            got: n,
        });
    }
    check_factors_vary(rep)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * config.dci_train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let train = rep.select(train_idx);
    let test = rep.select(test_idx);
    let (xtr, xte) = standardize(train.latents(), test.latents());

    let per_factor: Vec<(Array1<f64>, f64)> = (0..rep.num_factors())
        .into_par_iter()
        .map(|k| {
            let ytr = train.factors().column(k);
            if ytr.iter().all(|&v| v == ytr[0]) {
                return Err(MetricError::DegenerateFactor(k));
            }
            let classes = rep.factors().cardinalities()[k] as usize;
            let (w, b) = fit_l1_logistic(&xtr, &ytr, classes, config.dci_l1, config.dci_iterations);
            let importance = w.mapv(f64::abs).mean_axis(Axis(0)).expect("at least one class");
            let acc = accuracy(&xte, &test.factors().column(k), &w, &b);
            Ok((importance, acc))
        })
        .collect::<Result<_>>()?;

    let mut importance = Array2::zeros((rep.latent_dim(), rep.num_factors()));
    for (k, (imp, _)) in per_factor.iter().enumerate() {
        importance.column_mut(k).assign(imp);
    }
    let (disentanglement, completeness) = dci_from_importance(&importance);
    let informativeness = per_factor.iter().map(|p| p.1).sum::<f64>() / per_factor.len() as f64;
    Ok(DciScores {
        disentanglement,
        completeness,
        informativeness,
        importance,
    })
}

/// Latents whose range falls below this count as collapsed.
pub const IRS_ZERO_DEVIATION: f64 = 1e-9;

/// `C x F` matrix of per-latent, per-factor robustness scores.
///
/// For factor `k` and latent `j`: one minus the expected (over values `v` of `k`,
/// weighted by their frequency) largest deviation of `z_j` from its mean within
/// the group `v_k = v`, divided by the largest deviation between any two values of
/// `z_j`. A collapsed latent scores 0 with the guard on and 1 with it off.
pub fn irs_matrix(rep: &RepresentationSet, zero_guard: bool) -> Result<Array2<f64>> {
    let factors = check_factors_vary(rep)?;
    let n = rep.len();
    let c = rep.latent_dim();
    let mut out = Array2::zeros((c, factors.len()));
    for (j, z) in rep.latents().axis_iter(Axis(1)).enumerate() {
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_dev = hi - lo;
        if max_dev < IRS_ZERO_DEVIATION {
            out.row_mut(j).fill(if zero_guard { 0.0 } else { 1.0 });
            continue;
        }
        for (k, col) in factors.iter().enumerate() {
            let card = rep.factors().cardinalities()[k] as usize;
            let mut sum = vec![0.0; card];
            let mut count = vec![0usize; card];
            for (&v, &x) in col.iter().zip(z.iter()) {
                sum[v as usize] += x;
                count[v as usize] += 1;
            }
            let mut dev = vec![0.0f64; card];
            for (&v, &x) in col.iter().zip(z.iter()) {
                let m = sum[v as usize] / count[v as usize] as f64;
                dev[v as usize] = dev[v as usize].max((x - m).abs());
            }
            let expected: f64 = (0..card)
                .filter(|&v| count[v] > 0)
                .map(|v| count[v] as f64 / n as f64 * dev[v])
                .sum();
            out[[j, k]] = 1.0 - expected / max_dev;
        }
    }
    Ok(out)
}

/// Interventional robustness: for every factor the best per-latent robustness score
/// from [`irs_matrix`], averaged over factors.
pub fn irs(rep: &RepresentationSet, zero_guard: bool) -> Result<f64> {
    let m = irs_matrix(rep, zero_guard)?;
    let best: Vec<f64> = m
        .axis_iter(Axis(1))
        .map(|col| col.iter().copied().fold(0.0, f64::max))
        .collect();
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}
