//! On-disk feature dataset (`.dfm`) and sampling with replacement.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"DFM1" | u32 version=1 | u32 n | u32 c | u32 h | u32 w | u8 has_factors
//! [ u32 f | u32 cardinalities[f] ]        if has_factors
//! f32 data[n*c*h*w]
//! [ i32 values[n*f] ]                     if has_factors
//! ```
//!
//! Aggregated vectors are stored with `h = w = 1`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DFM_MAGIC: [u8; 4] = *b"DFM1";
pub const DFM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"DFM1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dfm version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {section} needs {expected} bytes, {available} available")]
    Truncated {
        section: &'static str,
        expected: u64,
        available: u64,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid dataset: {0}")]
    Invariant(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("cannot sample from an empty source")]
    EmptySource,
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Ground-truth factor labels, one row per record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorTable {
    cardinalities: Vec<u32>,
    values: Vec<u32>,
}

impl FactorTable {
    pub fn new(cardinalities: Vec<u32>, values: Vec<u32>) -> Result<Self> {
        let table = Self {
            cardinalities,
            values,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn empty(cardinalities: Vec<u32>) -> Self {
        Self {
            cardinalities,
            values: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let f = self.cardinalities.len();
        if f == 0 {
            return Err(StoreError::Invariant("factor table has no factors".into()));
        }
        if self.values.len() % f != 0 {
            return Err(StoreError::Invariant(format!(
                "{} factor values is not a multiple of {f} factors",
                self.values.len()
            )));
        }
        for (i, &v) in self.values.iter().enumerate() {
            let card = self.cardinalities[i % f];
            if v >= card {
                return Err(StoreError::Invariant(format!(
                    "factor value {v} at row {} column {} exceeds cardinality {card}",
                    i / f,
                    i % f
                )));
            }
        }
        Ok(())
    }

    pub fn num_factors(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn num_rows(&self) -> usize {
        self.values.len() / self.cardinalities.len().max(1)
    }

    pub fn cardinalities(&self) -> &[u32] {
        &self.cardinalities
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let f = self.num_factors();
        &self.values[i * f..(i + 1) * f]
    }

    pub fn column(&self, k: usize) -> Vec<u32> {
        (0..self.num_rows()).map(|i| self.row(i)[k]).collect()
    }

    pub fn push_row(&mut self, row: &[u32]) -> Result<()> {
        if row.len() != self.num_factors() {
            return Err(StoreError::Invariant(format!(
                "row of {} factors pushed into table of {}",
                row.len(),
                self.num_factors()
            )));
        }
        for (k, (&v, &card)) in row.iter().zip(&self.cardinalities).enumerate() {
            if v >= card {
                return Err(StoreError::Invariant(format!(
                    "factor {k} value {v} exceeds cardinality {card}"
                )));
            }
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    /// Rows reordered (or repeated) by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.num_factors());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            cardinalities: self.cardinalities.clone(),
            values,
        }
    }
}

/// A set of `n` tensors of shape `c x h x w`, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct DfmDataset {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
    pub factors: Option<FactorTable>,
}

impl DfmDataset {
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        data: Vec<f32>,
        factors: Option<FactorTable>,
    ) -> Result<Self> {
        let ds = Self {
            n,
            c,
            h,
            w,
            data,
            factors,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Dataset of `n` aggregated vectors (`h = w = 1`).
    pub fn vectors(n: usize, c: usize, data: Vec<f32>, factors: Option<FactorTable>) -> Result<Self> {
        Self::new(n, c, 1, 1, data, factors)
    }

    pub fn record_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn record(&self, i: usize) -> &[f32] {
        let len = self.record_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn records(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on 0; zero-sized records only occur with n == 0 or c*h*w == 0
        let len = self.record_len().max(1);
        self.data.chunks_exact(len).take(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self
            .n
            .checked_mul(self.record_len())
            .ok_or_else(|| StoreError::Invariant("n*c*h*w overflows".into()))?;
        if self.data.len() != expected {
            return Err(StoreError::Invariant(format!(
                "data holds {} values, n*c*h*w = {expected}",
                self.data.len()
            )));
        }
        for dim in [self.n, self.c, self.h, self.w] {
            if dim > u32::MAX as usize {
                return Err(StoreError::Invariant(format!("dimension {dim} exceeds u32")));
            }
        }
        if let Some(factors) = &self.factors {
            factors.validate()?;
            if factors.num_rows() != self.n {
                return Err(StoreError::Invariant(format!(
                    "factor table has {} rows for {} records",
                    factors.num_rows(),
                    self.n
                )));
            }
        }
        if let Some((index, &value)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(StoreError::NonFinite { index, value });
        }
        Ok(())
    }

    /// Records reordered (or repeated) by `indices`, factors carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.record_len());
        for &i in indices {
            data.extend_from_slice(self.record(i));
        }
        Self {
            n: indices.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
            factors: self.factors.as_ref().map(|f| f.select(indices)),
        }
    }
}

pub fn encode_dfm(dataset: &DfmDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let mut out = Vec::with_capacity(25 + dataset.data.len() * 4);
    out.extend_from_slice(&DFM_MAGIC);
    out.extend_from_slice(&DFM_VERSION.to_le_bytes());
    for dim in [dataset.n, dataset.c, dataset.h, dataset.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(dataset.factors.is_some() as u8);
    if let Some(factors) = &dataset.factors {
        out.extend_from_slice(&(factors.num_factors() as u32).to_le_bytes());
        for &card in factors.cardinalities() {
            out.extend_from_slice(&card.to_le_bytes());
        }
    }
    for &v in &dataset.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(factors) = &dataset.factors {
        for &v in factors.values() {
            let v = i32::try_from(v)
                .map_err(|_| StoreError::Invariant(format!("factor value {v} exceeds i32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, section: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(StoreError::Truncated {
                section,
                expected: len as u64,
                available: available as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_dfm(bytes: &[u8]) -> Result<DfmDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != DFM_MAGIC {
        return Err(StoreError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32("version")?;
    if version != DFM_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let n = cur.u32("header")? as usize;
    let c = cur.u32("header")? as usize;
    let h = cur.u32("header")? as usize;
    let w = cur.u32("header")? as usize;
    let has_factors = match cur.take(1, "header")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(StoreError::Invariant(format!("has_factors flag is {other}")));
        }
    };
    let cardinalities = if has_factors {
        let f = cur.u32("factor header")? as usize;
        let raw = cur.take(f.saturating_mul(4), "factor header")?;
        Some(
            raw.chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let count = [n, c, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| StoreError::Invariant("n*c*h*w overflows".into()))?;
    let raw = cur.take(count.saturating_mul(4), "data")?;
    let mut data = Vec::with_capacity(count);
    for (index, b) in raw.chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !value.is_finite() {
            return Err(StoreError::NonFinite { index, value });
        }
        data.push(value);
    }

    let factors = match cardinalities {
        Some(cardinalities) => {
            let f = cardinalities.len();
            let raw = cur.take(n.saturating_mul(f).saturating_mul(4), "factor values")?;
            let mut values = Vec::with_capacity(n * f);
            for b in raw.chunks_exact(4) {
                let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                let v = u32::try_from(v)
                    .map_err(|_| StoreError::Invariant(format!("negative factor value {v}")))?;
                values.push(v);
            }
            Some(FactorTable::new(cardinalities, values)?)
        }
        None => None,
    };

    let trailing = bytes.len() - cur.pos;
    if trailing != 0 {
        return Err(StoreError::TrailingBytes(trailing as u64));
    }
    DfmDataset::new(n, c, h, w, data, factors)
}

pub fn write_dfm(dataset: &DfmDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dfm(dataset)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_dfm(path: impl AsRef<Path>) -> Result<DfmDataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_dfm(&bytes)
}

/// Anything that can hand out records by index, such as a dataset or a lazy generator.
pub trait RecordProvider {
    fn num_records(&self) -> usize;
    /// Shape `(c, h, w)` of every record.
    fn record_shape(&self) -> (usize, usize, usize);
    fn factor_cardinalities(&self) -> Option<Vec<u32>>;
    /// Appends record `i` to `data` and, when labelled, its factor row to `factors`.
    fn fetch(&self, i: usize, data: &mut Vec<f32>, factors: &mut Vec<u32>);
}

impl RecordProvider for DfmDataset {
    fn num_records(&self) -> usize {
        self.n
    }

    fn record_shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    fn factor_cardinalities(&self) -> Option<Vec<u32>> {
        self.factors.as_ref().map(|f| f.cardinalities().to_vec())
    }

    fn fetch(&self, i: usize, data: &mut Vec<f32>, factors: &mut Vec<u32>) {
        data.extend_from_slice(self.record(i));
        if let Some(table) = &self.factors {
            factors.extend_from_slice(table.row(i));
        }
    }
}

/// Draws `count` record indices uniformly i.i.d. with replacement.
pub fn sample_indices(n_unique: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if n_unique == 0 {
        return Err(StoreError::EmptySource);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| rng.random_range(0..n_unique)).collect())
}

/// Builds a dataset of `count` records drawn uniformly with replacement from `source`.
pub fn sample_with_replacement<P: RecordProvider + ?Sized>(
    source: &P,
    count: usize,
    seed: u64,
) -> Result<DfmDataset> {
    let indices = sample_indices(source.num_records(), count, seed)?;
    let (c, h, w) = source.record_shape();
    let cardinalities = source.factor_cardinalities();
    let mut data = Vec::with_capacity(count * c * h * w);
    let mut values = Vec::new();
    for &i in &indices {
        source.fetch(i, &mut data, &mut values);
    }
    let factors = cardinalities
        .map(|cards| FactorTable::new(cards, values))
        .transpose()?;
    DfmDataset::new(count, c, h, w, data, factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    pub unique_count: usize,
    pub duplicate_count: usize,
}

impl DedupStats {
    /// Share of a source of `n_unique` distinct records that made it into the
    /// sample. Drawing `k` times with replacement gives `1 - (1 - 1/n)^k` on average.
    pub fn coverage(&self, n_unique: usize) -> f64 {
        if n_unique == 0 {
            0.0
        } else {
            self.unique_count as f64 / n_unique as f64
        }
    }
}

/// Counts distinct records, comparing raw f32 bit patterns.
pub fn dedup_stats(dataset: &DfmDataset) -> DedupStats {
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(dataset.n);
    for record in dataset.records() {
        seen.insert(record.iter().map(|v| v.to_bits()).collect());
    }
    let unique_count = if dataset.record_len() == 0 {
        dataset.n.min(1)
    } else {
        seen.len()
    };
    DedupStats {
        unique_count,
        duplicate_count: dataset.n - unique_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn labelled(n: usize) -> DfmDataset {
        let data = (0..n * 3).map(|i| i as f32 * 0.25 - 1.0).collect();
        let values = (0..n).flat_map(|i| [(i % 2) as u32, (i % 3) as u32]).collect();
        let factors = FactorTable::new(vec![2, 3], values).unwrap();
        DfmDataset::vectors(n, 3, data, Some(factors)).unwrap()
    }

    #[test]
    fn smallest_round_trip_is_little_endian() {
        let ds = DfmDataset::vectors(1, 2, vec![0.5, -1.0], None).unwrap();
        let bytes = encode_dfm(&ds).unwrap();
        assert_eq!(&bytes[..4], b"DFM1");
        assert_eq!(bytes.len(), 4 + 4 * 5 + 1 + 8);
        assert_eq!(bytes[24], 0);
        assert_eq!(&bytes[25..29], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[29..33], &(-1.0f32).to_le_bytes());
        assert_eq!(decode_dfm(&bytes).unwrap(), ds);
    }

    #[test]
    fn factors_set_flag_and_append_labels() {
        let ds = labelled(4);
        let bytes = encode_dfm(&ds).unwrap();
        assert_eq!(bytes[24], 1);
        // header 25 + f + 2 cardinalities + 12 floats + 8 labels
        assert_eq!(bytes.len(), 25 + 4 + 8 + 12 * 4 + 8 * 4);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(i32::from_le_bytes(tail[..4].try_into().unwrap()), 1);
        assert_eq!(i32::from_le_bytes(tail[4..].try_into().unwrap()), 0);
        assert_eq!(decode_dfm(&bytes).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = DfmDataset::new(0, 512, 7, 7, vec![], None).unwrap();
        let bytes = encode_dfm(&ds).unwrap();
        assert_eq!(bytes.len(), 25);
        assert_eq!(decode_dfm(&bytes).unwrap(), ds);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dfm");
        let ds = labelled(7);
        write_dfm(&ds, &path).unwrap();
        assert_eq!(read_dfm(&path).unwrap(), ds);
        assert_eq!(std::fs::read(&path).unwrap(), encode_dfm(&ds).unwrap());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = encode_dfm(&labelled(2)).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_dfm(&bad_magic), Err(StoreError::BadMagic(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_dfm(&bad_version),
            Err(StoreError::UnsupportedVersion(2))
        ));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(decode_dfm(truncated), Err(StoreError::Truncated { .. })));

        // n claims more records than the payload holds
        let mut big_n = encode_dfm(&DfmDataset::vectors(1, 2, vec![1.0, 2.0], None).unwrap()).unwrap();
        big_n[8..12].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_dfm(&big_n),
            Err(StoreError::Truncated { section: "data", .. })
        ));

        let mut nan = encode_dfm(&DfmDataset::vectors(1, 2, vec![1.0, 2.0], None).unwrap()).unwrap();
        nan[29..33].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_dfm(&nan), Err(StoreError::NonFinite { index: 1, .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_dfm(&trailing), Err(StoreError::TrailingBytes(1))));
    }

    #[test]
    fn invalid_datasets_are_rejected_before_writing() {
        let short = DfmDataset {
            n: 2,
            c: 2,
            h: 1,
            w: 1,
            data: vec![1.0; 3],
            factors: None,
        };
        assert!(matches!(encode_dfm(&short), Err(StoreError::Invariant(_))));

        let inf = DfmDataset {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
            data: vec![f32::INFINITY],
            factors: None,
        };
        assert!(matches!(encode_dfm(&inf), Err(StoreError::NonFinite { .. })));

        assert!(FactorTable::new(vec![2], vec![0, 2]).is_err());
        let wrong_rows = DfmDataset {
            factors: Some(FactorTable::new(vec![2], vec![0]).unwrap()),
            ..DfmDataset::vectors(2, 1, vec![0.0, 1.0], None).unwrap()
        };
        assert!(wrong_rows.validate().is_err());
    }

    #[test]
    fn sampling_is_seeded_and_sized() {
        let src = labelled(50);
        let a = sample_with_replacement(&src, 200, 7).unwrap();
        let b = sample_with_replacement(&src, 200, 7).unwrap();
        let c = sample_with_replacement(&src, 200, 8).unwrap();
        assert_eq!(a.n, 200);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.factors.as_ref().unwrap().num_rows(), 200);
        let stats = dedup_stats(&a);
        assert!(stats.duplicate_count > 0);

        assert_eq!(sample_with_replacement(&src, 0, 1).unwrap().n, 0);
        let empty = DfmDataset::vectors(0, 3, vec![], None).unwrap();
        assert!(matches!(
            sample_with_replacement(&empty, 3, 1),
            Err(StoreError::EmptySource)
        ));
    }

    #[test]
    fn labels_follow_their_records() {
        let src = labelled(30);
        let sampled = sample_with_replacement(&src, 100, 3).unwrap();
        let table = sampled.factors.as_ref().unwrap();
        for i in 0..sampled.n {
            // record j starts at value j*0.75 - 1
            let j = ((sampled.record(i)[0] + 1.0) / 0.75).round() as usize;
            assert_eq!(table.row(i), src.factors.as_ref().unwrap().row(j));
        }
    }

    #[test]
    fn dedup_counts() {
        let ds = DfmDataset::vectors(3, 2, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0], None).unwrap();
        assert_eq!(
            dedup_stats(&ds),
            DedupStats {
                unique_count: 2,
                duplicate_count: 1
            }
        );
        let distinct = labelled(10);
        assert_eq!(dedup_stats(&distinct).duplicate_count, 0);
        // -0.0 and 0.0 are different bit patterns
        let zeros = DfmDataset::vectors(2, 1, vec![0.0, -0.0], None).unwrap();
        assert_eq!(dedup_stats(&zeros).unique_count, 2);
    }

    #[test]
    fn dedup_fraction_matches_occupancy_expectation() {
        // k draws from n sources: E[distinct]/k = n(1-(1-1/n)^k)/k
        let n = 10_000usize;
        let k = 100_000usize;
        let src = DfmDataset::vectors(n, 1, (0..n).map(|i| i as f32).collect(), None).unwrap();
        let sampled = sample_with_replacement(&src, k, 11).unwrap();
        let frac_of_sources = dedup_stats(&sampled).coverage(n);
        let expected = 1.0 - (1.0 - 1.0 / n as f64).powi(k as i32);
        assert!((expected - (1.0 - (-10.0f64).exp())).abs() < 1e-4);
        assert!((frac_of_sources - expected).abs() < 0.01, "{frac_of_sources}");
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            n in 0usize..6,
            c in 1usize..5,
            seed in any::<u64>(),
            labelled in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * c).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let factors = labelled.then(|| {
                let values = (0..n * 2).map(|_| rng.random_range(0..4u32)).collect();
                FactorTable::new(vec![4, 4], values).unwrap()
            });
            let ds = DfmDataset::vectors(n, c, data, factors).unwrap();
            let bytes = encode_dfm(&ds).unwrap();
            let back = decode_dfm(&bytes).unwrap();
            prop_assert_eq!(&encode_dfm(&back).unwrap(), &bytes);
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn dedup_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..40).map(|_| rng.random_range(0..4) as f32).collect();
            let ds = DfmDataset::vectors(20, 2, data, None).unwrap();
            let mut order: Vec<usize> = (0..20).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(dedup_stats(&ds), dedup_stats(&ds.select(&order)));
        }
    }
}
