//! Training/test sets drawn without replacement, their encoding, and on-disk format.
//!
//! On disk a dataset is a CSV file with header `index,label,leaf_0..leaf_{d-1}`
//! holding raw feature indices, plus a JSON sidecar (`<file>.json`) with the
//! grammar parameters. Consumers recompute the encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_grammar, sample_uncorrelated_grammar, Datum, GrammarInstance, RhmParams, RuleKind};
use crate::error::{Result, RhmError};
use crate::seed::rng_from_seed;
use crate::seed::mix64;

/// Above this many data, indices are drawn through a keyed permutation instead
/// of a materialized partial shuffle.
const SHUFFLE_LIMIT: u64 = 1 << 22;

/// An encoded sample of data from one grammar.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub data: Vec<Datum>,
    /// Global datum indices in `[0, P_max)`, pairwise distinct.
    pub indices: Vec<u64>,
    /// One row per datum, `d × v` entries (pixel-major, channel-minor).
    pub inputs: Array2<f64>,
    pub whitened: bool,
    pub input_dim: usize,
    pub vocab_size: usize,
}

impl Dataset {
    /// Decodes and encodes the given indices.
    pub fn from_indices(grammar: &GrammarInstance, indices: Vec<u64>, whiten: bool) -> Result<Self> {
        let data = indices
            .iter()
            .map(|&i| grammar.decode_datum(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_data(grammar.params(), data, indices, whiten))
    }

    pub fn from_data(params: &RhmParams, data: Vec<Datum>, indices: Vec<u64>, whiten: bool) -> Self {
        let d = params.input_dim();
        let v = params.vocab_size;
        let mut inputs = Array2::zeros((data.len(), d * v));
        for (mut row, datum) in inputs.rows_mut().into_iter().zip(&data) {
            let encoded = encode_one_hot(&datum.leaves, v, whiten);
            row.as_slice_mut().expect("contiguous").copy_from_slice(&encoded);
        }
        Self {
            data,
            indices,
            inputs,
            whitened: whiten,
            input_dim: d,
            vocab_size: v,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|d| d.label).collect()
    }

    /// Subset by positions, keeping encoding.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        let data = positions.iter().map(|&i| self.data[i].clone()).collect();
        let indices = positions.iter().map(|&i| self.indices[i]).collect();
        let inputs = self.inputs.select(ndarray::Axis(0), positions);
        Dataset {
            data,
            indices,
            inputs,
            whitened: self.whitened,
            input_dim: self.input_dim,
            vocab_size: self.vocab_size,
        }
    }

    /// Writes the CSV file and its JSON sidecar.
    pub fn write_csv(&self, path: &Path, meta: &DatasetMeta) -> Result<()> {
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["index".to_string(), "label".to_string()];
        header.extend((0..self.input_dim).map(|i| format!("leaf_{i}")));
        writer.write_record(&header)?;
        for (datum, index) in self.data.iter().zip(&self.indices) {
            let mut record = vec![index.to_string(), datum.label.to_string()];
            record.extend(datum.leaves.iter().map(|f| f.to_string()));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        let sidecar = File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(sidecar, meta)?;
        Ok(())
    }

    /// Reads a dataset written by [`write_csv`](Self::write_csv), regenerating the
    /// grammar from the sidecar and checking every row against it.
    pub fn read_csv(path: &Path) -> Result<(Self, GrammarInstance, DatasetMeta)> {
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        let grammar = meta.grammar()?;
        let d = meta.params.input_dim();
        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |i: usize| -> Result<u64> {
                record
                    .get(i)
                    .and_then(|f| f.parse().ok())
                    .ok_or(RhmError::CorruptRows(vec![line + 2]))
            };
            if record.len() != d + 2 {
                return Err(RhmError::CorruptRows(vec![line + 2]));
            }
            let index = parse(0)?;
            let datum = grammar.decode_datum(index)?;
            let label = parse(1)? as usize;
            let leaves = (0..d).map(|i| parse(i + 2).map(|x| x as u32)).collect::<Result<Vec<_>>>()?;
            if datum.label != label || datum.leaves != leaves {
                return Err(RhmError::CorruptRows(vec![line + 2]));
            }
            indices.push(index);
            data.push(datum);
        }
        let ds = Dataset::from_data(&meta.params, data, indices, meta.whitened);
        Ok((ds, grammar, meta))
    }
}

/// Sidecar metadata describing how a dataset file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub params: RhmParams,
    pub kind: RuleKind,
    /// Seed used to draw the sample indices.
    pub sample_seed: u64,
    pub whitened: bool,
    pub num_points: usize,
}

impl DatasetMeta {
    pub fn grammar(&self) -> Result<GrammarInstance> {
        match self.kind {
            RuleKind::Correlated => sample_grammar(&self.params),
            RuleKind::Uncorrelated => sample_uncorrelated_grammar(&self.params),
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Value of a whitened one-hot entry: `(x - 1/v) / sqrt((1/v)(1 - 1/v))`.
pub fn whiten_value(x: f64, vocab_size: usize) -> f64 {
    let p = 1.0 / vocab_size as f64;
    (x - p) / (p * (1.0 - p)).sqrt()
}

/// One-hot encodes a leaf sequence (`d × v`, pixel-major), optionally whitened per pixel.
pub fn encode_one_hot(leaves: &[u32], vocab_size: usize, whiten: bool) -> Vec<f64> {
    let (off, on) = if whiten && vocab_size > 1 {
        (whiten_value(0.0, vocab_size), whiten_value(1.0, vocab_size))
    } else {
        (0.0, 1.0)
    };
    let mut out = vec![off; leaves.len() * vocab_size];
    for (i, &f) in leaves.iter().enumerate() {
        out[i * vocab_size + f as usize] = on;
    }
    out
}

/// Draws `count` distinct indices uniformly from `[0, population)`.
pub fn sample_indices<R: Rng + ?Sized>(population: u64, count: u64, rng: &mut R) -> Result<Vec<u64>> {
    if count > population {
        return Err(RhmError::TooManyPoints {
            requested: count,
            p_max: population,
        });
    }
    if population <= SHUFFLE_LIMIT {
        // partial Fisher-Yates
        let mut pool: Vec<u64> = (0..population).collect();
        for i in 0..count as usize {
            let j = rng.random_range(i..population as usize);
            pool.swap(i, j);
        }
        pool.truncate(count as usize);
        Ok(pool)
    } else {
        let perm = KeyedPermutation::new(population, rng.random());
        Ok((0..count).map(|i| perm.apply(i)).collect())
    }
}

/// Draws `p` distinct data and encodes them.
pub fn sample_dataset(grammar: &GrammarInstance, p: u64, seed: u64, whiten: bool) -> Result<Dataset> {
    let p_max = grammar.params().p_max()?;
    let mut rng = rng_from_seed(seed);
    let indices = sample_indices(p_max, p, &mut rng)?;
    Dataset::from_indices(grammar, indices, whiten)
}

/// Draws a training set of `p` points and a disjoint test set of
/// `min(P_max - p, test_cap)` points.
pub fn sample_split(grammar: &GrammarInstance, p: u64, test_cap: u64, seed: u64, whiten: bool) -> Result<(Dataset, Dataset)> {
    let p_max = grammar.params().p_max()?;
    if p > p_max {
        return Err(RhmError::TooManyPoints { requested: p, p_max });
    }
    let test = (p_max - p).min(test_cap);
    let mut rng = rng_from_seed(seed);
    let mut indices = sample_indices(p_max, p + test, &mut rng)?;
    let test_indices = indices.split_off(p as usize);
    Ok((
        Dataset::from_indices(grammar, indices, whiten)?,
        Dataset::from_indices(grammar, test_indices, whiten)?,
    ))
}

/// Balanced Feistel permutation over `[0, 2^bits)` restricted to `[0, n)` by cycle walking.
struct KeyedPermutation {
    n: u64,
    half_bits: u32,
    keys: [u64; 4],
}

impl KeyedPermutation {
    fn new(n: u64, key: u64) -> Self {
        let bits = (64 - (n - 1).leading_zeros()).max(2);
        let half_bits = bits.div_ceil(2);
        let keys = [mix64(key), mix64(key ^ 1), mix64(key ^ 2), mix64(key ^ 3)];
        Self { n, half_bits, keys }
    }

    fn round(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut left, mut right) = (x >> self.half_bits, x & mask);
        for k in self.keys {
            let next = left ^ (mix64(right ^ k) & mask);
            left = right;
            right = next;
        }
        (left << self.half_bits) | right
    }

    fn apply(&self, x: u64) -> u64 {
        let mut y = self.round(x);
        while y >= self.n {
            y = self.round(y);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::sample_grammar;
    use std::collections::HashSet;

    #[test]
    fn full_dataset_contains_every_datum_once() {
        let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(2);
        let g = sample_grammar(&p).unwrap();
        let p_max = p.p_max().unwrap();
        let ds = sample_dataset(&g, p_max, 5, true).unwrap();
        let set: HashSet<u64> = ds.indices.iter().copied().collect();
        assert_eq!(set.len() as u64, p_max);
    }

    #[test]
    fn too_many_points() {
        let p = RhmParams::new(2, 2, 2, 2, 2);
        let g = sample_grammar(&p).unwrap();
        match sample_dataset(&g, 17, 0, true) {
            Err(RhmError::TooManyPoints { p_max, .. }) => assert_eq!(p_max, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn whitened_pixels_have_zero_mean_unit_variance() {
        let p = RhmParams::new(5, 4, 3, 2, 2).with_seed(1);
        let g = sample_grammar(&p).unwrap();
        let ds = sample_dataset(&g, 50, 3, true).unwrap();
        for row in ds.inputs.rows() {
            for pixel in row.as_slice().unwrap().chunks(5) {
                let mean = pixel.iter().sum::<f64>() / 5.0;
                let var = pixel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_one_hot_rows() {
        let enc = encode_one_hot(&[2, 0], 3, false);
        assert_eq!(enc, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn keyed_permutation_is_injective() {
        let mut rng = rng_from_seed(0);
        let perm = KeyedPermutation::new(1000, rng.random());
        let out: HashSet<u64> = (0..1000).map(|i| perm.apply(i)).collect();
        assert_eq!(out.len(), 1000);
        assert!(out.iter().all(|&x| x < 1000));
    }

    #[test]
    fn large_population_sampling_is_distinct() {
        let mut rng = rng_from_seed(4);
        let idx = sample_indices(1 << 40, 5000, &mut rng).unwrap();
        let set: HashSet<u64> = idx.iter().copied().collect();
        assert_eq!(set.len(), 5000);
    }

    #[test]
    fn split_is_disjoint() {
        let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(2);
        let g = sample_grammar(&p).unwrap();
        let (train, test) = sample_split(&g, 30, 20000, 8, true).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 81 - 30);
        let a: HashSet<u64> = train.indices.iter().copied().collect();
        assert!(test.indices.iter().all(|i| !a.contains(i)));
    }

    #[test]
    fn csv_round_trip() {
        let p = RhmParams::new(3, 2, 3, 2, 2).with_seed(7);
        let g = sample_grammar(&p).unwrap();
        let ds = sample_dataset(&g, 20, 1, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let meta = DatasetMeta {
            params: p,
            kind: RuleKind::Correlated,
            sample_seed: 1,
            whitened: false,
            num_points: 20,
        };
        ds.write_csv(&path, &meta).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("index,label,leaf_0,leaf_1,leaf_2,leaf_3\n"));
        let (back, _, meta_back) = Dataset::read_csv(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.indices, ds.indices);
        assert_eq!(back.inputs, ds.inputs);
    }
}
