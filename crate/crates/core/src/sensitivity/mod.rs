//! Synonymic sensitivity of representations and the nearest-neighbour
//! estimate of their effective dimension.

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::grammar::{Dataset, Datum, GrammarInstance};
use crate::nn::Network;
use crate::seed::{derangement, derived_rng, rng_from_seed};

/// Default number of test points for sensitivity measurements.
pub const SENSITIVITY_TEST_SIZE: usize = 1000;
/// Subsample draws per probe size in [`effective_dimension`].
pub const DIMENSION_DRAWS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityValue {
    /// Layer probed (1-based).
    pub layer: usize,
    /// Exchange level.
    pub level: usize,
    pub s: f64,
    /// Mean `‖f(x) - f(P_l x)‖²`.
    pub numerator: f64,
    /// Mean `‖f(x) - f(y)‖²` over random test pairs.
    pub denominator: f64,
    pub num_points: usize,
    pub num_pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub values: Vec<SensitivityValue>,
}

impl SensitivityReport {
    pub fn get(&self, layer: usize, level: usize) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.layer == layer && v.level == level)
            .map(|v| v.s)
    }
}

fn row_sq(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Sensitivity of an arbitrary representation `f`, mapping a batch of data to
/// one row per datum. Each test point gets one fresh level-`level` exchange;
/// the denominator pairs the test points along a random derangement.
pub fn sensitivity_with<F, R>(
    f: F,
    grammar: &GrammarInstance,
    test: &[Datum],
    level: usize,
    rng: &mut R,
) -> Result<SensitivityValue>
where
    F: Fn(&[Datum]) -> Result<Array2<f64>>,
    R: Rng + ?Sized,
{
    if test.len() < 2 {
        return Err(RhmError::EmptyTestSet);
    }
    let exchanged = test
        .iter()
        .map(|d| grammar.synonym_exchange(d, level, rng))
        .collect::<Result<Vec<_>>>()?;
    let base = f(test)?;
    let moved = f(&exchanged)?;
    if base.nrows() != test.len() || moved.dim() != base.dim() {
        return Err(RhmError::Shape(format!(
            "representation of {} points has shape {:?}",
            test.len(),
            base.dim()
        )));
    }
    let n = test.len();
    let numerator = base
        .outer_iter()
        .zip(moved.outer_iter())
        .map(|(a, b)| row_sq(a, b))
        .sum::<f64>()
        / n as f64;
    let perm = derangement(n, rng);
    let denominator = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| row_sq(base.row(i), base.row(j)))
        .sum::<f64>()
        / n as f64;
    if denominator == 0.0 {
        return Err(RhmError::ConstantRepresentation);
    }
    Ok(SensitivityValue {
        layer: 0,
        level,
        s: numerator / denominator,
        numerator,
        denominator,
        num_points: n,
        num_pairs: n,
    })
}

/// Encodes data the way the network was trained on them.
pub fn encode(grammar: &GrammarInstance, data: &[Datum], whiten: bool) -> Array2<f64> {
    let indices = data.iter().map(|d| grammar.index_of(d)).collect();
    Dataset::from_data(grammar.params(), data.to_vec(), indices, whiten).inputs
}

/// `S_{k,l}` of layer `k` of `net` for exchanges at level `l`.
pub fn synonymic_sensitivity(
    net: &Network,
    grammar: &GrammarInstance,
    test: &[Datum],
    layer: usize,
    level: usize,
    whiten: bool,
    seed: u64,
) -> Result<SensitivityValue> {
    let mut rng = derived_rng(seed, (layer as u64) << 32 | level as u64);
    let f = |batch: &[Datum]| net.activations(&encode(grammar, batch, whiten), layer);
    let mut value = sensitivity_with(f, grammar, test, level, &mut rng)?;
    value.layer = layer;
    Ok(value)
}

/// `S_{k,l}` for every pair of `layers` and `levels`.
pub fn sensitivity_report(
    net: &Network,
    grammar: &GrammarInstance,
    test: &[Datum],
    layers: &[usize],
    levels: &[usize],
    whiten: bool,
    seed: u64,
) -> Result<SensitivityReport> {
    let mut values = Vec::with_capacity(layers.len() * levels.len());
    for &k in layers {
        for &l in levels {
            values.push(synonymic_sensitivity(net, grammar, test, k, l, whiten, seed)?);
        }
    }
    Ok(SensitivityReport { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub probe_sizes: Vec<usize>,
    /// Mean nearest-neighbour distance at each probe size.
    pub delta: Vec<f64>,
    /// `delta / delta[0]`.
    pub normalized: Vec<f64>,
    pub slope: f64,
    pub d_eff: f64,
    /// Coincident pairs, summed over draws; their zero distances are left
    /// out of the nearest-neighbour search.
    pub excluded: usize,
    /// Draws per probe size below the number of points; a probe of all
    /// points is evaluated once.
    pub draws: usize,
}

/// Sum over the points of `idx` of the distance to their nearest distinct
/// neighbour within `idx`, the number of points summed, and the number of
/// coincident pairs left out.
fn mean_nn_distance(points: &Array2<f64>, idx: &[usize]) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (a, &i) in idx.iter().enumerate() {
        let pi = points.row(i);
        let mut best = f64::INFINITY;
        for (b, &j) in idx.iter().enumerate() {
            if a == b {
                continue;
            }
            let d = row_sq(pi, points.row(j));
            if d == 0.0 {
                excluded += usize::from(a < b);
            } else if d < best {
                best = d;
            }
        }
        if best.is_finite() {
            sum += best.sqrt();
            used += 1;
        }
    }
    (sum, used, excluded)
}

/// Least-squares slope and intercept of `ys` against `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Estimates the dimension of the manifold sampled by the rows of `points`
/// from the decay of the mean nearest-neighbour distance `δ(P) ~ P^(-1/d)`.
pub fn effective_dimension(points: &Array2<f64>, probe_sizes: &[usize], seed: u64) -> Result<DimensionReport> {
    let n = points.nrows();
    let mut sizes = probe_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 || sizes[0] < 2 {
        return Err(RhmError::Config("need at least two probe sizes of two points or more".into()));
    }
    let (lo, hi) = (sizes[0], sizes[sizes.len() - 1]);
    if hi < 10 * lo {
        return Err(RhmError::Config(format!("probe sizes {lo}..{hi} span less than a decade")));
    }
    if hi > n {
        return Err(RhmError::Config(format!("largest probe size {hi} exceeds the {n} available points")));
    }
    let mut rng = rng_from_seed(seed);
    let mut delta = Vec::with_capacity(sizes.len());
    let mut excluded = 0;
    for &size in &sizes {
        let (mut sum, mut used) = (0.0, 0usize);
        // a probe of every point is the same set on each draw
        let draws = if size == n { 1 } else { DIMENSION_DRAWS };
        for _ in 0..draws {
            let idx = sample(&mut rng, n, size).into_vec();
            let (s, u, e) = mean_nn_distance(points, &idx);
            sum += s;
            used += u;
            excluded += e;
        }
        if used == 0 {
            return Err(RhmError::ConstantRepresentation);
        }
        delta.push(sum / used as f64);
    }
    let normalized: Vec<f64> = delta.iter().map(|d| d / delta[0]).collect();
    let xs: Vec<f64> = sizes.iter().map(|&p| (p as f64).ln()).collect();
    let ys: Vec<f64> = normalized.iter().map(|d| d.ln()).collect();
    let (slope, _) = linear_fit(&xs, &ys);
    Ok(DimensionReport {
        probe_sizes: sizes,
        delta,
        normalized,
        slope,
        d_eff: -1.0 / slope,
        excluded,
        draws: DIMENSION_DRAWS,
    })
}

/// Activations of layer `k` on `data`, one row per datum.
pub fn layer_points(net: &Network, grammar: &GrammarInstance, data: &[Datum], layer: usize, whiten: bool) -> Result<Array2<f64>> {
    let mut out: Option<Array2<f64>> = None;
    for chunk in data.chunks(2048) {
        let a = net.activations(&encode(grammar, chunk, whiten), layer)?;
        out = Some(match out {
            None => a,
            Some(prev) => ndarray::concatenate(Axis(0), &[prev.view(), a.view()]).map_err(|e| RhmError::Shape(e.to_string()))?,
        });
    }
    out.ok_or(RhmError::EmptyTestSet)
}
