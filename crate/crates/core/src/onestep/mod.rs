//! One gradient step of a two-layer network on a single orthogonalized patch.
//!
//! The network reads the one-hot code of the `s`-tuple at one patch,
//! `F(x) = (1/H) Σ_h a_h σ(w_h · x)`, with all-ones inner weights and a fixed
//! Gaussian readout. At zero initial output the update of the weight of tuple
//! `μ` is `Δf_h(μ) = Σ_α a_{h,α} ĝ_α(μ)` with
//! `ĝ_α(μ) = N̂(μ; α)/P - N̂(μ)/(n_c P)`, computed here from counts. The
//! literal network is kept as an oracle for this closed form.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::grammar::{sample_dataset, Datum, GrammarInstance};
use crate::nn::{ArchKind, ArchSpec, Layer, Network};
use crate::seed::{derangement, derived_rng};
use crate::stats::{exact_counts, FrequencyTable, Granularity, Patch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneStepConfig {
    pub patch: Patch,
    /// Width of the literal network used by the gradient oracle.
    pub width: usize,
    pub seed: u64,
    /// Pair readout rows as `a_{h+H/2} = -a_h` so the initial output is exactly zero.
    pub antithetic: bool,
}

impl Default for OneStepConfig {
    fn default() -> Self {
        Self {
            patch: Patch::At(0),
            width: 64,
            seed: 0,
            antithetic: true,
        }
    }
}

/// `ĝ(μ)` for every tuple code `μ`; unobserved tuples have `ĝ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationTable {
    pub num_classes: usize,
    pub num_points: usize,
    pub patch: Patch,
    /// `(v^s, n_c)`.
    pub g: Array2<f64>,
    observed: Vec<bool>,
}

impl RepresentationTable {
    /// From tuple-level counts; pooled counts are averaged over positions.
    pub fn from_counts(counts: &FrequencyTable) -> Result<Self> {
        if counts.num_points == 0 {
            return Err(RhmError::Config("no training points".into()));
        }
        let n_c = counts.num_classes;
        let norm = (counts.num_points * counts.positions_counted) as f64;
        let mut g = Array2::zeros((counts.num_symbols, n_c));
        let mut observed = vec![false; counts.num_symbols];
        for mu in 0..counts.num_symbols {
            let total = counts.total(mu);
            if total == 0 {
                continue;
            }
            observed[mu] = true;
            let baseline = total as f64 / n_c as f64;
            for (a, slot) in g.row_mut(mu).iter_mut().enumerate() {
                *slot = (counts.count(mu, a) as f64 - baseline) / norm;
            }
        }
        Ok(Self {
            num_classes: n_c,
            num_points: counts.num_points,
            patch: counts.patch,
            g,
            observed,
        })
    }

    pub fn num_symbols(&self) -> usize {
        self.g.nrows()
    }

    pub fn observed(&self, mu: usize) -> bool {
        self.observed[mu]
    }

    pub fn observed_symbols(&self) -> Vec<usize> {
        (0..self.num_symbols()).filter(|&mu| self.observed[mu]).collect()
    }

    pub fn row(&self, mu: usize) -> ArrayView1<'_, f64> {
        self.g.row(mu)
    }

    /// Per-neuron updates `Δf_h(μ) = Σ_α a_{h,α} ĝ_α(μ)`, shape `(v^s, H)`.
    /// `readout` has shape `(H, n_c)`.
    pub fn delta_f(&self, readout: &Array2<f64>) -> Array2<f64> {
        self.g.dot(&readout.t())
    }

    /// Inner weights after one step at unit rate: all-ones plus `Δf`, shape `(v^s, H)`.
    pub fn updated_weights(&self, readout: &Array2<f64>) -> Array2<f64> {
        self.delta_f(readout) + 1.0
    }

    /// `‖ĝ(μ) - ĝ(ν)‖²`, the infinite-width limit of the per-neuron distance.
    pub fn distance(&self, mu: usize, nu: usize) -> Result<f64> {
        for t in [mu, nu] {
            if t >= self.num_symbols() || !self.observed[t] {
                return Err(RhmError::UnobservedTuple(t as u32));
            }
        }
        Ok(squared_distance(self.row(mu), self.row(nu)))
    }
}

pub(crate) fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn tuple_counts<'a, I>(grammar: &GrammarInstance, data: I, patch: Patch) -> Result<FrequencyTable>
where
    I: IntoIterator<Item = &'a Datum>,
{
    FrequencyTable::from_data(grammar.params(), data, patch, Granularity::Tuple)
}

/// Draws `p` training points (all of them at `p = P_max`) and returns `ĝ`.
pub fn one_step_representation(grammar: &GrammarInstance, p: u64, cfg: &OneStepConfig) -> Result<RepresentationTable> {
    let p_max = grammar.params().p_max()?;
    let counts = if p == p_max {
        exact_counts(grammar, cfg.patch, Granularity::Tuple)?
    } else {
        let data = sample_dataset(grammar, p, cfg.seed, false)?;
        tuple_counts(grammar, &data.data, cfg.patch)?
    };
    RepresentationTable::from_counts(&counts)
}

/// `ĝ` from an explicit training set.
pub fn representation_from_data(grammar: &GrammarInstance, data: &[Datum], patch: Patch) -> Result<RepresentationTable> {
    RepresentationTable::from_counts(&tuple_counts(grammar, data, patch)?)
}

/// Fixed readout `(H, n_c)` with i.i.d. standard Gaussian entries, optionally antithetic.
pub fn sample_readout(width: usize, num_classes: usize, seed: u64, antithetic: bool) -> Result<Array2<f64>> {
    if antithetic && !width.is_multiple_of(2) {
        return Err(RhmError::Config(format!("antithetic readout needs an even width, got {width}")));
    }
    let mut rng = derived_rng(seed, 0xa0);
    let mut a = Array2::from_shape_simple_fn((width, num_classes), || StandardNormal.sample(&mut rng));
    if antithetic {
        let half = width / 2;
        for h in 0..half {
            let row = a.row(h).to_owned();
            a.row_mut(h + half).assign(&-row);
        }
    }
    Ok(a)
}

#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_relative_deviation: f64,
    /// Closed form `Δf`, `(v^s, H)`.
    pub closed_form: Array2<f64>,
    /// `-H ∂L/∂w` from the literal network, `(v^s, H)`.
    pub numeric: Array2<f64>,
    /// Largest absolute network output at initialization.
    pub initial_output: f64,
}

/// Compares the closed form against one full-batch gradient of the literal network.
pub fn one_step_gradient_check(grammar: &GrammarInstance, p: u64, cfg: &OneStepConfig) -> Result<GradientCheck> {
    let Patch::At(j) = cfg.patch else {
        return Err(RhmError::Config("the gradient oracle needs a single patch".into()));
    };
    let params = grammar.params();
    let data = sample_dataset(grammar, p, cfg.seed, false)?;
    let table = representation_from_data(grammar, &data.data, cfg.patch)?;
    let n_c = params.num_classes;
    let h = cfg.width;
    let readout = sample_readout(h, n_c, cfg.seed, cfg.antithetic)?;

    let num_tuples = params.num_tuples()?;
    let s = params.branching;
    let mut x = Array2::zeros((data.len(), num_tuples));
    for (i, d) in data.data.iter().enumerate() {
        x[[i, grammar.tuple_code(&d.leaves[j * s..(j + 1) * s]) as usize]] = 1.0;
    }
    let arch = ArchSpec {
        kind: ArchKind::Fc,
        depth: 2,
        width: h,
        filter_size: 1,
        input_len: 1,
        channels: num_tuples,
        num_outputs: n_c,
    };
    let layers = vec![
        Layer {
            weight: Array2::ones((h, num_tuples)),
            bias: None,
            prefactor: 1.0,
            groups: 1,
        },
        Layer {
            weight: readout.t().to_owned(),
            bias: None,
            prefactor: 1.0 / h as f64,
            groups: 1,
        },
    ];
    let net = Network::from_layers(arch, layers)?;
    let initial_output = net.forward(&x)?.iter().fold(0.0f64, |acc, o| acc.max(o.abs()));
    let (_, grads) = net.loss_and_grad(&x, &data.labels())?;
    let numeric = grads.weight[0].t().mapv(|g| -(h as f64) * g);
    let closed_form = table.delta_f(&readout);
    let scale = closed_form.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let diff = (&closed_form - &numeric).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(GradientCheck {
        max_relative_deviation: if scale > 0.0 { diff / scale } else { diff },
        closed_form,
        numeric,
        initial_output,
    })
}

/// Numerical rank from singular values above `rel_tol · σ_max`.
pub fn matrix_rank(m: &Array2<f64>, rel_tol: f64) -> usize {
    let (r, c) = m.dim();
    if r == 0 || c == 0 {
        return 0;
    }
    let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
    let sv = dm.singular_values();
    let max = sv.iter().fold(0.0f64, |acc, &v| acc.max(v));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_tol * max).count()
}

/// Level-1 synonymic sensitivity of the representation `ĝ` at the table's
/// patch, evaluated on `test`: each point's tuple is replaced by a random
/// different synonym (a row swap), and the squared change is normalized by
/// the squared distance between random pairs of test points.
pub fn table_sensitivity<R: Rng + ?Sized>(
    table: &RepresentationTable,
    grammar: &GrammarInstance,
    test: &[Datum],
    rng: &mut R,
) -> Result<f64> {
    let Patch::At(j) = table.patch else {
        return Err(RhmError::Config("sensitivity needs a single patch".into()));
    };
    let m = grammar.params().multiplicity;
    if m < 2 {
        return Err(RhmError::NoSynonyms);
    }
    if test.len() < 2 {
        return Err(RhmError::EmptyTestSet);
    }
    let s = grammar.params().branching;
    let codes: Vec<usize> = test
        .iter()
        .map(|d| grammar.tuple_code(&d.leaves[j * s..(j + 1) * s]) as usize)
        .collect();
    let mut numerator = 0.0;
    for &mu in &codes {
        let (parent, k) = grammar
            .parent_of(1, mu as u32)
            .ok_or_else(|| RhmError::OutOfLanguage {
                level: 1,
                tuple: grammar.tuple_features(mu as u32),
            })?;
        let draw = rng.random_range(0..m as u32 - 1);
        let other = if draw >= k { draw + 1 } else { draw };
        let nu = grammar.rule(1, parent, other) as usize;
        numerator += squared_distance(table.row(mu), table.row(nu));
    }
    let perm = derangement(codes.len(), rng);
    let denominator: f64 = codes
        .iter()
        .zip(&perm)
        .map(|(&mu, &i)| squared_distance(table.row(mu), table.row(codes[i])))
        .sum();
    if denominator == 0.0 {
        return Err(RhmError::ConstantRepresentation);
    }
    Ok(numerator / denominator)
}

/// Mean `‖ĝ(μ) - ĝ(ν)‖²` over observed synonym pairs and over observed
/// non-synonym pairs of level-1 tuples.
pub fn pair_distances(table: &RepresentationTable, grammar: &GrammarInstance) -> (f64, f64) {
    let observed = table.observed_symbols();
    let parent = |mu: usize| grammar.parent_of(1, mu as u32).map(|(p, _)| p);
    let (mut syn, mut n_syn, mut other, mut n_other) = (0.0, 0usize, 0.0, 0usize);
    for (i, &mu) in observed.iter().enumerate() {
        for &nu in &observed[i + 1..] {
            let d = squared_distance(table.row(mu), table.row(nu));
            if parent(mu) == parent(nu) {
                syn += d;
                n_syn += 1;
            } else {
                other += d;
                n_other += 1;
            }
        }
    }
    (syn / n_syn.max(1) as f64, other / n_other.max(1) as f64)
}

/// Row sums `Σ_α ĝ_α(μ)`.
pub fn row_sums(table: &RepresentationTable) -> Array1<f64> {
    table.g.sum_axis(ndarray::Axis(1))
}
