//! k-means on one-step representations and the layerwise
//! step-then-cluster learner built on it.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::grammar::{sample_split, GrammarInstance};
use crate::nn::TEST_CAP;
use crate::onestep::RepresentationTable;
use crate::seed::{derive_seed, derived_rng, rng_from_seed};
use crate::stats::{FrequencyTable, Patch};

pub const RESTARTS: usize = 20;
const MAX_ITERS: usize = 200;

/// Cluster ids of the observed symbols of a [`RepresentationTable`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster of each symbol; `None` for unobserved symbols.
    pub assignment: Vec<Option<usize>>,
    /// `k` rows of length `n_c`.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// All observed rows coincide, so the partition carries no information.
    pub degenerate: bool,
    pub purity: Option<f64>,
}

impl ClusterAssignment {
    /// Nearest centroid to `row`, ties to the lowest id.
    pub fn nearest(&self, row: ArrayView1<'_, f64>) -> usize {
        nearest(&self.centroids, row.as_slice().expect("contiguous row")).0
    }

    /// Cluster of `symbol`, falling back to the centroid nearest to the
    /// origin (an unobserved tuple has `ĝ = 0`).
    pub fn cluster_of(&self, symbol: usize) -> usize {
        self.assignment
            .get(symbol)
            .copied()
            .flatten()
            .unwrap_or_else(|| nearest(&self.centroids, &vec![0.0; self.centroids[0].len()]).0)
    }

    /// Same partition with cluster `c` renamed `perm[c]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let mut centroids = self.centroids.clone();
        for (c, row) in self.centroids.iter().enumerate() {
            centroids[perm[c]] = row.clone();
        }
        Self {
            assignment: self.assignment.iter().map(|a| a.map(|c| perm[c])).collect(),
            centroids,
            ..self.clone()
        }
    }

    /// Purity against `truth[symbol]`: the fraction of symbols with a known
    /// group whose group is the majority group of their cluster. Unobserved
    /// symbols count with the cluster they would be mapped to.
    pub fn purity_against(&self, truth: &[Option<u32>]) -> f64 {
        let mut tallies: Vec<std::collections::BTreeMap<u32, usize>> = vec![Default::default(); self.k];
        let mut total = 0usize;
        for (symbol, t) in truth.iter().enumerate().take(self.assignment.len()) {
            if let Some(t) = t {
                *tallies[self.cluster_of(symbol)].entry(*t).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return 0.0;
        }
        tallies.iter().map(|t| t.values().copied().max().unwrap_or(0)).sum::<usize>() as f64 / total as f64
    }

    pub fn with_truth(mut self, truth: &[Option<u32>]) -> Self {
        self.purity = Some(self.purity_against(truth));
        self
    }
}

/// Parent of every level-`level` tuple code, `None` outside the language.
pub fn grammar_truth(grammar: &GrammarInstance, level: usize) -> Result<Vec<Option<u32>>> {
    let n = grammar.params().num_tuples()?;
    Ok((0..n as u32).map(|code| grammar.parent_of(level, code).map(|(p, _)| p)).collect())
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq(centroid, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

struct Fit {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
}

fn seed_plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> Fit {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (label, p) in labels.iter_mut().zip(points) {
            let c = nearest(&centroids, p).0;
            changed |= *label != c;
            *label = c;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&c, p) in labels.iter().zip(points) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // empty cluster: move it onto the point worst served by its centroid
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq(&points[i], &centroids[labels[i]]);
                        let dj = sq(&points[j], &centroids[labels[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("nonempty");
                if sq(&points[far], &centroids[labels[far]]) > 0.0 {
                    centroids[c] = points[far].clone();
                    labels[far] = c;
                }
            }
        }
    }
    let inertia = labels.iter().zip(points).map(|(&c, p)| sq(p, &centroids[c])).sum();
    Fit {
        labels,
        centroids,
        inertia,
    }
}

/// k-means with k-means++ seeding over `points`; the lowest inertia over
/// [`RESTARTS`] restarts is kept, ties to the earliest restart.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    if k == 0 || points.len() < k {
        return Err(RhmError::TooFewPoints { k, observed: points.len() });
    }
    let mut rng = rng_from_seed(seed);
    let mut best: Option<Fit> = None;
    for _ in 0..RESTARTS {
        let fit = lloyd(points, seed_plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let best = best.expect("at least one restart");
    Ok((best.labels, best.centroids, best.inertia))
}

/// k-means on the `ĝ` rows of the observed symbols of `table`.
pub fn cluster_representations(table: &RepresentationTable, k: usize, seed: u64) -> Result<ClusterAssignment> {
    // canonical point order, so the result does not depend on how symbols are numbered
    let mut observed = table.observed_symbols();
    observed.sort_by(|&a, &b| {
        table
            .row(a)
            .iter()
            .zip(table.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let points: Vec<Vec<f64>> = observed.iter().map(|&mu| table.row(mu).to_vec()).collect();
    let (labels, centroids, inertia) = kmeans(&points, k, seed)?;
    let degenerate = points.iter().all(|p| p == &points[0]);
    let mut assignment = vec![None; table.num_symbols()];
    for (&mu, &c) in observed.iter().zip(&labels) {
        assignment[mu] = Some(c);
    }
    Ok(ClusterAssignment {
        k,
        assignment,
        centroids,
        inertia,
        degenerate,
        purity: None,
    })
}

/// Permutation `perm` with `perm[c]` the id in `reference` matched to
/// cluster `c` of `other`, by greedy closest-pair matching of centroids.
pub fn align_clusters(reference: &ClusterAssignment, other: &ClusterAssignment) -> Vec<usize> {
    let k = other.k;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
    for (c, a) in other.centroids.iter().enumerate() {
        for (r, b) in reference.centroids.iter().enumerate() {
            pairs.push((sq(a, b), c, r));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut perm = vec![usize::MAX; k];
    let mut taken = vec![false; k];
    for (_, c, r) in pairs {
        if perm[c] == usize::MAX && !taken[r] {
            perm[c] = r;
            taken[r] = true;
        }
    }
    perm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerwiseConfig {
    pub seed: u64,
    /// Cluster once on counts pooled over all positions instead of per position.
    pub pooled: bool,
    pub test_cap: u64,
    /// Apply a random permutation of the cluster ids at every level.
    pub relabel_seed: Option<u64>,
}

impl Default for LayerwiseConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pooled: false,
            test_cap: TEST_CAP,
            relabel_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: usize,
    /// One assignment per position (a single one when pooled).
    pub assignments: Vec<ClusterAssignment>,
    /// Mean purity over positions.
    pub purity: f64,
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseResult {
    pub levels: Vec<LevelResult>,
    pub test_error: f64,
    pub num_train: usize,
    pub num_test: usize,
    /// No held-out data remained (`P = P_max`), so the error is measured on the training set.
    pub evaluated_on_train: bool,
}

/// Majority of `truth` among the occurrences of each symbol at `positions`.
fn majority_truth(
    seqs: &[Vec<u32>],
    truth: &[Vec<u32>],
    vocab: usize,
    s: usize,
    positions: &[usize],
) -> Vec<Option<u32>> {
    let num_symbols = vocab.pow(s as u32);
    let mut tallies: Vec<std::collections::BTreeMap<u32, usize>> = vec![Default::default(); num_symbols];
    for (seq, t) in seqs.iter().zip(truth) {
        for &j in positions {
            let code = crate::grammar::encode_tuple(&seq[j * s..(j + 1) * s], vocab) as usize;
            *tallies[code].entry(t[j]).or_default() += 1;
        }
    }
    tallies
        .iter()
        .map(|t| t.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&id, _)| id))
        .collect()
}

fn coarsen(seq: &[u32], vocab: usize, s: usize, maps: &[ClusterAssignment]) -> Vec<u32> {
    seq.chunks(s)
        .enumerate()
        .map(|(j, block)| {
            let map = if maps.len() == 1 { &maps[0] } else { &maps[j] };
            map.cluster_of(crate::grammar::encode_tuple(block, vocab) as usize) as u32
        })
        .collect()
}

/// Learns the hierarchy bottom-up from `p` training points: at each level a
/// one-step representation of every patch is clustered into as many groups as
/// there are parent features, and each tuple is replaced by its cluster id.
/// After the top level, each cluster predicts the majority class of its
/// training data.
pub fn layerwise_learn(grammar: &GrammarInstance, p: u64, cfg: &LayerwiseConfig) -> Result<LayerwiseResult> {
    let params = *grammar.params();
    let (train, test) = sample_split(grammar, p, cfg.test_cap, cfg.seed, false)?;
    if train.is_empty() {
        return Err(RhmError::Config("no training points".into()));
    }
    let s = params.branching;
    let n_c = params.num_classes;
    let labels = train.labels();
    let evaluated_on_train = test.is_empty();
    let eval_set = if evaluated_on_train { &train } else { &test };

    let mut train_seqs: Vec<Vec<u32>> = train.data.iter().map(|d| d.leaves.clone()).collect();
    let mut eval_seqs: Vec<Vec<u32>> = eval_set.data.iter().map(|d| d.leaves.clone()).collect();
    let mut vocab = params.vocab_size;
    let mut levels = Vec::with_capacity(params.depth);

    for level in 1..=params.depth {
        let seq_len = train_seqs[0].len();
        let positions = seq_len / s;
        let k = params.parents_at(level);
        let truth: Vec<Vec<u32>> = train
            .data
            .iter()
            .map(|d| grammar.representation(&d.leaves, level + 1))
            .collect::<Result<_>>()?;
        let patches: Vec<Patch> = if cfg.pooled {
            vec![Patch::Pooled]
        } else {
            (0..positions).map(Patch::At).collect()
        };
        let mut maps = Vec::with_capacity(patches.len());
        for (i, &patch) in patches.iter().enumerate() {
            let counts = FrequencyTable::from_sequences(
                train_seqs.iter().zip(labels.iter().copied()),
                vocab,
                s,
                seq_len,
                patch,
                n_c,
            )?;
            let table = RepresentationTable::from_counts(&counts)?;
            let cell_seed = derive_seed(cfg.seed, (level * 1_000_003 + i) as u64);
            let used: Vec<usize> = match patch {
                Patch::At(j) => vec![j],
                Patch::Pooled => (0..positions).collect(),
            };
            let truth_here = if level == 1 {
                grammar_truth(grammar, 1)?
            } else {
                majority_truth(&train_seqs, &truth, vocab, s, &used)
            };
            let mut map = cluster_representations(&table, k, cell_seed)?.with_truth(&truth_here);
            if let Some(reference) = maps.first() {
                map = map.relabel(&align_clusters(reference, &map));
            }
            if let Some(relabel) = cfg.relabel_seed {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut derived_rng(relabel, cell_seed));
                map = map.relabel(&perm);
            }
            maps.push(map);
        }
        train_seqs = train_seqs.iter().map(|q| coarsen(q, vocab, s, &maps)).collect();
        eval_seqs = eval_seqs.iter().map(|q| coarsen(q, vocab, s, &maps)).collect();
        vocab = k;
        levels.push(LevelResult {
            level,
            purity: maps.iter().map(|m| m.purity.unwrap_or(0.0)).sum::<f64>() / maps.len() as f64,
            inertia: maps.iter().map(|m| m.inertia).sum(),
            assignments: maps,
        });
    }

    let mut votes = Array2::<usize>::zeros((vocab, n_c));
    for (seq, &label) in train_seqs.iter().zip(&labels) {
        votes[[seq[0] as usize, label]] += 1;
    }
    let predict: Vec<usize> = votes
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (a, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    let wrong = eval_seqs
        .iter()
        .zip(eval_set.labels())
        .filter(|(seq, label)| predict[seq[0] as usize] != *label)
        .count();
    Ok(LayerwiseResult {
        levels,
        test_error: wrong as f64 / eval_seqs.len() as f64,
        num_train: train.len(),
        num_test: test.len(),
        evaluated_on_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_separates_obvious_groups() {
        let points: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let c = (i % 3) as f64 * 10.0;
                vec![c + (i as f64) * 1e-3, -c]
            })
            .collect();
        let (labels, _, inertia) = kmeans(&points, 3, 4).unwrap();
        for i in 0..30 {
            assert_eq!(labels[i], labels[i % 3]);
        }
        assert!(inertia < 1e-2);
    }

    #[test]
    fn too_few_points() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&points, 3, 0), Err(RhmError::TooFewPoints { k: 3, observed: 2 })));
    }

    #[test]
    fn identical_points_collapse_to_one_cluster() {
        let points = vec![vec![0.0, 0.0]; 6];
        let (labels, _, inertia) = kmeans(&points, 3, 1).unwrap();
        assert_eq!(inertia, 0.0);
        assert!(labels.iter().all(|&c| c == labels[0]));
    }

    #[test]
    fn alignment_recovers_a_permutation() {
        let a = ClusterAssignment {
            k: 3,
            assignment: vec![Some(0), Some(1), Some(2)],
            centroids: vec![vec![0.0], vec![5.0], vec![9.0]],
            inertia: 0.0,
            degenerate: false,
            purity: None,
        };
        let b = a.relabel(&[2, 0, 1]);
        let perm = align_clusters(&a, &b);
        assert_eq!(b.relabel(&perm), a);
    }
}
