//! Random Hierarchy Model instances.
//!
//! A grammar with `L` levels maps each class label to `m` synonymous
//! `s`-tuples of level-`L` features, each level-`ℓ` feature to `m` tuples of
//! level-`(ℓ-1)` features, down to the input features at level 1. Levels are
//! numbered from 1 (rules producing the input) to `L` (rules producing the
//! level-`L` representation of a class).
//!
//! Tuples are stored as integer codes in `[0, v^s)`, with the first element
//! as the most significant base-`v` digit.

mod dataset;
mod uncorrelated;

pub use dataset::{encode_one_hot, sample_dataset, sample_indices, sample_split, whiten_value, Dataset, DatasetMeta};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::seed::{derived_rng, Rng as SeededRng};

/// Upper bound on `v^s` for rule materialization.
pub const MAX_TUPLES: usize = 1 << 24;

/// Parameters of one Random Hierarchy Model task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RhmParams {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub multiplicity: usize,
    pub branching: usize,
    pub depth: usize,
    pub seed: u64,
}

impl RhmParams {
    pub fn new(vocab_size: usize, multiplicity: usize, num_classes: usize, branching: usize, depth: usize) -> Self {
        Self {
            num_classes,
            vocab_size,
            multiplicity,
            branching,
            depth,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The maximal case `n_c = v`, `m = v^(s-1)`.
    pub fn maximal(vocab_size: usize, branching: usize, depth: usize) -> Self {
        let m = vocab_size.pow(branching as u32 - 1);
        Self::new(vocab_size, m, vocab_size, branching, depth)
    }

    /// Input dimension `d = s^L`.
    pub fn input_dim(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    /// Number of tuple-generating nodes in a derivation tree, `(d-1)/(s-1)`.
    pub fn num_nodes(&self) -> usize {
        (self.input_dim() - 1) / (self.branching - 1)
    }

    /// `v^s`, the number of distinct `s`-tuples.
    pub fn num_tuples(&self) -> Result<usize> {
        self.vocab_size
            .checked_pow(self.branching as u32)
            .ok_or(RhmError::Overflow("v^s"))
    }

    /// Number of parent features at a level (1-based).
    pub fn parents_at(&self, level: usize) -> usize {
        if level == self.depth {
            self.num_classes
        } else {
            self.vocab_size
        }
    }

    /// Total number of data, `n_c · m^((d-1)/(s-1))`.
    pub fn p_max(&self) -> Result<u64> {
        let per_class = (self.multiplicity as u64)
            .checked_pow(self.num_nodes() as u32)
            .ok_or(RhmError::Overflow("P_max"))?;
        per_class
            .checked_mul(self.num_classes as u64)
            .ok_or(RhmError::Overflow("P_max"))
    }

    /// Predicted sample complexity `n_c · m^L`.
    pub fn p_star(&self) -> f64 {
        self.num_classes as f64 * (self.multiplicity as f64).powi(self.depth as i32)
    }

    /// Random-guess error `1 - 1/n_c`.
    pub fn eps_rand(&self) -> f64 {
        1.0 - 1.0 / self.num_classes as f64
    }

    /// Checks the structural requirements and the non-ambiguity capacity of every level.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(RhmError::InvalidParams(msg.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.multiplicity == 0 {
            return bad("multiplicity must be positive");
        }
        if self.branching < 2 {
            return bad("branching must be at least 2");
        }
        if self.depth == 0 {
            return bad("depth must be positive");
        }
        let available = self.num_tuples()?;
        if available > MAX_TUPLES {
            return Err(RhmError::InvalidParams(format!(
                "v^s = {available} exceeds the materialization limit {MAX_TUPLES}"
            )));
        }
        for level in 1..=self.depth {
            let parents = self.parents_at(level);
            if parents * self.multiplicity > available {
                return Err(RhmError::Capacity {
                    level,
                    parents,
                    multiplicity: self.multiplicity,
                    available,
                });
            }
        }
        self.branching
            .checked_pow(self.depth as u32)
            .ok_or(RhmError::Overflow("s^L"))?;
        Ok(())
    }
}

/// Whether rules were drawn uniformly or built with exact per-position balance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Correlated,
    Uncorrelated,
}

/// One generated datum with its derivation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datum {
    /// Input features, `d` entries in `[0, v)`.
    pub leaves: Vec<u32>,
    pub label: usize,
    /// One synonym choice per tuple-generating node, breadth-first, left to right.
    pub derivation: Vec<u32>,
}

/// A sampled set of composition rules for all levels.
#[derive(Clone, Debug)]
pub struct GrammarInstance {
    params: RhmParams,
    kind: RuleKind,
    // rules[level-1][parent * m + k] = tuple code
    rules: Vec<Vec<u32>>,
    // parent_of[level-1][tuple code] = (parent, synonym index)
    parent_of: Vec<Vec<Option<(u32, u32)>>>,
}

/// Samples a grammar with rules drawn uniformly at random, seeded by `params.seed`.
pub fn sample_grammar(params: &RhmParams) -> Result<GrammarInstance> {
    params.validate()?;
    let num_tuples = params.num_tuples()?;
    let m = params.multiplicity;
    let mut rules = Vec::with_capacity(params.depth);
    for level in 1..=params.depth {
        let mut rng = derived_rng(params.seed, level as u64);
        let take = params.parents_at(level) * m;
        let mut pool: Vec<u32> = (0..num_tuples as u32).collect();
        let (chosen, _) = pool.partial_shuffle(&mut rng, take);
        rules.push(chosen.to_vec());
    }
    GrammarInstance::from_rules(*params, RuleKind::Correlated, rules)
}

/// Samples a grammar where, at every level, each parent's `m` tuples contain every
/// feature exactly `m/v` times in each position.
pub fn sample_uncorrelated_grammar(params: &RhmParams) -> Result<GrammarInstance> {
    params.validate()?;
    let mut rules = Vec::with_capacity(params.depth);
    for level in 1..=params.depth {
        let mut rng = derived_rng(params.seed, level as u64 ^ 0xdead_beef);
        rules.push(uncorrelated::balanced_level(params, level, &mut rng)?);
    }
    GrammarInstance::from_rules(*params, RuleKind::Uncorrelated, rules)
}

impl GrammarInstance {
    /// Builds an instance from explicit per-level rule tables
    /// (`rules[level-1][parent * m + k]` is a tuple code).
    pub fn from_rules(params: RhmParams, kind: RuleKind, rules: Vec<Vec<u32>>) -> Result<Self> {
        params.validate()?;
        if rules.len() != params.depth {
            return Err(RhmError::InvalidParams(format!(
                "expected {} rule levels, got {}",
                params.depth,
                rules.len()
            )));
        }
        let num_tuples = params.num_tuples()?;
        let m = params.multiplicity;
        let mut parent_of = Vec::with_capacity(params.depth);
        for (idx, table) in rules.iter().enumerate() {
            let level = idx + 1;
            if table.len() != params.parents_at(level) * m {
                return Err(RhmError::InvalidParams(format!(
                    "level {level}: expected {} tuples, got {}",
                    params.parents_at(level) * m,
                    table.len()
                )));
            }
            let mut inverse = vec![None; num_tuples];
            for (slot, &code) in table.iter().enumerate() {
                let cell = inverse
                    .get_mut(code as usize)
                    .ok_or_else(|| RhmError::InvalidParams(format!("level {level}: tuple code {code} out of range")))?;
                if cell.is_some() {
                    return Err(RhmError::InvalidParams(format!(
                        "level {level}: tuple code {code} assigned twice (ambiguous rule set)"
                    )));
                }
                *cell = Some(((slot / m) as u32, (slot % m) as u32));
            }
            parent_of.push(inverse);
        }
        Ok(Self {
            params,
            kind,
            rules,
            parent_of,
        })
    }

    pub fn params(&self) -> &RhmParams {
        &self.params
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    /// Tuple code produced by `parent` at `level` with synonym index `k`.
    pub fn rule(&self, level: usize, parent: u32, k: u32) -> u32 {
        self.rules[level - 1][parent as usize * self.params.multiplicity + k as usize]
    }

    /// All tuple codes of `parent` at `level`, in synonym order.
    pub fn synonyms(&self, level: usize, parent: u32) -> &[u32] {
        let m = self.params.multiplicity;
        let start = parent as usize * m;
        &self.rules[level - 1][start..start + m]
    }

    /// `(parent, synonym index)` of a tuple code at `level`, if the tuple is used.
    pub fn parent_of(&self, level: usize, code: u32) -> Option<(u32, u32)> {
        self.parent_of[level - 1].get(code as usize).copied().flatten()
    }

    pub fn tuple_code(&self, tuple: &[u32]) -> u32 {
        encode_tuple(tuple, self.params.vocab_size)
    }

    pub fn tuple_features(&self, code: u32) -> Vec<u32> {
        decode_tuple(code, self.params.vocab_size, self.params.branching)
    }

    /// Applies the level-`level` rule inverse to consecutive `s`-blocks of `seq`.
    pub fn fold_level(&self, level: usize, seq: &[u32]) -> Result<Vec<u32>> {
        let s = self.params.branching;
        if !seq.len().is_multiple_of(s) {
            return Err(RhmError::Shape(format!("sequence of length {} is not a multiple of s = {s}", seq.len())));
        }
        seq.chunks(s)
            .map(|block| {
                let code = self.tuple_code(block);
                self.parent_of(level, code).map(|(p, _)| p).ok_or_else(|| RhmError::OutOfLanguage {
                    level,
                    tuple: block.to_vec(),
                })
            })
            .collect()
    }

    /// Representation of `leaves` at `level` (1 = the leaves themselves, `L+1` = the class).
    pub fn representation(&self, leaves: &[u32], level: usize) -> Result<Vec<u32>> {
        if leaves.len() != self.params.input_dim() {
            return Err(RhmError::Shape(format!(
                "expected {} leaves, got {}",
                self.params.input_dim(),
                leaves.len()
            )));
        }
        let mut seq = leaves.to_vec();
        for l in 1..level {
            seq = self.fold_level(l, &seq)?;
        }
        Ok(seq)
    }

    /// Class of an input sequence obtained by folding through all levels.
    pub fn label_of(&self, leaves: &[u32]) -> Result<usize> {
        let top = self.representation(leaves, self.params.depth + 1)?;
        Ok(top[0] as usize)
    }

    /// Decodes a global datum index in `[0, P_max)`.
    ///
    /// The index is a mixed-radix word: the class is the most significant digit
    /// (radix `n_c`), followed by one radix-`m` digit per node in breadth-first order.
    pub fn decode_datum(&self, index: u64) -> Result<Datum> {
        let p_max = self.params.p_max()?;
        if index >= p_max {
            return Err(RhmError::IndexOutOfRange { index, p_max });
        }
        let m = self.params.multiplicity as u64;
        let nodes = self.params.num_nodes();
        let mut derivation = vec![0u32; nodes];
        let mut rest = index;
        for slot in derivation.iter_mut().rev() {
            *slot = (rest % m) as u32;
            rest /= m;
        }
        let label = rest as usize;
        let leaves = self.expand(label, &derivation);
        Ok(Datum {
            leaves,
            label,
            derivation,
        })
    }

    /// Inverse of [`decode_datum`](Self::decode_datum).
    pub fn index_of(&self, datum: &Datum) -> u64 {
        let m = self.params.multiplicity as u64;
        datum
            .derivation
            .iter()
            .fold(datum.label as u64, |acc, &c| acc * m + c as u64)
    }

    /// Expands a class and derivation top-down into leaves.
    pub fn expand(&self, label: usize, derivation: &[u32]) -> Vec<u32> {
        let s = self.params.branching;
        let depth = self.params.depth;
        let mut current = vec![label as u32];
        let mut offset = 0;
        for t in 0..depth {
            let level = depth - t;
            let mut next = Vec::with_capacity(current.len() * s);
            for (j, &feature) in current.iter().enumerate() {
                let code = self.rule(level, feature, derivation[offset + j]);
                push_tuple(&mut next, code, self.params.vocab_size, s);
            }
            offset += current.len();
            current = next;
        }
        current
    }

    /// Iterator over every datum, in index order.
    pub fn enumerate(&self) -> Result<impl Iterator<Item = Datum> + '_> {
        let p_max = self.params.p_max()?;
        Ok((0..p_max).map(move |i| self.decode_datum(i).expect("index in range")))
    }

    /// Replaces every level-`level` tuple of the derivation with a uniformly
    /// random different synonym, keeping the choices below unchanged.
    pub fn synonym_exchange<R: Rng + ?Sized>(&self, datum: &Datum, level: usize, rng: &mut R) -> Result<Datum> {
        let m = self.params.multiplicity;
        if m < 2 {
            return Err(RhmError::NoSynonyms);
        }
        let depth = self.params.depth;
        if level == 0 || level > depth {
            return Err(RhmError::InvalidParams(format!("exchange level {level} outside 1..={depth}")));
        }
        let s = self.params.branching;
        let t = depth - level;
        let offset = (s.pow(t as u32) - 1) / (s - 1);
        let count = s.pow(t as u32);
        let mut derivation = datum.derivation.clone();
        for choice in &mut derivation[offset..offset + count] {
            // uniform over the m-1 other synonyms
            let draw = rng.random_range(0..m as u32 - 1);
            *choice = if draw >= *choice { draw + 1 } else { draw };
        }
        let leaves = self.expand(datum.label, &derivation);
        Ok(Datum {
            leaves,
            label: datum.label,
            derivation,
        })
    }
}

pub fn encode_tuple(tuple: &[u32], vocab_size: usize) -> u32 {
    tuple.iter().fold(0u32, |acc, &f| acc * vocab_size as u32 + f)
}

pub fn decode_tuple(code: u32, vocab_size: usize, branching: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(branching);
    push_tuple(&mut out, code, vocab_size, branching);
    out
}

fn push_tuple(out: &mut Vec<u32>, code: u32, vocab_size: usize, branching: usize) {
    let start = out.len();
    out.resize(start + branching, 0);
    let mut rest = code;
    for slot in out[start..].iter_mut().rev() {
        *slot = rest % vocab_size as u32;
        rest /= vocab_size as u32;
    }
}

/// Convenience RNG for exchanges when only a seed is at hand.
pub fn exchange_rng(seed: u64) -> SeededRng {
    derived_rng(seed, 0x5e15)
}
