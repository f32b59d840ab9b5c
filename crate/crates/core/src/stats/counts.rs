use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::grammar::{encode_tuple, Dataset, Datum, GrammarInstance, RhmParams};

/// Largest `P_max` for which exact counting by enumeration is allowed.
pub const EXACT_GUARD: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// A single input feature at one of the `d` positions.
    Feature,
    /// A whole `s`-tuple at one of the `d/s` patches.
    Tuple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Patch {
    At(usize),
    /// Summed over all positions.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Exact,
    Empirical { num_points: usize },
}

/// Joint occurrences `N_j(μ; α)` of a symbol and a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub patch: Patch,
    pub granularity: Granularity,
    pub provenance: Provenance,
    pub num_symbols: usize,
    pub num_classes: usize,
    /// Number of data counted.
    pub num_points: usize,
    /// Positions contributing per datum: 1, or all of them when pooled.
    pub positions_counted: usize,
    joint: Vec<u64>,
    marginal: Vec<u64>,
    class_totals: Vec<u64>,
}

impl FrequencyTable {
    pub fn from_data<I>(params: &RhmParams, data: I, patch: Patch, granularity: Granularity) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Borrow<Datum>,
    {
        let width = match granularity {
            Granularity::Feature => 1,
            Granularity::Tuple => params.branching,
        };
        let rows = data.into_iter().map(|datum| {
            let datum = datum.borrow();
            (datum.leaves.clone(), datum.label)
        });
        let mut table = Self::from_sequences(rows, params.vocab_size, width, params.input_dim(), patch, params.num_classes)?;
        table.granularity = granularity;
        Ok(table)
    }

    /// Counts over arbitrary symbol sequences of length `seq_len` with
    /// features in `[0, vocab_size)`, grouped into blocks of `width`.
    pub fn from_sequences<I, S>(
        rows: I,
        vocab_size: usize,
        width: usize,
        seq_len: usize,
        patch: Patch,
        num_classes: usize,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: AsRef<[u32]>,
    {
        let num_symbols = vocab_size
            .checked_pow(width as u32)
            .ok_or(RhmError::Overflow("number of symbols"))?;
        let positions = seq_len / width;
        if let Patch::At(j) = patch {
            if j >= positions {
                return Err(RhmError::InvalidParams(format!("patch {j} outside 0..{positions}")));
            }
        }
        let n_c = num_classes;
        let mut joint = vec![0u64; num_symbols * n_c];
        let mut marginal = vec![0u64; num_symbols];
        let mut class_totals = vec![0u64; n_c];
        let mut count = 0usize;
        for (seq, label) in rows {
            let seq = seq.as_ref();
            if label >= n_c || seq.len() != seq_len {
                return Err(RhmError::Shape(format!(
                    "row of length {} with label {label}; expected length {seq_len} and fewer than {n_c} classes",
                    seq.len()
                )));
            }
            let mut add = |j: usize| {
                let symbol = encode_tuple(&seq[j * width..(j + 1) * width], vocab_size) as usize;
                joint[symbol * n_c + label] += 1;
                marginal[symbol] += 1;
                class_totals[label] += 1;
            };
            match patch {
                Patch::At(j) => add(j),
                Patch::Pooled => (0..positions).for_each(add),
            }
            count += 1;
        }
        Ok(Self {
            patch,
            granularity: if width == 1 { Granularity::Feature } else { Granularity::Tuple },
            provenance: Provenance::Empirical { num_points: count },
            num_symbols,
            num_classes: n_c,
            num_points: count,
            positions_counted: match patch {
                Patch::At(_) => 1,
                Patch::Pooled => positions,
            },
            joint,
            marginal,
            class_totals,
        })
    }

    pub fn from_dataset(params: &RhmParams, data: &Dataset, patch: Patch, granularity: Granularity) -> Result<Self> {
        Self::from_data(params, &data.data, patch, granularity)
    }

    pub fn count(&self, symbol: usize, class: usize) -> u64 {
        self.joint[symbol * self.num_classes + class]
    }

    /// `N_j(μ)`, summed over classes.
    pub fn total(&self, symbol: usize) -> u64 {
        self.marginal[symbol]
    }

    pub fn observed(&self, symbol: usize) -> bool {
        self.marginal[symbol] > 0
    }

    /// Symbols that never occur (flagged rather than given a frequency).
    pub fn unobserved(&self) -> Vec<usize> {
        (0..self.num_symbols).filter(|&mu| !self.observed(mu)).collect()
    }

    /// `Σ_μ N_j(μ; α)` per class.
    pub fn class_totals(&self) -> &[u64] {
        &self.class_totals
    }

    /// `f_j(α|μ)`, or `None` for unobserved symbols.
    pub fn frequency(&self, class: usize, symbol: usize) -> Option<f64> {
        let total = self.total(symbol);
        (total > 0).then(|| self.count(symbol, class) as f64 / total as f64)
    }

    /// The counts of symbol `μ` across classes.
    pub fn row(&self, symbol: usize) -> &[u64] {
        &self.joint[symbol * self.num_classes..(symbol + 1) * self.num_classes]
    }
}

/// Exact counts over the full dataset of `grammar`.
pub fn exact_counts(grammar: &GrammarInstance, patch: Patch, granularity: Granularity) -> Result<FrequencyTable> {
    let p_max = grammar.params().p_max()?;
    if p_max > EXACT_GUARD {
        return Err(RhmError::EnumerationGuard {
            p_max,
            guard: EXACT_GUARD,
        });
    }
    let mut table = FrequencyTable::from_data(grammar.params(), grammar.enumerate()?, patch, granularity)?;
    table.provenance = Provenance::Exact;
    Ok(table)
}

/// `N_i(μ_child; μ_parent)` of the level-`level` rule: occurrences of each
/// child feature at `position` among the tuples of each parent, `[parent][child]`.
pub fn rule_occurrences(grammar: &GrammarInstance, level: usize, position: usize) -> Vec<Vec<u32>> {
    let params = grammar.params();
    let v = params.vocab_size;
    (0..params.parents_at(level) as u32)
        .map(|parent| {
            let mut row = vec![0u32; v];
            for &code in grammar.synonyms(level, parent) {
                row[grammar.tuple_features(code)[position] as usize] += 1;
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{sample_dataset, sample_grammar, sample_uncorrelated_grammar};

    #[test]
    fn depth_one_tuple_frequencies_are_indicators() {
        let p = RhmParams::new(3, 2, 3, 2, 1).with_seed(2);
        let g = sample_grammar(&p).unwrap();
        let t = exact_counts(&g, Patch::At(0), Granularity::Tuple).unwrap();
        for mu in 0..t.num_symbols {
            if let Some((parent, _)) = g.parent_of(1, mu as u32) {
                for a in 0..3 {
                    assert_eq!(t.frequency(a, mu), Some(if a == parent as usize { 1.0 } else { 0.0 }));
                }
            } else {
                assert!(!t.observed(mu));
            }
        }
    }

    #[test]
    fn empirical_at_full_size_equals_exact() {
        let p = RhmParams::new(3, 3, 2, 2, 2).with_seed(5);
        let g = sample_grammar(&p).unwrap();
        let full = sample_dataset(&g, p.p_max().unwrap(), 1, false).unwrap();
        for gran in [Granularity::Feature, Granularity::Tuple] {
            for patch in [Patch::At(1), Patch::Pooled] {
                let e = FrequencyTable::from_dataset(&p, &full, patch, gran).unwrap();
                let x = exact_counts(&g, patch, gran).unwrap();
                assert_eq!(e.joint, x.joint);
                assert_eq!(e.marginal, x.marginal);
            }
        }
    }

    #[test]
    fn uncorrelated_single_features_carry_no_class_information() {
        let p = RhmParams::new(2, 2, 2, 2, 2).with_seed(1);
        let g = sample_uncorrelated_grammar(&p).unwrap();
        for j in 0..4 {
            let t = exact_counts(&g, Patch::At(j), Granularity::Feature).unwrap();
            for mu in 0..2 {
                for a in 0..2 {
                    assert_eq!(t.frequency(a, mu), Some(0.5));
                }
            }
        }
    }

    #[test]
    fn guard_refuses_large_enumeration() {
        let p = RhmParams::new(8, 8, 8, 2, 3);
        let g = sample_grammar(&p).unwrap();
        assert!(matches!(
            exact_counts(&g, Patch::At(0), Granularity::Feature),
            Err(RhmError::EnumerationGuard { .. })
        ));
    }

    #[test]
    fn patch_out_of_range() {
        let p = RhmParams::new(2, 2, 2, 2, 2);
        let g = sample_grammar(&p).unwrap();
        assert!(exact_counts(&g, Patch::At(2), Granularity::Tuple).is_err());
        assert!(exact_counts(&g, Patch::At(3), Granularity::Feature).is_ok());
    }
}
