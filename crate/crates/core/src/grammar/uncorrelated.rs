//! Balanced rule construction for the uncorrelated model.
//!
//! Each parent receives `m` distinct tuples such that, in every position,
//! every feature appears exactly `m/v` times. Tuples stay distinct across the
//! parents of a level. Assembly is a randomized depth-first search over tuple
//! choices with restarts.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{decode_tuple, RhmParams};
use crate::error::{Result, RhmError};

const MAX_RESTARTS: usize = 500;
const NODE_BUDGET: usize = 200_000;

pub(super) fn balanced_level<R: Rng + ?Sized>(params: &RhmParams, level: usize, rng: &mut R) -> Result<Vec<u32>> {
    let v = params.vocab_size;
    let m = params.multiplicity;
    let s = params.branching;
    if !m.is_multiple_of(v) {
        return Err(RhmError::Divisibility(format!(
            "level {level}: multiplicity {m} is not a multiple of the vocabulary size {v}"
        )));
    }
    let num_tuples = params.num_tuples()?;
    let parents = params.parents_at(level);
    let features: Vec<Vec<u32>> = (0..num_tuples as u32).map(|c| decode_tuple(c, v, s)).collect();

    'restart: for _ in 0..MAX_RESTARTS {
        let mut used = vec![false; num_tuples];
        let mut table = Vec::with_capacity(parents * m);
        for _ in 0..parents {
            let mut order: Vec<u32> = (0..num_tuples as u32).filter(|&c| !used[c as usize]).collect();
            order.shuffle(rng);
            let mut search = Search {
                features: &features,
                order: &order,
                counts: vec![vec![m / v; v]; s],
                chosen: Vec::with_capacity(m),
                m,
                budget: NODE_BUDGET,
            };
            if !search.run(0) {
                continue 'restart;
            }
            let mut chosen = search.chosen;
            chosen.shuffle(rng);
            for &c in &chosen {
                used[c as usize] = true;
            }
            table.extend(chosen);
        }
        return Ok(table);
    }
    Err(RhmError::Divisibility(format!(
        "level {level}: no balanced assignment found for {parents} parents after {MAX_RESTARTS} restarts"
    )))
}

struct Search<'a> {
    features: &'a [Vec<u32>],
    order: &'a [u32],
    counts: Vec<Vec<usize>>,
    chosen: Vec<u32>,
    m: usize,
    budget: usize,
}

impl Search<'_> {
    // Picks candidates in increasing position of `order` so each set is visited once.
    fn run(&mut self, start: usize) -> bool {
        if self.chosen.len() == self.m {
            return true;
        }
        let needed = self.m - self.chosen.len();
        for idx in start..self.order.len() {
            if self.order.len() - idx < needed {
                return false;
            }
            if self.budget == 0 {
                return false;
            }
            self.budget -= 1;
            let code = self.order[idx];
            let tuple = &self.features[code as usize];
            if tuple.iter().enumerate().any(|(pos, &f)| self.counts[pos][f as usize] == 0) {
                continue;
            }
            for (pos, &f) in tuple.iter().enumerate() {
                self.counts[pos][f as usize] -= 1;
            }
            self.chosen.push(code);
            if self.run(idx + 1) {
                return true;
            }
            self.chosen.pop();
            for (pos, &f) in tuple.iter().enumerate() {
                self.counts[pos][f as usize] += 1;
            }
        }
        false
    }
}
