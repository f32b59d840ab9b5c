//! Deterministic seed derivation.
//!
//! Every stochastic routine takes an explicit seed. Sub-tasks (levels of a
//! grammar, replicas of a sweep, restarts of k-means) get their own stream
//! through [`derive_seed`], so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-task `task` of a job seeded with `master`.
pub fn derive_seed(master: u64, task: u64) -> u64 {
    mix64(mix64(master) ^ mix64(task.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, task: u64) -> Rng {
    rng_from_seed(derive_seed(master, task))
}

/// Uniform cyclic permutation of `0..n` (Sattolo); no element maps to itself for `n ≥ 2`.
pub fn derangement<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}
