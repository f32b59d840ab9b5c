use proptest::prelude::*;
use rhm_core::grammar::{sample_dataset, sample_grammar, sample_uncorrelated_grammar, RhmParams};
use rhm_core::onestep::{
    matrix_rank, one_step_gradient_check, one_step_representation, pair_distances, row_sums, sample_readout,
    table_sensitivity, OneStepConfig,
};
use rhm_core::seed::rng_from_seed;
use rhm_core::stats::{rule_occurrences, Patch};

#[test]
fn closed_form_matches_network_gradient() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(3);
    let g = sample_grammar(&p).unwrap();
    let cfg = OneStepConfig::default();
    let check = one_step_gradient_check(&g, 200, &cfg).unwrap();
    assert!(check.initial_output.abs() < 1e-15);
    assert!(check.max_relative_deviation < 1e-8, "{}", check.max_relative_deviation);
}

#[test]
fn nonzero_initial_output_breaks_closed_form() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(3);
    let g = sample_grammar(&p).unwrap();
    let cfg = OneStepConfig {
        antithetic: false,
        ..OneStepConfig::default()
    };
    let check = one_step_gradient_check(&g, 200, &cfg).unwrap();
    assert!(check.initial_output > 0.0);
    assert!(check.max_relative_deviation > 1e-4);
}

#[test]
fn exact_representation_is_synonym_invariant_and_low_rank() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(5);
    let g = sample_grammar(&p).unwrap();
    let p_max = p.p_max().unwrap();
    for j in 0..2 {
        let cfg = OneStepConfig {
            patch: Patch::At(j),
            ..OneStepConfig::default()
        };
        let t = one_step_representation(&g, p_max, &cfg).unwrap();
        for parent in 0..4 {
            let syn = g.synonyms(1, parent);
            for &nu in &syn[1..] {
                assert_eq!(t.distance(syn[0] as usize, nu as usize).unwrap(), 0.0);
            }
        }
        let a = sample_readout(64, 4, 1, false).unwrap();
        assert_eq!(matrix_rank(&t.updated_weights(&a), 1e-9), p.vocab_size);
    }
}

#[test]
fn row_sums_vanish() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(2);
    let g = sample_grammar(&p).unwrap();
    let t = one_step_representation(&g, 77, &OneStepConfig::default()).unwrap();
    assert!(row_sums(&t).iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn uncorrelated_full_data_gives_zero_updates() {
    let p = RhmParams::new(2, 2, 2, 2, 2).with_seed(1);
    let g = sample_uncorrelated_grammar(&p).unwrap();
    let t = one_step_representation(&g, p.p_max().unwrap(), &OneStepConfig::default()).unwrap();
    assert!(t.g.iter().all(|&x| x == 0.0));
}

#[test]
fn non_synonyms_are_separated_at_full_data() {
    for seed in 0..100 {
        let p = RhmParams::new(8, 8, 8, 2, 2).with_seed(seed);
        let g = sample_grammar(&p).unwrap();
        let t = one_step_representation(&g, p.p_max().unwrap(), &OneStepConfig::default()).unwrap();
        let observed = t.observed_symbols();
        for &mu in &observed {
            for &nu in &observed {
                let same = g.parent_of(1, mu as u32).unwrap().0 == g.parent_of(1, nu as u32).unwrap().0;
                let d = t.distance(mu, nu).unwrap();
                if same {
                    assert_eq!(d, 0.0);
                } else {
                    assert!(d > 0.0, "seed {seed}: {mu} {nu}");
                }
            }
        }
    }
}

#[test]
fn small_vocabulary_coincidences_follow_the_top_rule() {
    // at small v two parents can share their class profile; zero distance
    // must then coincide with equal occurrence counts in the top rule
    for seed in 0..100 {
        let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(seed);
        let g = sample_grammar(&p).unwrap();
        let t = one_step_representation(&g, p.p_max().unwrap(), &OneStepConfig::default()).unwrap();
        let occ = rule_occurrences(&g, 2, 0);
        let profile = |mu: usize| {
            let parent = g.parent_of(1, mu as u32).unwrap().0 as usize;
            occ.iter().map(|row| row[parent]).collect::<Vec<_>>()
        };
        for &mu in &t.observed_symbols() {
            for &nu in &t.observed_symbols() {
                assert_eq!(t.distance(mu, nu).unwrap() == 0.0, profile(mu) == profile(nu), "seed {seed}");
            }
        }
    }
}

#[test]
fn unobserved_tuple_distance_is_an_error() {
    let p = RhmParams::new(4, 2, 2, 2, 2).with_seed(1);
    let g = sample_grammar(&p).unwrap();
    let t = one_step_representation(&g, 10, &OneStepConfig::default()).unwrap();
    let unseen = (0..16).find(|&mu| !t.observed(mu)).unwrap();
    let seen = t.observed_symbols()[0];
    assert_eq!(t.distance(seen, seen).unwrap(), 0.0);
    assert!(t.distance(seen, unseen).is_err());
}

fn crossover(pooled: bool) -> (f64, f64, f64, f64) {
    // v = m = n_c = 3, L = 3: P_c = 81, P_max = 6561
    let mut out = (0.0, 0.0, 0.0, 0.0);
    let reps = 20;
    for seed in 0..reps {
        let p = RhmParams::new(3, 3, 3, 2, 3).with_seed(seed);
        let g = sample_grammar(&p).unwrap();
        let cfg = OneStepConfig {
            patch: if pooled { Patch::Pooled } else { Patch::At(0) },
            seed,
            ..OneStepConfig::default()
        };
        let small = pair_distances(&one_step_representation(&g, 20, &cfg).unwrap(), &g);
        let large = pair_distances(&one_step_representation(&g, 4 * 81, &cfg).unwrap(), &g);
        out.0 += small.0 / reps as f64;
        out.1 += small.1 / reps as f64;
        out.2 += large.0 / reps as f64;
        out.3 += large.1 / reps as f64;
    }
    out
}

#[test]
fn synonym_distance_crossover_around_pc() {
    for pooled in [false, true] {
        let (syn_small, other_small, syn_large, other_large) = crossover(pooled);
        assert!(syn_large < 0.5 * other_large, "pooled={pooled}: {syn_large} vs {other_large}");
        // heavy overlap below P_c: the two means are within a factor 2
        assert!(syn_small > 0.5 * other_small, "pooled={pooled}: {syn_small} vs {other_small}");
    }
}

#[test]
fn table_sensitivity_collapses_with_data() {
    let p = RhmParams::new(4, 4, 4, 2, 3).with_seed(9);
    let g = sample_grammar(&p).unwrap();
    let test = sample_dataset(&g, 1000, 99, false).unwrap();
    let mut rng = rng_from_seed(0);
    let pc = 4.0 * 64.0;
    let s = |n: f64, rng: &mut _| {
        let t = one_step_representation(&g, n as u64, &OneStepConfig::default()).unwrap();
        table_sensitivity(&t, &g, &test.data, rng).unwrap()
    };
    let low = s(pc / 4.0, &mut rng);
    let high = s(16.0 * pc, &mut rng);
    assert!(low > 0.6, "{low}");
    assert!(high < 0.3, "{high}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_oracle_agrees_for_random_instances(seed in any::<u64>(), v in 2usize..5, n in 1u64..120) {
        let p = RhmParams::new(v, v, v, 2, 2).with_seed(seed);
        let g = sample_grammar(&p).unwrap();
        let n = n.min(p.p_max().unwrap());
        let cfg = OneStepConfig { seed, width: 16, ..OneStepConfig::default() };
        let check = one_step_gradient_check(&g, n, &cfg).unwrap();
        prop_assert!(check.max_relative_deviation < 1e-10);
    }
}
