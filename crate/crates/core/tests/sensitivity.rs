use nalgebra::DMatrix;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rhm_core::grammar::{sample_dataset, sample_grammar, Datum, GrammarInstance, RhmParams};
use rhm_core::nn::{build_network, ArchSpec};
use rhm_core::seed::rng_from_seed;
use rhm_core::sensitivity::{
    effective_dimension, encode, sensitivity_report, sensitivity_with, synonymic_sensitivity,
};
use rhm_core::RhmError;

fn setup(v: usize, l: usize, seed: u64, n: u64) -> (GrammarInstance, Vec<Datum>) {
    let params = RhmParams::new(v, v, v, 2, l).with_seed(seed);
    let g = sample_grammar(&params).unwrap();
    let data = sample_dataset(&g, n.min(params.p_max().unwrap()), seed + 1, false).unwrap().data;
    (g, data)
}

fn one_hot_parents(g: &GrammarInstance, batch: &[Datum], level: usize) -> Array2<f64> {
    let v = g.params().vocab_size;
    let width = g.params().input_dim() / g.params().branching.pow(level as u32 - 1);
    let mut out = Array2::zeros((batch.len(), width * v));
    for (i, d) in batch.iter().enumerate() {
        for (j, &f) in g.representation(&d.leaves, level).unwrap().iter().enumerate() {
            out[[i, j * v + f as usize]] = 1.0;
        }
    }
    out
}

#[test]
fn function_of_parent_features_is_exactly_invariant() {
    let (g, test) = setup(4, 3, 2, 300);
    for l in 1..=3 {
        let f = |batch: &[Datum]| Ok(one_hot_parents(&g, batch, l + 1));
        let s = sensitivity_with(f, &g, &test, l, &mut rng_from_seed(0)).unwrap();
        assert_eq!(s.s, 0.0);
        assert!(s.denominator > 0.0);
    }
    // the leaves themselves are not invariant
    let f = |batch: &[Datum]| Ok(one_hot_parents(&g, batch, 1));
    assert!(sensitivity_with(f, &g, &test, 1, &mut rng_from_seed(0)).unwrap().s > 0.5);
}

fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let q = m.qr().q();
    Array2::from_shape_fn((n, n), |(i, j)| q[(i, j)])
}

#[test]
fn rotations_and_scaling_leave_sensitivity_unchanged() {
    let (g, test) = setup(4, 2, 5, 400);
    let params = *g.params();
    let net = build_network(&ArchSpec::cnn(&params, 32), 1).unwrap();
    let acts = |batch: &[Datum]| net.activations(&encode(&g, batch, true), 1);
    let base = sensitivity_with(acts, &g, &test, 1, &mut rng_from_seed(9)).unwrap();
    let width = acts(&test[..1]).unwrap().ncols();
    for seed in 0..5 {
        let q = random_orthogonal(width, seed);
        let rotated = |batch: &[Datum]| Ok(acts(batch)?.dot(&q));
        let s = sensitivity_with(rotated, &g, &test, 1, &mut rng_from_seed(9)).unwrap();
        assert!((s.s - base.s).abs() < 1e-12 * base.s);
    }
    let doubled = |batch: &[Datum]| Ok(acts(batch)? * 4.0);
    assert_eq!(sensitivity_with(doubled, &g, &test, 1, &mut rng_from_seed(9)).unwrap().s, base.s);
    let scaled = |batch: &[Datum]| Ok(acts(batch)? * 3.7);
    let s = sensitivity_with(scaled, &g, &test, 1, &mut rng_from_seed(9)).unwrap();
    assert!((s.s - base.s).abs() < 1e-13 * base.s);
}

#[test]
fn untrained_network_is_not_invariant() {
    let mut values = Vec::new();
    for seed in 0..5 {
        let (g, test) = setup(4, 2, seed, 500);
        let net = build_network(&ArchSpec::cnn(g.params(), 64), seed).unwrap();
        values.push(synonymic_sensitivity(&net, &g, &test, 1, 1, true, seed).unwrap().s);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!((0.8..1.25).contains(&mean), "{values:?}");
}

#[test]
fn report_covers_every_layer_and_level() {
    let (g, test) = setup(3, 2, 1, 200);
    let net = build_network(&ArchSpec::cnn(g.params(), 16), 0).unwrap();
    let r = sensitivity_report(&net, &g, &test, &[1, 2, 3], &[1, 2], false, 4).unwrap();
    assert_eq!(r.values.len(), 6);
    assert!(r.get(3, 2).is_some());
    assert!(r.values.iter().all(|v| v.s >= 0.0 && v.num_pairs == 81));
}

#[test]
fn error_cases() {
    let params = RhmParams::new(3, 1, 3, 2, 2).with_seed(0);
    let g = sample_grammar(&params).unwrap();
    let test = sample_dataset(&g, 3, 0, false).unwrap().data;
    let f = |batch: &[Datum]| Ok(Array2::from_elem((batch.len(), 2), 1.0));
    assert!(matches!(sensitivity_with(f, &g, &test, 1, &mut rng_from_seed(0)), Err(RhmError::NoSynonyms)));

    let (g, test) = setup(3, 2, 0, 50);
    assert!(matches!(
        sensitivity_with(f, &g, &test, 1, &mut rng_from_seed(0)),
        Err(RhmError::ConstantRepresentation)
    ));
    assert!(matches!(sensitivity_with(f, &g, &test[..1], 1, &mut rng_from_seed(0)), Err(RhmError::EmptyTestSet)));
}

#[test]
fn dimension_of_a_segment_in_high_dimension() {
    let mut rng = rng_from_seed(3);
    let dir: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut rng)).collect();
    let unit = Uniform::new(0.0, 1.0).unwrap();
    let points = Array2::from_shape_fn((4000, 50), |(_, j)| dir[j]);
    let ts: Vec<f64> = (0..4000).map(|_| unit.sample(&mut rng)).collect();
    let points = Array2::from_shape_fn(points.dim(), |(i, j)| ts[i] * points[[i, j]]);
    let r = effective_dimension(&points, &[40, 100, 400, 1000, 4000], 1).unwrap();
    assert!((r.d_eff - 1.0).abs() <= 0.2, "{}", r.d_eff);
    assert_eq!(r.excluded, 0);
    assert!(r.normalized.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn dimension_of_a_cube() {
    let mut rng = rng_from_seed(4);
    let unit = Uniform::new(0.0, 1.0).unwrap();
    let points = Array2::from_shape_simple_fn((10_000, 3), || unit.sample(&mut rng));
    let r = effective_dimension(&points, &[100, 300, 1000, 3000, 10_000], 2).unwrap();
    assert!((r.d_eff - 3.0).abs() <= 0.5, "{}", r.d_eff);
    assert_eq!(r.normalized[0], 1.0);
}

#[test]
fn duplicate_points_are_reported() {
    let mut rng = rng_from_seed(5);
    let unit = Uniform::new(0.0, 1.0).unwrap();
    let base = Array2::from_shape_simple_fn((500, 2), || unit.sample(&mut rng));
    let points = ndarray::concatenate(ndarray::Axis(0), &[base.view(), base.view()]).unwrap();
    let r = effective_dimension(&points, &[50, 1000], 0).unwrap();
    assert!(r.excluded > 0);
    assert!(r.d_eff.is_finite());
}
