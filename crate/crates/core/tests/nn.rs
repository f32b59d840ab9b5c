use ndarray::Array2;
use rhm_core::grammar::{sample_dataset, sample_grammar, sample_split, RhmParams};
use rhm_core::nn::{build_network, evaluate, train, ArchSpec, LrScaling, Network, TrainConfig};

fn fd_check(net: &mut Network, x: &Array2<f64>, y: &[usize], indices: &[usize]) {
    let (_, grads) = net.loss_and_grad(x, y).unwrap();
    let h = 1e-4;
    for &i in indices {
        let orig = net.parameter(i);
        net.set_parameter(i, orig + h);
        let (lp, _) = net.loss_and_grad(x, y).unwrap();
        net.set_parameter(i, orig - h);
        let (lm, _) = net.loss_and_grad(x, y).unwrap();
        net.set_parameter(i, orig);
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.get(i);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        assert!(rel < 1e-5, "param {i}: analytic {an} vs fd {fd} (rel {rel})");
    }
}

fn spread(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * (n - 1) / (count - 1)).collect()
}

#[test]
fn gradients_match_finite_differences_cnn() {
    let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(4);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 12, 1, true).unwrap();
    let mut net = build_network(&ArchSpec::cnn(&p, 6), 2).unwrap();
    // move biases off zero so their gradients are exercised generically
    let n = net.parameter_count();
    for i in 0..n {
        let v = net.parameter(i);
        net.set_parameter(i, v + 0.05 * ((i % 7) as f64 - 3.0));
    }
    fd_check(&mut net, &ds.inputs, &ds.labels(), &spread(n, 10));
    let last_layer = n - net.layers[2].weight.len();
    fd_check(&mut net, &ds.inputs, &ds.labels(), &(last_layer..last_layer + 10).collect::<Vec<_>>());
}

#[test]
fn gradients_match_finite_differences_fc() {
    let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(5);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 9, 1, true).unwrap();
    let mut net = build_network(&ArchSpec::fc(&p, 3, 5), 8).unwrap();
    let n = net.parameter_count();
    fd_check(&mut net, &ds.inputs, &ds.labels(), &spread(n, 10));
}

#[test]
fn full_batch_loss_is_monotone_at_small_lr() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(6);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 40, 2, true).unwrap();
    let mut net = build_network(&ArchSpec::cnn(&p, 32), 3).unwrap();
    let y = ds.labels();
    let mut prev = f64::INFINITY;
    for _ in 0..50 {
        let (loss, grads) = net.loss_and_grad(&ds.inputs, &y).unwrap();
        assert!(loss <= prev, "{loss} > {prev}");
        prev = loss;
        net.apply_gradients(&grads, 1e-3);
    }
}

#[test]
fn training_is_seed_deterministic() {
    let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(7);
    let g = sample_grammar(&p).unwrap();
    let (tr, te) = sample_split(&g, 30, 100, 3, true).unwrap();
    let cfg = TrainConfig {
        max_epochs: 5,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = build_network(&ArchSpec::cnn(&p, 8), 1).unwrap();
        let report = train(&mut net, &tr, Some(&te), &cfg).unwrap();
        (net, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn cnn_output_equivariant_under_patch_permutation() {
    // Swapping the two halves of the input together with the spatial blocks of
    // the second-layer weights leaves the output unchanged.
    let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(8);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 15, 0, true).unwrap();
    let h = 5;
    let net = build_network(&ArchSpec::cnn(&p, h), 9).unwrap();
    let v = p.vocab_size;
    let mut x = ds.inputs.clone();
    for mut row in x.rows_mut() {
        let orig = row.to_owned();
        for i in 0..2 * v {
            row[i] = orig[2 * v + i];
            row[2 * v + i] = orig[i];
        }
    }
    let mut permuted = net.clone();
    let w = &net.layers[1].weight;
    for r in 0..h {
        for c in 0..h {
            permuted.layers[1].weight[[r, c]] = w[[r, h + c]];
            permuted.layers[1].weight[[r, h + c]] = w[[r, c]];
        }
    }
    let a = net.forward(&ds.inputs).unwrap();
    let b = permuted.forward(&x).unwrap();
    for (u, w) in a.iter().zip(b.iter()) {
        assert!((u - w).abs() < 1e-12);
    }
}

#[test]
fn initial_output_rms_scales_as_inverse_sqrt_width() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(1);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 32, 0, true).unwrap();
    let rms = |h: usize| {
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..32 {
            let net = build_network(&ArchSpec::cnn(&p, h), seed).unwrap();
            let out = net.forward(&ds.inputs).unwrap();
            total += out.iter().map(|o| o * o).sum::<f64>();
            count += out.len();
        }
        (total / count as f64).sqrt()
    };
    let base = rms(256) * 256f64.sqrt();
    for h in [1024, 4096] {
        let scaled = rms(h) * (h as f64).sqrt();
        assert!((scaled / base - 1.0).abs() < 0.2, "H={h}: {scaled} vs {base}");
    }
}

#[test]
fn untrained_error_is_random_guess() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(2);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 256, 0, true).unwrap();
    let nets = 20;
    let mut mean = 0.0;
    for seed in 0..nets {
        let net = build_network(&ArchSpec::cnn(&p, 64), seed).unwrap();
        mean += evaluate(&net, &ds).unwrap().test_error / nets as f64;
    }
    // classes are balanced in the full dataset; binomial spread over 20·256 draws
    let eps = p.eps_rand();
    let sigma = (eps * (1.0 - eps) / (256.0 * nets as f64)).sqrt();
    // predictions of one network are correlated across inputs, so allow a wider band
    assert!((mean - eps).abs() < 3.0 * sigma * 4.0, "{mean} vs {eps}");
}

#[test]
fn overfits_small_training_sets() {
    let p = RhmParams::new(4, 4, 4, 2, 2).with_seed(3);
    let g = sample_grammar(&p).unwrap();
    let width = 4 * 16;
    for n in [16u64, 100, 200] {
        let ds = sample_dataset(&g, n, n, true).unwrap();
        let mut net = build_network(&ArchSpec::cnn(&p, width), 4).unwrap();
        let cfg = TrainConfig {
            lr_init: 1.0,
            lr_final: 0.1,
            lr_scaling: LrScaling::Width,
            max_epochs: 3000,
            ..TrainConfig::default()
        };
        let report = train(&mut net, &ds, None, &cfg).unwrap();
        assert_eq!(report.train_error, Some(0.0), "P={n}");
        assert_eq!(evaluate(&net, &ds).unwrap().test_error, 0.0);
    }
}

#[test]
fn constant_output_error_is_one_minus_majority_share() {
    let p = RhmParams::new(3, 3, 3, 2, 2).with_seed(3);
    let g = sample_grammar(&p).unwrap();
    let ds = sample_dataset(&g, 50, 0, true).unwrap();
    let mut net = build_network(&ArchSpec::cnn(&p, 4), 0).unwrap();
    net.layers[2].weight.fill(0.0);
    // all logits tie, argmax picks class 0
    let share0 = ds.labels().iter().filter(|&&l| l == 0).count() as f64 / 50.0;
    assert!((evaluate(&net, &ds).unwrap().test_error - (1.0 - share0)).abs() < 1e-15);
}
