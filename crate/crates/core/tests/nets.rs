//! Dense and measure-input networks against direct re-implementations.

use mfc_core::measure::{BinGrid, InitialDistribution};
use mfc_core::mfnn::{empirical_latent, load_checkpoint, mf_eval, mf_grad, save_checkpoint, MeanFieldNet, MeasureArg};
use mfc_core::nnet::{adam_step, init_params, mlp_forward, mlp_grad, Activation, AdamConfig, AdamState, MlpParams, MlpSpec};
use proptest::prelude::*;

/// Straightforward evaluator: per layer `W` is `n_out × n_in` row-major, then the bias.
fn reference_forward(sizes: &[usize], flat: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut off = 0;
    let last = sizes.len() - 2;
    for (l, w) in sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let bias = &flat[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut z = bias.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            for (i, ai) in a.iter().enumerate() {
                *zo += flat[off + o * n_in + i] * ai;
            }
        }
        if l < last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        off += n_in * n_out + n_out;
        a = z;
    }
    assert_eq!(off, flat.len());
    a
}

fn spec(sizes: &[usize]) -> MlpSpec {
    MlpSpec::new(sizes.to_vec(), Activation::Tanh).unwrap()
}

#[test]
fn parameter_count_by_layer_formula() {
    let s = spec(&[2, 20, 20, 1]);
    assert_eq!(s.n_params(), 2 * 20 + 20 + 20 * 20 + 20 + 20 + 1);
    assert_eq!(init_params(&s, 0).flat.len(), 501);
    let affine = spec(&[1, 1]);
    let p = init_params(&affine, 7);
    assert_eq!(p.flat[1], 0.0);
    assert_eq!(p, init_params(&affine, 7));
}

#[test]
fn forward_matches_reference_evaluator() {
    for (sizes, seed) in [(vec![1, 20, 20, 1], 1u64), (vec![3, 7, 2], 2), (vec![2, 5, 4, 3], 3)] {
        let s = spec(&sizes);
        let p = init_params(&s, seed);
        let x: Vec<f64> = (0..sizes[0]).map(|i| 0.5 - 0.3 * i as f64).collect();
        let got = mlp_forward(&s, &p, &x).unwrap();
        let want = reference_forward(&sizes, &p.flat, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{sizes:?}: {a} vs {b}");
        }
    }
}

#[test]
fn affine_and_zero_networks() {
    let s = MlpSpec::new(vec![1, 1], Activation::Identity).unwrap();
    assert_eq!(mlp_forward(&s, &MlpParams { flat: vec![2.0, 1.0] }, &[3.0]).unwrap(), vec![7.0]);
    let (g, gx) = mlp_grad(&s, &MlpParams { flat: vec![2.0, 1.0] }, &[3.0], &[1.0]).unwrap();
    assert_eq!((g, gx), (vec![3.0, 1.0], vec![2.0]));

    let deep = spec(&[2, 6, 6, 2]);
    let zero = MlpParams { flat: vec![0.0; deep.n_params()] };
    assert_eq!(mlp_forward(&deep, &zero, &[0.3, -2.0]).unwrap(), vec![0.0, 0.0]);

    // Zero output layer makes the net constant in x.
    let mut p = init_params(&deep, 4);
    let n = p.flat.len();
    p.flat[n - 14..n - 2].iter_mut().for_each(|w| *w = 0.0);
    let (_, gx) = mlp_grad(&deep, &p, &[0.3, -2.0], &[1.0, -1.0]).unwrap();
    assert_eq!(gx, vec![0.0, 0.0]);
}

#[test]
fn adam_single_step_moves_by_learning_rate() {
    let cfg = AdamConfig { lr: 0.01, ..Default::default() };
    for g in [3.0, -0.2, 1e-3] {
        let mut st = AdamState::new(1, cfg);
        let mut p = [1.0];
        adam_step(&mut st, &mut p, &[g]).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((p[0] - want).abs() < 1e-15, "{g}");
        assert_eq!(st.step, 1);
    }
    let mut a = AdamState::new(2, cfg);
    let mut b = AdamState::new(2, cfg);
    let (mut pa, mut pb) = ([0.5, -0.5], [0.5, -0.5]);
    adam_step(&mut a, &mut pa, &[0.1, 0.2]).unwrap();
    adam_step(&mut b, &mut pb, &[0.1, 0.2]).unwrap();
    assert_eq!(pa, pb);
    assert!(a.v.iter().all(|&v| v >= 0.0));
}

#[test]
fn bin_net_reads_the_density_values_directly() {
    let g = BinGrid::new(-1.0, 1.0, 8).unwrap();
    let d = InitialDistribution::gaussian(0.2, 0.3).to_bin_density(&g).unwrap();
    let net = MeanFieldNet::bins(8, &[20, 20], 1, true, 5).unwrap();
    let mut input = vec![0.1, -0.3];
    input.extend_from_slice(&d.p);
    let got = mf_eval(&net, 0.1, MeasureArg::Density(&d), -0.3).unwrap();
    let want = reference_forward(&net.outer.layer_sizes, &net.params, &input);
    assert!((got[0] - want[0]).abs() < 1e-14);
    let (g_mf, _) = mf_grad(&net, 0.1, MeasureArg::Density(&d), -0.3, &[1.0]).unwrap();
    let (g_mlp, _) = mlp_grad(&net.outer, &MlpParams { flat: net.params.clone() }, &input, &[1.0]).unwrap();
    for (a, b) in g_mf.iter().zip(&g_mlp) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn latent_of_a_single_sample_is_the_inner_net() {
    let net = MeanFieldNet::cylindrical(4, &[6, 6], 1, true, 8).unwrap();
    let inner = net.inner.as_ref().unwrap();
    let lat = empirical_latent(&net, 0.15, &[0.4]).unwrap();
    let direct = reference_forward(&inner.layer_sizes, &net.params[net.outer.n_params()..], &[0.15, 0.4]);
    for (a, b) in lat.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn zero_parameters_give_zero_outputs_and_latents() {
    let mut net = MeanFieldNet::cylindrical(3, &[5], 2, true, 1).unwrap();
    net.params.iter_mut().for_each(|p| *p = 0.0);
    assert_eq!(empirical_latent(&net, 0.0, &[0.1, 0.7]).unwrap(), vec![0.0; 3]);
    assert_eq!(mf_eval(&net, 0.1, MeasureArg::Cloud(&[0.3]), 1.0).unwrap(), vec![0.0, 0.0]);
    let mut bin = MeanFieldNet::bins(4, &[5], 1, false, 1).unwrap();
    bin.params.iter_mut().for_each(|p| *p = 0.0);
    let d = InitialDistribution::gaussian(0.0, 1.0).to_bin_density(&BinGrid::new(-1.0, 1.0, 4).unwrap()).unwrap();
    assert_eq!(mf_eval(&bin, 0.0, MeasureArg::Density(&d), 0.2).unwrap(), vec![0.0]);
    let (g, dx) = mf_grad(&bin, 0.0, MeasureArg::Density(&d), 0.2, &[0.0]).unwrap();
    assert!(g.iter().all(|&v| v == 0.0) && dx == 0.0);
}

#[test]
fn checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for (i, net) in [
        MeanFieldNet::bins(5, &[4, 4], 2, true, 3).unwrap(),
        MeanFieldNet::cylindrical(2, &[3], 1, false, 4).unwrap(),
    ]
    .into_iter()
    .enumerate()
    {
        let path = dir.path().join(format!("n{i}.ckpt"));
        save_checkpoint(&net, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), net);
    }
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_order_does_not_change_values(seed in 0u64..500, xs in prop::collection::vec(-3.0f64..3.0, 1..20)) {
        let s = spec(&[1, 9, 9, 2]);
        let p = init_params(&s, seed);
        let one_by_one: Vec<Vec<f64>> = xs.iter().map(|&x| mlp_forward(&s, &p, &[x]).unwrap()).collect();
        let reversed: Vec<Vec<f64>> = xs.iter().rev().map(|&x| mlp_forward(&s, &p, &[x]).unwrap()).collect();
        for (a, b) in one_by_one.iter().zip(reversed.iter().rev()) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_with_zero_gradient_is_the_identity(steps in 1usize..50, init in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let mut st = AdamState::new(init.len(), AdamConfig { lr: 0.1, ..Default::default() });
        let mut p = init.clone();
        let zero = vec![0.0; init.len()];
        for _ in 0..steps {
            adam_step(&mut st, &mut p, &zero).unwrap();
        }
        prop_assert_eq!(p, init);
    }

    #[test]
    fn latent_of_a_union_is_the_weighted_average(
        a in prop::collection::vec(-1.0f64..1.0, 1..15),
        b in prop::collection::vec(-1.0f64..1.0, 1..15),
        seed in 0u64..100,
    ) {
        let net = MeanFieldNet::cylindrical(3, &[5], 1, true, seed).unwrap();
        let la = empirical_latent(&net, 0.1, &a).unwrap();
        let lb = empirical_latent(&net, 0.1, &b).unwrap();
        let ab: Vec<f64> = a.iter().chain(&b).copied().collect();
        let lab = empirical_latent(&net, 0.1, &ab).unwrap();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        for j in 0..3 {
            prop_assert!((lab[j] - (na * la[j] + nb * lb[j]) / (na + nb)).abs() < 1e-13);
        }
    }

    #[test]
    fn cylindrical_output_is_exchangeable(cloud in prop::collection::vec(-1.0f64..1.0, 2..30), x in -1.0f64..1.0) {
        let net = MeanFieldNet::cylindrical(4, &[6], 2, true, 11).unwrap();
        let mut rev = cloud.clone();
        rev.reverse();
        let a = mf_eval(&net, 0.05, MeasureArg::Cloud(&cloud), x).unwrap();
        let b = mf_eval(&net, 0.05, MeasureArg::Cloud(&rev), x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-13);
        }
    }
}
