//! BSDE losses on degenerate problems, the exact systemic solution and
//! hand-computed residuals.

use std::sync::Arc;

use mfc_core::bsde_solvers::{
    global_bsde_loss, local_bsde_loss, regress_value_from_bsde, BsdeNets, GlobalLoss, StageTarget,
};
use mfc_core::dp_solvers::{NetConfig, TrainConfig, Variant};
use mfc_core::dynamics::TimeGrid;
use mfc_core::measure::{BinDensity, BinGrid};
use mfc_core::mfnn::{Field, MeanFieldNet};
use mfc_core::nnet::AdamConfig;
use mfc_core::problems::{
    bsde_driver_estimate, systemic_case, BsdeCoefficients, BsdeSpec, DriverOut, SolutionPart, SystemicParams,
    SystemicSolution, SYSTEMIC_DOMAIN,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bin network whose every output equals `values`.
fn constant_net(k: usize, values: &[f64], time: bool) -> MeanFieldNet {
    let mut net = MeanFieldNet::bins(k, &[4], values.len(), time, 0).unwrap();
    net.params.iter_mut().for_each(|p| *p = 0.0);
    let n = net.params.len();
    net.params[n - values.len()..].copy_from_slice(values);
    net
}

/// No drift, no driver, zero terminal.
#[derive(Debug)]
struct Inert;

impl BsdeCoefficients for Inert {
    fn forward_drift(&self, _: f64, _: f64, _: f64, _: [f64; 2]) -> (f64, [f64; 2]) {
        (0.0, [0.0; 2])
    }
    fn vol(&self) -> f64 {
        0.4
    }
    fn driver(&self, _: f64, _: f64, _: f64, _: [f64; 2], _: [f64; 2], _: f64) -> DriverOut {
        DriverOut::default()
    }
    fn terminal(&self, _: f64, _: f64) -> [f64; 2] {
        [0.0; 2]
    }
}

fn inert() -> (BsdeSpec, BinDensity) {
    let spec = BsdeSpec { name: "inert".into(), horizon: 0.2, domain: (-2.0, 2.0), coeffs: Arc::new(Inert) };
    let bins = BinGrid::new(-2.0, 2.0, 16).unwrap();
    (spec, systemic_case(1).unwrap().to_bin_density(&bins).unwrap())
}

fn systemic_setup(k: usize) -> (SystemicParams, BsdeSpec, BinDensity) {
    let p = SystemicParams::default();
    let bins = BinGrid::new(SYSTEMIC_DOMAIN.0, SYSTEMIC_DOMAIN.1, k).unwrap();
    (p, p.bsde(SYSTEMIC_DOMAIN), systemic_case(1).unwrap().to_bin_density(&bins).unwrap())
}

#[test]
fn inert_problem_has_zero_losses_at_zero_networks() {
    let (spec, law) = inert();
    let grid = TimeGrid::new(0.2, 4).unwrap();
    let y = constant_net(16, &[0.0, 0.0], false);
    let z = constant_net(16, &[0.0, 0.0], false);
    let (yf, zf) = (y.prepare(), z.prepare());
    for i in 0..4 {
        let l = local_bsde_loss(&spec, &grid, i, &yf, &zf, StageTarget::Next(Some(&yf)), &law, 200, false, 1).unwrap();
        assert_eq!(l, 0.0);
        let frozen: Vec<(&dyn Field, &dyn Field)> = (i + 1..4).map(|_| (&yf as &dyn Field, &zf as &dyn Field)).collect();
        let l = local_bsde_loss(&spec, &grid, i, &yf, &zf, StageTarget::Telescope(&frozen), &law, 200, true, 1).unwrap();
        assert_eq!(l, 0.0);
    }
    let yt = constant_net(16, &[0.0, 0.0], true);
    let zt = constant_net(16, &[0.0, 0.0], true);
    let (ytf, ztf) = (yt.prepare(), zt.prepare());
    for kind in [GlobalLoss::Carried, GlobalLoss::Local, GlobalLoss::Multistep] {
        assert_eq!(global_bsde_loss(&spec, &grid, kind, &ytf, &ztf, &law, 200, 2).unwrap(), 0.0, "{kind:?}");
    }
}

#[test]
fn single_particle_one_step_matches_hand_residual() {
    // σ = 0, one particle: μ̄ = X_0, so X_1 = X_0 - P Δt and G(X_1) = 0.
    // Y-driver is -P²/2 and the P-driver vanishes (P̄ = P, μ̄ = x).
    let p = SystemicParams { sigma: 0.0, ..Default::default() };
    let spec = p.bsde(SYSTEMIC_DOMAIN);
    let bins = BinGrid::new(SYSTEMIC_DOMAIN.0, SYSTEMIC_DOMAIN.1, 10).unwrap();
    let law = systemic_case(2).unwrap().to_bin_density(&bins).unwrap();
    let grid = TimeGrid::new(0.2, 1).unwrap();
    let (y0, p0) = (0.3, -0.7);
    let y = constant_net(10, &[y0, p0], false);
    let z = constant_net(10, &[0.0, 0.0], false);
    let (yf, zf) = (y.prepare(), z.prepare());
    let dt = grid.dt();
    let want = (y0 - 0.5 * p0 * p0 * dt).powi(2) + p0 * p0;
    for seed in 0..5 {
        let l = local_bsde_loss(&spec, &grid, 0, &yf, &zf, StageTarget::Next(None), &law, 1, false, seed).unwrap();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        let g = global_bsde_loss(&spec, &grid, GlobalLoss::Local, &yf, &zf, &law, 1, seed).unwrap();
        assert!((g - want).abs() < 1e-12, "{g} vs {want}");
    }
}

#[test]
fn last_multistep_stage_equals_last_local_stage() {
    let (p, spec, law) = systemic_setup(20);
    let grid = TimeGrid::with_step(p.horizon, 0.05).unwrap();
    let y = SystemicSolution { params: p, part: SolutionPart::Y };
    let z = SystemicSolution { params: p, part: SolutionPart::Z };
    let last = grid.n_steps - 1;
    let a = local_bsde_loss(&spec, &grid, last, &y, &z, StageTarget::Next(None), &law, 500, false, 3).unwrap();
    let b = local_bsde_loss(&spec, &grid, last, &y, &z, StageTarget::Telescope(&[]), &law, 500, false, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn driver_average_is_invariant_to_permuting_the_cloud() {
    let (_, spec, _) = systemic_setup(10);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 64;
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ys: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let zs = vec![[0.0; 2]; n];
    let base = bsde_driver_estimate(&spec, 0.0, &xs, &ys, &zs, 5).unwrap();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let pos = idx.iter().position(|&i| i == 5).unwrap();
    let px: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
    let py: Vec<[f64; 2]> = idx.iter().map(|&i| ys[i]).collect();
    let moved = bsde_driver_estimate(&spec, 0.0, &px, &py, &zs, pos).unwrap();
    for (a, b) in base.iter().zip(&moved) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn half_cloud_tilde_average_is_unbiased() {
    // The P-driver depends on the cloud only through μ̄ and P̄; replacing the
    // full cloud by a random half shifts it by O(1/√N).
    let (p, spec, _) = systemic_setup(10);
    let kq = p.kappa + p.q;
    let e = p.eta - p.q * p.q;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [1_000usize, 10_000, 100_000] {
        let xs: Vec<f64> = (0..n).map(|_| 0.3 * mfc_core::measure::std_normal(&mut rng)).collect();
        let ys: Vec<[f64; 2]> = xs.iter().map(|&x| [0.0, 1.5 * x + 0.2 * mfc_core::measure::std_normal(&mut rng)]).collect();
        let zs = vec![[0.0; 2]; n];
        let full = bsde_driver_estimate(&spec, 0.0, &xs, &ys, &zs, 0).unwrap()[1];
        let mut idx: Vec<usize> = (1..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n / 2 - 1);
        idx.insert(0, 0);
        let hx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let hy: Vec<[f64; 2]> = idx.iter().map(|&i| ys[i]).collect();
        let half = bsde_driver_estimate(&spec, 0.0, &hx, &hy, &zs[..idx.len()], 0).unwrap()[1];
        // Difference is -kq ΔP̄ + e Δμ̄ with Var(Δ·) = Var(·)/N.
        let sd = ((kq * 1.5 - e).powi(2) * 0.09 + (kq * 0.2).powi(2)).sqrt() / (n as f64).sqrt();
        assert!((half - full).abs() < 4.0 * sd, "N={n}: {}", (half - full).abs());
    }
}

#[test]
fn analytic_solution_drives_every_loss_down_with_dt() {
    let (p, spec, law) = systemic_setup(50);
    let y = SystemicSolution { params: p, part: SolutionPart::Y };
    let z = SystemicSolution { params: p, part: SolutionPart::Z };
    let n = 4000;
    let losses = |dt: f64| -> [f64; 5] {
        let grid = TimeGrid::with_step(p.horizon, dt).unwrap();
        let nt = grid.n_steps;
        let (mut l4, mut l5) = (0.0f64, 0.0f64);
        for i in 0..nt {
            let next: Option<&dyn Field> = if i + 1 < nt { Some(&y) } else { None };
            l4 = l4.max(local_bsde_loss(&spec, &grid, i, &y, &z, StageTarget::Next(next), &law, n, false, 4).unwrap());
            let frozen: Vec<(&dyn Field, &dyn Field)> = (i + 1..nt).map(|_| (&y as &dyn Field, &z as &dyn Field)).collect();
            l5 = l5.max(local_bsde_loss(&spec, &grid, i, &y, &z, StageTarget::Telescope(&frozen), &law, n, false, 4).unwrap());
        }
        let g = |k| global_bsde_loss(&spec, &grid, k, &y, &z, &law, n, 4).unwrap();
        [l4, l5, g(GlobalLoss::Carried), g(GlobalLoss::Local), g(GlobalLoss::Multistep)]
    };
    let coarse = losses(0.04);
    let fine = losses(0.01);
    for (j, (c, f)) in coarse.iter().zip(&fine).enumerate() {
        assert!(f < c, "loss {j}: {f} !< {c}");
    }
    // The one-step residual variance is O(Δt²), so stage and path sums are O(Δt).
    for (j, f) in fine[..4].iter().enumerate() {
        assert!(*f <= 0.01, "loss {j}: {f}");
    }
}

#[test]
fn per_step_stack_returns_g_at_the_horizon() {
    let (_, spec, law) = systemic_setup(12);
    let grid = TimeGrid::new(0.2, 3).unwrap();
    let nets = BsdeNets::PerStep {
        y: (0..3).map(|s| MeanFieldNet::bins(12, &[5], 2, false, s).unwrap()).collect(),
        z: (0..3).map(|s| MeanFieldNet::bins(12, &[5], 2, false, 10 + s).unwrap()).collect(),
    };
    let cloud = [-0.4, 0.05, 0.2, 0.9];
    let m = cloud.iter().sum::<f64>() / 4.0;
    let ys = nets.eval_y(&spec, &grid, 3, &law, &cloud).unwrap();
    for (y, &x) in ys.iter().zip(&cloud) {
        assert_eq!(*y, spec.coeffs.terminal(x, m));
    }
    assert!(nets.eval_y(&spec, &grid, 4, &law, &cloud).is_err());
    let carried = BsdeNets::Carried { u: nets.initial_y().clone(), z: MeanFieldNet::bins(12, &[5], 2, true, 1).unwrap() };
    assert!(carried.eval_y(&spec, &grid, 1, &law, &cloud).is_err());
    assert!(carried.eval_y(&spec, &grid, 3, &law, &cloud).is_ok());
}

#[test]
fn value_regression_fits_a_carried_constant() {
    let (spec, _) = inert();
    let cfg = TrainConfig {
        m_batch: 2,
        n_particles: 200,
        critic_epochs: 400,
        k_bins: 16,
        dt: 0.05,
        seed: 3,
        critic_adam: AdamConfig { lr: 1e-2, ..Default::default() },
        net: NetConfig { variant: Variant::Bin, hidden: vec![6], latent_dim: 4 },
        ..TrainConfig::default()
    };
    let nets = BsdeNets::Carried { u: constant_net(16, &[0.25, 0.0], false), z: constant_net(16, &[0.0, 0.0], true) };
    let out = regress_value_from_bsde(&nets, &spec, &cfg, 2).unwrap();
    let first = out.losses[0].loss;
    let last = out.losses.last().unwrap().loss;
    assert!(last < 1e-3 && last < first / 10.0, "{first} -> {last}");
    let again = regress_value_from_bsde(&nets, &spec, &cfg, 2).unwrap();
    assert_eq!(again.model, out.model);
}
