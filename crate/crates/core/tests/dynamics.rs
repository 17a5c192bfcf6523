//! Particle rollouts against exact solutions and Monte Carlo envelopes.

use std::sync::Arc;

use mfc_core::dynamics::{cost_estimate, rollout_bsde_forward, rollout_controlled, Controls, TimeGrid};
use mfc_core::measure::{density_moments, BinGrid};
use mfc_core::mfnn::{Field, MeanFieldNet};
use mfc_core::problems::{
    systemic_case, BsdeCoefficients, BsdeSpec, Coefficients, DriverOut, Partials, ProblemSpec,
    SystemicOptimalControl, SystemicParams, SYSTEMIC_DOMAIN,
};

fn zero_net(k: usize, out: usize) -> MeanFieldNet {
    let mut n = MeanFieldNet::bins(k, &[4], out, true, 0).unwrap();
    n.params.iter_mut().for_each(|p| *p = 0.0);
    n
}

fn systemic_bins(k: usize) -> BinGrid {
    BinGrid::new(SYSTEMIC_DOMAIN.0, SYSTEMIC_DOMAIN.1, k).unwrap()
}

/// `dX = σ dW` whatever the action.
#[derive(Debug)]
struct Brownian(f64);

impl Coefficients for Brownian {
    fn drift(&self, _: f64, _: f64, _: f64, _: f64) -> Partials {
        Partials::default()
    }
    fn vol(&self, _: f64, _: f64, _: f64, _: f64) -> Partials {
        Partials { v: self.0, ..Partials::default() }
    }
    fn running(&self, _: f64, _: f64, _: f64, _: f64) -> Partials {
        Partials::default()
    }
    fn terminal(&self, _: f64, _: f64) -> Partials {
        Partials::default()
    }
    fn vol_controlled(&self) -> bool {
        false
    }
}

#[test]
fn bin_estimates_track_cloud_means() {
    let p = SystemicParams::default();
    let problem = p.problem(SYSTEMIC_DOMAIN);
    let ctrl = SystemicOptimalControl(p);
    let bins = systemic_bins(50);
    let mu0: Vec<_> = [1, 2, 5].iter().map(|&c| systemic_case(c).unwrap().to_bin_density(&bins).unwrap()).collect();
    let grid = TimeGrid::with_step(0.2, 0.02).unwrap();
    let batch = rollout_controlled(&problem, Controls::Global(&ctrl), &mu0, 5000, &grid, 1).unwrap();
    let h = bins.width();
    let mut checked = 0;
    for c in &batch.clouds {
        for i in 1..=grid.n_steps {
            // Clamped outliers legitimately pull the estimate off the cloud mean.
            if c.step(i).iter().any(|x| !(bins.lo..=bins.hi).contains(x)) {
                continue;
            }
            let gap = (density_moments(&c.densities[i]).0 - c.mean(i)).abs();
            assert!(gap <= h, "step {i}: {gap}");
            checked += 1;
        }
    }
    assert!(checked >= grid.n_steps, "only {checked} unclamped steps");
}

#[test]
fn brownian_increments_have_variance_dt() {
    let problem =
        ProblemSpec { name: "bm".into(), horizon: 0.2, domain: (-3.0, 3.0), coeffs: Arc::new(Brownian(1.0)) };
    let bins = BinGrid::new(-3.0, 3.0, 30).unwrap();
    let d0 = systemic_case(1).unwrap().to_bin_density(&bins).unwrap();
    let grid = TimeGrid::with_step(0.2, 0.02).unwrap();
    let net = zero_net(30, 1);
    let f = net.prepare();
    let n = 20_000;
    let batch = rollout_controlled(&problem, Controls::Global(&f), &[d0], n, &grid, 4).unwrap();
    let c = &batch.clouds[0];
    let dt = grid.dt();
    let k = c.dw.len() as f64;
    let var = c.dw.iter().map(|w| w * w).sum::<f64>() / k;
    // Var of w² is 2 dt².
    assert!((var - dt).abs() < 3.0 * (2.0 * dt * dt / k).sqrt(), "{var}");
    // Cloud mean stays inside the Brownian CLT envelope.
    let m0 = c.mean(0);
    for i in 1..=grid.n_steps {
        let env = 3.0 * (grid.t(i) / n as f64).sqrt();
        assert!((c.mean(i) - m0).abs() <= env, "step {i}");
    }
}

#[test]
fn euler_error_on_deterministic_systemic_drift_is_first_order() {
    // σ = 0, a = 0: X_t - μ̄ = (X_0 - μ̄) e^{-κt} with μ̄ constant.
    let p = SystemicParams { sigma: 0.0, horizon: 0.2, ..Default::default() };
    let problem = p.problem(SYSTEMIC_DOMAIN);
    let bins = systemic_bins(40);
    let d0 = systemic_case(5).unwrap().to_bin_density(&bins).unwrap();
    let net = zero_net(40, 1);
    let f = net.prepare();
    let err = |dt: f64| {
        let grid = TimeGrid::with_step(0.2, dt).unwrap();
        let b = rollout_controlled(&problem, Controls::Global(&f), &[d0.clone()], 500, &grid, 2).unwrap();
        let c = &b.clouds[0];
        let m = c.mean(0);
        let decay = (-p.kappa * 0.2).exp();
        c.step(0)
            .iter()
            .zip(c.step(grid.n_steps))
            .map(|(x0, xt)| (xt - (m + (x0 - m) * decay)).abs())
            .fold(0.0, f64::max)
    };
    let (e2, e1) = (err(0.02), err(0.01));
    assert!(e2 > 0.0 && e1 < e2);
    let ratio = e2 / e1;
    assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn terminal_only_cost_of_systemic_case_one() {
    // A vanishing horizon leaves only E[g] = (c/2) Var.
    let p = SystemicParams { horizon: 1e-9, ..Default::default() };
    let problem = p.problem(SYSTEMIC_DOMAIN);
    let bins = systemic_bins(100);
    let law = systemic_case(1).unwrap();
    let d0 = law.to_bin_density(&bins).unwrap();
    let net = zero_net(100, 1);
    let f = net.prepare();
    let grid = TimeGrid::new(p.horizon, 1).unwrap();
    let n = 100_000;
    let batch = rollout_controlled(&problem, Controls::Global(&f), &[d0.clone()], n, &grid, 6).unwrap();
    let j = cost_estimate(&batch, Controls::Global(&f), &problem).unwrap();
    // Samples are uniform inside bins, which adds h²/12 to the variance.
    let var = density_moments(&d0).1 + bins.width().powi(2) / 12.0;
    let want = 0.5 * p.c * var;
    let sd = 0.5 * p.c * var * (2.0 / n as f64).sqrt();
    assert!((j - want).abs() <= 3.0 * sd, "{j} vs {want}");
    assert!((want - 0.04).abs() < 2e-3);
}

#[derive(Debug)]
struct Inert;

impl BsdeCoefficients for Inert {
    fn forward_drift(&self, _: f64, _: f64, _: f64, _: [f64; 2]) -> (f64, [f64; 2]) {
        (0.0, [0.0; 2])
    }
    fn vol(&self) -> f64 {
        0.5
    }
    fn driver(&self, _: f64, _: f64, _: f64, _: [f64; 2], _: [f64; 2], _: f64) -> DriverOut {
        DriverOut::default()
    }
    fn terminal(&self, _: f64, _: f64) -> [f64; 2] {
        [0.0; 2]
    }
}

#[test]
fn carried_values_stay_constant_without_driver_or_noise_loading() {
    let spec = BsdeSpec { name: "inert".into(), horizon: 0.2, domain: (-2.0, 2.0), coeffs: Arc::new(Inert) };
    let bins = BinGrid::new(-2.0, 2.0, 20).unwrap();
    let d0 = systemic_case(1).unwrap().to_bin_density(&bins).unwrap();
    let y = MeanFieldNet::bins(20, &[5], 2, true, 3).unwrap();
    let z = zero_net(20, 2);
    let (yf, zf) = (y.prepare(), z.prepare());
    let grid = TimeGrid::new(0.2, 5).unwrap();
    let b = rollout_bsde_forward(&spec, &yf, Some(&zf as &dyn Field), &[d0], 300, &grid, 1).unwrap();
    let c = &b.clouds[0];
    let ys = c.y.as_ref().unwrap();
    for i in 1..=grid.n_steps {
        assert_eq!(&ys[i * c.n..(i + 1) * c.n], &ys[..c.n]);
    }
}

#[test]
fn systemic_forward_cloud_mean_moves_only_with_the_noise() {
    let p = SystemicParams::default();
    let spec = p.bsde(SYSTEMIC_DOMAIN);
    let bins = systemic_bins(50);
    let d0 = systemic_case(4).unwrap().to_bin_density(&bins).unwrap();
    let y = zero_net(50, 2);
    let yf = y.prepare();
    let grid = TimeGrid::with_step(0.2, 0.02).unwrap();
    let run = |seed| rollout_bsde_forward(&spec, &yf, None, &[d0.clone()], 2000, &grid, seed).unwrap();
    let b = run(5);
    assert_eq!(b, run(5));
    let c = &b.clouds[0];
    let n = c.n;
    let mut expected = c.mean(0);
    for i in 0..grid.n_steps {
        // With P ≡ 0 the drift (κ+q)(μ̄ - x) averages to zero over the cloud.
        expected += p.sigma * c.dw[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
        assert!((c.mean(i + 1) - expected).abs() < 1e-12, "step {}", i + 1);
    }
    // The last slot holds the closed-form terminal values.
    let ys = c.y.as_ref().unwrap();
    let last = c.step(grid.n_steps);
    let m = c.mean(grid.n_steps);
    for (k, &x) in last.iter().enumerate() {
        assert_eq!(ys[grid.n_steps * n + k], spec.coeffs.terminal(x, m));
    }
}

#[test]
fn one_step_grid_estimates_once() {
    let p = SystemicParams::default();
    let problem = p.problem(SYSTEMIC_DOMAIN);
    let bins = systemic_bins(20);
    let d0 = systemic_case(2).unwrap().to_bin_density(&bins).unwrap();
    let ctrl = SystemicOptimalControl(p);
    let grid = TimeGrid::new(0.2, 1).unwrap();
    let b = rollout_controlled(&problem, Controls::Global(&ctrl), &[d0.clone(), d0.clone()], 100, &grid, 0).unwrap();
    for c in &b.clouds {
        assert_eq!(c.densities.len(), 2);
        assert_eq!(c.densities[0], d0);
        assert_eq!(c.x.len(), 200);
    }
    assert_ne!(b.clouds[0].x, b.clouds[1].x);
}
