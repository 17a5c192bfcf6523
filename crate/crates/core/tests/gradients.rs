//! Finite-difference checks of every hand-written backward pass.

use mfc_core::bsde_solvers::{global_bsde_loss_grad, local_bsde_loss_grad, GlobalLoss, StageTarget};
use mfc_core::dp_solvers::{rollout_cost_grad, Plan, Terminal};
use mfc_core::dynamics::TimeGrid;
use mfc_core::measure::{bin_weights_from_pdf, BinDensity, BinGrid};
use mfc_core::mfnn::{mf_eval, mf_grad, Field, MeanFieldNet, MeasureArg};
use mfc_core::nnet::{init_params, mlp_forward, mlp_grad, Activation, MlpSpec};
use mfc_core::problems::{
    BsdeCoefficients, BsdeSpec, DriverOut, MeanVarParams, MinMaxParams, ProblemSpec, SystemicParams,
    MEANVAR_DOMAIN, SYSTEMIC_DOMAIN,
};
use proptest::prelude::*;
use std::sync::Arc;

const EPS: f64 = 1e-6;

fn assert_close(label: &str, analytic: &[f64], fd: &[f64]) {
    let scale = analytic.iter().fold(1e-3_f64, |m, v| m.max(v.abs()));
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        assert!((a - f).abs() <= 2e-6 * scale.max(1.0), "{label}: param {i}: analytic {a} vs finite difference {f}");
    }
}

fn law(lo: f64, hi: f64, k: usize, centre: f64, width: f64) -> BinDensity {
    let grid = BinGrid::new(lo, hi, k).unwrap();
    bin_weights_from_pdf(|x| (-(x - centre).powi(2) / (2.0 * width * width)).exp(), &grid).unwrap()
}

/// Central differences of `f` in every parameter of `net`.
fn fd_net(net: &MeanFieldNet, mut f: impl FnMut(&MeanFieldNet) -> f64) -> Vec<f64> {
    (0..net.params.len())
        .map(|i| {
            let mut p = net.clone();
            p.params[i] += EPS;
            let up = f(&p);
            p.params[i] -= 2.0 * EPS;
            let down = f(&p);
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn cyl(out: usize, time: bool, seed: u64) -> MeanFieldNet {
    MeanFieldNet::cylindrical(3, &[5, 4], out, time, seed).unwrap()
}

fn global_plan_check(problem: &ProblemSpec, density: &BinDensity, bounded: Option<(f64, f64)>) {
    let grid = TimeGrid::new(problem.horizon, 4).unwrap();
    let mut net = cyl(1, true, 3);
    if let Some((lo, hi)) = bounded {
        net = net.with_output_bound(lo, hi).unwrap();
    }
    let cost = |n: &MeanFieldNet| {
        let p = n.prepare();
        let plan = Plan { start: 0, fields: vec![&p as &dyn Field; 4], trainable: vec![true; 4], terminal: Terminal::Cost };
        rollout_cost_grad(problem, &grid, &plan, density, 12, 5).unwrap()
    };
    let (_, g) = cost(&net);
    let fd = fd_net(&net, |n| cost(n).0);
    assert_close(&problem.name, &g, &fd);
}

#[test]
fn global_control_gradient_systemic() {
    let p = SystemicParams::default().problem(SYSTEMIC_DOMAIN);
    global_plan_check(&p, &law(SYSTEMIC_DOMAIN.0, SYSTEMIC_DOMAIN.1, 20, 0.1, 0.3), None);
}

#[test]
fn global_control_gradient_minmax() {
    let mp = MinMaxParams::default();
    let dom = mp.default_domain();
    let p = mp.problem(dom);
    global_plan_check(&p, &law(dom.0, dom.1, 20, 1.0, 0.3), None);
}

#[test]
fn global_control_gradient_meanvar_bounded() {
    let p = MeanVarParams::default().problem(MEANVAR_DOMAIN);
    global_plan_check(&p, &law(MEANVAR_DOMAIN.0, MEANVAR_DOMAIN.1, 20, 0.1, 0.2), Some((-2.0, 2.0)));
}

#[test]
fn stage_gradient_with_frozen_tail_and_critic() {
    let problem = SystemicParams::default().problem(SYSTEMIC_DOMAIN);
    let grid = TimeGrid::new(problem.horizon, 4).unwrap();
    let density = law(SYSTEMIC_DOMAIN.0, SYSTEMIC_DOMAIN.1, 20, -0.1, 0.25);
    let frozen = cyl(1, false, 8);
    let critic = cyl(1, false, 9);
    let net = cyl(1, false, 10);
    let cost = |n: &MeanFieldNet| {
        let p = n.prepare();
        let f = frozen.prepare();
        let c = critic.prepare();
        let plan = Plan {
            start: 1,
            fields: vec![&p as &dyn Field, &f],
            trainable: vec![true, false],
            terminal: Terminal::Critic(&c),
        };
        rollout_cost_grad(&problem, &grid, &plan, &density, 10, 2).unwrap()
    };
    let (_, g) = cost(&net);
    let fd = fd_net(&net, |n| cost(n).0);
    assert_close("policy stage", &g, &fd);
}

/// Driver with nonlinear couplings in every argument and a forward drift that
/// ignores `𝒴`, so finite differences see the same frozen paths as the
/// analytic gradient.
#[derive(Debug)]
struct Coupled;

impl BsdeCoefficients for Coupled {
    fn forward_drift(&self, _t: f64, x: f64, m: f64, _y: [f64; 2]) -> (f64, [f64; 2]) {
        (0.5 * (m - x), [0.0, 0.0])
    }

    fn vol(&self) -> f64 {
        0.7
    }

    fn driver(&self, _t: f64, x: f64, m: f64, y: [f64; 2], z: [f64; 2], pbar: f64) -> DriverOut {
        DriverOut {
            h: [-0.5 * y[1] * y[1] + 0.3 * z[0] * y[0] - x * m, -0.4 * (pbar - y[1]) + y[0].sin() * z[1] + x],
            dy: [[0.3 * z[0], -y[1]], [y[0].cos() * z[1], 0.4]],
            dz: [[0.3 * y[0], 0.0], [0.0, y[0].sin()]],
            dpbar: [0.0, -0.4],
        }
    }

    fn terminal(&self, x: f64, m: f64) -> [f64; 2] {
        [0.5 * (x - m) * (x - m), x - m]
    }
}

fn coupled_spec() -> BsdeSpec {
    BsdeSpec { name: "coupled".into(), horizon: 0.3, domain: (-2.0, 2.0), coeffs: Arc::new(Coupled) }
}

fn make(bin: bool, time: bool, seed: u64) -> MeanFieldNet {
    if bin {
        MeanFieldNet::bins(8, &[5, 4], 2, time, seed).unwrap()
    } else {
        cyl(2, time, seed)
    }
}

/// Checks the `[y | z]` gradient of `loss` by finite differences.
fn pair_check(label: &str, y: &MeanFieldNet, z: &MeanFieldNet, loss: impl Fn(&dyn Field, &dyn Field) -> (f64, Vec<f64>)) {
    let (_, g) = loss(&y.prepare(), &z.prepare());
    let ny = y.n_params();
    let zp = z.prepare();
    let fd_y = fd_net(y, |n| loss(&n.prepare(), &zp).0);
    let yp = y.prepare();
    let fd_z = fd_net(z, |n| loss(&yp, &n.prepare()).0);
    assert_close(&format!("{label} (𝒴)"), &g[..ny], &fd_y);
    assert_close(&format!("{label} (𝒵)"), &g[ny..], &fd_z);
}

#[test]
fn local_stage_gradients() {
    let spec = coupled_spec();
    let grid = TimeGrid::new(spec.horizon, 3).unwrap();
    let d = law(-2.0, 2.0, 8, 0.2, 0.5);
    for bin in [true, false] {
        let next = make(bin, false, 21);
        let nextp = next.prepare();
        let (y, z) = (make(bin, false, 22), make(bin, false, 23));
        for disjoint in [false, true] {
            pair_check(&format!("local bin={bin} disjoint={disjoint}"), &y, &z, |yf, zf| {
                local_bsde_loss_grad(&spec, &grid, 1, yf, zf, StageTarget::Next(Some(&nextp)), &d, 9, disjoint, 4).unwrap()
            });
        }
        pair_check(&format!("last stage bin={bin}"), &y, &z, |yf, zf| {
            local_bsde_loss_grad(&spec, &grid, 2, yf, zf, StageTarget::Next(None), &d, 9, false, 4).unwrap()
        });
    }
}

#[test]
fn multistep_stage_gradients() {
    let spec = coupled_spec();
    let grid = TimeGrid::new(spec.horizon, 3).unwrap();
    let d = law(-2.0, 2.0, 8, -0.1, 0.6);
    for bin in [true, false] {
        let tail: Vec<MeanFieldNet> = (0..4).map(|s| make(bin, false, 30 + s)).collect();
        let prepared: Vec<_> = tail.iter().map(|n| n.prepare()).collect();
        let frozen: Vec<(&dyn Field, &dyn Field)> =
            vec![(&prepared[0], &prepared[1]), (&prepared[2], &prepared[3])];
        let (y, z) = (make(bin, false, 40), make(bin, false, 41));
        for disjoint in [false, true] {
            pair_check(&format!("multistep bin={bin} disjoint={disjoint}"), &y, &z, |yf, zf| {
                local_bsde_loss_grad(&spec, &grid, 0, yf, zf, StageTarget::Telescope(&frozen), &d, 8, disjoint, 6).unwrap()
            });
        }
    }
}

#[test]
fn global_loss_gradients() {
    let spec = coupled_spec();
    let grid = TimeGrid::new(spec.horizon, 3).unwrap();
    let d = law(-2.0, 2.0, 8, 0.0, 0.4);
    for bin in [true, false] {
        for kind in [GlobalLoss::Carried, GlobalLoss::Local, GlobalLoss::Multistep] {
            let y = make(bin, kind != GlobalLoss::Carried, 50);
            let z = make(bin, true, 51);
            pair_check(&format!("{kind:?} bin={bin}"), &y, &z, |yf, zf| {
                global_bsde_loss_grad(&spec, &grid, kind, yf, zf, &d, 8, 7).unwrap()
            });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mlp_gradient_matches_finite_differences(
        widths in prop::collection::vec(1usize..6, 1..3),
        n_in in 1usize..4,
        n_out in 1usize..3,
        seed in any::<u64>(),
        x in prop::collection::vec(-1.5f64..1.5, 3),
        up in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let mut sizes = vec![n_in];
        sizes.extend(&widths);
        sizes.push(n_out);
        let spec = MlpSpec::new(sizes, Activation::Tanh).unwrap();
        let params = init_params(&spec, seed);
        let x = &x[..n_in];
        let up = &up[..n_out];
        let (g, gx) = mlp_grad(&spec, &params, x, up).unwrap();
        let f = |p: &mfc_core::nnet::MlpParams, x: &[f64]| -> f64 {
            mlp_forward(&spec, p, x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum()
        };
        for i in 0..params.flat.len() {
            let mut p = params.clone();
            p.flat[i] += EPS;
            let a = f(&p, x);
            p.flat[i] -= 2.0 * EPS;
            let b = f(&p, x);
            prop_assert!(((a - b) / (2.0 * EPS) - g[i]).abs() < 1e-6);
        }
        for j in 0..n_in {
            let mut xp = x.to_vec();
            xp[j] += EPS;
            let a = f(&params, &xp);
            xp[j] -= 2.0 * EPS;
            let b = f(&params, &xp);
            prop_assert!(((a - b) / (2.0 * EPS) - gx[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn cylindrical_gradient_matches_finite_differences(
        seed in any::<u64>(),
        cloud in prop::collection::vec(-1.0f64..1.0, 1..6),
        x in -1.0f64..1.0,
        t in 0.0f64..1.0,
        up in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let net = MeanFieldNet::cylindrical(3, &[4, 3], 2, true, seed).unwrap();
        let (g, gx) = mf_grad(&net, t, MeasureArg::Cloud(&cloud), x, &up).unwrap();
        let f = |n: &MeanFieldNet, x: f64| -> f64 {
            mf_eval(n, t, MeasureArg::Cloud(&cloud), x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        for i in 0..net.params.len() {
            let mut p = net.clone();
            p.params[i] += EPS;
            let a = f(&p, x);
            p.params[i] -= 2.0 * EPS;
            let b = f(&p, x);
            prop_assert!(((a - b) / (2.0 * EPS) - g[i]).abs() < 1e-6);
        }
        let dx = (f(&net, x + EPS) - f(&net, x - EPS)) / (2.0 * EPS);
        prop_assert!((dx - gx).abs() < 1e-6);
    }
}
