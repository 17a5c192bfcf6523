//! Time grid, Euler–Maruyama stepping of particle clouds and Monte Carlo cost
//! evaluation.
//!
//! Particles evolve unclamped; the truncation domain only enters through the
//! histogram estimate of the law handed to bin networks. Every cloud draws its
//! randomness from its own ChaCha stream keyed by the run seed and a tag path,
//! so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measure::{
    estimate_bin_density_into, sample_inverse_transform, std_normal, BinDensity, BinGrid, InitialDistribution,
};
use crate::mfnn::{Field, MeasureView};
use crate::problems::{BsdeSpec, Coefficients, ProblemSpec};

/// Uniform grid `t_i = iΔt` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("bad time grid T={horizon}, N_T={n_steps}")));
        }
        Ok(Self { horizon, n_steps })
    }

    /// Grid with the step closest to `dt`.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("bad time step {dt}")));
        }
        Self::new(horizon, ((horizon / dt).round() as usize).max(1))
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for the tag path `tags` under `seed`.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// `x + b Δt + σ dw`.
pub fn euler_step(coeffs: &dyn Coefficients, t: f64, x: f64, m: f64, a: f64, dw: f64, dt: f64) -> Result<f64> {
    let next = x + coeffs.drift(t, x, m, a).v * dt + coeffs.vol(t, x, m, a).v * dw;
    if !next.is_finite() {
        return Err(Error::SimulationDiverged { step: 0 });
    }
    Ok(next)
}

/// Feedback controls, either one time-dependent field or one field per step.
#[derive(Clone, Copy)]
pub enum Controls<'a> {
    Global(&'a dyn Field),
    PerStep(&'a [&'a dyn Field]),
}

impl<'a> Controls<'a> {
    pub fn at(&self, i: usize) -> &'a dyn Field {
        match self {
            Controls::Global(f) => *f,
            Controls::PerStep(v) => v[i],
        }
    }
}

/// One simulated cloud: positions `x[i*N + n]` for `i = 0..=N_T`, increments
/// `dw[i*N + n]` for `i < N_T`, law estimates per step and optional companion
/// values.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudPath {
    pub n: usize,
    pub x: Vec<f64>,
    pub dw: Vec<f64>,
    pub densities: Vec<BinDensity>,
    pub y: Option<Vec<[f64; 2]>>,
}

impl CloudPath {
    pub fn step(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + 1) * self.n]
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.step(i).iter().sum::<f64>() / self.n as f64
    }
}

/// Simulated clouds for a batch of initial laws.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub grid: TimeGrid,
    pub clouds: Vec<CloudPath>,
}

impl TrajectoryBatch {
    /// CSV dump with columns `step,m,n,x[,y,p]`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,m,n,x");
        let with_y = self.clouds.first().is_some_and(|c| c.y.is_some());
        if with_y {
            s.push_str(",y,p");
        }
        s.push('\n');
        for (m, c) in self.clouds.iter().enumerate() {
            for i in 0..=self.grid.n_steps {
                for n in 0..c.n {
                    s.push_str(&format!("{i},{m},{n},{}", c.x[i * c.n + n]));
                    if let Some(y) = &c.y {
                        let v = y[i * c.n + n];
                        s.push_str(&format!(",{},{}", v[0], v[1]));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn fill_normals(rng: &mut ChaCha8Rng, sd: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = sd * std_normal(rng);
    }
}

fn check_finite(xs: &[f64], step: usize) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::SimulationDiverged { step })
    }
}

/// Simulates one cloud from `x0` with initial density `p0` under `controls`;
/// returns the path and its average cost.
pub(crate) fn simulate_cloud(
    problem: &ProblemSpec,
    controls: Controls<'_>,
    grid: &TimeGrid,
    bins: &BinGrid,
    x0: Vec<f64>,
    p0: BinDensity,
    rng: &mut ChaCha8Rng,
) -> Result<(CloudPath, f64)> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    let nt = grid.n_steps;
    let dt = grid.dt();
    let coeffs = problem.coeffs.as_ref();
    let mut x = vec![0.0; (nt + 1) * n];
    x[..n].copy_from_slice(&x0);
    let mut dw = vec![0.0; nt * n];
    let mut densities = Vec::with_capacity(nt + 1);
    densities.push(p0);
    let mut cost = 0.0;
    let mut a = vec![0.0; n];
    for i in 0..nt {
        let t = grid.t(i);
        let field = controls.at(i);
        let (cur, next) = x.split_at_mut((i + 1) * n);
        let cur = &cur[i * n..];
        let m = mean(cur);
        let view = MeasureView { density: Some(&densities[i]), cloud: cur };
        let mut sc = field.scratch();
        let ctx = field.context(t, &view, &mut sc)?;
        let dwi = &mut dw[i * n..(i + 1) * n];
        fill_normals(rng, dt.sqrt(), dwi);
        field.eval_many(&ctx, cur, &mut sc, &mut a, &mut []);
        for (((xn, xnext), &w), &a) in cur.iter().zip(next[..n].iter_mut()).zip(dwi.iter()).zip(&a) {
            cost += coeffs.running(t, *xn, m, a).v * dt;
            *xnext = xn + coeffs.drift(t, *xn, m, a).v * dt + coeffs.vol(t, *xn, m, a).v * w;
        }
        check_finite(&next[..n], i + 1)?;
        let mut p = vec![0.0; bins.k];
        estimate_bin_density_into(&next[..n], bins, &mut p)?;
        densities.push(BinDensity { grid: *bins, p });
    }
    let last = &x[nt * n..];
    let m = mean(last);
    cost += last.iter().map(|&xn| coeffs.terminal(xn, m).v).sum::<f64>();
    Ok((CloudPath { n, x, dw, densities, y: None }, cost / n as f64))
}

/// Simulates `N` particles from each initial density under the controls.
pub fn rollout_controlled(
    problem: &ProblemSpec,
    controls: Controls<'_>,
    mu0: &[BinDensity],
    n_particles: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let mut clouds = Vec::with_capacity(mu0.len());
    for (m, d) in mu0.iter().enumerate() {
        let mut rng = substream(seed, &[m as u64]);
        let x0 = sample_inverse_transform(d, n_particles, &mut rng);
        let (path, _) = simulate_cloud(problem, controls, grid, &d.grid, x0, d.clone(), &mut rng)?;
        clouds.push(path);
    }
    Ok(TrajectoryBatch { grid: *grid, clouds })
}

/// Average cost `(1/MN) Σ [Σ_i f Δt + g]` of a batch, re-evaluating the controls
/// along the stored paths. The law enters the costs through each cloud's mean.
pub fn cost_estimate(batch: &TrajectoryBatch, controls: Controls<'_>, problem: &ProblemSpec) -> Result<f64> {
    let grid = &batch.grid;
    let dt = grid.dt();
    let coeffs = problem.coeffs.as_ref();
    let mut total = 0.0;
    let mut a = Vec::new();
    for c in &batch.clouds {
        let mut cost = 0.0;
        for i in 0..grid.n_steps {
            let t = grid.t(i);
            let cur = c.step(i);
            let m = mean(cur);
            let field = controls.at(i);
            let mut sc = field.scratch();
            let ctx = field.context(t, &MeasureView { density: Some(&c.densities[i]), cloud: cur }, &mut sc)?;
            a.resize(cur.len(), 0.0);
            field.eval_many(&ctx, cur, &mut sc, &mut a, &mut []);
            for (&xn, &a) in cur.iter().zip(&a) {
                cost += coeffs.running(t, xn, m, a).v * dt;
            }
        }
        let last = c.step(grid.n_steps);
        let m = mean(last);
        cost += last.iter().map(|&xn| coeffs.terminal(xn, m).v).sum::<f64>();
        total += cost / c.n as f64;
    }
    Ok(total / batch.clouds.len() as f64)
}

/// Monte Carlo value of the controls for one initial law: `N` particles drawn
/// from the law itself, whose binned pdf is the declared initial density.
/// Returns `(mean cost, standard error)` over `n_clouds` independent clouds.
pub fn evaluate_controls(
    problem: &ProblemSpec,
    controls: Controls<'_>,
    law: &InitialDistribution,
    bins: &BinGrid,
    grid: &TimeGrid,
    n_particles: usize,
    n_clouds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let p0 = law.to_bin_density(bins)?;
    let mut costs = Vec::with_capacity(n_clouds);
    for m in 0..n_clouds.max(1) {
        let mut rng = substream(seed, &[0xE7A1, m as u64]);
        let x0 = law.sample(n_particles, &mut rng);
        let (_, c) = simulate_cloud(problem, controls, grid, bins, x0, p0.clone(), &mut rng)?;
        costs.push(c);
    }
    Ok(mean_and_stderr(&costs))
}

pub(crate) fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

/// Forward simulation of the adjoint system. `X` moves with drift
/// `B(x, μ̄, 𝒴)`; with `z = None`, `𝒴 = y(t_i, μ̂_i)(X_i)` is read from the field
/// at every step, otherwise `𝒴` starts from the field at `t_0` and is carried
/// by `𝒴 += H Δt + 𝒵 ΔW`.
pub fn rollout_bsde_forward(
    spec: &BsdeSpec,
    y: &dyn Field,
    z: Option<&dyn Field>,
    mu0: &[BinDensity],
    n_particles: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let nt = grid.n_steps;
    let dt = grid.dt();
    let co = spec.coeffs.as_ref();
    let sigma = co.vol();
    let n = n_particles;
    let mut clouds = Vec::with_capacity(mu0.len());
    for (mi, d) in mu0.iter().enumerate() {
        let bins = d.grid;
        let mut rng = substream(seed, &[mi as u64]);
        let mut x = vec![0.0; (nt + 1) * n];
        x[..n].copy_from_slice(&sample_inverse_transform(d, n, &mut rng));
        let mut dw = vec![0.0; nt * n];
        let mut ys = vec![[0.0; 2]; (nt + 1) * n];
        let mut densities = vec![d.clone()];
        let mut ysc = y.scratch();
        let mut zsc = z.map(|f| f.scratch());
        let mut zs = vec![[0.0; 2]; if z.is_some() { n } else { 0 }];
        for i in 0..=nt {
            let t = grid.t(i);
            let (cur, next) = x.split_at_mut((i + 1) * n);
            let cur = &cur[i * n..];
            let view = MeasureView { density: Some(&densities[i]), cloud: cur };
            let m = mean(cur);
            if z.is_none() || i == 0 {
                if i == nt && z.is_none() {
                    for (k, &xn) in cur.iter().enumerate() {
                        ys[i * n + k] = co.terminal(xn, m);
                    }
                    break;
                }
                let ctx = y.context(t, &view, &mut ysc)?;
                y.eval_many(&ctx, cur, &mut ysc, ys[i * n..(i + 1) * n].as_flattened_mut(), &mut []);
            }
            if i == nt {
                break;
            }
            let dwi = &mut dw[i * n..(i + 1) * n];
            fill_normals(&mut rng, dt.sqrt(), dwi);
            let pbar = ys[i * n..(i + 1) * n].iter().map(|v| v[1]).sum::<f64>() / n as f64;
            let zctx = match (z, zsc.as_mut()) {
                (Some(zf), Some(sc)) => Some(zf.context(t, &view, sc)?),
                _ => None,
            };
            if let (Some(zf), Some(ctx), Some(sc)) = (z, zctx.as_ref(), zsc.as_mut()) {
                zf.eval_many(ctx, cur, sc, zs.as_flattened_mut(), &mut []);
            }
            for k in 0..n {
                let xn = cur[k];
                let yv = ys[i * n + k];
                next[k] = xn + co.forward_drift(t, xn, m, yv).0 * dt + sigma * dwi[k];
                if z.is_some() {
                    let buf = zs[k];
                    let h = co.driver(t, xn, m, yv, buf, pbar).h;
                    ys[(i + 1) * n + k] = [yv[0] + h[0] * dt + buf[0] * dwi[k], yv[1] + h[1] * dt + buf[1] * dwi[k]];
                }
            }
            check_finite(&next[..n], i + 1)?;
            let mut p = vec![0.0; bins.k];
            estimate_bin_density_into(&next[..n], &bins, &mut p)?;
            densities.push(BinDensity { grid: bins, p });
        }
        clouds.push(CloudPath { n, x, dw, densities, y: Some(ys) });
    }
    Ok(TrajectoryBatch { grid: *grid, clouds })
}
