//! Trainers over the McKean-Vlasov forward-backward system `(X, 𝒴, 𝒵)` with
//! `𝒴 = (Y, P)` and `𝒵 = (Z, M)`.
//!
//! Local algorithms learn one `(𝒴, 𝒵)` pair per step. Global algorithms learn
//! time-dependent networks in a single optimisation. The forward state `X` is
//! treated as data: gradients flow through the network outputs, through the
//! empirical `P̄` of the driver and through cylindrical latents, but not
//! through the positions. `𝒴` at the terminal step is always the closed-form
//! `G`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dp_solvers::{
    batch_reduce, check_loss, draw_training_cloud, field_average, log_epoch, regression_grad, step_adam,
    LossPoint, TrainConfig, Trained,
};
use crate::dynamics::{fill_normals, mean, substream, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{estimate_bin_density_into, sample_inverse_transform, BinDensity, BinGrid, InitialDistribution};
use crate::mfnn::{Field, FieldCtx, FieldScratch, MeanFieldNet, MeasureView, RecordBuf};
use crate::nnet::AdamState;
use crate::problems::{BsdeCoefficients, BsdeSpec};

type Pair = [f64; 2];

/// Trained networks of a BSDE algorithm. Every network outputs two values:
/// `(Y, P)` for value networks and `(Z, M)` for martingale networks.
#[derive(Clone, Debug, PartialEq)]
pub enum BsdeNets {
    /// One pair per step `i = 0..N_T`, without time input.
    PerStep { y: Vec<MeanFieldNet>, z: Vec<MeanFieldNet> },
    /// Initial value network `𝒰` and a time-dependent `𝒵`; `𝒴` is carried
    /// forward along the paths.
    Carried { u: MeanFieldNet, z: MeanFieldNet },
    /// Time-dependent `𝒴` and `𝒵`.
    Global { y: MeanFieldNet, z: MeanFieldNet },
}

impl BsdeNets {
    /// The field giving `𝒴` at `t_0`.
    pub fn initial_y(&self) -> &MeanFieldNet {
        match self {
            BsdeNets::PerStep { y, .. } => &y[0],
            BsdeNets::Carried { u, .. } => u,
            BsdeNets::Global { y, .. } => y,
        }
    }

    /// `𝒴` at step `i` over a cloud with law estimate `density`. At the last
    /// step this is `G`. Carried networks have no `𝒴` field after `t_0`.
    pub fn eval_y(&self, spec: &BsdeSpec, grid: &TimeGrid, i: usize, density: &BinDensity, cloud: &[f64]) -> Result<Vec<Pair>> {
        if cloud.is_empty() {
            return Err(Error::EmptySamples);
        }
        if i > grid.n_steps {
            return Err(Error::TimeOutOfRange { t: grid.t(i), horizon: grid.horizon });
        }
        if i == grid.n_steps {
            let m = mean(cloud);
            return Ok(cloud.iter().map(|&x| spec.coeffs.terminal(x, m)).collect());
        }
        let net = match self {
            BsdeNets::PerStep { y, .. } => &y[i],
            BsdeNets::Carried { u, .. } if i == 0 => u,
            BsdeNets::Carried { .. } => {
                return Err(Error::WrongVariant("carried networks only give 𝒴 at the initial time".into()))
            }
            BsdeNets::Global { y, .. } => y,
        };
        let p = net.prepare();
        let mut sc = p.scratch();
        Ok(eval_cloud(&p, grid.t(i), &MeasureView { density: Some(density), cloud }, &mut sc, false)?.out)
    }

    /// `E_{μ0}[Y_0]` with `X_0` drawn from `law`.
    pub fn value(&self, law: &InitialDistribution, bins: &BinGrid, n: usize, seed: u64) -> Result<(f64, f64)> {
        field_average(&self.initial_y().prepare(), 0.0, law, bins, n, seed)
    }
}

/// Outputs of a field over a cloud, with the records needed to backpropagate
/// when they were requested.
struct CloudEval {
    ctx: FieldCtx,
    out: Vec<Pair>,
    rec: RecordBuf,
}

fn eval_cloud(f: &dyn Field, t: f64, view: &MeasureView<'_>, sc: &mut FieldScratch, keep: bool) -> Result<CloudEval> {
    let ctx = f.context(t, view, sc)?;
    let n = view.cloud.len();
    let rl = if keep { f.record_len() } else { 0 };
    let mut rec = RecordBuf::new(rl * n);
    let mut out = vec![[0.0; 2]; n];
    f.eval_many(&ctx, view.cloud, sc, out.as_flattened_mut(), &mut rec);
    Ok(CloudEval { ctx, out, rec })
}

/// Adds `Σ_n up_n · ∂f(x_n)/∂θ` into `grad`, including the shared measure part.
/// `ev` must come from [`eval_cloud`] on the same view with `keep` set.
fn backprop_cloud(f: &dyn Field, ev: &CloudEval, view: &MeasureView<'_>, up: &[Pair], grad: &mut [f64]) {
    let mut sc = f.scratch();
    let mut acc = vec![0.0; f.acc_len()];
    let mut dx = vec![0.0; view.cloud.len()];
    f.backward_many(&ev.ctx, view.cloud, up.as_flattened(), &mut sc, grad, &mut acc, &ev.rec, &mut dx);
    f.settle(&ev.ctx, &acc, view, &mut sc, grad, None);
}

fn histogram(xs: &[f64], bins: &BinGrid, step: usize) -> Result<BinDensity> {
    if !xs.iter().all(|v| v.is_finite()) {
        return Err(Error::SimulationDiverged { step });
    }
    let mut p = vec![0.0; bins.k];
    estimate_bin_density_into(xs, bins, &mut p)?;
    Ok(BinDensity { grid: *bins, p })
}

fn advance(co: &dyn BsdeCoefficients, t: f64, dt: f64, xs: &[f64], ys: &[Pair], dw: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let sigma = co.vol();
    xs.iter()
        .zip(ys)
        .zip(dw)
        .map(|((&x, &y), &w)| x + co.forward_drift(t, x, m, y).0 * dt + sigma * w)
        .collect()
}

fn p_bar(ys: &[Pair]) -> f64 {
    ys.iter().map(|y| y[1]).sum::<f64>() / ys.len() as f64
}

fn jt(j: &[[f64; 2]; 2], e: Pair) -> Pair {
    [j[0][0] * e[0] + j[1][0] * e[1], j[0][1] * e[0] + j[1][1] * e[1]]
}

fn sq(r: Pair) -> f64 {
    r[0] * r[0] + r[1] * r[1]
}

/// What the stage unknowns `𝒴_i + 𝒵_i ΔW_i + H_i Δt` are regressed on.
#[derive(Clone, Copy)]
pub enum StageTarget<'a> {
    /// `𝒴*_{i+1}(μ̂_{i+1})(X_{i+1})`, or `G(X_{i+1})` when `None` at the last stage.
    Next(Option<&'a dyn Field>),
    /// `G(X_{N_T}) − Σ_{j>i} (𝒵*_j ΔW_j + H*_j Δt)` with frozen pairs for
    /// `j = i+1..N_T−1`.
    Telescope(&'a [(&'a dyn Field, &'a dyn Field)]),
}

/// Stage `i` residuals over one cloud. Returns the mean squared residual;
/// with `grad` (layout `[𝒴 params | 𝒵 params]`) adds `weight ×` its gradient
/// times `N`.
#[allow(clippy::too_many_arguments)]
fn stage_cloud(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    i: usize,
    y: &dyn Field,
    z: &dyn Field,
    target: StageTarget<'_>,
    bins: &BinGrid,
    d0: &BinDensity,
    x0: &[f64],
    tilde: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = x0.len();
    if n == 0 || tilde.is_some_and(|t| t.is_empty()) {
        return Err(Error::EmptySamples);
    }
    let nt = grid.n_steps;
    if i >= nt {
        return Err(Error::InvalidParameter(format!("stage {i} beyond the last step")));
    }
    let co = spec.coeffs.as_ref();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let t = grid.t(i);
    let m = mean(x0);
    let view = MeasureView { density: Some(d0), cloud: x0 };
    let mut ysc = y.scratch();
    let mut zsc = z.scratch();
    let keep = grad.is_some();
    let yev = eval_cloud(y, t, &view, &mut ysc, keep)?;
    let zev = eval_cloud(z, t, &view, &mut zsc, keep)?;
    let (ys, zs) = (&yev.out, &zev.out);
    let tview = tilde.map(|c| MeasureView { density: Some(d0), cloud: c });
    let tilde_eval = match &tview {
        Some(v) => Some(eval_cloud(y, t, v, &mut ysc, keep)?),
        None => None,
    };
    let pbar = match &tilde_eval {
        Some(tev) => p_bar(&tev.out),
        None => p_bar(ys),
    };
    let mut dw = vec![0.0; n];
    fill_normals(rng, sdt, &mut dw);
    let x1 = advance(co, t, dt, x0, ys, &dw);
    let d1 = histogram(&x1, bins, i + 1)?;

    let targets: Vec<Pair> = match target {
        StageTarget::Next(next) => {
            if i + 1 == nt {
                let m1 = mean(&x1);
                x1.iter().map(|&x| co.terminal(x, m1)).collect()
            } else {
                let f = next.ok_or_else(|| Error::InvalidParameter("intermediate stage needs the next 𝒴 network".into()))?;
                let mut sc = f.scratch();
                eval_cloud(f, grid.t(i + 1), &MeasureView { density: Some(&d1), cloud: &x1 }, &mut sc, false)?.out
            }
        }
        StageTarget::Telescope(frozen) => {
            if frozen.len() != nt - i - 1 {
                return Err(Error::Shape(format!("expected {} frozen pairs, got {}", nt - i - 1, frozen.len())));
            }
            let tilde_next = match (tilde, &tilde_eval) {
                (Some(tx), Some(tev)) => {
                    let mut tdw = vec![0.0; tx.len()];
                    fill_normals(rng, sdt, &mut tdw);
                    let tx1 = advance(co, t, dt, tx, &tev.out, &tdw);
                    let td1 = histogram(&tx1, bins, i + 1)?;
                    Some((tx1, td1))
                }
                _ => None,
            };
            telescope(spec, grid, i + 1, frozen, bins, x1, d1, tilde_next, rng)?
        }
    };

    let mut loss = 0.0;
    let mut res = vec![[0.0; 2]; n];
    for k in 0..n {
        let h = co.driver(t, x0[k], m, ys[k], zs[k], pbar).h;
        let r = [
            targets[k][0] - ys[k][0] - zs[k][0] * dw[k] - dt * h[0],
            targets[k][1] - ys[k][1] - zs[k][1] * dw[k] - dt * h[1],
        ];
        loss += sq(r);
        res[k] = r;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::SimulationDiverged { step: i + 1 });
    }
    let Some(grad) = grad else { return Ok(loss) };

    let (gy, gz) = grad.split_at_mut(y.n_params());
    let mut uy = vec![[0.0; 2]; n];
    let mut uz = vec![[0.0; 2]; n];
    let mut dpbar = 0.0;
    for k in 0..n {
        let d = co.driver(t, x0[k], m, ys[k], zs[k], pbar);
        let dr = [2.0 * weight * res[k][0], 2.0 * weight * res[k][1]];
        let a = jt(&d.dy, dr);
        let b = jt(&d.dz, dr);
        uy[k] = [-dr[0] - dt * a[0], -dr[1] - dt * a[1]];
        uz[k] = [-dw[k] * dr[0] - dt * b[0], -dw[k] * dr[1] - dt * b[1]];
        dpbar -= dt * (dr[0] * d.dpbar[0] + dr[1] * d.dpbar[1]);
    }
    match (&tview, &tilde_eval) {
        (Some(tv), Some(tev)) => {
            let share = dpbar / tv.cloud.len() as f64;
            let up = vec![[0.0, share]; tv.cloud.len()];
            backprop_cloud(y, tev, tv, &up, gy);
        }
        _ => {
            let share = dpbar / n as f64;
            uy.iter_mut().for_each(|u| u[1] += share);
        }
    }
    backprop_cloud(y, &yev, &view, &uy, gy);
    backprop_cloud(z, &zev, &view, &uz, gz);
    Ok(loss)
}

/// Runs frozen pairs from step `start` to the horizon and returns
/// `G(X_{N_T}) − Σ_j (𝒵*_j ΔW_j + H*_j Δt)` per particle.
#[allow(clippy::too_many_arguments)]
fn telescope(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    start: usize,
    frozen: &[(&dyn Field, &dyn Field)],
    bins: &BinGrid,
    mut x: Vec<f64>,
    mut d: BinDensity,
    mut tilde: Option<(Vec<f64>, BinDensity)>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    let co = spec.coeffs.as_ref();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let n = x.len();
    let mut s = vec![[0.0; 2]; n];
    let mut dw = vec![0.0; n];
    for (j, &(yf, zf)) in frozen.iter().enumerate() {
        let step = start + j;
        let t = grid.t(step);
        let m = mean(&x);
        let mut ysc = yf.scratch();
        let mut zsc = zf.scratch();
        let view = MeasureView { density: Some(&d), cloud: &x };
        let ys = eval_cloud(yf, t, &view, &mut ysc, false)?.out;
        let zs = eval_cloud(zf, t, &view, &mut zsc, false)?.out;
        let pbar = match &mut tilde {
            Some((tx, td)) => {
                let tys = eval_cloud(yf, t, &MeasureView { density: Some(td), cloud: tx }, &mut ysc, false)?.out;
                let mut tdw = vec![0.0; tx.len()];
                fill_normals(rng, sdt, &mut tdw);
                let tx1 = advance(co, t, dt, tx, &tys, &tdw);
                *td = histogram(&tx1, bins, step + 1)?;
                *tx = tx1;
                p_bar(&tys)
            }
            None => p_bar(&ys),
        };
        fill_normals(rng, sdt, &mut dw);
        for k in 0..n {
            let h = co.driver(t, x[k], m, ys[k], zs[k], pbar).h;
            s[k][0] += zs[k][0] * dw[k] + h[0] * dt;
            s[k][1] += zs[k][1] * dw[k] + h[1] * dt;
        }
        x = advance(co, t, dt, &x, &ys, &dw);
        d = histogram(&x, bins, step + 1)?;
    }
    let m = mean(&x);
    Ok(x.iter()
        .zip(&s)
        .map(|(&xn, sn)| {
            let g = co.terminal(xn, m);
            [g[0] - sn[0], g[1] - sn[1]]
        })
        .collect())
}

/// Global losses over a whole path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalLoss {
    /// `E|𝒴_{N_T} − G(X_{N_T})|²` with `𝒴` carried from `𝒰(μ_0)(X_0)`.
    Carried,
    /// Sum over steps of one-step residuals of time-dependent networks.
    Local,
    /// Sum over steps of residuals telescoped to the terminal condition.
    Multistep,
}

/// Carried-`𝒴` loss over one cloud; gradient layout `[𝒰 params | 𝒵 params]`.
#[allow(clippy::too_many_arguments)]
fn carried_cloud(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    u: &dyn Field,
    z: &dyn Field,
    bins: &BinGrid,
    d0: &BinDensity,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    let nt = grid.n_steps;
    let co = spec.coeffs.as_ref();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let mut usc = u.scratch();
    let mut zsc = z.scratch();
    let view0 = MeasureView { density: Some(d0), cloud: x0 };
    let keep = grad.is_some();
    let uev = eval_cloud(u, grid.t(0), &view0, &mut usc, keep)?;
    let mut xs = vec![x0.to_vec()];
    let mut dens = vec![d0.clone()];
    let mut ys = vec![uev.out.clone()];
    let mut zevs: Vec<CloudEval> = Vec::with_capacity(nt);
    let mut dws: Vec<Vec<f64>> = Vec::with_capacity(nt);
    let mut pbars = Vec::with_capacity(nt);
    for i in 0..nt {
        let t = grid.t(i);
        let cur = &xs[i];
        let m = mean(cur);
        let zev = eval_cloud(z, t, &MeasureView { density: Some(&dens[i]), cloud: cur }, &mut zsc, keep)?;
        let zi = &zev.out;
        let yi = &ys[i];
        let pbar = p_bar(yi);
        let mut dw = vec![0.0; n];
        fill_normals(rng, sdt, &mut dw);
        let mut ynext = vec![[0.0; 2]; n];
        for k in 0..n {
            let h = co.driver(t, cur[k], m, yi[k], zi[k], pbar).h;
            ynext[k] = [yi[k][0] + h[0] * dt + zi[k][0] * dw[k], yi[k][1] + h[1] * dt + zi[k][1] * dw[k]];
        }
        let xnext = advance(co, t, dt, cur, yi, &dw);
        dens.push(histogram(&xnext, bins, i + 1)?);
        xs.push(xnext);
        ys.push(ynext);
        zevs.push(zev);
        dws.push(dw);
        pbars.push(pbar);
    }
    let xn = &xs[nt];
    let mn = mean(xn);
    let mut lam = vec![[0.0; 2]; n];
    let mut loss = 0.0;
    for k in 0..n {
        let g = co.terminal(xn[k], mn);
        let r = [ys[nt][k][0] - g[0], ys[nt][k][1] - g[1]];
        loss += sq(r);
        lam[k] = [2.0 * weight * r[0], 2.0 * weight * r[1]];
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::SimulationDiverged { step: nt });
    }
    let Some(grad) = grad else { return Ok(loss) };

    let (gu, gz) = grad.split_at_mut(u.n_params());
    let mut uz = vec![[0.0; 2]; n];
    for i in (0..nt).rev() {
        let t = grid.t(i);
        let cur = &xs[i];
        let m = mean(cur);
        let mut dpbar = 0.0;
        for k in 0..n {
            let d = co.driver(t, cur[k], m, ys[i][k], zevs[i].out[k], pbars[i]);
            let l = lam[k];
            let b = jt(&d.dz, l);
            uz[k] = [dws[i][k] * l[0] + dt * b[0], dws[i][k] * l[1] + dt * b[1]];
            let a = jt(&d.dy, l);
            lam[k] = [l[0] + dt * a[0], l[1] + dt * a[1]];
            dpbar += dt * (l[0] * d.dpbar[0] + l[1] * d.dpbar[1]);
        }
        let share = dpbar / n as f64;
        lam.iter_mut().for_each(|l| l[1] += share);
        backprop_cloud(z, &zevs[i], &MeasureView { density: Some(&dens[i]), cloud: cur }, &uz, gz);
    }
    backprop_cloud(u, &uev, &view0, &lam, gu);
    Ok(loss)
}

/// Summed local or telescoped residuals of time-dependent networks over one
/// cloud; gradient layout `[𝒴 params | 𝒵 params]`.
#[allow(clippy::too_many_arguments)]
fn path_cloud(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    y: &dyn Field,
    z: &dyn Field,
    multistep: bool,
    bins: &BinGrid,
    d0: &BinDensity,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    let nt = grid.n_steps;
    let co = spec.coeffs.as_ref();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let mut ysc = y.scratch();
    let mut zsc = z.scratch();
    let mut xs = vec![x0.to_vec()];
    let mut dens = vec![d0.clone()];
    let keep = grad.is_some();
    let mut yevs: Vec<CloudEval> = Vec::with_capacity(nt);
    let mut zevs: Vec<CloudEval> = Vec::with_capacity(nt);
    let mut dws: Vec<Vec<f64>> = Vec::with_capacity(nt);
    let mut pbars = Vec::with_capacity(nt);
    let mut hs: Vec<Vec<Pair>> = Vec::with_capacity(nt);
    for i in 0..nt {
        let t = grid.t(i);
        let cur = &xs[i];
        let m = mean(cur);
        let view = MeasureView { density: Some(&dens[i]), cloud: cur };
        let yev = eval_cloud(y, t, &view, &mut ysc, keep)?;
        let zev = eval_cloud(z, t, &view, &mut zsc, keep)?;
        let (yi, zi) = (&yev.out, &zev.out);
        let pbar = p_bar(yi);
        let hi: Vec<Pair> = (0..n).map(|k| co.driver(t, cur[k], m, yi[k], zi[k], pbar).h).collect();
        let mut dw = vec![0.0; n];
        fill_normals(rng, sdt, &mut dw);
        let xnext = advance(co, t, dt, cur, yi, &dw);
        dens.push(histogram(&xnext, bins, i + 1)?);
        xs.push(xnext);
        yevs.push(yev);
        zevs.push(zev);
        hs.push(hi);
        dws.push(dw);
        pbars.push(pbar);
    }
    let mn = mean(&xs[nt]);
    let g: Vec<Pair> = xs[nt].iter().map(|&x| co.terminal(x, mn)).collect();
    // 𝒴 at step i, with G at the horizon.
    let y_at = |i: usize| if i == nt { &g } else { &yevs[i].out };
    let zs: Vec<&Vec<Pair>> = zevs.iter().map(|e| &e.out).collect();

    // res[i][k]: residual of step i at particle k.
    let mut res = vec![vec![[0.0; 2]; n]; nt];
    if multistep {
        let mut s = vec![[0.0; 2]; n];
        for i in (0..nt).rev() {
            for k in 0..n {
                for c in 0..2 {
                    s[k][c] += zs[i][k][c] * dws[i][k] + hs[i][k][c] * dt;
                    res[i][k][c] = g[k][c] - s[k][c] - y_at(i)[k][c];
                }
            }
        }
    } else {
        for i in 0..nt {
            for k in 0..n {
                for c in 0..2 {
                    res[i][k][c] = y_at(i + 1)[k][c] - y_at(i)[k][c] - zs[i][k][c] * dws[i][k] - hs[i][k][c] * dt;
                }
            }
        }
    }
    let loss = res.iter().flatten().map(|&r| sq(r)).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::SimulationDiverged { step: nt });
    }
    let Some(grad) = grad else { return Ok(loss) };

    let (gy, gz) = grad.split_at_mut(y.n_params());
    let mut acc_dr = vec![[0.0; 2]; n];
    let mut prev_dr = vec![[0.0; 2]; n];
    let mut uy = vec![[0.0; 2]; n];
    let mut uz = vec![[0.0; 2]; n];
    for i in 0..nt {
        let t = grid.t(i);
        let cur = &xs[i];
        let m = mean(cur);
        let mut dpbar = 0.0;
        for k in 0..n {
            let dr = [2.0 * weight * res[i][k][0], 2.0 * weight * res[i][k][1]];
            // e multiplies the 𝒵ΔW + HΔt terms of step i.
            let e = if multistep {
                acc_dr[k] = [acc_dr[k][0] + dr[0], acc_dr[k][1] + dr[1]];
                acc_dr[k]
            } else {
                dr
            };
            let d = co.driver(t, cur[k], m, yevs[i].out[k], zs[i][k], pbars[i]);
            let a = jt(&d.dy, e);
            let b = jt(&d.dz, e);
            uy[k] = [-dr[0] - dt * a[0], -dr[1] - dt * a[1]];
            if !multistep {
                uy[k][0] += prev_dr[k][0];
                uy[k][1] += prev_dr[k][1];
                prev_dr[k] = dr;
            }
            uz[k] = [-dws[i][k] * e[0] - dt * b[0], -dws[i][k] * e[1] - dt * b[1]];
            dpbar -= dt * (e[0] * d.dpbar[0] + e[1] * d.dpbar[1]);
        }
        let share = dpbar / n as f64;
        uy.iter_mut().for_each(|u| u[1] += share);
        let view = MeasureView { density: Some(&dens[i]), cloud: cur };
        backprop_cloud(y, &yevs[i], &view, &uy, gy);
        backprop_cloud(z, &zevs[i], &view, &uz, gz);
    }
    Ok(loss)
}

fn draw_cloud(law: &BinDensity, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    sample_inverse_transform(law, n, rng)
}

/// Stage loss of the local algorithms on `n` particles drawn from `law`.
/// With `disjoint_tilde`, `P̄` is estimated on an independent cloud.
#[allow(clippy::too_many_arguments)]
pub fn local_bsde_loss(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    stage: usize,
    y: &dyn Field,
    z: &dyn Field,
    target: StageTarget<'_>,
    law: &BinDensity,
    n: usize,
    disjoint_tilde: bool,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = draw_cloud(law, n, &mut rng);
    let tilde = disjoint_tilde.then(|| draw_cloud(law, n, &mut rng));
    stage_cloud(spec, grid, stage, y, z, target, &law.grid, law, &x0, tilde.as_deref(), &mut rng, 0.0, None)
}

/// [`local_bsde_loss`] and its gradient in `[𝒴 params | 𝒵 params]`.
#[allow(clippy::too_many_arguments)]
pub fn local_bsde_loss_grad(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    stage: usize,
    y: &dyn Field,
    z: &dyn Field,
    target: StageTarget<'_>,
    law: &BinDensity,
    n: usize,
    disjoint_tilde: bool,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = draw_cloud(law, n, &mut rng);
    let tilde = disjoint_tilde.then(|| draw_cloud(law, n, &mut rng));
    let mut g = vec![0.0; y.n_params() + z.n_params()];
    let w = 1.0 / n as f64;
    let v = stage_cloud(spec, grid, stage, y, z, target, &law.grid, law, &x0, tilde.as_deref(), &mut rng, w, Some(&mut g))?;
    Ok((v, g))
}

/// Global loss on `n` particles drawn from `law`. For [`GlobalLoss::Carried`],
/// `y` is the initial network `𝒰`.
#[allow(clippy::too_many_arguments)]
pub fn global_bsde_loss(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    kind: GlobalLoss,
    y: &dyn Field,
    z: &dyn Field,
    law: &BinDensity,
    n: usize,
    seed: u64,
) -> Result<f64> {
    global_cloud(spec, grid, kind, y, z, law, n, seed, None)
}

/// [`global_bsde_loss`] and its gradient in `[𝒴 params | 𝒵 params]`.
#[allow(clippy::too_many_arguments)]
pub fn global_bsde_loss_grad(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    kind: GlobalLoss,
    y: &dyn Field,
    z: &dyn Field,
    law: &BinDensity,
    n: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; y.n_params() + z.n_params()];
    let v = global_cloud(spec, grid, kind, y, z, law, n, seed, Some(&mut g))?;
    Ok((v, g))
}

#[allow(clippy::too_many_arguments)]
fn global_cloud(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    kind: GlobalLoss,
    y: &dyn Field,
    z: &dyn Field,
    law: &BinDensity,
    n: usize,
    seed: u64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = draw_cloud(law, n, &mut rng);
    let bins = &law.grid;
    let w = 1.0 / n as f64;
    match kind {
        GlobalLoss::Carried => carried_cloud(spec, grid, y, z, bins, law, &x0, &mut rng, w, grad),
        GlobalLoss::Local => path_cloud(spec, grid, y, z, false, bins, law, &x0, &mut rng, w, grad),
        GlobalLoss::Multistep => path_cloud(spec, grid, y, z, true, bins, law, &x0, &mut rng, w, grad),
    }
}

struct PairTrainer {
    y: MeanFieldNet,
    z: MeanFieldNet,
    ay: AdamState,
    az: AdamState,
}

impl PairTrainer {
    fn new(y: MeanFieldNet, z: MeanFieldNet, cfg: &TrainConfig) -> Self {
        let ay = AdamState::new(y.n_params(), cfg.adam);
        let az = AdamState::new(z.n_params(), cfg.adam);
        Self { y, z, ay, az }
    }

    /// Runs `epochs` Adam steps on the batch average of `cloud`.
    fn fit<F>(&mut self, cfg: &TrainConfig, label: &str, stage: usize, epochs: usize, losses: &mut Vec<LossPoint>, cloud: F) -> Result<()>
    where
        F: Fn(usize, usize, &dyn Field, &dyn Field, &mut [f64]) -> Result<f64> + Sync,
    {
        let ny = self.y.n_params();
        let total = ny + self.z.n_params();
        for epoch in 0..epochs {
            let (loss, grad) = {
                let py = self.y.prepare();
                let pz = self.z.prepare();
                batch_reduce(cfg.m_batch, total, |m, g| cloud(epoch, m, &py, &pz, g))?
            };
            let loss = loss / cfg.m_batch as f64;
            check_loss(epoch, loss)?;
            step_adam(&mut self.ay, &mut self.y.params, &grad[..ny], epoch)?;
            step_adam(&mut self.az, &mut self.z.params, &grad[ny..], epoch)?;
            log_epoch(cfg, label, epoch, loss);
            losses.push(LossPoint { stage, epoch, loss });
        }
        Ok(())
    }
}

const TAG_LOCAL: u64 = 11;
const TAG_MULTI: u64 = 12;
const TAG_CARRIED: u64 = 13;
const TAG_GLOBAL_LOCAL: u64 = 14;
const TAG_GLOBAL_MULTI: u64 = 15;
const TAG_REGRESS: u64 = 16;

fn setup(spec: &BsdeSpec, cfg: &TrainConfig) -> Result<(TimeGrid, BinGrid, f64)> {
    cfg.validate()?;
    let grid = cfg.grid(spec.horizon)?;
    let bins = cfg.bins(spec.domain)?;
    Ok((grid, bins, 1.0 / (cfg.m_batch * cfg.n_particles) as f64))
}

fn draw_stage_clouds(bins: &BinGrid, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (BinDensity, Vec<f64>, Option<Vec<f64>>) {
    let (d, x0) = draw_training_cloud(bins, cfg.n_particles, rng);
    let tilde = cfg.disjoint_tilde.then(|| draw_cloud(&d, cfg.n_particles, rng));
    (d, x0, tilde)
}

fn train_backward(spec: &BsdeSpec, cfg: &TrainConfig, multistep: bool) -> Result<Trained<BsdeNets>> {
    let (grid, bins, w) = setup(spec, cfg)?;
    let nt = grid.n_steps;
    let tag = if multistep { TAG_MULTI } else { TAG_LOCAL };
    let mut ys: Vec<MeanFieldNet> = Vec::with_capacity(nt);
    let mut zs: Vec<MeanFieldNet> = Vec::with_capacity(nt);
    let mut losses = Vec::new();
    for i in (0..nt).rev() {
        let (y0, z0) = match (ys.last(), zs.last()) {
            (Some(y), Some(z)) => (y.clone(), z.clone()),
            _ => (
                cfg.make_net(2, false, cfg.seed.wrapping_add(i as u64))?,
                cfg.make_net(2, false, cfg.seed.wrapping_add(1000 + i as u64))?,
            ),
        };
        let mut pair = PairTrainer::new(y0, z0, cfg);
        {
            let py: Vec<_> = ys.iter().rev().map(|n| n.prepare()).collect();
            let pz: Vec<_> = zs.iter().rev().map(|n| n.prepare()).collect();
            let frozen: Vec<(&dyn Field, &dyn Field)> =
                py.iter().zip(&pz).map(|(a, b)| (a as &dyn Field, b as &dyn Field)).collect();
            let target = if multistep {
                StageTarget::Telescope(&frozen)
            } else {
                StageTarget::Next(frozen.first().map(|p| p.0))
            };
            let label = format!("{} stage {i}", if multistep { "multistep" } else { "backward" });
            pair.fit(cfg, &label, i, cfg.stage_budget(i + 1 == nt), &mut losses, |epoch, m, y, z, g| {
                let mut rng = substream(cfg.seed, &[tag, i as u64, epoch as u64, m as u64]);
                let (d, x0, tilde) = draw_stage_clouds(&bins, cfg, &mut rng);
                stage_cloud(spec, &grid, i, y, z, target, &bins, &d, &x0, tilde.as_deref(), &mut rng, w, Some(g))
            })?;
        }
        ys.push(pair.y);
        zs.push(pair.z);
    }
    ys.reverse();
    zs.reverse();
    Ok(Trained { model: BsdeNets::PerStep { y: ys, z: zs }, losses })
}

/// Local deep backward scheme: one `(𝒴_i, 𝒵_i)` pair per step, each stage
/// fitted to the frozen next `𝒴*_{i+1}` (or `G`).
pub fn train_deep_backward(spec: &BsdeSpec, cfg: &TrainConfig) -> Result<Trained<BsdeNets>> {
    train_backward(spec, cfg, false)
}

/// Backward multi-step scheme: each stage is fitted to `G` minus the frozen
/// downstream increments. Stage `i` simulates `N_T − i` steps, so an epoch
/// sweep costs `O(N_T²)` steps in total.
pub fn train_multistep_backward(spec: &BsdeSpec, cfg: &TrainConfig) -> Result<Trained<BsdeNets>> {
    train_backward(spec, cfg, true)
}

fn train_global(spec: &BsdeSpec, cfg: &TrainConfig, kind: GlobalLoss) -> Result<Trained<BsdeNets>> {
    let (grid, bins, w) = setup(spec, cfg)?;
    let y0 = cfg.make_net(2, kind != GlobalLoss::Carried, cfg.seed)?;
    let z0 = cfg.make_net(2, true, cfg.seed.wrapping_add(1000))?;
    let mut pair = PairTrainer::new(y0, z0, cfg);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let (tag, label) = match kind {
        GlobalLoss::Carried => (TAG_CARRIED, "deep MKV BSDE"),
        GlobalLoss::Local => (TAG_GLOBAL_LOCAL, "global/local"),
        GlobalLoss::Multistep => (TAG_GLOBAL_MULTI, "global multistep"),
    };
    pair.fit(cfg, label, 0, cfg.epochs, &mut losses, |epoch, m, y, z, g| {
        let mut rng = substream(cfg.seed, &[tag, epoch as u64, m as u64]);
        let (d, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
        match kind {
            GlobalLoss::Carried => carried_cloud(spec, &grid, y, z, &bins, &d, &x0, &mut rng, w, Some(g)),
            GlobalLoss::Local => path_cloud(spec, &grid, y, z, false, &bins, &d, &x0, &mut rng, w, Some(g)),
            GlobalLoss::Multistep => path_cloud(spec, &grid, y, z, true, &bins, &d, &x0, &mut rng, w, Some(g)),
        }
    })?;
    let model = match kind {
        GlobalLoss::Carried => BsdeNets::Carried { u: pair.y, z: pair.z },
        _ => BsdeNets::Global { y: pair.y, z: pair.z },
    };
    Ok(Trained { model, losses })
}

/// Global scheme carrying `𝒴` forward from `𝒰(μ_0)(X_0)` and penalising the
/// terminal mismatch.
pub fn train_deep_mkv_global(spec: &BsdeSpec, cfg: &TrainConfig) -> Result<Trained<BsdeNets>> {
    train_global(spec, cfg, GlobalLoss::Carried)
}

/// Time-dependent `(𝒴, 𝒵)` trained on the sum of one-step residuals.
pub fn train_global_local(spec: &BsdeSpec, cfg: &TrainConfig) -> Result<Trained<BsdeNets>> {
    train_global(spec, cfg, GlobalLoss::Local)
}

/// Time-dependent `(𝒴, 𝒵)` trained on the sum of residuals telescoped to `G`.
pub fn train_global_multistep(spec: &BsdeSpec, cfg: &TrainConfig) -> Result<Trained<BsdeNets>> {
    train_global(spec, cfg, GlobalLoss::Multistep)
}

/// Carries `𝒴` from `t_0` to step `k` with the trained `𝒵` and returns the
/// cloud, its law estimate and the carried values.
#[allow(clippy::too_many_arguments)]
fn carry_to(
    spec: &BsdeSpec,
    grid: &TimeGrid,
    nets: &BsdeNets,
    k: usize,
    bins: &BinGrid,
    d0: BinDensity,
    x0: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(BinDensity, Vec<f64>, Vec<Pair>)> {
    let co = spec.coeffs.as_ref();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let n = x0.len();
    let y0 = nets.initial_y().prepare();
    let mut sc = y0.scratch();
    let mut ys = eval_cloud(&y0, grid.t(0), &MeasureView { density: Some(&d0), cloud: &x0 }, &mut sc, false)?.out;
    let (mut x, mut d) = (x0, d0);
    let zs_per_step: Vec<_> = match nets {
        BsdeNets::PerStep { z, .. } => z.iter().take(k).map(|n| n.prepare()).collect(),
        BsdeNets::Carried { z, .. } | BsdeNets::Global { z, .. } => vec![z.prepare()],
    };
    let mut dw = vec![0.0; n];
    for i in 0..k {
        let t = grid.t(i);
        let zf = &zs_per_step[if zs_per_step.len() == 1 { 0 } else { i }];
        let mut zsc = zf.scratch();
        let zs = eval_cloud(zf, t, &MeasureView { density: Some(&d), cloud: &x }, &mut zsc, false)?.out;
        let m = mean(&x);
        let pbar = p_bar(&ys);
        fill_normals(rng, sdt, &mut dw);
        let xn = advance(co, t, dt, &x, &ys, &dw);
        for j in 0..n {
            let h = co.driver(t, x[j], m, ys[j], zs[j], pbar).h;
            ys[j] = [ys[j][0] + h[0] * dt + zs[j][0] * dw[j], ys[j][1] + h[1] * dt + zs[j][1] * dw[j]];
        }
        d = histogram(&xn, bins, i + 1)?;
        x = xn;
    }
    Ok((d, x, ys))
}

/// Fits a value network `ϑ(μ_k)(x)` to the `Y` component carried to step `k`
/// along the forward paths of the trained networks.
pub fn regress_value_from_bsde(nets: &BsdeNets, spec: &BsdeSpec, cfg: &TrainConfig, k: usize) -> Result<Trained<MeanFieldNet>> {
    let (grid, bins, w) = setup(spec, cfg)?;
    if k > grid.n_steps {
        return Err(Error::InvalidParameter(format!("step {k} beyond the horizon")));
    }
    if let BsdeNets::PerStep { y, z } = nets {
        if y.len() != grid.n_steps || z.len() != grid.n_steps {
            return Err(Error::Shape(format!("{} networks for {} steps", y.len(), grid.n_steps)));
        }
    }
    let mut value = cfg.make_net(1, false, cfg.seed.wrapping_add(7919))?;
    let mut adam = AdamState::new(value.n_params(), cfg.critic_adam);
    let mut losses = Vec::with_capacity(cfg.critic_epochs);
    for epoch in 0..cfg.critic_epochs {
        let (loss, grad) = {
            let vp = value.prepare();
            batch_reduce(cfg.m_batch, value.n_params(), |m, g| {
                let mut rng = substream(cfg.seed, &[TAG_REGRESS, k as u64, epoch as u64, m as u64]);
                let (d0, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
                let (d, x, ys) = carry_to(spec, &grid, nets, k, &bins, d0, x0, &mut rng)?;
                let target: Vec<f64> = ys.iter().map(|y| y[0]).collect();
                regression_grad(&vp, grid.t(k), &MeasureView { density: Some(&d), cloud: &x }, &target, w, g)
            })?
        };
        let loss = loss / cfg.m_batch as f64;
        check_loss(epoch, loss)?;
        step_adam(&mut adam, &mut value.params, &grad, epoch)?;
        log_epoch(cfg, &format!("BSDE value regression step {k}"), epoch, loss);
        losses.push(LossPoint { stage: k, epoch, loss });
    }
    Ok(Trained { model: value, losses })
}
