//! Dynamic-programming trainers: global control learning, policy iteration and
//! actor/critic value iteration, plus value regression.
//!
//! All of them differentiate the Monte Carlo cost through the particle clouds.
//! This includes the law dependence that enters through cloud means, and the
//! latent average of cylindrical networks. Histogram inputs of bin networks are
//! treated as data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fill_normals, mean, substream, Controls, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{
    estimate_bin_density_into, random_training_density, sample_inverse_transform, BinDensity, BinGrid,
    InitialDistribution,
};
use crate::mfnn::{Field, FieldCtx, MeanFieldNet, MeasureView, PreparedNet, RecordBuf};
use crate::nnet::{adam_step, AdamConfig, AdamState};
use crate::problems::ProblemSpec;

/// Measure encoding of the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Bin,
    Cylindrical,
}

/// Network architecture shared by all trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub variant: Variant,
    pub hidden: Vec<usize>,
    /// Latent dimension `q` of cylindrical networks.
    pub latent_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { variant: Variant::Bin, hidden: vec![20, 20], latent_dim: 20 }
    }
}

/// Training settings shared by the DP and BSDE trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of training laws per epoch, `M`.
    pub m_batch: usize,
    /// Particles per law, `N`.
    pub n_particles: usize,
    /// Epochs of global trainers, and of the first stage of backward trainers.
    pub epochs: usize,
    /// Epochs of the later, warm-started stages of backward trainers.
    pub stage_epochs: usize,
    /// Epochs of each critic fit in value iteration and of value regressions.
    pub critic_epochs: usize,
    pub k_bins: usize,
    pub dt: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub critic_adam: AdamConfig,
    pub net: NetConfig,
    /// Draw an independent cloud for the tilde expectations of BSDE drivers.
    pub disjoint_tilde: bool,
    /// Print a progress line every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m_batch: 5,
            n_particles: 10_000,
            epochs: 3000,
            stage_epochs: 3000,
            critic_epochs: 3000,
            k_bins: 50,
            dt: 0.02,
            seed: 0,
            adam: AdamConfig::default(),
            critic_adam: AdamConfig::default(),
            net: NetConfig::default(),
            disjoint_tilde: false,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_batch == 0 || self.n_particles == 0 {
            return Err(Error::InvalidParameter("M and N must be positive".into()));
        }
        if self.k_bins == 0 || !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("K and dt must be positive".into()));
        }
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::with_step(horizon, self.dt)
    }

    pub fn bins(&self, domain: (f64, f64)) -> Result<BinGrid> {
        BinGrid::new(domain.0, domain.1, self.k_bins)
    }

    /// A fresh network of the configured architecture.
    pub fn make_net(&self, out_dim: usize, time_input: bool, seed: u64) -> Result<MeanFieldNet> {
        match self.net.variant {
            Variant::Bin => MeanFieldNet::bins(self.k_bins, &self.net.hidden, out_dim, time_input, seed),
            Variant::Cylindrical => {
                MeanFieldNet::cylindrical(self.net.latent_dim, &self.net.hidden, out_dim, time_input, seed)
            }
        }
    }

    pub(crate) fn stage_budget(&self, first: bool) -> usize {
        if first {
            self.epochs
        } else {
            self.stage_epochs
        }
    }
}

/// What closes a rollout at its last step.
#[derive(Clone, Copy)]
pub enum Terminal<'a> {
    /// The terminal cost `g`.
    Cost,
    /// A value network evaluated at the estimated law of the last step.
    Critic(&'a dyn Field),
}

/// Controls applied on steps `start..start + fields.len()`. Trainable steps
/// share one parameter vector.
pub struct Plan<'a> {
    pub start: usize,
    pub fields: Vec<&'a dyn Field>,
    pub trainable: Vec<bool>,
    pub terminal: Terminal<'a>,
}

/// Forward rollout of one cloud under `plan`, followed by the reverse sweep.
///
/// Returns the cloud's average cost. With `grad`, adds `weight ×` the gradient
/// of the average cost with respect to the trainable parameters. With
/// `per_particle`, stores each particle's cost-to-go.
pub(crate) fn cloud_cost_grad(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    plan: &Plan<'_>,
    bins: &BinGrid,
    x0: &[f64],
    p0: &BinDensity,
    rng: &mut ChaCha8Rng,
    weight: f64,
    grad: Option<&mut [f64]>,
    per_particle: Option<&mut [f64]>,
) -> Result<f64> {
    let n = x0.len();
    let steps = plan.fields.len();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let co = problem.coeffs.as_ref();
    let mut xs = vec![0.0; (steps + 1) * n];
    xs[..n].copy_from_slice(x0);
    let mut acts = vec![0.0; steps * n];
    let mut dws = vec![0.0; steps * n];
    let mut dens: Vec<BinDensity> = Vec::with_capacity(steps + 1);
    dens.push(p0.clone());
    let mut ctxs: Vec<FieldCtx> = Vec::with_capacity(steps);
    let mut means = Vec::with_capacity(steps + 1);
    let mut running = vec![0.0; if per_particle.is_some() { n } else { 0 }];
    let mut cost = 0.0;
    // Activations of every evaluation, kept for the reverse sweep.
    let mut rec_off = Vec::with_capacity(steps);
    let mut rec_total = 0;
    for f in &plan.fields {
        rec_off.push(rec_total);
        if grad.is_some() {
            rec_total += f.record_len() * n;
        }
    }
    let mut records = RecordBuf::new(rec_total);
    for j in 0..steps {
        let t = grid.t(plan.start + j);
        let field = plan.fields[j];
        let (cur, next) = xs.split_at_mut((j + 1) * n);
        let cur = &cur[j * n..];
        let m = mean(cur);
        means.push(m);
        let mut sc = field.scratch();
        let ctx = field.context(t, &MeasureView { density: Some(&dens[j]), cloud: cur }, &mut sc)?;
        let dw = &mut dws[j * n..(j + 1) * n];
        fill_normals(rng, sdt, dw);
        let next = &mut next[..n];
        let act = &mut acts[j * n..(j + 1) * n];
        let rec = &mut records[rec_off[j]..rec_off[j] + if grad.is_some() { field.record_len() * n } else { 0 }];
        field.eval_many(&ctx, cur, &mut sc, act, rec);
        for k in 0..n {
            let x = cur[k];
            let f = co.running(t, x, m, act[k]).v * dt;
            cost += f;
            if !running.is_empty() {
                running[k] += f;
            }
            next[k] = x + co.drift(t, x, m, act[k]).v * dt + co.vol(t, x, m, act[k]).v * dw[k];
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::SimulationDiverged { step: plan.start + j + 1 });
        }
        let mut p = vec![0.0; bins.k];
        estimate_bin_density_into(next, bins, &mut p)?;
        dens.push(BinDensity { grid: *bins, p });
        ctxs.push(ctx);
    }
    let last = &xs[steps * n..];
    let m_last = mean(last);
    let t_end = grid.t(plan.start + steps);
    let mut lam = vec![0.0; n];
    let last_view = MeasureView { density: Some(&dens[steps]), cloud: last };
    match plan.terminal {
        Terminal::Cost => {
            let mut dm = 0.0;
            for k in 0..n {
                let g = co.terminal(last[k], m_last);
                cost += g.v;
                if !running.is_empty() {
                    running[k] += g.v;
                }
                lam[k] = weight * g.dx;
                dm += weight * g.dm;
            }
            let share = dm / n as f64;
            lam.iter_mut().for_each(|l| *l += share);
        }
        Terminal::Critic(v) => {
            let mut sc = v.scratch();
            let ctx = v.context(t_end, &last_view, &mut sc)?;
            let mut acc = vec![0.0; v.acc_len()];
            let mut dummy = vec![0.0; v.n_params()];
            let mut vals = vec![0.0; n];
            let mut rec = vec![0.0; if grad.is_some() { v.record_len() * n } else { 0 }];
            v.eval_many(&ctx, last, &mut sc, &mut vals, &mut rec);
            cost += vals.iter().sum::<f64>();
            if !running.is_empty() {
                running.iter_mut().zip(&vals).for_each(|(r, v)| *r += v);
            }
            if grad.is_some() {
                let up = vec![weight; n];
                v.backward_many(&ctx, last, &up, &mut sc, &mut dummy, &mut acc, &rec, &mut lam);
            }
            if grad.is_some() {
                v.settle(&ctx, &acc, &last_view, &mut sc, &mut dummy, Some(&mut lam));
            }
        }
    }
    if let Some(pp) = per_particle {
        pp.copy_from_slice(&running);
    }
    let avg = cost / n as f64;
    if !avg.is_finite() {
        return Err(Error::SimulationDiverged { step: plan.start + steps });
    }
    let Some(grad) = grad else { return Ok(avg) };

    let mut new_lam = vec![0.0; n];
    let mut das = vec![0.0; n];
    let mut dx_net = vec![0.0; n];
    for j in (0..steps).rev() {
        let t = grid.t(plan.start + j);
        let field = plan.fields[j];
        let cur = &xs[j * n..(j + 1) * n];
        let m = means[j];
        let ctx = &ctxs[j];
        let act = &acts[j * n..(j + 1) * n];
        let dw = &dws[j * n..(j + 1) * n];
        let mut sc = field.scratch();
        let mut acc = vec![0.0; field.acc_len()];
        let mut frozen = Vec::new();
        let g: &mut [f64] = if plan.trainable[j] {
            &mut *grad
        } else {
            frozen.resize(field.n_params(), 0.0);
            &mut frozen
        };
        let mut dm = 0.0;
        for k in 0..n {
            let (x, a, w, l) = (cur[k], act[k], dw[k], lam[k]);
            let f = co.running(t, x, m, a);
            let b = co.drift(t, x, m, a);
            let s = co.vol(t, x, m, a);
            das[k] = weight * f.da * dt + l * (b.da * dt + s.da * w);
            new_lam[k] = weight * f.dx * dt + l * (1.0 + b.dx * dt + s.dx * w);
            dm += weight * f.dm * dt + l * (b.dm * dt + s.dm * w);
        }
        let rec = &records[rec_off[j]..rec_off[j] + field.record_len() * n];
        field.backward_many(ctx, cur, &das, &mut sc, g, &mut acc, rec, &mut dx_net);
        new_lam.iter_mut().zip(&dx_net).for_each(|(l, d)| *l += d);
        let view = MeasureView { density: Some(&dens[j]), cloud: cur };
        if j > 0 {
            field.settle(ctx, &acc, &view, &mut sc, g, Some(&mut new_lam));
            let share = dm / n as f64;
            new_lam.iter_mut().for_each(|l| *l += share);
        } else {
            field.settle(ctx, &acc, &view, &mut sc, g, None);
        }
        std::mem::swap(&mut lam, &mut new_lam);
    }
    Ok(avg)
}

/// Average cost of one cloud of `n` particles drawn from `law` under `plan`,
/// and its gradient in the parameters of the trainable steps.
pub fn rollout_cost_grad(
    problem: &ProblemSpec,
    grid: &TimeGrid,
    plan: &Plan<'_>,
    law: &BinDensity,
    n: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if plan.fields.len() != plan.trainable.len() || plan.start + plan.fields.len() > grid.n_steps {
        return Err(Error::Shape("plan does not fit the time grid".into()));
    }
    let n_params = plan.fields.iter().zip(&plan.trainable).find(|(_, &t)| t).map_or(0, |(f, _)| f.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = sample_inverse_transform(law, n, &mut rng);
    let mut g = vec![0.0; n_params];
    let v = cloud_cost_grad(problem, grid, plan, &law.grid, &x0, law, &mut rng, 1.0 / n as f64, Some(&mut g), None)?;
    Ok((v, g))
}

/// Runs `clouds` independent clouds in parallel and reduces in index order.
pub(crate) fn batch_reduce<F>(m: usize, n_params: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync,
{
    let parts: Vec<Result<(f64, Vec<f64>)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; n_params];
            let v = f(i, &mut g)?;
            Ok((v, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    for p in parts {
        let (v, g) = p?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// A training law and particles drawn from it.
pub(crate) fn draw_training_cloud(bins: &BinGrid, n: usize, rng: &mut ChaCha8Rng) -> (BinDensity, Vec<f64>) {
    let d = random_training_density(bins, rng);
    let x = sample_inverse_transform(&d, n, rng);
    (d, x)
}

pub(crate) fn log_epoch(cfg: &TrainConfig, label: &str, epoch: usize, loss: f64) {
    if cfg.log_every > 0 && (epoch % cfg.log_every == 0) {
        eprintln!("{label} epoch {epoch:>6} loss {loss:.6}");
    }
}

pub(crate) fn diverged(epoch: usize, loss: f64) -> Error {
    Error::TrainingDiverged { epoch, detail: format!("loss {loss}") }
}

pub(crate) fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(diverged(epoch, loss))
    }
}

pub(crate) fn step_adam(state: &mut AdamState, params: &mut [f64], grad: &[f64], epoch: usize) -> Result<()> {
    adam_step(state, params, grad).map_err(|e| match e {
        Error::TrainingDiverged { detail, .. } => Error::TrainingDiverged { epoch, detail },
        other => other,
    })
}

/// Training loss of one epoch. `stage` is the step index of backward
/// trainers and 0 for global ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Trained networks plus the loss curve.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: T,
    pub losses: Vec<LossPoint>,
}

/// CSV with columns `stage,epoch,loss`.
pub fn loss_curve_csv(losses: &[LossPoint]) -> String {
    let mut s = String::from("stage,epoch,loss\n");
    for p in losses {
        s.push_str(&format!("{},{},{}\n", p.stage, p.epoch, p.loss));
    }
    s
}

/// One evaluated case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub k_bins: usize,
    pub dt: f64,
    pub case: usize,
    pub calc: f64,
    pub reference: Option<f64>,
    pub abs_err: Option<f64>,
    pub wall_secs: f64,
}

impl ReportRow {
    pub fn new(method: &str, k_bins: usize, dt: f64, case: usize, calc: f64, reference: Option<f64>, wall_secs: f64) -> Self {
        Self {
            method: method.to_string(),
            k_bins,
            dt,
            case,
            calc,
            reference,
            abs_err: reference.map(|r| (calc - r).abs()),
            wall_secs,
        }
    }
}

/// Evaluated cases of a run together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub rows: Vec<ReportRow>,
    pub config: TrainConfig,
}

const TAG_GLOBAL: u64 = 1;
const TAG_POLICY: u64 = 2;
const TAG_ACTOR: u64 = 3;
const TAG_CRITIC: u64 = 4;
const TAG_REGRESS: u64 = 5;

/// Global learning of a time-dependent feedback control by backpropagation
/// through the whole rollout.
pub fn train_global_control(problem: &ProblemSpec, cfg: &TrainConfig) -> Result<Trained<MeanFieldNet>> {
    cfg.validate()?;
    let grid = cfg.grid(problem.horizon)?;
    let bins = cfg.bins(problem.domain)?;
    let mut net = cfg.make_net(1, true, cfg.seed)?;
    let mut adam = AdamState::new(net.n_params(), cfg.adam);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let w = 1.0 / (cfg.m_batch * cfg.n_particles) as f64;
    for epoch in 0..cfg.epochs {
        let (loss, grad) = {
            let prepared = net.prepare();
            let plan = Plan {
                start: 0,
                fields: vec![&prepared as &dyn Field; grid.n_steps],
                trainable: vec![true; grid.n_steps],
                terminal: Terminal::Cost,
            };
            batch_reduce(cfg.m_batch, net.n_params(), |m, g| {
                let mut rng = substream(cfg.seed, &[TAG_GLOBAL, epoch as u64, m as u64]);
                let (d, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
                cloud_cost_grad(problem, &grid, &plan, &bins, &x0, &d, &mut rng, w, Some(g), None)
            })?
        };
        let loss = loss / cfg.m_batch as f64;
        check_loss(epoch, loss)?;
        step_adam(&mut adam, &mut net.params, &grad, epoch)?;
        log_epoch(cfg, "global-control", epoch, loss);
        losses.push(LossPoint { stage: 0, epoch, loss });
    }
    Ok(Trained { model: net, losses })
}

/// Per-step controls learnt backward in time, each stage minimising the
/// cost-to-go with the later controls frozen.
pub fn train_policy_iteration(problem: &ProblemSpec, cfg: &TrainConfig) -> Result<Trained<Vec<MeanFieldNet>>> {
    cfg.validate()?;
    let grid = cfg.grid(problem.horizon)?;
    let bins = cfg.bins(problem.domain)?;
    let nt = grid.n_steps;
    let mut nets: Vec<MeanFieldNet> = Vec::with_capacity(nt);
    let mut losses = Vec::new();
    let w = 1.0 / (cfg.m_batch * cfg.n_particles) as f64;
    for i in (0..nt).rev() {
        let mut net = match nets.last() {
            Some(prev) => prev.clone(),
            None => cfg.make_net(1, false, cfg.seed.wrapping_add(i as u64))?,
        };
        let mut adam = AdamState::new(net.n_params(), cfg.adam);
        let frozen: Vec<PreparedNet<'_>> = nets.iter().rev().map(|n| n.prepare()).collect();
        for epoch in 0..cfg.stage_budget(i + 1 == nt) {
            let (loss, grad) = {
                let prepared = net.prepare();
                let mut fields: Vec<&dyn Field> = vec![&prepared];
                fields.extend(frozen.iter().map(|p| p as &dyn Field));
                let mut trainable = vec![false; fields.len()];
                trainable[0] = true;
                let plan = Plan { start: i, fields, trainable, terminal: Terminal::Cost };
                batch_reduce(cfg.m_batch, net.n_params(), |m, g| {
                    let mut rng = substream(cfg.seed, &[TAG_POLICY, i as u64, epoch as u64, m as u64]);
                    let (d, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
                    cloud_cost_grad(problem, &grid, &plan, &bins, &x0, &d, &mut rng, w, Some(g), None)
                })?
            };
            let loss = loss / cfg.m_batch as f64;
            check_loss(epoch, loss)?;
            step_adam(&mut adam, &mut net.params, &grad, epoch)?;
            log_epoch(cfg, &format!("policy stage {i}"), epoch, loss);
            losses.push(LossPoint { stage: i, epoch, loss });
        }
        drop(frozen);
        nets.push(net);
    }
    nets.reverse();
    Ok(Trained { model: nets, losses })
}

/// Actor and critic networks per step.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub actors: Vec<MeanFieldNet>,
    pub critics: Vec<MeanFieldNet>,
}

/// Fits `field` to `targets` at the cloud `xs` by least squares; adds
/// `weight ×` the gradient and returns the cloud's mean squared error.
pub(crate) fn regression_grad(
    field: &dyn Field,
    t: f64,
    view: &MeasureView<'_>,
    targets: &[f64],
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let mut sc = field.scratch();
    let ctx = field.context(t, view, &mut sc)?;
    let n = view.cloud.len();
    let mut acc = vec![0.0; field.acc_len()];
    let mut out = vec![0.0; n];
    let mut rec = RecordBuf::new(field.record_len() * n);
    field.eval_many(&ctx, view.cloud, &mut sc, &mut out, &mut rec);
    let mut sq = 0.0;
    for (o, &y) in out.iter_mut().zip(targets) {
        let r = *o - y;
        sq += r * r;
        *o = 2.0 * weight * r;
    }
    let mut dx = vec![0.0; n];
    field.backward_many(&ctx, view.cloud, &out, &mut sc, grad, &mut acc, &rec, &mut dx);
    field.settle(&ctx, &acc, view, &mut sc, grad, None);
    Ok(sq / view.cloud.len() as f64)
}

/// Actor/critic value iteration. Each stage first trains the actor against the
/// frozen next critic (or `g` at the last step), then fits the critic to the
/// one-step target.
pub fn train_value_iteration(problem: &ProblemSpec, cfg: &TrainConfig) -> Result<Trained<ActorCritic>> {
    cfg.validate()?;
    let grid = cfg.grid(problem.horizon)?;
    let bins = cfg.bins(problem.domain)?;
    let nt = grid.n_steps;
    let mut actors: Vec<MeanFieldNet> = Vec::with_capacity(nt);
    let mut critics: Vec<MeanFieldNet> = Vec::with_capacity(nt);
    let mut losses = Vec::new();
    let w = 1.0 / (cfg.m_batch * cfg.n_particles) as f64;
    for i in (0..nt).rev() {
        let first = i + 1 == nt;
        let mut actor = match actors.last() {
            Some(prev) => prev.clone(),
            None => cfg.make_net(1, false, cfg.seed.wrapping_add(i as u64))?,
        };
        let mut critic = match critics.last() {
            Some(prev) => prev.clone(),
            None => cfg.make_net(1, false, cfg.seed.wrapping_add(1000 + i as u64))?,
        };
        let next_critic = critics.last().map(|c| c.prepare());
        let terminal = match &next_critic {
            Some(p) => Terminal::Critic(p),
            None => Terminal::Cost,
        };
        let mut adam = AdamState::new(actor.n_params(), cfg.adam);
        for epoch in 0..cfg.stage_budget(first) {
            let (loss, grad) = {
                let prepared = actor.prepare();
                let plan = Plan { start: i, fields: vec![&prepared], trainable: vec![true], terminal };
                batch_reduce(cfg.m_batch, actor.n_params(), |m, g| {
                    let mut rng = substream(cfg.seed, &[TAG_ACTOR, i as u64, epoch as u64, m as u64]);
                    let (d, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
                    cloud_cost_grad(problem, &grid, &plan, &bins, &x0, &d, &mut rng, w, Some(g), None)
                })?
            };
            let loss = loss / cfg.m_batch as f64;
            check_loss(epoch, loss)?;
            step_adam(&mut adam, &mut actor.params, &grad, epoch)?;
            log_epoch(cfg, &format!("actor stage {i}"), epoch, loss);
            losses.push(LossPoint { stage: i, epoch, loss });
        }
        let mut adam = AdamState::new(critic.n_params(), cfg.critic_adam);
        {
            let actor_p = actor.prepare();
            let plan = Plan { start: i, fields: vec![&actor_p], trainable: vec![false], terminal };
            for epoch in 0..cfg.critic_epochs {
                let (loss, grad) = {
                    let cp = critic.prepare();
                    batch_reduce(cfg.m_batch, critic.n_params(), |m, g| {
                        let mut rng = substream(cfg.seed, &[TAG_CRITIC, i as u64, epoch as u64, m as u64]);
                        let (d, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
                        let mut target = vec![0.0; x0.len()];
                        cloud_cost_grad(problem, &grid, &plan, &bins, &x0, &d, &mut rng, 0.0, None, Some(&mut target))?;
                        let view = MeasureView { density: Some(&d), cloud: &x0 };
                        regression_grad(&cp, grid.t(i), &view, &target, w, g)
                    })?
                };
                let loss = loss / cfg.m_batch as f64;
                check_loss(epoch, loss)?;
                step_adam(&mut adam, &mut critic.params, &grad, epoch)?;
                log_epoch(cfg, &format!("critic stage {i}"), epoch, loss);
            }
        }
        drop(next_critic);
        actors.push(actor);
        critics.push(critic);
    }
    actors.reverse();
    critics.reverse();
    Ok(Trained { model: ActorCritic { actors, critics }, losses })
}

/// Fits a value network at step `step` to the realised cost-to-go under the
/// given controls, with fresh training laws every epoch.
pub fn regress_value(
    problem: &ProblemSpec,
    controls: Controls<'_>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Trained<MeanFieldNet>> {
    cfg.validate()?;
    let grid = cfg.grid(problem.horizon)?;
    let bins = cfg.bins(problem.domain)?;
    if step >= grid.n_steps {
        return Err(Error::InvalidParameter(format!("step {step} beyond the last control step")));
    }
    let fields: Vec<&dyn Field> = (step..grid.n_steps).map(|i| controls.at(i)).collect();
    let plan = Plan { start: step, trainable: vec![false; fields.len()], fields, terminal: Terminal::Cost };
    let mut value = cfg.make_net(1, false, cfg.seed.wrapping_add(7919))?;
    let mut adam = AdamState::new(value.n_params(), cfg.critic_adam);
    let w = 1.0 / (cfg.m_batch * cfg.n_particles) as f64;
    let mut losses = Vec::with_capacity(cfg.critic_epochs);
    for epoch in 0..cfg.critic_epochs {
        let (loss, grad) = {
            let vp = value.prepare();
            batch_reduce(cfg.m_batch, value.n_params(), |m, g| {
                let mut rng = substream(cfg.seed, &[TAG_REGRESS, step as u64, epoch as u64, m as u64]);
                let (d, x0) = draw_training_cloud(&bins, cfg.n_particles, &mut rng);
                let mut target = vec![0.0; x0.len()];
                cloud_cost_grad(problem, &grid, &plan, &bins, &x0, &d, &mut rng, 0.0, None, Some(&mut target))?;
                regression_grad(&vp, grid.t(step), &MeasureView { density: Some(&d), cloud: &x0 }, &target, w, g)
            })?
        };
        let loss = loss / cfg.m_batch as f64;
        check_loss(epoch, loss)?;
        step_adam(&mut adam, &mut value.params, &grad, epoch)?;
        log_epoch(cfg, &format!("value regression step {step}"), epoch, loss);
        losses.push(LossPoint { stage: step, epoch, loss });
    }
    Ok(Trained { model: value, losses })
}

/// Mean of a scalar field over particles drawn from `law`, with the binned pdf
/// as density input. Returns `(mean, standard error)`.
pub fn field_average(
    field: &dyn Field,
    t: f64,
    law: &InitialDistribution,
    bins: &BinGrid,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = law.to_bin_density(bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = law.sample(n, &mut rng);
    let mut sc = field.scratch();
    let ctx = field.context(t, &MeasureView { density: Some(&d), cloud: &xs }, &mut sc)?;
    let d_out = field.out_dim();
    let mut out = vec![0.0; d_out * n];
    field.eval_many(&ctx, &xs, &mut sc, &mut out, &mut []);
    let vals: Vec<f64> = out.iter().step_by(d_out).copied().collect();
    Ok(crate::dynamics::mean_and_stderr(&vals))
}
