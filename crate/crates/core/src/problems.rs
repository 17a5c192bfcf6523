//! Benchmark control problems, their adjoint systems, closed-form solutions and
//! initial laws.
//!
//! The law enters every coefficient only through its mean `μ̄`. Coefficients
//! return partial derivatives with respect to `x`, `μ̄` and the action so that
//! solvers can differentiate through particle clouds: the derivative with
//! respect to `μ̄` is spread as `1/N` over the particles whose average gives
//! `μ̄`.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::InitialDistribution;
use crate::mfnn::{Field, FieldCtx, FieldScratch, MeasureView};

/// A value together with its partial derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Partials {
    pub v: f64,
    pub dx: f64,
    pub dm: f64,
    pub da: f64,
}

/// Coefficients `(b, σ, f, g)` of a scalar control problem.
pub trait Coefficients: Send + Sync + Debug {
    fn drift(&self, t: f64, x: f64, m: f64, a: f64) -> Partials;
    fn vol(&self, t: f64, x: f64, m: f64, a: f64) -> Partials;
    fn running(&self, t: f64, x: f64, m: f64, a: f64) -> Partials;
    fn terminal(&self, x: f64, m: f64) -> Partials;
    /// Pointwise minimiser of the reduced Hamiltonian `b·p + f` in the action.
    fn action_hat(&self, _t: f64, _x: f64, _m: f64, _p: f64) -> Option<f64> {
        None
    }
    fn vol_controlled(&self) -> bool;
}

/// A control problem on `[0, T]` with a truncation domain for bin densities.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub name: String,
    pub horizon: f64,
    pub domain: (f64, f64),
    pub coeffs: Arc<dyn Coefficients>,
}

/// Output of an adjoint-system driver: `H` with `d𝒴 = H dt + 𝒵 dW`, and its
/// Jacobians in `𝒴 = (Y, P)`, `𝒵 = (Z, M)` and `P̄`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DriverOut {
    pub h: [f64; 2],
    /// `dy[i][j] = ∂h_i/∂y_j`
    pub dy: [[f64; 2]; 2],
    pub dz: [[f64; 2]; 2],
    pub dpbar: [f64; 2],
}

/// Coefficients of the forward-backward system `(X, Y, P)`.
///
/// The forward drift depends on `P`; the driver depends on the law through
/// `μ̄` and `P̄`.
pub trait BsdeCoefficients: Send + Sync + Debug {
    /// Forward drift and its derivative in `𝒴`.
    fn forward_drift(&self, t: f64, x: f64, m: f64, y: [f64; 2]) -> (f64, [f64; 2]);
    fn vol(&self) -> f64;
    fn driver(&self, t: f64, x: f64, m: f64, y: [f64; 2], z: [f64; 2], pbar: f64) -> DriverOut;
    fn terminal(&self, x: f64, m: f64) -> [f64; 2];
}

#[derive(Clone, Debug)]
pub struct BsdeSpec {
    pub name: String,
    pub horizon: f64,
    pub domain: (f64, f64),
    pub coeffs: Arc<dyn BsdeCoefficients>,
}

/// Driver at particle `n`, with `μ̄` and `P̄` taken from the cloud.
pub fn bsde_driver_estimate(spec: &BsdeSpec, t: f64, xs: &[f64], ys: &[[f64; 2]], zs: &[[f64; 2]], n: usize) -> Result<[f64; 2]> {
    if xs.is_empty() {
        return Err(Error::EmptySamples);
    }
    if ys.len() != xs.len() || zs.len() != xs.len() || n >= xs.len() {
        return Err(Error::Shape("cloud arrays differ in length".into()));
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let pbar = ys.iter().map(|y| y[1]).sum::<f64>() / ys.len() as f64;
    Ok(spec.coeffs.driver(t, xs[n], m, ys[n], zs[n], pbar).h)
}

// ---------------------------------------------------------------------------
// Systemic risk

/// Interbank lending model with a quadratic penalty on deviations from the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemicParams {
    pub sigma: f64,
    pub kappa: f64,
    pub q: f64,
    pub c: f64,
    pub eta: f64,
    pub horizon: f64,
}

impl Default for SystemicParams {
    fn default() -> Self {
        Self { sigma: 1.0, kappa: 0.6, q: 0.8, c: 2.0, eta: 2.0, horizon: 0.2 }
    }
}

impl SystemicParams {
    pub fn validate(&self) -> Result<()> {
        if self.q * self.q > self.eta {
            return Err(Error::InvalidParameter(format!("need q² ≤ η, got q={} η={}", self.q, self.eta)));
        }
        if !(self.horizon > 0.0) || self.c < 0.0 || self.sigma < 0.0 {
            return Err(Error::InvalidParameter("systemic parameters out of range".into()));
        }
        Ok(())
    }

    fn sqrt_delta(&self) -> f64 {
        let kq = self.kappa + self.q;
        (kq * kq + self.eta - self.q * self.q).sqrt()
    }

    fn check_t(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(self.horizon - t)
    }

    /// Riccati coefficient `Q_t`.
    pub fn riccati_q(&self, t: f64) -> Result<f64> {
        let tau = self.check_t(t)?;
        let sd = self.sqrt_delta();
        let kq = self.kappa + self.q;
        let (sh, ch) = ((sd * tau).sinh(), (sd * tau).cosh());
        let num = sd * sh + (kq + self.c) * ch;
        let den = sd * ch + (kq + self.c) * sh;
        Ok(-0.5 * (kq - sd * num / den))
    }

    /// `∫_t^T Q_s ds`.
    pub fn riccati_q_integral(&self, t: f64) -> Result<f64> {
        let tau = self.check_t(t)?;
        let sd = self.sqrt_delta();
        let kq = self.kappa + self.q;
        let a = (kq + self.c) / sd;
        Ok(0.5 * ((sd * tau).cosh() + a * (sd * tau).sinh()).ln() - 0.5 * kq * tau)
    }

    /// Optimal value for an initial law with the given variance.
    pub fn value(&self, variance: f64) -> Result<f64> {
        Ok(self.riccati_q(0.0)? * variance + self.sigma * self.sigma * self.riccati_q_integral(0.0)?)
    }

    /// Optimal feedback `(q + 2Q_t)(μ̄ - x)`.
    pub fn optimal_feedback(&self, t: f64, x: f64, m: f64) -> Result<f64> {
        Ok((self.q + 2.0 * self.riccati_q(t)?) * (m - x))
    }

    /// Decoupling field `Q_t (x - μ̄)² + σ² ∫_t^T Q`.
    pub fn decoupled_value(&self, t: f64, x: f64, m: f64) -> Result<f64> {
        let d = x - m;
        Ok(self.riccati_q(t)? * d * d + self.sigma * self.sigma * self.riccati_q_integral(t)?)
    }

    pub fn problem(&self, domain: (f64, f64)) -> ProblemSpec {
        ProblemSpec { name: "systemic".into(), horizon: self.horizon, domain, coeffs: Arc::new(*self) }
    }

    pub fn bsde(&self, domain: (f64, f64)) -> BsdeSpec {
        BsdeSpec { name: "systemic".into(), horizon: self.horizon, domain, coeffs: Arc::new(SystemicBsde(*self)) }
    }
}

impl Coefficients for SystemicParams {
    fn drift(&self, _t: f64, x: f64, m: f64, a: f64) -> Partials {
        Partials { v: self.kappa * (m - x) + a, dx: -self.kappa, dm: self.kappa, da: 1.0 }
    }

    fn vol(&self, _t: f64, _x: f64, _m: f64, _a: f64) -> Partials {
        Partials { v: self.sigma, ..Partials::default() }
    }

    fn running(&self, _t: f64, x: f64, m: f64, a: f64) -> Partials {
        let d = m - x;
        Partials {
            v: 0.5 * a * a - self.q * a * d + 0.5 * self.eta * d * d,
            dx: self.q * a - self.eta * d,
            dm: -self.q * a + self.eta * d,
            da: a - self.q * d,
        }
    }

    fn terminal(&self, x: f64, m: f64) -> Partials {
        let d = x - m;
        Partials { v: 0.5 * self.c * d * d, dx: self.c * d, dm: -self.c * d, da: 0.0 }
    }

    fn action_hat(&self, _t: f64, x: f64, m: f64, p: f64) -> Option<f64> {
        Some(self.q * (m - x) - p)
    }

    fn vol_controlled(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug)]
struct SystemicBsde(SystemicParams);

impl BsdeCoefficients for SystemicBsde {
    fn forward_drift(&self, _t: f64, x: f64, m: f64, y: [f64; 2]) -> (f64, [f64; 2]) {
        let s = &self.0;
        ((s.kappa + s.q) * (m - x) - y[1], [0.0, -1.0])
    }

    fn vol(&self) -> f64 {
        self.0.sigma
    }

    fn driver(&self, _t: f64, x: f64, m: f64, y: [f64; 2], _z: [f64; 2], pbar: f64) -> DriverOut {
        let s = &self.0;
        let d = m - x;
        let e = s.eta - s.q * s.q;
        let kq = s.kappa + s.q;
        DriverOut {
            h: [-(0.5 * e * d * d + 0.5 * y[1] * y[1]), -kq * (pbar - y[1]) + e * d],
            dy: [[0.0, -y[1]], [0.0, kq]],
            dz: [[0.0; 2]; 2],
            dpbar: [0.0, -kq],
        }
    }

    fn terminal(&self, x: f64, m: f64) -> [f64; 2] {
        let d = x - m;
        [0.5 * self.0.c * d * d, self.0.c * d]
    }
}

/// Systemic initial laws, cases 1 to 6.
pub fn systemic_case(case: usize) -> Result<InitialDistribution> {
    let k3 = 3f64.sqrt() / 10.0;
    match case {
        1 => Ok(InitialDistribution::gaussian(0.0, 0.2)),
        2 => Ok(InitialDistribution::gaussian(0.3, 0.05)),
        3 => Ok(InitialDistribution::gaussian(0.0, 0.05)),
        4 => InitialDistribution::mixture(&[(0.5, -k3, 0.1), (0.5, k3, 0.1)]),
        5 => InitialDistribution::mixture(&[(0.5, -0.25, 0.1), (0.5, 0.25, 0.1)]),
        6 => InitialDistribution::mixture(&[(1.0, -0.3, 0.07), (1.0, 0.0, 0.07), (1.0, 0.3, 0.07)]),
        _ => Err(Error::InvalidParameter(format!("no systemic case {case}"))),
    }
}

/// Truncation domain of the systemic benchmark.
pub const SYSTEMIC_DOMAIN: (f64, f64) = (-1.38, 1.62);

/// Systemic optimal feedback as a [`Field`] with output `a*`.
#[derive(Clone, Copy, Debug)]
pub struct SystemicOptimalControl(pub SystemicParams);

/// Systemic decoupling fields: `Y` gives `(V, P)`, `Z` gives `(σ∂ₓV, σ∂ₓP)`.
#[derive(Clone, Copy, Debug)]
pub struct SystemicSolution {
    pub params: SystemicParams,
    pub part: SolutionPart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolutionPart {
    Y,
    Z,
}

// ---------------------------------------------------------------------------
// Min/max terminal cost

/// Linear dynamics, quadratic running cost and a two-well terminal cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinMaxParams {
    pub a: f64,
    pub a_bar: f64,
    pub b: f64,
    pub q: f64,
    pub q_bar: f64,
    pub r: f64,
    pub s: f64,
    pub sigma: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub horizon: f64,
}

impl Default for MinMaxParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            a_bar: 0.5,
            b: 1.0,
            q: 1.0,
            q_bar: 1.0,
            r: 1.0,
            s: 1.0,
            sigma: 0.5,
            zeta1: 0.25,
            zeta2: 1.75,
            horizon: 0.2,
        }
    }
}

impl MinMaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || !(self.horizon > 0.0) || self.sigma < 0.0 {
            return Err(Error::InvalidParameter("min/max parameters out of range".into()));
        }
        Ok(())
    }

    fn wells(&self) -> (f64, f64) {
        (self.zeta1.min(self.zeta2), self.zeta1.max(self.zeta2))
    }

    /// Default truncation domain for the horizon.
    pub fn default_domain(&self) -> (f64, f64) {
        if self.horizon <= 0.2 + 1e-12 {
            (0.21, 2.72)
        } else {
            (-0.4, 3.21)
        }
    }

    pub fn problem(&self, domain: (f64, f64)) -> ProblemSpec {
        ProblemSpec { name: "minmax".into(), horizon: self.horizon, domain, coeffs: Arc::new(*self) }
    }

    pub fn bsde(&self, domain: (f64, f64)) -> BsdeSpec {
        BsdeSpec { name: "minmax".into(), horizon: self.horizon, domain, coeffs: Arc::new(MinMaxBsde(*self)) }
    }
}

impl Coefficients for MinMaxParams {
    fn drift(&self, _t: f64, x: f64, m: f64, a: f64) -> Partials {
        Partials { v: self.a * x + self.a_bar * m + self.b * a, dx: self.a, dm: self.a_bar, da: self.b }
    }

    fn vol(&self, _t: f64, _x: f64, _m: f64, _a: f64) -> Partials {
        Partials { v: self.sigma, ..Partials::default() }
    }

    fn running(&self, _t: f64, x: f64, m: f64, a: f64) -> Partials {
        let u = x - self.s * m;
        Partials {
            v: 0.5 * (self.q * x * x + self.q_bar * u * u + self.r * a * a),
            dx: self.q * x + self.q_bar * u,
            dm: -self.s * self.q_bar * u,
            da: self.r * a,
        }
    }

    fn terminal(&self, x: f64, _m: f64) -> Partials {
        let (lo, hi) = self.wells();
        let z = if x <= 0.5 * (lo + hi) { lo } else { hi };
        Partials { v: (x - z) * (x - z), dx: 2.0 * (x - z), dm: 0.0, da: 0.0 }
    }

    fn action_hat(&self, _t: f64, _x: f64, _m: f64, p: f64) -> Option<f64> {
        Some(-self.b / self.r * p)
    }

    fn vol_controlled(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug)]
struct MinMaxBsde(MinMaxParams);

impl BsdeCoefficients for MinMaxBsde {
    fn forward_drift(&self, _t: f64, x: f64, m: f64, y: [f64; 2]) -> (f64, [f64; 2]) {
        let s = &self.0;
        let k = s.b * s.b / s.r;
        (s.a * x + s.a_bar * m - k * y[1], [0.0, -k])
    }

    fn vol(&self) -> f64 {
        self.0.sigma
    }

    fn driver(&self, _t: f64, x: f64, m: f64, y: [f64; 2], _z: [f64; 2], pbar: f64) -> DriverOut {
        let s = &self.0;
        let k = s.b * s.b / s.r;
        let u = x - s.s * m;
        let hy = -0.5 * (s.q * x * x + s.q_bar * u * u + k * y[1] * y[1]);
        let hp = -(s.a * y[1]
            + s.a_bar * pbar
            + s.q * x
            + s.q_bar * (x - m)
            + s.q_bar * (s.s - 1.0) * (s.s - 1.0) * m);
        DriverOut {
            h: [hy, hp],
            dy: [[0.0, -k * y[1]], [0.0, -s.a]],
            dz: [[0.0; 2]; 2],
            dpbar: [0.0, -s.a_bar],
        }
    }

    fn terminal(&self, x: f64, m: f64) -> [f64; 2] {
        let g = self.0.terminal(x, m);
        [g.v, g.dx]
    }
}

/// Min/max initial laws, cases 1 to 3.
pub fn minmax_case(params: &MinMaxParams, case: usize) -> Result<InitialDistribution> {
    let (z1, z2) = (params.zeta1, params.zeta2);
    match case {
        1 => Ok(InitialDistribution::gaussian(1.0, 0.2)),
        2 => InitialDistribution::mixture(&[(0.5, z1, 0.15), (0.5, z2, 0.15)]),
        3 => InitialDistribution::mixture(&[(0.4, z1, 0.05), (0.4, z1 + z2, 0.05), (0.2, z2, 0.05)]),
        _ => Err(Error::InvalidParameter(format!("no min/max case {case}"))),
    }
}

/// Reference values for the min/max cases, obtained by an independent method.
pub fn minmax_reference(horizon: f64, case: usize) -> Option<f64> {
    let table = if (horizon - 0.2).abs() < 1e-12 {
        [0.484, 0.494, 0.491]
    } else if (horizon - 0.5).abs() < 1e-12 {
        [0.818, 1.082, 0.836]
    } else {
        return None;
    };
    table.get(case.checked_sub(1)?).copied()
}

// ---------------------------------------------------------------------------
// Mean-variance portfolio

/// Portfolio selection with controlled volatility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanVarParams {
    pub beta: f64,
    pub nu: f64,
    pub lambda: f64,
    pub horizon: f64,
}

impl Default for MeanVarParams {
    fn default() -> Self {
        Self { beta: 0.1, nu: 0.4, lambda: 0.5, horizon: 0.2 }
    }
}

/// Truncation domain of the mean-variance benchmark.
pub const MEANVAR_DOMAIN: (f64, f64) = (-0.85, 0.9);

impl MeanVarParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !(self.lambda > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter("mean-variance parameters out of range".into()));
        }
        Ok(())
    }

    fn rho(&self) -> f64 {
        self.beta * self.beta / (self.nu * self.nu)
    }

    /// Optimal value `λ e^{-ρT} Var - mean - (e^{ρT} - 1)/(4λ)` with `ρ = β²/ν²`.
    pub fn value(&self, mean: f64, variance: f64) -> f64 {
        let rt = self.rho() * self.horizon;
        self.lambda * (-rt).exp() * variance - mean - rt.exp_m1() / (4.0 * self.lambda)
    }

    /// Optimal feedback `-(β/ν²)(x - μ̄ - e^{ρ(T-t)}/(2λ))`.
    pub fn optimal_feedback(&self, t: f64, x: f64, m: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        let e = (self.rho() * (self.horizon - t)).exp();
        Ok(-(self.beta / (self.nu * self.nu)) * (x - m - e / (2.0 * self.lambda)))
    }

    pub fn problem(&self, domain: (f64, f64)) -> ProblemSpec {
        ProblemSpec { name: "meanvar".into(), horizon: self.horizon, domain, coeffs: Arc::new(*self) }
    }
}

impl Coefficients for MeanVarParams {
    fn drift(&self, _t: f64, _x: f64, _m: f64, a: f64) -> Partials {
        Partials { v: a * self.beta, da: self.beta, ..Partials::default() }
    }

    fn vol(&self, _t: f64, _x: f64, _m: f64, a: f64) -> Partials {
        Partials { v: a * self.nu, da: self.nu, ..Partials::default() }
    }

    fn running(&self, _t: f64, _x: f64, _m: f64, _a: f64) -> Partials {
        Partials::default()
    }

    fn terminal(&self, x: f64, m: f64) -> Partials {
        let d = x - m;
        Partials { v: self.lambda * d * d - x, dx: 2.0 * self.lambda * d - 1.0, dm: -2.0 * self.lambda * d, da: 0.0 }
    }

    fn vol_controlled(&self) -> bool {
        true
    }
}

/// Mean-variance initial laws, cases 1 to 6.
pub fn meanvar_case(case: usize) -> Result<InitialDistribution> {
    let k3 = 3f64.sqrt() / 10.0;
    match case {
        1 => Ok(InitialDistribution::gaussian(0.1, 0.2)),
        2 => Ok(InitialDistribution::gaussian(0.1, 0.025)),
        3 => Ok(InitialDistribution::gaussian(0.3, 0.05)),
        4 => InitialDistribution::mixture(&[(0.5, 0.1 - k3, 0.1), (0.5, 0.1 + k3, 0.1)]),
        5 => InitialDistribution::mixture(&[(0.5, -0.05, 0.1), (0.5, 0.15, 0.1)]),
        6 => InitialDistribution::mixture(&[(0.4, -0.1, 0.07), (0.2, 0.2, 0.07), (0.4, 0.5, 0.07)]),
        _ => Err(Error::InvalidParameter(format!("no mean-variance case {case}"))),
    }
}

/// Mean-variance optimal feedback as a [`Field`] with output `a*`.
#[derive(Clone, Copy, Debug)]
pub struct MeanVarOptimalControl(pub MeanVarParams);

// ---------------------------------------------------------------------------
// Closed-form fields

fn analytic_ctx(t: f64, view: &MeasureView<'_>) -> Result<FieldCtx> {
    if view.cloud.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mean = view.cloud.iter().sum::<f64>() / view.cloud.len() as f64;
    Ok(FieldCtx::new(t, mean))
}

fn spread_mean_grad(acc: &[f64], view: &MeasureView<'_>, cloud_dx: Option<&mut [f64]>) {
    if let Some(dx) = cloud_dx {
        let share = acc[0] / view.cloud.len() as f64;
        dx.iter_mut().for_each(|d| *d += share);
    }
}

/// Closed-form fields that depend on the law through `μ̄` only, written as
/// `out_i = c_i(t) · (x - μ̄)^{p_i} + d_i(t)`-style expressions.
trait MeanOnlyField: Sync {
    fn dim(&self) -> usize;
    /// Values and `∂/∂x` of each output; `∂/∂μ̄ = -∂/∂x` for all of them.
    fn value_and_slope(&self, t: f64, x: f64, m: f64, out: &mut [f64], slope: &mut [f64]);
}

impl<T: MeanOnlyField> Field for T {
    fn out_dim(&self) -> usize {
        self.dim()
    }

    fn n_params(&self) -> usize {
        0
    }

    fn acc_len(&self) -> usize {
        1
    }

    fn scratch(&self) -> FieldScratch {
        FieldScratch::default()
    }

    fn context(&self, t: f64, view: &MeasureView<'_>, _sc: &mut FieldScratch) -> Result<FieldCtx> {
        analytic_ctx(t, view)
    }

    fn eval(&self, ctx: &FieldCtx, x: f64, _sc: &mut FieldScratch, out: &mut [f64]) {
        let mut slope = [0.0; 2];
        self.value_and_slope(ctx.t, x, ctx.mean, out, &mut slope[..out.len()]);
    }

    fn backward(
        &self,
        ctx: &FieldCtx,
        x: f64,
        upstream: &[f64],
        _sc: &mut FieldScratch,
        _grad: &mut [f64],
        acc: &mut [f64],
    ) -> f64 {
        let mut out = [0.0; 2];
        let mut slope = [0.0; 2];
        let d = self.dim();
        self.value_and_slope(ctx.t, x, ctx.mean, &mut out[..d], &mut slope[..d]);
        let dx: f64 = upstream.iter().zip(&slope).map(|(u, s)| u * s).sum();
        acc[0] -= dx;
        dx
    }

    fn settle(
        &self,
        _ctx: &FieldCtx,
        acc: &[f64],
        view: &MeasureView<'_>,
        _sc: &mut FieldScratch,
        _grad: &mut [f64],
        cloud_dx: Option<&mut [f64]>,
    ) {
        spread_mean_grad(acc, view, cloud_dx);
    }
}

impl MeanOnlyField for SystemicOptimalControl {
    fn dim(&self) -> usize {
        1
    }

    fn value_and_slope(&self, t: f64, x: f64, m: f64, out: &mut [f64], slope: &mut [f64]) {
        let k = self.0.q + 2.0 * self.0.riccati_q(t.clamp(0.0, self.0.horizon)).unwrap();
        out[0] = k * (m - x);
        slope[0] = -k;
    }
}

impl MeanOnlyField for MeanVarOptimalControl {
    fn dim(&self) -> usize {
        1
    }

    fn value_and_slope(&self, t: f64, x: f64, m: f64, out: &mut [f64], slope: &mut [f64]) {
        out[0] = self.0.optimal_feedback(t.clamp(0.0, self.0.horizon), x, m).unwrap();
        slope[0] = -self.0.beta / (self.0.nu * self.0.nu);
    }
}

impl MeanOnlyField for SystemicSolution {
    fn dim(&self) -> usize {
        2
    }

    fn value_and_slope(&self, t: f64, x: f64, m: f64, out: &mut [f64], slope: &mut [f64]) {
        let p = &self.params;
        let t = t.clamp(0.0, p.horizon);
        let q = p.riccati_q(t).unwrap();
        let d = x - m;
        match self.part {
            SolutionPart::Y => {
                out[0] = q * d * d + p.sigma * p.sigma * p.riccati_q_integral(t).unwrap();
                out[1] = 2.0 * q * d;
                slope[0] = 2.0 * q * d;
                slope[1] = 2.0 * q;
            }
            SolutionPart::Z => {
                out[0] = 2.0 * q * p.sigma * d;
                out[1] = 2.0 * q * p.sigma;
                slope[0] = 2.0 * q * p.sigma;
                slope[1] = 0.0;
            }
        }
    }
}
