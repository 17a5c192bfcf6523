//! Checks of the closed-form solutions against independent computations and
//! published analytic values.

use std::fmt;

use mfc_core::problems::{meanvar_case, systemic_case, MeanVarParams, SystemicParams};

/// Published analytic values of systemic cases 1 to 6 at the default parameters.
pub const SYSTEMIC_PUBLISHED: [f64; 6] = [0.1642, 0.1446, 0.1446, 0.1642, 0.1812, 0.1772];
/// Published analytic values of mean-variance cases 1 to 6 at `T = 0.2`.
pub const MEANVAR_PUBLISHED_T02: [f64; 6] = [-0.0865, -0.1059, -0.3050, -0.0865, -0.0464, -0.1683];
/// Published analytic values of mean-variance cases 1 to 6 at `T = 0.5`.
pub const MEANVAR_PUBLISHED_T05: [f64; 6] = [-0.0965, -0.1156, -0.3147, -0.0965, -0.0562, -0.1786];

/// Published values are rounded to four decimals.
pub const PUBLISHED_TOL: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: Option<f64>,
    pub tol: f64,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, expected: Option<f64>, tol: f64) -> Self {
        Self { name: name.into(), value, expected, tol }
    }

    pub fn pass(&self) -> bool {
        match self.expected {
            Some(e) => (self.value - e).abs() <= self.tol,
            None => self.value.is_finite(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass() { "ok  " } else { "FAIL" };
        match self.expected {
            Some(e) => write!(
                f,
                "{status} {:<40} {:>14.8} expected {:>10.6} |err| {:.2e} tol {:.0e}",
                self.name,
                self.value,
                e,
                (self.value - e).abs(),
                self.tol
            ),
            None => write!(f, "{status} {:<40} {:>14.8}", self.name, self.value),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub problem: String,
    pub checks: Vec<Check>,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(Check::pass)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.problem)?;
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// `Q` on `[0, T]` by classical RK4 on the backward Riccati equation
/// `Q' = 2(κ+q)Q + 2Q² - (η - q²)/2`, `Q_T = c/2`. Returns `Q` at the
/// `steps + 1` grid points `t_j = jT/steps`.
pub fn riccati_ode(p: &SystemicParams, steps: usize) -> Vec<f64> {
    let rhs = |q: f64| 2.0 * (p.kappa + p.q) * q + 2.0 * q * q - 0.5 * (p.eta - p.q * p.q);
    let h = p.horizon / steps as f64;
    let mut out = vec![0.0; steps + 1];
    let mut q = 0.5 * p.c;
    out[steps] = q;
    for j in (0..steps).rev() {
        // Integrate in reversed time s = T - t, where dQ/ds = -Q'.
        let k1 = -rhs(q);
        let k2 = -rhs(q + 0.5 * h * k1);
        let k3 = -rhs(q + 0.5 * h * k2);
        let k4 = -rhs(q + h * k3);
        q += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out[j] = q;
    }
    out
}

/// Composite Simpson rule of grid values on a uniform grid with an even number of intervals.
fn simpson(v: &[f64], h: f64) -> f64 {
    let n = v.len() - 1;
    debug_assert!(n % 2 == 0);
    let inner: f64 = (1..n).map(|j| if j % 2 == 1 { 4.0 * v[j] } else { 2.0 * v[j] }).sum();
    h / 3.0 * (v[0] + inner + v[n])
}

pub fn systemic_oracle(p: &SystemicParams) -> mfc_core::Result<OracleReport> {
    p.validate()?;
    let t_end = p.horizon;
    let mut checks = vec![
        Check::new("Q_T", p.riccati_q(t_end)?, Some(0.5 * p.c), 1e-12),
        Check::new("int_T^T Q", p.riccati_q_integral(t_end)?, Some(0.0), 1e-12),
    ];
    let steps = 2000;
    let ode = riccati_ode(p, steps);
    let h = t_end / steps as f64;
    let mut worst = 0.0f64;
    for (j, q) in ode.iter().enumerate() {
        worst = worst.max((p.riccati_q(j as f64 * h)? - q).abs());
    }
    checks.push(Check::new("max |Q - Q_ode| on [0,T]", worst, Some(0.0), 1e-6));
    checks.push(Check::new("int_0^T Q vs Simpson of Q_ode", p.riccati_q_integral(0.0)?, Some(simpson(&ode, h)), 1e-6));
    let published = *p == SystemicParams::default();
    for case in 1..=6 {
        let v = p.value(systemic_case(case)?.variance())?;
        let expected = published.then(|| SYSTEMIC_PUBLISHED[case - 1]);
        checks.push(Check::new(format!("v(0, mu0) case {case}"), v, expected, PUBLISHED_TOL));
    }
    Ok(OracleReport { problem: format!("systemic T={}", p.horizon), checks })
}

pub fn meanvar_oracle(p: &MeanVarParams) -> mfc_core::Result<OracleReport> {
    p.validate()?;
    let rho = (p.beta / p.nu).powi(2);
    let rt = rho * p.horizon;
    // v(mu) = lambda e^{-rho T} Var - mean - (e^{rho T} - 1)/(4 lambda), term by term.
    let shift = (rt.exp() - 1.0) / (4.0 * p.lambda);
    let mut checks = vec![
        Check::new("point mass at 0", p.value(0.0, 0.0), Some(-shift), 1e-12),
        Check::new("point mass at 1", p.value(1.0, 0.0), Some(-1.0 - shift), 1e-12),
        Check::new("N(0, 1)", p.value(0.0, 1.0), Some(p.lambda * (-rt).exp() - shift), 1e-12),
    ];
    let base = MeanVarParams { horizon: p.horizon, ..MeanVarParams::default() };
    let published = if *p != base {
        None
    } else if (p.horizon - 0.2).abs() < 1e-12 {
        Some(MEANVAR_PUBLISHED_T02)
    } else if (p.horizon - 0.5).abs() < 1e-12 {
        Some(MEANVAR_PUBLISHED_T05)
    } else {
        None
    };
    for case in 1..=6 {
        let law = meanvar_case(case)?;
        let expected = published.map(|t| t[case - 1]);
        checks.push(Check::new(format!("v(mu0) case {case}"), p.value(law.mean(), law.variance()), expected, PUBLISHED_TOL));
    }
    Ok(OracleReport { problem: format!("mean-variance T={}", p.horizon), checks })
}
