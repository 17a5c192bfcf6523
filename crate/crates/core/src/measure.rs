//! Piecewise-constant densities on a truncated interval and the initial
//! distributions used as test cases.
//!
//! A [`BinGrid`] splits `[lo, hi]` into `K` bins of width `h`. Bins are
//! half-open `[lo + (k-1)h, lo + kh)` except the last, which is closed. A
//! [`BinDensity`] holds one value per bin with `Σ p_k h = 1`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Uniform partition of `[lo, hi]` into `k` bins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinGrid {
    pub lo: f64,
    pub hi: f64,
    pub k: usize,
}

impl BinGrid {
    pub fn new(lo: f64, hi: f64, k: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("bad domain [{lo}, {hi}]")));
        }
        if k == 0 {
            return Err(Error::InvalidParameter("bin count must be positive".into()));
        }
        Ok(Self { lo, hi, k })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.k as f64
    }

    /// Center of bin `k` (zero-based).
    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.k).map(|k| self.center(k)).collect()
    }

    /// Bin containing `x` after clamping to the domain.
    pub fn index(&self, x: f64) -> usize {
        let x = x.clamp(self.lo, self.hi);
        let i = ((x - self.lo) / self.width()) as usize;
        i.min(self.k - 1)
    }
}

/// Piecewise-constant density on a [`BinGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct BinDensity {
    pub grid: BinGrid,
    pub p: Vec<f64>,
}

impl BinDensity {
    pub fn new(grid: BinGrid, p: Vec<f64>) -> Result<Self> {
        if p.len() != grid.k {
            return Err(Error::Shape(format!("{} weights for {} bins", p.len(), grid.k)));
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::DegenerateDensity("weights must be finite and non-negative".into()));
        }
        let mass: f64 = p.iter().sum::<f64>() * grid.width();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateDensity(format!("total mass {mass}")));
        }
        Ok(Self { grid, p })
    }

    /// Density value at `x`; zero outside the domain.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.grid.lo || x > self.grid.hi {
            0.0
        } else {
            self.p[self.grid.index(x)]
        }
    }

    pub fn mean(&self) -> f64 {
        density_moments(self).0
    }

    /// CSV rows `k,x_k,p_k` with one-based `k`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,x,p\n");
        for (k, p) in self.p.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", k + 1, self.grid.center(k), p));
        }
        s
    }
}

/// Normalised bin values `p_k = pdf(x_k) / Σ_j pdf(x_j) h`.
pub fn bin_weights_from_pdf(pdf: impl Fn(f64) -> f64, grid: &BinGrid) -> Result<BinDensity> {
    let raw: Vec<f64> = grid.centers().into_iter().map(pdf).collect();
    if raw.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::DegenerateDensity("pdf returned a negative or non-finite value".into()));
    }
    let total: f64 = raw.iter().sum::<f64>() * grid.width();
    if total <= 0.0 {
        return Err(Error::DegenerateDensity("pdf vanishes at every bin center".into()));
    }
    let p = raw.into_iter().map(|v| v / total).collect();
    Ok(BinDensity { grid: *grid, p })
}

/// Inverse-transform sampling: a bin is picked by cumulative weight, then the
/// point is uniform inside it.
pub fn sample_inverse_transform<R: Rng + ?Sized>(density: &BinDensity, n: usize, rng: &mut R) -> Vec<f64> {
    let h = density.grid.width();
    let mut cdf = Vec::with_capacity(density.grid.k);
    let mut acc = 0.0;
    for p in &density.p {
        acc += p * h;
        cdf.push(acc);
    }
    let total = acc;
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * total;
            let k = cdf.partition_point(|&c| c <= u).min(density.grid.k - 1);
            let left = density.grid.lo + k as f64 * h;
            left + rng.gen::<f64>() * h
        })
        .collect()
}

/// Histogram estimate `count_k / (N h)`; samples are clamped to the domain first.
pub fn estimate_bin_density(samples: &[f64], grid: &BinGrid) -> Result<BinDensity> {
    let mut p = vec![0.0; grid.k];
    estimate_bin_density_into(samples, grid, &mut p)?;
    Ok(BinDensity { grid: *grid, p })
}

pub(crate) fn estimate_bin_density_into(samples: &[f64], grid: &BinGrid, p: &mut [f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    p.iter_mut().for_each(|v| *v = 0.0);
    let h = grid.width();
    let inv_h = 1.0 / h;
    let lo = grid.lo;
    let last = grid.k - 1;
    for &x in samples {
        let x = x.clamp(grid.lo, grid.hi);
        let i = (((x - lo) * inv_h) as usize).min(last);
        p[i] += 1.0;
    }
    let scale = 1.0 / (samples.len() as f64 * h);
    p.iter_mut().for_each(|v| *v *= scale);
    Ok(())
}

/// `(mean, variance)` of the law putting mass `p_k h` at each bin center.
pub fn density_moments(density: &BinDensity) -> (f64, f64) {
    let h = density.grid.width();
    let mut mean = 0.0;
    for (k, p) in density.p.iter().enumerate() {
        mean += p * h * density.grid.center(k);
    }
    let mut var = 0.0;
    for (k, p) in density.p.iter().enumerate() {
        let d = density.grid.center(k) - mean;
        var += p * h * d * d;
    }
    (mean, var)
}

/// One Gaussian component of a mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Law of the initial state.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialDistribution {
    Gaussian { mean: f64, std: f64 },
    Mixture(Vec<Component>),
    Bin(BinDensity),
}

fn gaussian_pdf(x: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return if x == mean { f64::INFINITY } else { 0.0 };
    }
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

impl InitialDistribution {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        InitialDistribution::Gaussian { mean, std }
    }

    /// Mixture with weights normalised to one.
    pub fn mixture(parts: &[(f64, f64, f64)]) -> Result<Self> {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if parts.is_empty() || total <= 0.0 || parts.iter().any(|p| p.0 < 0.0 || p.2 < 0.0) {
            return Err(Error::InvalidParameter("mixture needs non-negative weights and stds".into()));
        }
        Ok(InitialDistribution::Mixture(
            parts.iter().map(|&(w, m, s)| Component { weight: w / total, mean: m, std: s }).collect(),
        ))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            InitialDistribution::Gaussian { mean, std } => gaussian_pdf(x, *mean, *std),
            InitialDistribution::Mixture(c) => c.iter().map(|c| c.weight * gaussian_pdf(x, c.mean, c.std)).sum(),
            InitialDistribution::Bin(d) => d.pdf(x),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            InitialDistribution::Gaussian { mean, .. } => *mean,
            InitialDistribution::Mixture(c) => c.iter().map(|c| c.weight * c.mean).sum(),
            InitialDistribution::Bin(d) => density_moments(d).0,
        }
    }

    /// Exact variance; for bin densities this is the variance of the
    /// piecewise-uniform law, `Σ p h (x_k - m)² + h²/12`.
    pub fn variance(&self) -> f64 {
        match self {
            InitialDistribution::Gaussian { std, .. } => std * std,
            InitialDistribution::Mixture(c) => {
                let m = self.mean();
                c.iter().map(|c| c.weight * (c.std * c.std + (c.mean - m) * (c.mean - m))).sum()
            }
            InitialDistribution::Bin(d) => {
                let h = d.grid.width();
                density_moments(d).1 + h * h / 12.0
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            InitialDistribution::Gaussian { mean, std } => {
                (0..n).map(|_| mean + std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            InitialDistribution::Mixture(c) => (0..n)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = c[c.len() - 1];
                    for comp in c {
                        acc += comp.weight;
                        if u < acc {
                            pick = *comp;
                            break;
                        }
                    }
                    pick.mean + pick.std * rng.sample::<f64, _>(StandardNormal)
                })
                .collect(),
            InitialDistribution::Bin(d) => sample_inverse_transform(d, n, rng),
        }
    }

    /// Bin weights on `grid`; bin laws on a different grid are resampled through
    /// their pdf.
    pub fn to_bin_density(&self, grid: &BinGrid) -> Result<BinDensity> {
        match self {
            InitialDistribution::Bin(d) if d.grid == *grid => Ok(d.clone()),
            _ => bin_weights_from_pdf(|x| self.pdf(x), grid),
        }
    }
}

/// Random training law: a uniform-weight mixture of one to three Gaussians with
/// means uniform on the central 80% of the domain and standard deviations
/// uniform on `[0.05, 0.3]` times the domain length, discretised on `grid`.
pub fn random_training_density<R: Rng + ?Sized>(grid: &BinGrid, rng: &mut R) -> BinDensity {
    let len = grid.hi - grid.lo;
    loop {
        let n_comp = rng.gen_range(1..=3);
        let parts: Vec<(f64, f64, f64)> = (0..n_comp)
            .map(|_| {
                let m = grid.lo + 0.1 * len + rng.gen::<f64>() * 0.8 * len;
                let s = (0.05 + 0.25 * rng.gen::<f64>()) * len;
                (1.0, m, s)
            })
            .collect();
        let law = InitialDistribution::mixture(&parts).expect("valid mixture");
        if let Ok(d) = law.to_bin_density(grid) {
            return d;
        }
    }
}

/// Standard normal draw.
#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
