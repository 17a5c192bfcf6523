//! Histogram round trips and sampling statistics on the benchmark laws.

use mfc_core::measure::{
    bin_weights_from_pdf, density_moments, estimate_bin_density, random_training_density, sample_inverse_transform,
    BinDensity, BinGrid, InitialDistribution,
};
use mfc_core::problems::{
    meanvar_case, minmax_case, systemic_case, MinMaxParams, MEANVAR_DOMAIN, SYSTEMIC_DOMAIN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every benchmark initial law with its truncation domain.
fn benchmark_laws() -> Vec<(String, InitialDistribution, (f64, f64))> {
    let mut out = Vec::new();
    for c in 1..=6 {
        out.push((format!("systemic {c}"), systemic_case(c).unwrap(), SYSTEMIC_DOMAIN));
        out.push((format!("mean-variance {c}"), meanvar_case(c).unwrap(), MEANVAR_DOMAIN));
    }
    for t in [0.2, 0.5] {
        let p = MinMaxParams { horizon: t, ..Default::default() };
        for c in 1..=3 {
            out.push((format!("minmax T={t} {c}"), minmax_case(&p, c).unwrap(), p.default_domain()));
        }
    }
    out
}

fn l1(a: &BinDensity, b: &BinDensity) -> f64 {
    a.p.iter().zip(&b.p).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.grid.width()
}

/// Raw moments `E[X^j]`, `j = 1..=4`, of the law that is uniform inside each
/// bin with mass `p_k h`, by exact integration of monomials per bin.
fn uniform_in_bin_moments(d: &BinDensity) -> [f64; 4] {
    let h = d.grid.width();
    let mut m = [0.0; 4];
    for (k, p) in d.p.iter().enumerate() {
        let a = d.grid.lo + k as f64 * h;
        let b = a + h;
        for (j, mj) in m.iter_mut().enumerate() {
            let e = j as i32 + 2;
            *mj += p * (b.powi(e) - a.powi(e)) / e as f64;
        }
    }
    m
}

fn sample_mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

#[test]
fn round_trip_l1_below_five_percent_on_every_benchmark_law() {
    for (name, law, (lo, hi)) in benchmark_laws() {
        for k in [50, 100] {
            let grid = BinGrid::new(lo, hi, k).unwrap();
            let d = law.to_bin_density(&grid).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let xs = sample_inverse_transform(&d, 100_000, &mut rng);
            let err = l1(&estimate_bin_density(&xs, &grid).unwrap(), &d);
            assert!(err < 0.05, "{name} K={k}: L1 {err}");
        }
    }
}

#[test]
fn sample_moments_within_three_mc_std() {
    let n = 100_000;
    for (name, law, (lo, hi)) in benchmark_laws() {
        let grid = BinGrid::new(lo, hi, 100).unwrap();
        let d = law.to_bin_density(&grid).unwrap();
        let xs = sample_inverse_transform(&d, n, &mut ChaCha8Rng::seed_from_u64(11));
        let [m1, m2, m3, m4] = uniform_in_bin_moments(&d);
        let var = m2 - m1 * m1;
        let mu4 = m4 - 4.0 * m3 * m1 + 6.0 * m2 * m1 * m1 - 3.0 * m1.powi(4);
        let (sm, sv) = sample_mean_var(&xs);
        let sd_mean = (var / n as f64).sqrt();
        let sd_var = ((mu4 - var * var) / n as f64).sqrt();
        assert!((sm - m1).abs() < 3.0 * sd_mean, "{name}: mean {sm} vs {m1}");
        assert!((sv - var).abs() < 3.0 * sd_var, "{name}: variance {sv} vs {var}");
        // Bin-center moments differ from the uniform-in-bin ones by h²/12 only.
        let (cm, cv) = density_moments(&d);
        assert!((cm - m1).abs() < 1e-12, "{name}");
        assert!((cv + grid.width().powi(2) / 12.0 - var).abs() < 1e-12, "{name}");
    }
}

#[test]
fn moment_error_shrinks_like_inverse_root_n() {
    let (name, law, (lo, hi)) = benchmark_laws().swap_remove(0);
    let grid = BinGrid::new(lo, hi, 100).unwrap();
    let d = law.to_bin_density(&grid).unwrap();
    let [m1, m2, ..] = uniform_in_bin_moments(&d);
    let sd = (m2 - m1 * m1).sqrt();
    let mut scaled = Vec::new();
    for n in [1_000usize, 10_000, 100_000] {
        // Root-mean-square error over 20 independent batches.
        let mse = (0..20)
            .map(|s| {
                let xs = sample_inverse_transform(&d, n, &mut ChaCha8Rng::seed_from_u64(s));
                (sample_mean_var(&xs).0 - m1).powi(2)
            })
            .sum::<f64>()
            / 20.0;
        scaled.push(mse.sqrt() * (n as f64).sqrt() / sd);
    }
    for s in &scaled {
        assert!((0.4..2.0).contains(s), "{name}: scaled errors {scaled:?}");
    }
}

#[test]
fn constant_pdf_on_unit_grid_gives_unit_weights() {
    let g = BinGrid::new(0.0, 1.0, 4).unwrap();
    let d = bin_weights_from_pdf(|_| 1.0, &g).unwrap();
    assert_eq!(d.p, vec![1.0; 4]);
}

#[test]
fn centred_gaussian_weights_are_symmetric() {
    // On [-1.38, 1.62] with K=100 the centers are symmetric about 0.12, so
    // compare the weights of centers mirrored about 0 instead.
    let g = BinGrid::new(-1.38, 1.62, 100).unwrap();
    let law = InitialDistribution::gaussian(0.0, 0.2);
    let d = law.to_bin_density(&g).unwrap();
    assert!((d.p.iter().sum::<f64>() * g.width() - 1.0).abs() < 1e-12);
    let h = g.width();
    let zero = g.index(0.0);
    for j in 1..40 {
        let (a, b) = (zero - j, zero + j - 1);
        assert!((g.center(a) + g.center(b)).abs() < 1e-9);
        assert!((d.p[a] - d.p[b]).abs() < 1e-12, "bins {a}, {b}");
    }
    let s: f64 = d.p.iter().sum::<f64>() * h;
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn pdf_concentrated_at_one_center() {
    let g = BinGrid::new(0.0, 1.0, 5).unwrap();
    let c = g.center(2);
    let d = bin_weights_from_pdf(|x| if (x - c).abs() < 1e-9 { 1.0 } else { 0.0 }, &g).unwrap();
    assert_eq!(d.p, vec![0.0, 0.0, 1.0 / g.width(), 0.0, 0.0]);
}

#[test]
fn single_bin_mass_samples_stay_in_the_bin() {
    let g = BinGrid::new(0.0, 1.0, 4).unwrap();
    let d = BinDensity::new(g, vec![0.0, 0.0, 4.0, 0.0]).unwrap();
    let xs = sample_inverse_transform(&d, 10_000, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(xs.iter().all(|&x| (0.5..0.75).contains(&x)));
    assert_eq!(estimate_bin_density(&xs, &g).unwrap().p, vec![0.0, 0.0, 4.0, 0.0]);
}

#[test]
fn uniform_density_sample_mean_clt() {
    let g = BinGrid::new(-1.0, 2.0, 30).unwrap();
    let d = bin_weights_from_pdf(|_| 1.0, &g).unwrap();
    let n = 100_000;
    let xs = sample_inverse_transform(&d, n, &mut ChaCha8Rng::seed_from_u64(4));
    let m = xs.iter().sum::<f64>() / n as f64;
    assert!((m - 0.5).abs() < 3.0 * 3.0 / (12.0 * n as f64).sqrt());
}

#[test]
fn sampling_is_reproducible() {
    let g = BinGrid::new(-1.0, 1.0, 20).unwrap();
    let d = InitialDistribution::gaussian(0.1, 0.3).to_bin_density(&g).unwrap();
    let a = sample_inverse_transform(&d, 500, &mut ChaCha8Rng::seed_from_u64(8));
    let b = sample_inverse_transform(&d, 500, &mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!(a, b);
    let r1 = random_training_density(&g, &mut ChaCha8Rng::seed_from_u64(3));
    let r2 = random_training_density(&g, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(r1, r2);
}

#[test]
fn outlier_clamps_into_last_bin() {
    let g = BinGrid::new(0.0, 1.0, 4).unwrap();
    let d = estimate_bin_density(&[11.0], &g).unwrap();
    assert_eq!(d.p, vec![0.0, 0.0, 0.0, 4.0]);
}

#[test]
fn training_densities_cover_every_bin() {
    let g = BinGrid::new(SYSTEMIC_DOMAIN.0, SYSTEMIC_DOMAIN.1, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut hit = vec![false; g.k];
    for _ in 0..1000 {
        let d = random_training_density(&g, &mut rng);
        BinDensity::new(g, d.p.clone()).unwrap();
        for (h, p) in hit.iter_mut().zip(&d.p) {
            *h |= *p > 0.0;
        }
    }
    assert!(hit.iter().all(|&h| h));
}

#[test]
fn density_moment_examples() {
    let g = BinGrid::new(-1.0, 1.0, 10).unwrap();
    let sym = bin_weights_from_pdf(|x| 1.0 - x.abs(), &g).unwrap();
    assert!(density_moments(&sym).0.abs() < 1e-12);
    let mut p = vec![0.0; 10];
    p[7] = 1.0 / g.width();
    let (m, v) = density_moments(&BinDensity::new(g, p).unwrap());
    assert!((m - g.center(7)).abs() < 1e-12 && v.abs() < 1e-12);
    let g = BinGrid::new(MEANVAR_DOMAIN.0, MEANVAR_DOMAIN.1, 400).unwrap();
    let (m, v) = density_moments(&InitialDistribution::gaussian(0.1, 0.2).to_bin_density(&g).unwrap());
    assert!((m - 0.1).abs() < 1e-3 && (v - 0.04).abs() < 1e-3, "{m} {v}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_are_valid_densities_on_the_grid(
        xs in prop::collection::vec(-50.0f64..50.0, 1..200),
        lo in -2.0f64..0.0,
        len in 0.5f64..4.0,
        k in 1usize..60,
    ) {
        let g = BinGrid::new(lo, lo + len, k).unwrap();
        let d = estimate_bin_density(&xs, &g).unwrap();
        prop_assert!(BinDensity::new(g, d.p.clone()).is_ok());
        let (m, _) = density_moments(&d);
        prop_assert!(m >= g.center(0) - 1e-12 && m <= g.center(k - 1) + 1e-12);
    }

    #[test]
    fn samples_lie_inside_the_domain(seed in 0u64..1000, k in 1usize..40) {
        let g = BinGrid::new(-0.5, 1.5, k).unwrap();
        let d = random_training_density(&g, &mut ChaCha8Rng::seed_from_u64(seed));
        let xs = sample_inverse_transform(&d, 200, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        prop_assert!(xs.iter().all(|&x| (g.lo..=g.hi).contains(&x)));
    }
}
