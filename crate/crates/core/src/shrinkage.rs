//! Shrinkage coefficients `λ = 1/(1+z²)` implied by scale priors.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::layers::Rng;
use crate::special::{ln_beta, reg_inc_beta};

/// `|s · tan(πU/2)|` with `U ~ Uniform(0, 1)`.
pub fn sample_half_cauchy(scale: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(scale > 0.0) {
        return Err(domain_err("sample_half_cauchy", format!("scale = {scale}")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| (scale * (std::f64::consts::FRAC_PI_2 * rng.random::<f64>()).tan()).abs())
        .collect())
}

pub fn shrinkage(z: f64) -> f64 {
    1.0 / (1.0 + z * z)
}

pub fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)).exp()
}

/// Kolmogorov-Smirnov distance between the samples and `Beta(a, b)`.
pub fn ks_against_beta(samples: &[f64], a: f64, b: f64) -> Result<f64> {
    if samples.is_empty() || !(a > 0.0) || !(b > 0.0) {
        return Err(domain_err(
            "ks_against_beta",
            format!("n = {}, a = {a}, b = {b}", samples.len()),
        ));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    Ok(s.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = reg_inc_beta(x, a, b);
        d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    }))
}

/// Inverse-CDF draws from `Beta(a, b)` by bisection on the regularized
/// incomplete beta function.
pub fn sample_beta_inverse_cdf(a: f64, b: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(domain_err("sample_beta_inverse_cdf", format!("a = {a}, b = {b}")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                if reg_inc_beta(mid, a, b) < u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect())
}

/// Fraction of samples in `[0, edge] ∪ [1 − edge, 1]`.
pub fn endpoint_mass(samples: &[f64], edge: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&x| x <= edge || x >= 1.0 - edge).count() as f64 / samples.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub bin_left: f64,
    pub bin_right: f64,
    pub empirical: f64,
    pub beta: f64,
}

/// Histogram density of `λ` on `[0, 1]` next to the `Beta(a, b)` density at
/// each bin center.
pub fn density_table(samples: &[f64], bins: usize, a: f64, b: f64) -> Vec<DensityRow> {
    let bins = bins.max(1);
    let w = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        counts[((x / w) as usize).min(bins - 1)] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| DensityRow {
            bin_left: i as f64 * w,
            bin_right: (i + 1) as f64 * w,
            empirical: c as f64 / (n * w),
            beta: beta_pdf((i as f64 + 0.5) * w, a, b),
        })
        .collect()
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut out = String::from("bin_left,bin_right,empirical_density,beta_density\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.bin_left, r.bin_right, r.empirical, r.beta));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageSummary {
    pub samples: usize,
    pub seed: u64,
    pub ks_horseshoe_vs_beta_half: f64,
    pub ks_horseshoe_vs_beta_2_2: f64,
    pub nj_epsilon: f64,
    pub nj_endpoint_mass: f64,
    pub horseshoe_endpoint_mass: f64,
}

/// Half-Cauchy shrinkage against `Beta(½, ½)` plus the endpoint mass of
/// `Beta(ε, ε)` with `ε = 0.01`.
pub fn analyze(samples: usize, seed: u64) -> Result<(ShrinkageSummary, Vec<f64>, Vec<f64>)> {
    const EPS: f64 = 1e-2;
    let hs: Vec<f64> = sample_half_cauchy(1.0, samples, seed)?
        .into_iter()
        .map(shrinkage)
        .collect();
    let nj = sample_beta_inverse_cdf(EPS, EPS, samples.min(100_000), seed.wrapping_add(1))?;
    let summary = ShrinkageSummary {
        samples,
        seed,
        ks_horseshoe_vs_beta_half: ks_against_beta(&hs, 0.5, 0.5)?,
        ks_horseshoe_vs_beta_2_2: ks_against_beta(&hs, 2.0, 2.0)?,
        nj_epsilon: EPS,
        nj_endpoint_mass: endpoint_mass(&nj, 0.01),
        horseshoe_endpoint_mass: endpoint_mass(&hs, 0.01),
    };
    Ok((summary, hs, nj))
}
