//! Monte Carlo estimates of the closed-form KL terms, with densities taken
//! from `statrs`.

use bayescomp::dists::{
    horseshoe_scale_neg_kl, kl_conditional_gaussian, lognormal_entropy, neg_kl_lognormal_from_gamma,
    neg_kl_lognormal_from_invgamma, neg_kl_nj_scale, LogNormalParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, Gamma, LogNormal, Normal};

/// Closed form against a Monte Carlo mean.
#[derive(Debug)]
pub struct Check {
    pub name: &'static str,
    pub closed: f64,
    pub mean: f64,
    pub se: f64,
    /// Allowed bias on top of three standard errors.
    pub slack: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        (self.closed - self.mean).abs() <= 3.0 * self.se + self.slack
    }
}

fn estimate(name: &'static str, closed: f64, slack: f64, n: usize, mut f: impl FnMut() -> f64) -> Check {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let v = f();
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
    Check {
        name,
        closed,
        mean,
        se: (var / n as f64).sqrt(),
        slack,
    }
}

// Scale-parametrized Gamma: shape a, scale b.
pub fn gamma_ln_pdf(a: f64, b: f64, z: f64) -> f64 {
    Gamma::new(a, 1.0 / b).unwrap().ln_pdf(z)
}

// statrs evaluates the inverse-Gamma log density as ln(pdf), which underflows
// for the tails sampled here, so go through 1/z ~ Gamma(a, rate b).
pub fn inv_gamma_ln_pdf(a: f64, b: f64, z: f64) -> f64 {
    Gamma::new(a, b).unwrap().ln_pdf(1.0 / z) - 2.0 * z.ln()
}

fn lognormal(q: LogNormalParams) -> LogNormal {
    LogNormal::new(q.mu, q.sigma2().sqrt()).unwrap()
}

fn sample_lognormal(q: LogNormalParams, rng: &mut ChaCha8Rng) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    (q.mu + q.sigma2().sqrt() * e).exp()
}

fn random_q(rng: &mut ChaCha8Rng) -> LogNormalParams {
    LogNormalParams::new(rng.random_range(-1.5..1.5), rng.random_range(0.05..1.5))
}

/// Per-weight term with the weight scaled by a fixed `z`, which must cancel.
pub fn conditional_gaussian(settings: usize, samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings)
        .map(|_| {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let s2: f64 = rng.random_range(0.01..3.0);
            let z: f64 = rng.random_range(0.1..3.0);
            let q = Normal::new(z * mu, z * s2.sqrt()).unwrap();
            let p = Normal::new(0.0, z).unwrap();
            estimate(
                "conditional gaussian",
                kl_conditional_gaussian(mu, s2).unwrap(),
                0.0,
                samples,
                || {
                    let e: f64 = rng.sample(StandardNormal);
                    let w = z * (mu + s2.sqrt() * e);
                    q.ln_pdf(w) - p.ln_pdf(w)
                },
            )
        })
        .collect()
}

pub fn entropy(settings: usize, samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings)
        .map(|_| {
            let q = random_q(&mut rng);
            let d = lognormal(q);
            estimate(
                "log-normal entropy",
                lognormal_entropy(q.mu, q.sigma2()).unwrap(),
                0.0,
                samples,
                || -d.ln_pdf(sample_lognormal(q, &mut rng)),
            )
        })
        .collect()
}

/// Negative KL of a log-normal from Gamma and inverse-Gamma priors.
pub fn gamma_family(settings: usize, samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..settings {
        let q = random_q(&mut rng);
        let a: f64 = rng.random_range(0.3..3.0);
        let b: f64 = rng.random_range(0.2..5.0);
        let d = lognormal(q);
        out.push(estimate(
            "gamma",
            neg_kl_lognormal_from_gamma(q, a, b).unwrap(),
            0.0,
            samples,
            || {
                let z = sample_lognormal(q, &mut rng);
                gamma_ln_pdf(a, b, z) - d.ln_pdf(z)
            },
        ));
        out.push(estimate(
            "inverse gamma",
            neg_kl_lognormal_from_invgamma(q, a, b).unwrap(),
            0.0,
            samples,
            || {
                let z = sample_lognormal(q, &mut rng);
                inv_gamma_ln_pdf(a, b, z) - d.ln_pdf(z)
            },
        ));
    }
    out
}

/// Full horseshoe scale KL of one layer, sampled jointly.
pub fn horseshoe(settings: usize, samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings)
        .map(|_| {
            let groups = rng.random_range(1..4);
            let tau0: f64 = rng.random_range(0.3..2.0);
            let s_a = random_q(&mut rng);
            let s_b = random_q(&mut rng);
            let alphas: Vec<_> = (0..groups).map(|_| random_q(&mut rng)).collect();
            let betas: Vec<_> = (0..groups).map(|_| random_q(&mut rng)).collect();
            let closed = horseshoe_scale_neg_kl(s_a, s_b, &alphas, &betas, tau0).unwrap();
            estimate("horseshoe", closed, 0.0, samples, || {
                let mut t = 0.0;
                let z = sample_lognormal(s_a, &mut rng);
                t += gamma_ln_pdf(0.5, tau0 * tau0, z) - lognormal(s_a).ln_pdf(z);
                let z = sample_lognormal(s_b, &mut rng);
                t += inv_gamma_ln_pdf(0.5, 1.0, z) - lognormal(s_b).ln_pdf(z);
                for (a, b) in alphas.iter().zip(&betas) {
                    let z = sample_lognormal(*a, &mut rng);
                    t += gamma_ln_pdf(0.5, 1.0, z) - lognormal(*a).ln_pdf(z);
                    let z = sample_lognormal(*b, &mut rng);
                    t += inv_gamma_ln_pdf(0.5, 1.0, z) - lognormal(*b).ln_pdf(z);
                }
                t
            })
        })
        .collect()
}

// Euler-Mascheroni constant.
const GAMMA_E: f64 = 0.577_215_664_901_532_9;

/// Largest gap between the sigmoid approximation and the exact scale KL over
/// log α in [-20, 10], measured by adaptive quadrature.
pub const NJ_APPROX_ERROR: f64 = 0.0094;

/// Sigmoid approximation of the normal-Jeffreys scale KL against the exact
/// expectation. Up to a constant, -KL(q(z) || 1/|z|) = ½ log α - E log|1 + √α ε|;
/// the constant makes it vanish as α grows.
pub fn nj_scale(settings: usize, samples: usize, seed: u64) -> Vec<Check> {
    let c = -(GAMMA_E + std::f64::consts::LN_2) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings)
        .map(|i| {
            let la = -8.0 + 12.0 * i as f64 / (settings - 1) as f64 + rng.random_range(-0.2..0.2);
            let sa = (0.5 * la).exp();
            estimate(
                "nj scale",
                neg_kl_nj_scale(la).unwrap(),
                NJ_APPROX_ERROR,
                samples,
                || {
                    let e: f64 = rng.sample(StandardNormal);
                    0.5 * la - (1.0 + sa * e).abs().ln() + c
                },
            )
        })
        .collect()
}
