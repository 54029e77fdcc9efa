//! Closed-form entropies and negative KL divergences for the variational
//! families used by the two priors.
//!
//! Gamma and inverse-Gamma distributions use the scale parametrization:
//! `G(α, β)` has density `z^(α-1) e^(-z/β) / (Γ(α) β^α)` and `IG(α, β)` has
//! density `β^α z^(-α-1) e^(-β/z) / Γ(α)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::autodiff::{sigmoid, softplus};
use crate::error::{domain_err, Result};
use crate::special::ln_gamma;

/// Mean and log-variance of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub log_sigma2: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        GaussianParams {
            mu,
            log_sigma2: sigma2.ln(),
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

/// Location and log-variance of the normal underlying a log-normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub log_sigma2: f64,
}

impl LogNormalParams {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        LogNormalParams {
            mu,
            log_sigma2: sigma2.ln(),
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma2()).exp()
    }

    pub fn mode(&self) -> f64 {
        (self.mu - self.sigma2()).exp()
    }
}

/// Constants of the sigmoid approximation to the normal-Jeffreys scale KL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NJConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

pub const NJ: NJConstants = NJConstants {
    k1: 0.63576,
    k2: 1.87320,
    k3: 1.48695,
};

fn check_var(op: &'static str, sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(domain_err(
            op,
            format!("variance must be positive and finite, got {sigma2}"),
        ))
    }
}

fn check_pos(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain_err(op, format!("{name} must be positive and finite, got {v}")))
    }
}

/// Per-weight `KL(N(μ, σ²) ‖ N(0, 1))`.
pub fn kl_conditional_gaussian(mu: f64, sigma2: f64) -> Result<f64> {
    check_var("kl_conditional_gaussian", sigma2)?;
    Ok(0.5 * (-sigma2.ln() + sigma2 + mu * mu - 1.0))
}

/// Approximate `-KL(q(z) ‖ p(z))` of one group under the normal-Jeffreys prior,
/// as a function of the group's log dropout rate.
pub fn neg_kl_nj_scale(log_alpha: f64) -> Result<f64> {
    if log_alpha.is_nan() || log_alpha == f64::NEG_INFINITY {
        return Err(domain_err("neg_kl_nj_scale", format!("log alpha = {log_alpha}")));
    }
    let NJConstants { k1, k2, k3 } = NJ;
    Ok(k1 * sigmoid(k2 + k3 * log_alpha) - 0.5 * softplus(-log_alpha) - k1)
}

pub fn lognormal_entropy(mu: f64, sigma2: f64) -> Result<f64> {
    check_var("lognormal_entropy", sigma2)?;
    Ok(0.5 * sigma2.ln() + mu + 0.5 + 0.5 * (2.0 * PI).ln())
}

/// `-KL(LN(μ, σ²) ‖ IG(α, β))`.
pub fn neg_kl_lognormal_from_invgamma(q: LogNormalParams, alpha: f64, beta: f64) -> Result<f64> {
    const OP: &str = "neg_kl_lognormal_from_invgamma";
    check_pos(OP, "alpha", alpha)?;
    check_pos(OP, "beta", beta)?;
    let s2 = q.sigma2();
    check_var(OP, s2)?;
    let cross = alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * q.mu - beta * (-q.mu + 0.5 * s2).exp();
    Ok(cross + lognormal_entropy(q.mu, s2)?)
}

/// `-KL(LN(μ, σ²) ‖ G(α, β))`.
pub fn neg_kl_lognormal_from_gamma(q: LogNormalParams, alpha: f64, beta: f64) -> Result<f64> {
    const OP: &str = "neg_kl_lognormal_from_gamma";
    check_pos(OP, "alpha", alpha)?;
    check_pos(OP, "beta", beta)?;
    let s2 = q.sigma2();
    check_var(OP, s2)?;
    let cross = -alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * q.mu - (q.mu + 0.5 * s2).exp() / beta;
    Ok(cross + lognormal_entropy(q.mu, s2)?)
}

/// Summed `-KL` of all scale variables of one horseshoe layer:
/// `s_a ~ G(½, τ0²)`, `s_b ~ IG(½, 1)`, `α̃_i ~ G(½, 1)`, `β̃_i ~ IG(½, 1)`.
pub fn horseshoe_scale_neg_kl(
    s_a: LogNormalParams,
    s_b: LogNormalParams,
    alphas: &[LogNormalParams],
    betas: &[LogNormalParams],
    tau0: f64,
) -> Result<f64> {
    check_pos("horseshoe_scale_neg_kl", "tau0", tau0)?;
    if alphas.len() != betas.len() {
        return Err(crate::error::dim_err(
            "horseshoe_scale_neg_kl",
            &[alphas.len()],
            &[betas.len()],
        ));
    }
    let mut total =
        neg_kl_lognormal_from_gamma(s_a, 0.5, tau0 * tau0)? + neg_kl_lognormal_from_invgamma(s_b, 0.5, 1.0)?;
    for (a, b) in alphas.iter().zip(betas) {
        total += neg_kl_lognormal_from_gamma(*a, 0.5, 1.0)?;
        total += neg_kl_lognormal_from_invgamma(*b, 0.5, 1.0)?;
    }
    Ok(total)
}
