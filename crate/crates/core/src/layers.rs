//! Variational layers with group-coupled scale posteriors.
//!
//! A [`BayesLayer`] is fully connected or convolutional, and its groups are
//! either normal-Jeffreys (Gaussian scale posterior, [`GnjScales`]) or
//! horseshoe (log-normal scale posteriors, [`GhsScales`]). Groups are input
//! neurons for dense layers and output filters for convolutions.
//!
//! Training uses [`BayesLayer::forward_stochastic`], which samples
//! pre-activations with the local reparametrization trick. Inference uses
//! [`BayesLayer::forward_deterministic`], which folds the mean group scale
//! into the weight means and zeroes masked groups.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dists::{LogNormalParams, NJ};
use crate::error::{dim_err, Error, Result};
use crate::special::ln_gamma;
use crate::tensor::{conv2d, Padding, Tensor};

/// Deterministic, portable random stream used everywhere in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    /// Group normal-Jeffreys.
    Gnj,
    /// Group horseshoe.
    Ghs,
}

impl std::str::FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gnj" => Ok(Prior::Gnj),
            "ghs" => Ok(Prior::Ghs),
            other => Err(Error::Config(format!("unknown prior {other:?} (expected gnj or ghs)"))),
        }
    }
}

impl std::fmt::Display for Prior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Prior::Gnj => "gnj",
            Prior::Ghs => "ghs",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv { padding: Padding },
}

/// Gaussian posterior `N(μ_z, σ²_z)` per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GnjScales {
    pub mu: Tensor,
    pub log_sigma2: Tensor,
}

/// Log-normal posteriors of the horseshoe decomposition: per-group `α̃`, `β̃`
/// and the layer-global `s_a`, `s_b` (stored as rank-0 tensors).
#[derive(Clone, Debug, PartialEq)]
pub struct GhsScales {
    pub alpha_mu: Tensor,
    pub alpha_log_sigma2: Tensor,
    pub beta_mu: Tensor,
    pub beta_log_sigma2: Tensor,
    pub sa_mu: Tensor,
    pub sa_log_sigma2: Tensor,
    pub sb_mu: Tensor,
    pub sb_log_sigma2: Tensor,
}

// one per layer, so the size gap is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Scales {
    Gnj(GnjScales),
    Ghs(GhsScales),
}

/// Log-normal parameters of `z̃_i = √(α̃_i β̃_i)` and `s = √(s_a s_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpliedScales {
    pub mu_z_tilde: Vec<f64>,
    pub sigma2_z_tilde: Vec<f64>,
    pub mu_s: f64,
    pub sigma2_s: f64,
}

impl ImpliedScales {
    /// Parameters of the local scale `z_i = s · z̃_i`, ignoring the
    /// dependence induced by the shared `s`.
    pub fn local(&self) -> (Vec<f64>, Vec<f64>) {
        let mu = self.mu_z_tilde.iter().map(|m| m + self.mu_s).collect();
        let s2 = self.sigma2_z_tilde.iter().map(|v| v + self.sigma2_s).collect();
        (mu, s2)
    }
}

impl GhsScales {
    pub fn implied(&self) -> ImpliedScales {
        let a_mu = self.alpha_mu.data();
        let b_mu = self.beta_mu.data();
        let a_s2 = self.alpha_log_sigma2.data();
        let b_s2 = self.beta_log_sigma2.data();
        ImpliedScales {
            mu_z_tilde: a_mu.iter().zip(b_mu).map(|(a, b)| 0.5 * a + 0.5 * b).collect(),
            sigma2_z_tilde: a_s2
                .iter()
                .zip(b_s2)
                .map(|(a, b)| 0.25 * a.exp() + 0.25 * b.exp())
                .collect(),
            mu_s: 0.5 * self.sa_mu.data()[0] + 0.5 * self.sb_mu.data()[0],
            sigma2_s: 0.25 * self.sa_log_sigma2.data()[0].exp() + 0.25 * self.sb_log_sigma2.data()[0].exp(),
        }
    }

    fn lognormals(mu: &Tensor, log_s2: &Tensor) -> Vec<LogNormalParams> {
        mu.data()
            .iter()
            .zip(log_s2.data())
            .map(|(&mu, &log_sigma2)| LogNormalParams { mu, log_sigma2 })
            .collect()
    }

    pub fn alphas(&self) -> Vec<LogNormalParams> {
        Self::lognormals(&self.alpha_mu, &self.alpha_log_sigma2)
    }

    pub fn betas(&self) -> Vec<LogNormalParams> {
        Self::lognormals(&self.beta_mu, &self.beta_log_sigma2)
    }

    pub fn s_a(&self) -> LogNormalParams {
        LogNormalParams {
            mu: self.sa_mu.data()[0],
            log_sigma2: self.sa_log_sigma2.data()[0],
        }
    }

    pub fn s_b(&self) -> LogNormalParams {
        LogNormalParams {
            mu: self.sb_mu.data()[0],
            log_sigma2: self.sb_log_sigma2.data()[0],
        }
    }
}

/// One variational layer. Weight tensors are `[A, B]` for dense layers and
/// `[h, w, C_in, N_f]` for convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesLayer {
    pub kind: LayerKind,
    pub weight_mu: Tensor,
    pub weight_log_sigma2: Tensor,
    pub bias_mu: Tensor,
    pub bias_log_sigma2: Tensor,
    pub scales: Scales,
}

/// Graph handles for a layer's parameters, in [`BayesLayer::params`] order.
#[derive(Clone, Debug)]
pub struct LayerVars(pub Vec<Var>);

/// Per-layer KL terms as graph nodes: the conditional Gaussian part (weights
/// and biases) and the scale part.
#[derive(Clone, Copy, Debug)]
pub struct KlVars {
    pub weights: Var,
    pub scales: Var,
}

pub(crate) fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

impl BayesLayer {
    pub fn prior(&self) -> Prior {
        match self.scales {
            Scales::Gnj(_) => Prior::Gnj,
            Scales::Ghs(_) => Prior::Ghs,
        }
    }

    /// Number of groups (input neurons or output filters).
    pub fn groups(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weight_mu.shape()[0],
            LayerKind::Conv { .. } => self.weight_mu.shape()[3],
        }
    }

    /// Number of output units (dense) or filters (conv).
    pub fn outputs(&self) -> usize {
        *self.weight_mu.shape().last().expect("weights have rank >= 2")
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.scales {
            Scales::Gnj(_) => &[
                "weight_mu",
                "weight_log_sigma2",
                "bias_mu",
                "bias_log_sigma2",
                "z_mu",
                "z_log_sigma2",
            ],
            Scales::Ghs(_) => &[
                "weight_mu",
                "weight_log_sigma2",
                "bias_mu",
                "bias_log_sigma2",
                "alpha_mu",
                "alpha_log_sigma2",
                "beta_mu",
                "beta_log_sigma2",
                "sa_mu",
                "sa_log_sigma2",
                "sb_mu",
                "sb_log_sigma2",
            ],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.weight_mu,
            &self.weight_log_sigma2,
            &self.bias_mu,
            &self.bias_log_sigma2,
        ];
        match &self.scales {
            Scales::Gnj(s) => v.extend([&s.mu, &s.log_sigma2]),
            Scales::Ghs(s) => v.extend([
                &s.alpha_mu,
                &s.alpha_log_sigma2,
                &s.beta_mu,
                &s.beta_log_sigma2,
                &s.sa_mu,
                &s.sa_log_sigma2,
                &s.sb_mu,
                &s.sb_log_sigma2,
            ]),
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.weight_mu,
            &mut self.weight_log_sigma2,
            &mut self.bias_mu,
            &mut self.bias_log_sigma2,
        ];
        match &mut self.scales {
            Scales::Gnj(s) => v.extend([&mut s.mu, &mut s.log_sigma2]),
            Scales::Ghs(s) => v.extend([
                &mut s.alpha_mu,
                &mut s.alpha_log_sigma2,
                &mut s.beta_mu,
                &mut s.beta_log_sigma2,
                &mut s.sa_mu,
                &mut s.sa_log_sigma2,
                &mut s.sb_mu,
                &mut s.sb_log_sigma2,
            ]),
        }
        v
    }

    /// Check that every parameter tensor has the shape implied by the weights.
    pub fn validate(&self) -> Result<()> {
        let w = self.weight_mu.shape();
        let ok_rank = match self.kind {
            LayerKind::Dense => w.len() == 2,
            LayerKind::Conv { .. } => w.len() == 4,
        };
        if !ok_rank || self.weight_log_sigma2.shape() != w {
            return Err(dim_err("BayesLayer", w, self.weight_log_sigma2.shape()));
        }
        let (g, b) = (self.groups(), self.outputs());
        for t in [&self.bias_mu, &self.bias_log_sigma2] {
            if t.shape() != [b] {
                return Err(dim_err("BayesLayer bias", &[b], t.shape()));
            }
        }
        let group_shaped: Vec<&Tensor> = match &self.scales {
            Scales::Gnj(s) => vec![&s.mu, &s.log_sigma2],
            Scales::Ghs(s) => {
                for t in [&s.sa_mu, &s.sa_log_sigma2, &s.sb_mu, &s.sb_log_sigma2] {
                    if t.numel() != 1 || t.ndim() != 0 {
                        return Err(dim_err("BayesLayer global scale", &[], t.shape()));
                    }
                }
                vec![&s.alpha_mu, &s.alpha_log_sigma2, &s.beta_mu, &s.beta_log_sigma2]
            }
        };
        for t in group_shaped {
            if t.shape() != [g] {
                return Err(dim_err("BayesLayer scales", &[g], t.shape()));
            }
        }
        Ok(())
    }

    /// Mean of each group's scale under the posterior: `μ_z` (GNJ) or
    /// `exp(μ_z + σ²_z / 2)` (GHS).
    pub fn mean_group_scales(&self) -> Vec<f64> {
        match &self.scales {
            Scales::Gnj(s) => s.mu.data().to_vec(),
            Scales::Ghs(s) => {
                let imp = s.implied();
                imp.mu_z_tilde
                    .iter()
                    .zip(&imp.sigma2_z_tilde)
                    .map(|(m, v)| ((m + imp.mu_s) + 0.5 * (v + imp.sigma2_s)).exp())
                    .collect()
            }
        }
    }

    fn masked_scales(&self, mask: &[bool]) -> Result<Vec<f64>> {
        if mask.len() != self.groups() {
            return Err(dim_err("mask", &[self.groups()], &[mask.len()]));
        }
        Ok(self
            .mean_group_scales()
            .into_iter()
            .zip(mask)
            .map(|(s, &m)| if m { 1.0 * s } else { 0.0 * s })
            .collect())
    }

    /// Masked variational posterior mean of the weights:
    /// `diag(m ⊙ E[z]) M_W` (dense) or per-filter scaling (conv).
    pub fn masked_mean_weights(&self, mask: &[bool]) -> Result<Tensor> {
        let scale = self.masked_scales(mask)?;
        let mut w = self.weight_mu.clone();
        match self.kind {
            LayerKind::Dense => {
                let b = self.outputs();
                for (row, s) in w.data_mut().chunks_exact_mut(b).zip(&scale) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
            }
            LayerKind::Conv { .. } => {
                for chunk in w.data_mut().chunks_exact_mut(scale.len()) {
                    chunk.iter_mut().zip(&scale).for_each(|(x, s)| *x *= s);
                }
            }
        }
        Ok(w)
    }

    /// Bias used at test time; a masked filter also drops its bias.
    pub fn masked_bias(&self, mask: &[bool]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense => self.bias_mu.data().to_vec(),
            LayerKind::Conv { .. } => self
                .bias_mu
                .data()
                .iter()
                .zip(mask)
                .map(|(&b, &m)| if m { b } else { 0.0 })
                .collect(),
        }
    }

    /// Test-time pre-activations under the masked posterior mean.
    pub fn forward_deterministic(&self, h: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let scale = self.masked_scales(mask)?;
        match self.kind {
            LayerKind::Dense => {
                let a = self.groups();
                let &[k, a2] = h.shape() else {
                    return Err(dim_err("dense forward", h.shape(), self.weight_mu.shape()));
                };
                if a2 != a {
                    return Err(dim_err("dense forward", h.shape(), self.weight_mu.shape()));
                }
                let mut hs = h.clone();
                for row in hs.data_mut().chunks_exact_mut(a) {
                    row.iter_mut().zip(&scale).for_each(|(x, s)| *x *= s);
                }
                let mut out = hs.matmul(&self.weight_mu)?;
                add_rows(out.data_mut(), self.bias_mu.data());
                debug_assert_eq!(out.shape()[0], k);
                Ok(out)
            }
            LayerKind::Conv { padding } => {
                let mut out = conv2d(h, &self.weight_mu, padding)?;
                let bias = self.masked_bias(mask);
                for chunk in out.data_mut().chunks_exact_mut(scale.len()) {
                    for ((x, s), b) in chunk.iter_mut().zip(&scale).zip(&bias) {
                        *x = *x * s + b;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Register this layer's parameters on `g` (tracked leaves when `train`).
    pub fn register(&self, g: &mut Graph, train: bool) -> LayerVars {
        LayerVars(
            self.params()
                .into_iter()
                .map(|t| {
                    if train {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// One draw of the per-(sample, group) scale matrix `Z` of shape `[K, G]`.
    fn sample_group_scales(&self, g: &mut Graph, vars: &LayerVars, k: usize, rng: &mut Rng) -> Result<Var> {
        let groups = self.groups();
        let shape = [k, groups];
        match self.scales {
            Scales::Gnj(_) => {
                let (mu, log_s2) = (vars.0[4], vars.0[5]);
                let half = g.scale(log_s2, 0.5);
                let sigma = g.exp(half);
                let noise = g.constant(normal_tensor(&shape, rng));
                let mu_b = g.broadcast_rows(mu, &shape)?;
                let sigma_b = g.broadcast_rows(sigma, &shape)?;
                let spread = g.mul(sigma_b, noise)?;
                g.add(mu_b, spread)
            }
            Scales::Ghs(_) => {
                let v = &vars.0;
                let (a_mu, a_ls2, b_mu, b_ls2) = (v[4], v[5], v[6], v[7]);
                let (sa_mu, sa_ls2, sb_mu, sb_ls2) = (v[8], v[9], v[10], v[11]);
                // global scale: log s = μ_s + σ_s ε̂, one draw per sample
                let eps = g.constant(normal_tensor(&[k], rng));
                let mu_s = half_sum(g, sa_mu, sb_mu)?;
                let sigma_s = implied_sigma(g, sa_ls2, sb_ls2)?;
                let spread_s = g.mul(eps, sigma_s)?;
                let mu_s_b = g.broadcast_samples_scalar(mu_s, k)?;
                let log_s = g.add(mu_s_b, spread_s)?;
                // local scale
                let mu_zt = half_sum(g, a_mu, b_mu)?;
                let sigma_zt = implied_sigma(g, a_ls2, b_ls2)?;
                let noise = g.constant(normal_tensor(&shape, rng));
                let mu_b = g.broadcast_rows(mu_zt, &shape)?;
                let log_s_b = g.broadcast_samples(log_s, &shape)?;
                let loc = g.add(mu_b, log_s_b)?;
                let sigma_b = g.broadcast_rows(sigma_zt, &shape)?;
                let spread = g.mul(sigma_b, noise)?;
                let log_z = g.add(loc, spread)?;
                Ok(g.exp(log_z))
            }
        }
    }

    /// One local-reparametrized sample of the pre-activations for input `h`.
    pub fn forward_stochastic(&self, g: &mut Graph, vars: &LayerVars, h: Var, rng: &mut Rng) -> Result<Var> {
        let v = &vars.0;
        let (w_mu, w_ls2, b_mu, b_ls2) = (v[0], v[1], v[2], v[3]);
        let k = g.shape(h)[0];
        match self.kind {
            LayerKind::Dense => {
                if g.shape(h) != [k, self.groups()] {
                    return Err(dim_err("dense forward", g.shape(h), self.weight_mu.shape()));
                }
                let z = self.sample_group_scales(g, vars, k, rng)?;
                let h_hat = g.mul(h, z)?;
                let m = g.matmul(h_hat, w_mu)?;
                let h_sq = g.square(h_hat);
                let w_var = g.exp(w_ls2);
                let var = g.matmul(h_sq, w_var)?;
                self.finish(g, m, var, b_mu, b_ls2, rng)
            }
            LayerKind::Conv { padding } => {
                let m = g.conv2d(h, w_mu, padding)?;
                let h_sq = g.square(h);
                let w_var = g.exp(w_ls2);
                let var = g.conv2d(h_sq, w_var, padding)?;
                let z = self.sample_group_scales(g, vars, k, rng)?;
                let out_shape = g.shape(m).to_vec();
                let nf = self.groups();
                let z4 = g.reshape(z, &[k, 1, 1, nf])?;
                let zb = g.broadcast(z4, &out_shape)?;
                let m = g.mul(m, zb)?;
                let z_sq = g.square(zb);
                let var = g.mul(var, z_sq)?;
                self.finish(g, m, var, b_mu, b_ls2, rng)
            }
        }
    }

    /// Add the bias distribution and draw `mean + √var ⊙ E`.
    fn finish(&self, g: &mut Graph, m: Var, var: Var, b_mu: Var, b_ls2: Var, rng: &mut Rng) -> Result<Var> {
        let shape = g.shape(m).to_vec();
        let bias = g.broadcast_rows(b_mu, &shape)?;
        let mean = g.add(m, bias)?;
        let b_var = g.exp(b_ls2);
        let b_var = g.broadcast_rows(b_var, &shape)?;
        let var = g.add(var, b_var)?;
        let sd = g.sqrt(var)?;
        let noise = g.constant(normal_tensor(&shape, rng));
        let spread = g.mul(sd, noise)?;
        g.add(mean, spread)
    }

    /// KL terms of this layer as graph nodes. `tau0` is only used by GHS layers.
    pub fn kl(&self, g: &mut Graph, vars: &LayerVars, tau0: f64) -> Result<KlVars> {
        let v = &vars.0;
        let kw = kl_gaussian_sum(g, v[0], v[1])?;
        let kb = kl_gaussian_sum(g, v[2], v[3])?;
        let weights = g.add(kw, kb)?;
        let scales = match self.scales {
            Scales::Gnj(_) => {
                // log α = log σ²_z − log μ²_z
                let mu_sq = g.square(v[4]);
                let log_mu_sq = g.log(mu_sq)?;
                let log_alpha = g.sub(v[5], log_mu_sq)?;
                let arg = g.scale(log_alpha, NJ.k3);
                let arg = g.add_scalar(arg, NJ.k2);
                let sig = g.sigmoid(arg);
                let t1 = g.scale(sig, NJ.k1);
                let neg = g.neg(log_alpha);
                let sp = g.softplus(neg);
                let t2 = g.scale(sp, -0.5);
                let per_group = g.add(t1, t2)?;
                let per_group = g.add_scalar(per_group, -NJ.k1);
                let s = g.sum(per_group);
                g.neg(s)
            }
            Scales::Ghs(_) => {
                let t2 = tau0 * tau0;
                let sa = neg_kl_ln_gamma(g, v[8], v[9], 0.5, t2);
                let sb = neg_kl_ln_invgamma(g, v[10], v[11], 0.5, 1.0);
                let a = neg_kl_ln_gamma(g, v[4], v[5], 0.5, 1.0);
                let b = neg_kl_ln_invgamma(g, v[6], v[7], 0.5, 1.0);
                let a = g.sum(a);
                let b = g.sum(b);
                let total = g.add(sa, sb)?;
                let total = g.add(total, a)?;
                let total = g.add(total, b)?;
                g.neg(total)
            }
        };
        Ok(KlVars { weights, scales })
    }
}

fn add_rows(data: &mut [f64], bias: &[f64]) {
    for row in data.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
    }
}

fn half_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let ha = g.scale(a, 0.5);
    let hb = g.scale(b, 0.5);
    g.add(ha, hb)
}

/// `√(σ²_a / 4 + σ²_b / 4)` from two log-variances.
fn implied_sigma(g: &mut Graph, a_ls2: Var, b_ls2: Var) -> Result<Var> {
    let va = g.exp(a_ls2);
    let vb = g.exp(b_ls2);
    let qa = g.scale(va, 0.25);
    let qb = g.scale(vb, 0.25);
    let s = g.add(qa, qb)?;
    g.sqrt(s)
}

/// `Σ ½(−log σ² + σ² + μ² − 1)`.
fn kl_gaussian_sum(g: &mut Graph, mu: Var, log_s2: Var) -> Result<Var> {
    let s2 = g.exp(log_s2);
    let mu2 = g.square(mu);
    let t = g.sub(s2, log_s2)?;
    let t = g.add(t, mu2)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Elementwise `-KL(LN(μ, σ²) ‖ G(α, β))`, scale parametrization.
fn neg_kl_ln_gamma(g: &mut Graph, mu: Var, log_s2: Var, alpha: f64, beta: f64) -> Var {
    let s2 = g.exp(log_s2);
    let half_s2 = g.scale(s2, 0.5);
    let arg = g.add(mu, half_s2).expect("same shape");
    let mean = g.exp(arg);
    let t_mean = g.scale(mean, -1.0 / beta);
    let t_mu = g.scale(mu, alpha);
    let t_ent = g.scale(log_s2, 0.5);
    let s = g.add(t_mean, t_mu).expect("same shape");
    let s = g.add(s, t_ent).expect("same shape");
    g.add_scalar(s, -alpha * beta.ln() - ln_gamma(alpha) + 0.5 + HALF_LN_2PI)
}

/// Elementwise `-KL(LN(μ, σ²) ‖ IG(α, β))`, scale parametrization.
fn neg_kl_ln_invgamma(g: &mut Graph, mu: Var, log_s2: Var, alpha: f64, beta: f64) -> Var {
    let s2 = g.exp(log_s2);
    let half_s2 = g.scale(s2, 0.5);
    let arg = g.sub(half_s2, mu).expect("same shape");
    let inv_mean = g.exp(arg);
    let t_inv = g.scale(inv_mean, -beta);
    let t_mu = g.scale(mu, -alpha);
    let t_ent = g.scale(log_s2, 0.5);
    let s = g.add(t_inv, t_mu).expect("same shape");
    let s = g.add(s, t_ent).expect("same shape");
    g.add_scalar(s, alpha * beta.ln() - ln_gamma(alpha) + 0.5 + HALF_LN_2PI)
}

impl Graph {
    /// Repeat a rank-0 value into a `[k]` vector.
    pub fn broadcast_samples_scalar(&mut self, v: Var, k: usize) -> Result<Var> {
        let r = self.reshape(v, &[1])?;
        self.broadcast(r, &[k])
    }
}
