//! Posterior marginal variances, binary float formats and per-layer bit widths.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::layers::{BayesLayer, LayerKind, Scales};
use crate::model::{cascade_keep, Masks, Model};
use crate::tensor::Tensor;

pub const EXPONENT_BITS: u32 = 3;
pub const SIGN_BITS: u32 = 1;
pub const MAX_MANTISSA_BITS: u32 = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub exponent_bits: u32,
    /// Stored significand bits, excluding the implicit leading one.
    pub mantissa_bits: u32,
}

impl FloatFormat {
    pub const DOUBLE: FloatFormat = FloatFormat {
        exponent_bits: 11,
        mantissa_bits: 52,
    };
    pub const SINGLE: FloatFormat = FloatFormat {
        exponent_bits: 8,
        mantissa_bits: 23,
    };
    pub const HALF: FloatFormat = FloatFormat {
        exponent_bits: 5,
        mantissa_bits: 10,
    };

    pub fn total_bits(&self) -> u32 {
        SIGN_BITS + self.exponent_bits + self.mantissa_bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatLimits {
    /// Smallest positive normal number.
    pub underflow: f64,
    pub overflow: f64,
    pub unit_roundoff: f64,
}

pub fn format_limits(fmt: FloatFormat) -> Result<FormatLimits> {
    if fmt.exponent_bits < 2 || fmt.mantissa_bits < 1 || fmt.exponent_bits > 11 {
        return Err(domain_err("format_limits", format!("{fmt:?}")));
    }
    let emax = 2f64.powi(fmt.exponent_bits as i32 - 1) - 1.0;
    let p = fmt.mantissa_bits as i32;
    Ok(FormatLimits {
        underflow: 2f64.powf(1.0 - emax),
        overflow: (2.0 - 2f64.powi(-p)) * 2f64.powf(emax),
        unit_roundoff: 2f64.powi(-p),
    })
}

/// `ceil(-log2 u)` clamped to `[1, 23]`; the flag is set when `u >= 1`.
pub fn mantissa_bits_from_roundoff(u: f64) -> Result<(u32, bool)> {
    if !(u > 0.0) || u.is_nan() {
        return Err(domain_err("mantissa_bits_from_roundoff", format!("u = {u}")));
    }
    if u >= 1.0 {
        return Ok((1, true));
    }
    // exact powers of two land on an integer; guard against log2 rounding up
    let bits = (-u.log2() - 1e-12).ceil();
    Ok((bits.clamp(1.0, MAX_MANTISSA_BITS as f64) as u32, false))
}

/// `V(w) = σ²_z(σ² + μ²) + σ² μ²_z` for every weight of a normal-Jeffreys layer.
pub fn marginal_variance_gnj(layer: &BayesLayer) -> Result<Tensor> {
    let Scales::Gnj(s) = &layer.scales else {
        return Err(Error::Contract(
            "marginal_variance_gnj needs a normal-Jeffreys layer".into(),
        ));
    };
    let mz = s.mu.data();
    let vz: Vec<f64> = s.log_sigma2.data().iter().map(|l| l.exp()).collect();
    Ok(per_group(layer, |g, mu, s2| {
        vz[g] * (s2 + mu * mu) + s2 * mz[g] * mz[g]
    }))
}

/// `V(w) = (e^{σ²_z} − 1) e^{2μ_z + σ²_z}(σ² + μ²) + σ² e^{2μ_z + σ²_z}` for
/// every weight of a horseshoe layer.
pub fn marginal_variance_ghs(layer: &BayesLayer) -> Result<Tensor> {
    let Scales::Ghs(s) = &layer.scales else {
        return Err(Error::Contract("marginal_variance_ghs needs a horseshoe layer".into()));
    };
    let (mz, vz) = s.implied().local();
    Ok(per_group(layer, |g, mu, s2| {
        let m2 = (2.0 * mz[g] + vz[g]).exp();
        vz[g].exp_m1() * m2 * (s2 + mu * mu) + s2 * m2
    }))
}

pub fn marginal_variances(layer: &BayesLayer) -> Result<Tensor> {
    match layer.scales {
        Scales::Gnj(_) => marginal_variance_gnj(layer),
        Scales::Ghs(_) => marginal_variance_ghs(layer),
    }
}

fn per_group(layer: &BayesLayer, f: impl Fn(usize, f64, f64) -> f64) -> Tensor {
    let shape = layer.weight_mu.shape();
    let cols = *shape.last().expect("rank >= 2");
    let mu = layer.weight_mu.data();
    let ls2 = layer.weight_log_sigma2.data();
    Tensor::from_fn(shape, |i| {
        let g = match layer.kind {
            LayerKind::Dense => i / cols,
            LayerKind::Conv { .. } => i % cols,
        };
        f(g, mu[i], ls2[i].exp())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundoffRule {
    /// `u = √(mean variance)`.
    Std,
    /// `u = mean variance`.
    Variance,
}

impl std::str::FromStr for RoundoffRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(RoundoffRule::Std),
            "variance" | "var" => Ok(RoundoffRule::Variance),
            _ => Err(Error::Config(format!(
                "unknown roundoff rule {s:?} (expected std or variance)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub layer: usize,
    pub mean_var: f64,
    pub roundoff_rule: RoundoffRule,
    pub unit_roundoff: f64,
    pub mantissa_bits: u32,
    pub total_bits: u32,
    pub fully_pruned: bool,
    /// Set when the roundoff reached 1 and the mantissa was clamped.
    pub clamped: bool,
}

pub fn layer_bit_precision(layer: usize, variances: &[f64], rule: RoundoffRule) -> Result<QuantRow> {
    if variances.is_empty() {
        return Ok(QuantRow {
            layer,
            mean_var: 0.0,
            roundoff_rule: rule,
            unit_roundoff: 0.0,
            mantissa_bits: 0,
            total_bits: 0,
            fully_pruned: true,
            clamped: false,
        });
    }
    let mean_var = variances.iter().sum::<f64>() / variances.len() as f64;
    let u = match rule {
        RoundoffRule::Std => mean_var.sqrt(),
        RoundoffRule::Variance => mean_var,
    };
    let (p, clamped) = mantissa_bits_from_roundoff(u)?;
    Ok(QuantRow {
        layer,
        mean_var,
        roundoff_rule: rule,
        unit_roundoff: u,
        mantissa_bits: p,
        total_bits: p + EXPONENT_BITS + SIGN_BITS,
        fully_pruned: false,
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub rows: Vec<QuantRow>,
}

impl QuantReport {
    pub fn bits(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.total_bits).collect()
    }
}

/// Bit widths from the marginal variances of the weights that survive the
/// cascade.
pub fn quantize(model: &Model, masks: &Masks, rule: RoundoffRule) -> Result<QuantReport> {
    model.check_masks(masks)?;
    let kept = cascade_keep(model, masks);
    let rows = model
        .layers
        .iter()
        .enumerate()
        .map(|(li, l)| {
            let v = marginal_variances(l)?;
            let s = l.weight_mu.shape();
            let cols = s[s.len() - 1];
            let mut retained = Vec::new();
            match l.kind {
                LayerKind::Dense => {
                    for &r in &kept.inputs[li] {
                        retained.extend(kept.outputs[li].iter().map(|&c| v.data()[r * cols + c]));
                    }
                }
                LayerKind::Conv { .. } => {
                    let cin = s[2];
                    for xy in 0..s[0] * s[1] {
                        for &c in &kept.inputs[li] {
                            retained.extend(kept.outputs[li].iter().map(|&f| v.data()[(xy * cin + c) * cols + f]));
                        }
                    }
                }
            }
            layer_bit_precision(li, &retained, rule)
        })
        .collect::<Result<_>>()?;
    Ok(QuantReport { rows })
}
