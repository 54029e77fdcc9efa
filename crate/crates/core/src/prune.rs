//! Group scores, threshold masks, cascade pruning and score histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BayesLayer, LayerKind, Prior, Scales};
use crate::model::{cascade_keep, Masks, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `log σ²_z − log μ²_z` of a normal-Jeffreys group.
    NjLogAlpha,
    /// `σ²_z − μ_z`, the negative log-mode of a horseshoe group's local scale.
    HsNegLogMode,
}

impl ScoreKind {
    pub fn for_prior(prior: Prior) -> Self {
        match prior {
            Prior::Gnj => ScoreKind::NjLogAlpha,
            Prior::Ghs => ScoreKind::HsNegLogMode,
        }
    }

    /// 3 for both kinds. For horseshoe groups that means a modal scale below
    /// `e^-3 ≈ 0.05`; a fresh model scores about 1e-8 and keeps every group.
    pub fn default_threshold(self) -> f64 {
        match self {
            ScoreKind::NjLogAlpha => 3.0,
            ScoreKind::HsNegLogMode => 3.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::NjLogAlpha => "nj_log_alpha",
            ScoreKind::HsNegLogMode => "hs_neg_log_mode",
        }
    }
}

/// Per-layer group scores; larger means more prunable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub kind: ScoreKind,
    pub layers: Vec<Vec<f64>>,
}

pub fn nj_scores(layer: &BayesLayer) -> Result<Vec<f64>> {
    let Scales::Gnj(s) = &layer.scales else {
        return Err(Error::Contract("nj_scores needs a normal-Jeffreys layer".into()));
    };
    Ok(s.mu
        .data()
        .iter()
        .zip(s.log_sigma2.data())
        .map(|(&m, &ls2)| if m == 0.0 { f64::INFINITY } else { ls2 - (m * m).ln() })
        .collect())
}

pub fn hs_scores(layer: &BayesLayer) -> Result<Vec<f64>> {
    let Scales::Ghs(s) = &layer.scales else {
        return Err(Error::Contract("hs_scores needs a horseshoe layer".into()));
    };
    let imp = s.implied();
    Ok(imp
        .mu_z_tilde
        .iter()
        .zip(&imp.sigma2_z_tilde)
        .map(|(m, v)| (v + imp.sigma2_s) - (m + imp.mu_s))
        .collect())
}

pub fn model_scores(model: &Model) -> Result<GroupScores> {
    let kind = ScoreKind::for_prior(model.prior());
    let layers = model
        .layers
        .iter()
        .map(|l| match kind {
            ScoreKind::NjLogAlpha => nj_scores(l),
            ScoreKind::HsNegLogMode => hs_scores(l),
        })
        .collect::<Result<_>>()?;
    Ok(GroupScores { kind, layers })
}

/// One threshold for every layer, or one per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Thresholds {
    Global(f64),
    PerLayer(Vec<f64>),
}

impl Thresholds {
    pub fn resolve(&self, layers: usize) -> Result<Vec<f64>> {
        match self {
            Thresholds::Global(t) => Ok(vec![*t; layers]),
            Thresholds::PerLayer(v) if v.len() == layers => Ok(v.clone()),
            Thresholds::PerLayer(v) => Err(Error::Config(format!(
                "{} thresholds given for {layers} layers",
                v.len()
            ))),
        }
    }
}

/// `mask[i] = score[i] < t`; ties and NaN scores prune.
pub fn build_masks(scores: &[Vec<f64>], thresholds: &[f64]) -> Result<Masks> {
    if scores.len() != thresholds.len() {
        return Err(crate::error::dim_err(
            "build_masks",
            &[scores.len()],
            &[thresholds.len()],
        ));
    }
    Ok(scores
        .iter()
        .zip(thresholds)
        .map(|(s, &t)| s.iter().map(|&v| v < t).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: usize,
    pub original_groups: usize,
    /// Groups left after masking and the cascade.
    pub retained_groups: usize,
    pub original_weights: usize,
    pub retained_weights: usize,
    pub original_biases: usize,
    pub retained_biases: usize,
    /// Compacted weight shape.
    pub retained_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub score_kind: Option<ScoreKind>,
    pub thresholds: Vec<f64>,
    pub masks: Masks,
    pub layers: Vec<LayerPrune>,
    /// Retained groups joined by dashes, e.g. `278-98-13`.
    pub architecture: String,
}

impl PruneReport {
    pub fn original_weights(&self) -> usize {
        self.layers.iter().map(|l| l.original_weights).sum()
    }

    pub fn retained_weights(&self) -> usize {
        self.layers.iter().map(|l| l.retained_weights).sum()
    }
}

/// Propagate `masks` through the network and count what survives.
pub fn cascade(model: &Model, masks: &Masks) -> Result<PruneReport> {
    model.check_masks(masks)?;
    let kept = cascade_keep(model, masks);
    let layers: Vec<LayerPrune> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = l.weight_mu.shape();
            let (rows, cols) = (kept.inputs[i].len(), kept.outputs[i].len());
            let (retained_shape, groups) = match l.kind {
                LayerKind::Dense => (vec![rows, cols], rows),
                LayerKind::Conv { .. } => (vec![s[0], s[1], rows, cols], cols),
            };
            LayerPrune {
                layer: i,
                original_groups: l.groups(),
                retained_groups: groups,
                original_weights: l.weight_mu.numel(),
                retained_weights: retained_shape.iter().product(),
                original_biases: l.outputs(),
                retained_biases: cols,
                retained_shape,
            }
        })
        .collect();
    let architecture = layers
        .iter()
        .map(|l| l.retained_groups.to_string())
        .collect::<Vec<_>>()
        .join("-");
    Ok(PruneReport {
        score_kind: None,
        thresholds: Vec::new(),
        masks: masks.clone(),
        layers,
        architecture,
    })
}

/// Score, threshold and cascade in one go. `None` uses the default threshold
/// of the model's score kind.
pub fn prune(model: &Model, thresholds: Option<&Thresholds>) -> Result<PruneReport> {
    let scores = model_scores(model)?;
    let t = thresholds
        .cloned()
        .unwrap_or(Thresholds::Global(scores.kind.default_threshold()))
        .resolve(model.layers.len())?;
    let masks = build_masks(&scores.layers, &t)?;
    let mut report = cascade(model, &masks)?;
    report.score_kind = Some(scores.kind);
    report.thresholds = t;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub layer: usize,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

pub const HISTOGRAM_BINS: usize = 100;

/// Uniform histogram of one layer's finite scores.
pub fn layer_histogram(layer: usize, scores: &[f64], bins: usize) -> Vec<HistogramRow> {
    let finite: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let mut lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramRow {
            layer,
            bin_left: lo + b as f64 * width,
            bin_right: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count,
        })
        .collect()
}

/// Midpoint of the widest run of empty bins between two occupied bins.
pub fn suggest_threshold(rows: &[HistogramRow]) -> Option<f64> {
    let occupied: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.count > 0)
        .map(|(i, _)| i)
        .collect();
    let (a, b) = occupied
        .windows(2)
        .map(|w| (w[0], w[1]))
        .filter(|(a, b)| b - a > 1)
        .max_by_key(|(a, b)| b - a)?;
    Some(0.5 * (rows[a].bin_right + rows[b].bin_left))
}

pub fn histograms(scores: &GroupScores) -> Vec<HistogramRow> {
    scores
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, s)| layer_histogram(i, s, HISTOGRAM_BINS))
        .collect()
}

pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("layer,bin_left,bin_right,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.layer, r.bin_left, r.bin_right, r.count));
    }
    out
}
