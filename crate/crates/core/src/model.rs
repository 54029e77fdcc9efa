//! Network architectures, the layer stack and its deterministic/compact forms.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::{
    normal_tensor, BayesLayer, GhsScales, GnjScales, KlVars, LayerKind, LayerVars, Prior, Rng, Scales,
};
use crate::tensor::{conv2d, mean_pool2, Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Flat(usize),
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl InputShape {
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Conv {
        kernel: usize,
        filters: usize,
        padding: Padding,
    },
    Pool,
    Dense {
        units: usize,
    },
}

/// Input shape plus stages; the last stage is the dense output layer.
///
/// The textual form is dash-separated: an input token (`784` or `28x28x1`),
/// then `c5x20` for a 5×5 convolution with 20 filters (`c5x20s` for same
/// padding), `p` for 2×2 mean pooling and a bare number for a dense layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub stages: Vec<Stage>,
}

impl Architecture {
    /// Parse input and hidden stages, appending a dense output of `classes` units.
    pub fn with_output(hidden: &str, classes: usize) -> Result<Self> {
        let mut a = Self::parse_tokens(hidden)?;
        a.stages.push(Stage::Dense { units: classes });
        a.validate()?;
        Ok(a)
    }

    pub fn lenet_300_100() -> Self {
        Self::with_output("784-300-100", 10).expect("valid")
    }

    pub fn lenet5() -> Self {
        Self::with_output("28x28x1-c5x20-p-c5x50-p-500", 10).expect("valid")
    }

    fn parse_tokens(s: &str) -> Result<Self> {
        let bad = |t: &str| Error::Config(format!("bad architecture token {t:?} in {s:?}"));
        let mut tokens = s.split('-').map(str::trim);
        let first = tokens.next().filter(|t| !t.is_empty()).ok_or_else(|| bad(s))?;
        let input = if first.contains('x') {
            let dims: Vec<usize> = first
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(first)))
                .collect::<Result<_>>()?;
            match dims[..] {
                [height, width, channels] => InputShape::Image {
                    height,
                    width,
                    channels,
                },
                [height, width] => InputShape::Image {
                    height,
                    width,
                    channels: 1,
                },
                _ => return Err(bad(first)),
            }
        } else {
            InputShape::Flat(first.parse().map_err(|_| bad(first))?)
        };
        let mut stages = Vec::new();
        for t in tokens {
            let stage = if t == "p" {
                Stage::Pool
            } else if let Some(rest) = t.strip_prefix('c') {
                let (rest, padding) = match rest.strip_suffix('s') {
                    Some(r) => (r, Padding::Same),
                    None => (rest, Padding::Valid),
                };
                let (k, f) = rest.split_once('x').ok_or_else(|| bad(t))?;
                Stage::Conv {
                    kernel: k.parse().map_err(|_| bad(t))?,
                    filters: f.parse().map_err(|_| bad(t))?,
                    padding,
                }
            } else {
                Stage::Dense {
                    units: t.parse().map_err(|_| bad(t))?,
                }
            };
            stages.push(stage);
        }
        Ok(Architecture { input, stages })
    }

    /// Check that every stage fits the shape it receives.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input.numel() == 0 {
            return cfg("input has zero size".into());
        }
        if !matches!(self.stages.last(), Some(Stage::Dense { .. })) {
            return cfg("the last stage must be a dense layer".into());
        }
        let mut shape = self.input;
        for (i, st) in self.stages.iter().enumerate() {
            shape = match (*st, shape) {
                (
                    Stage::Conv {
                        kernel,
                        filters,
                        padding,
                    },
                    InputShape::Image { height, width, .. },
                ) => {
                    if kernel == 0 || filters == 0 {
                        return cfg(format!("stage {i}: empty convolution"));
                    }
                    let (h, w) = match padding {
                        Padding::Same => (height, width),
                        Padding::Valid if kernel <= height && kernel <= width => {
                            (height - kernel + 1, width - kernel + 1)
                        }
                        Padding::Valid => return cfg(format!("stage {i}: kernel larger than input")),
                    };
                    InputShape::Image {
                        height: h,
                        width: w,
                        channels: filters,
                    }
                }
                (
                    Stage::Pool,
                    InputShape::Image {
                        height,
                        width,
                        channels,
                    },
                ) => {
                    if height % 2 != 0 || width % 2 != 0 {
                        return cfg(format!("stage {i}: pooling needs even height and width"));
                    }
                    InputShape::Image {
                        height: height / 2,
                        width: width / 2,
                        channels,
                    }
                }
                (Stage::Dense { units }, _) => {
                    if units == 0 {
                        return cfg(format!("stage {i}: dense layer with zero units"));
                    }
                    InputShape::Flat(units)
                }
                (_, InputShape::Flat(_)) => return cfg(format!("stage {i}: spatial stage after a flat input")),
            };
        }
        Ok(())
    }

    /// Shapes seen by each stage: `shapes[i]` is the input of stage `i`.
    pub fn stage_inputs(&self) -> Vec<InputShape> {
        let mut out = Vec::with_capacity(self.stages.len() + 1);
        let mut shape = self.input;
        out.push(shape);
        for st in &self.stages {
            shape = match (*st, shape) {
                (
                    Stage::Conv {
                        kernel,
                        filters,
                        padding,
                    },
                    InputShape::Image { height, width, .. },
                ) => {
                    let (h, w) = match padding {
                        Padding::Same => (height, width),
                        Padding::Valid => (height + 1 - kernel, width + 1 - kernel),
                    };
                    InputShape::Image {
                        height: h,
                        width: w,
                        channels: filters,
                    }
                }
                (
                    Stage::Pool,
                    InputShape::Image {
                        height,
                        width,
                        channels,
                    },
                ) => InputShape::Image {
                    height: height / 2,
                    width: width / 2,
                    channels,
                },
                (Stage::Dense { units }, _) => InputShape::Flat(units),
                (_, s) => s,
            };
            out.push(shape);
        }
        out
    }

    pub fn classes(&self) -> usize {
        match self.stages.last() {
            Some(Stage::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Shapes of the parametric layers' weights, in order.
    pub fn weight_shapes(&self) -> Vec<(LayerKind, Vec<usize>)> {
        let inputs = self.stage_inputs();
        self.stages
            .iter()
            .zip(&inputs)
            .filter_map(|(st, inp)| match (*st, *inp) {
                (
                    Stage::Conv {
                        kernel,
                        filters,
                        padding,
                    },
                    InputShape::Image { channels, .. },
                ) => Some((LayerKind::Conv { padding }, vec![kernel, kernel, channels, filters])),
                (Stage::Dense { units }, s) => Some((LayerKind::Dense, vec![s.numel(), units])),
                _ => None,
            })
            .collect()
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Parse a full description whose last token is the output layer.
    fn from_str(s: &str) -> Result<Self> {
        let a = Self::parse_tokens(s)?;
        a.validate()?;
        Ok(a)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.input {
            InputShape::Flat(d) => write!(f, "{d}")?,
            InputShape::Image {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}")?,
        }
        for st in &self.stages {
            match *st {
                Stage::Conv {
                    kernel,
                    filters,
                    padding,
                } => {
                    write!(f, "-c{kernel}x{filters}")?;
                    if padding == Padding::Same {
                        f.write_str("s")?;
                    }
                }
                Stage::Pool => f.write_str("-p")?,
                Stage::Dense { units } => write!(f, "-{units}")?,
            }
        }
        Ok(())
    }
}

/// One binary mask per parametric layer; `true` keeps the group.
pub type Masks = Vec<Vec<bool>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub layers: Vec<BayesLayer>,
}

/// Log-variance of the scale posteriors at initialization.
pub const INIT_SCALE_VAR: f64 = 1e-8;

impl Model {
    /// Fresh model: He-initialized means, `log σ ~ N(-9, 1e-4)`, and scale
    /// posteriors with mean ≈ 1 and variance ≈ 1e-8.
    pub fn init(arch: &Architecture, prior: Prior, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let layers = arch
            .weight_shapes()
            .into_iter()
            .map(|(kind, shape)| {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let weight_mu = normal_tensor(&shape, &mut rng).map(|x| x * std);
                // log σ ~ N(-9, 1e-4), stored as log σ² = 2 log σ
                let weight_log_sigma2 = normal_tensor(&shape, &mut rng).map(|x| 2.0 * (-9.0 + 1e-2 * x));
                let outputs = *shape.last().expect("rank >= 2");
                let bias_mu = Tensor::zeros(&[outputs]);
                let bias_log_sigma2 = normal_tensor(&[outputs], &mut rng).map(|x| 2.0 * (-9.0 + 1e-2 * x));
                let groups = match kind {
                    LayerKind::Dense => shape[0],
                    LayerKind::Conv { .. } => shape[3],
                };
                let log_var = Tensor::full(&[groups], INIT_SCALE_VAR.ln());
                let scales = match prior {
                    Prior::Gnj => Scales::Gnj(GnjScales {
                        mu: Tensor::ones(&[groups]),
                        log_sigma2: log_var,
                    }),
                    Prior::Ghs => Scales::Ghs(GhsScales {
                        alpha_mu: Tensor::zeros(&[groups]),
                        alpha_log_sigma2: log_var.clone(),
                        beta_mu: Tensor::zeros(&[groups]),
                        beta_log_sigma2: log_var,
                        sa_mu: Tensor::scalar(0.0),
                        sa_log_sigma2: Tensor::scalar(INIT_SCALE_VAR.ln()),
                        sb_mu: Tensor::scalar(0.0),
                        sb_log_sigma2: Tensor::scalar(INIT_SCALE_VAR.ln()),
                    }),
                };
                BayesLayer {
                    kind,
                    weight_mu,
                    weight_log_sigma2,
                    bias_mu,
                    bias_log_sigma2,
                    scales,
                }
            })
            .collect();
        Ok(Model {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn prior(&self) -> Prior {
        self.layers.first().map_or(Prior::Gnj, BayesLayer::prior)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.weight_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Format(format!(
                "architecture has {} parametric layers, model has {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for ((kind, shape), l) in shapes.iter().zip(&self.layers) {
            l.validate()?;
            if l.kind != *kind || l.weight_mu.shape() != &shape[..] {
                return Err(dim_err("model layer", shape, l.weight_mu.shape()));
            }
        }
        if self.layers.iter().any(|l| l.prior() != self.prior()) {
            return Err(Error::Format("layers mix priors".into()));
        }
        Ok(())
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.layers.iter().map(BayesLayer::groups).collect()
    }

    pub fn full_masks(&self) -> Masks {
        self.group_counts().into_iter().map(|g| vec![true; g]).collect()
    }

    pub fn check_masks(&self, masks: &Masks) -> Result<()> {
        let want = self.group_counts();
        let got: Vec<usize> = masks.iter().map(Vec::len).collect();
        if want != got {
            return Err(dim_err("masks", &want, &got));
        }
        Ok(())
    }

    /// Reshape a `[K, D]` batch into the model's input layout.
    pub fn shape_input(&self, x: &Tensor) -> Result<Tensor> {
        let k = x.shape()[0];
        match self.arch.input {
            InputShape::Flat(d) => x.reshape(&[k, d]),
            InputShape::Image {
                height,
                width,
                channels,
            } => x.reshape(&[k, height, width, channels]),
        }
    }

    /// Test-time logits under the masked posterior mean.
    pub fn forward_deterministic(&self, x: &Tensor, masks: &Masks) -> Result<Tensor> {
        self.check_masks(masks)?;
        let mut h = self.shape_input(x)?;
        let mut li = 0;
        let last = self.arch.stages.len() - 1;
        for (si, st) in self.arch.stages.iter().enumerate() {
            h = match st {
                Stage::Pool => mean_pool2(&h)?,
                Stage::Conv { .. } | Stage::Dense { .. } => {
                    if matches!(st, Stage::Dense { .. }) && h.ndim() != 2 {
                        let k = h.shape()[0];
                        h = h.reshape(&[k, h.numel() / k])?;
                    }
                    let out = self.layers[li].forward_deterministic(&h, &masks[li])?;
                    li += 1;
                    if si == last {
                        out
                    } else {
                        out.map(|v| v.max(0.0))
                    }
                }
            };
        }
        Ok(h)
    }

    pub fn register(&self, g: &mut Graph, train: bool) -> Vec<LayerVars> {
        self.layers.iter().map(|l| l.register(g, train)).collect()
    }

    /// One stochastic pass through the network; returns logits.
    pub fn forward_stochastic(&self, g: &mut Graph, vars: &[LayerVars], x: Var, rng: &mut Rng) -> Result<Var> {
        let mut h = x;
        let mut li = 0;
        let last = self.arch.stages.len() - 1;
        for (si, st) in self.arch.stages.iter().enumerate() {
            h = match st {
                Stage::Pool => g.mean_pool2(h)?,
                Stage::Conv { .. } | Stage::Dense { .. } => {
                    if matches!(st, Stage::Dense { .. }) && g.shape(h).len() != 2 {
                        let k = g.shape(h)[0];
                        let n: usize = g.shape(h)[1..].iter().product();
                        h = g.reshape(h, &[k, n])?;
                    }
                    let out = self.layers[li]
                        .forward_stochastic(g, &vars[li], h, rng)
                        .map_err(|e| match e {
                            Error::Domain { op, detail } => Error::NonFinite {
                                layer: Some(li),
                                detail: format!("{op}: {detail}"),
                            },
                            e => e,
                        })?;
                    li += 1;
                    if si == last {
                        out
                    } else {
                        g.relu(out)
                    }
                }
            };
        }
        Ok(h)
    }

    pub fn kl(&self, g: &mut Graph, vars: &[LayerVars], tau0: f64) -> Result<Vec<KlVars>> {
        self.layers.iter().zip(vars).map(|(l, v)| l.kl(g, v, tau0)).collect()
    }

    /// Fraction of misclassified rows of `x` under the masked posterior mean.
    pub fn error_rate(&self, x: &Tensor, labels: &[usize], masks: &Masks, batch: usize) -> Result<f64> {
        let n = labels.len();
        if n == 0 {
            return Ok(0.0);
        }
        let d = x.numel() / x.shape()[0];
        let mut wrong = 0usize;
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let xb = Tensor::new(vec![end - start, d], x.data()[start * d..end * d].to_vec())?;
            let logits = self.forward_deterministic(&xb, masks)?;
            wrong += argmax_rows(&logits)
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, y)| p != y)
                .count();
        }
        Ok(wrong as f64 / n as f64)
    }

    /// Physically remove masked groups and everything that only feeds them.
    pub fn compact(&self, masks: &Masks) -> Result<CompactModel> {
        self.check_masks(masks)?;
        let kept = cascade_keep(self, masks);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate() {
            let w = l.masked_mean_weights(&masks[li])?;
            let bias = l.masked_bias(&masks[li]);
            let rows = &kept.inputs[li];
            let cols = &kept.outputs[li];
            let s = w.shape();
            let weights = match l.kind {
                LayerKind::Dense => {
                    let b = s[1];
                    Tensor::from_fn(&[rows.len(), cols.len()], |i| {
                        w.data()[rows[i / cols.len()] * b + cols[i % cols.len()]]
                    })
                }
                LayerKind::Conv { .. } => {
                    let (kh, kw, cin, nf) = (s[0], s[1], s[2], s[3]);
                    let (rc, cc) = (rows.len(), cols.len());
                    Tensor::from_fn(&[kh, kw, rc, cc], |i| {
                        let f = i % cc;
                        let c = (i / cc) % rc;
                        let xy = i / (cc * rc);
                        w.data()[(xy * cin + rows[c]) * nf + cols[f]]
                    })
                }
            };
            // where each kept input sits in the compacted previous output
            let input_index = match (li, l.kind) {
                (0, _) => rows.clone(),
                (_, LayerKind::Conv { .. }) => (0..rows.len()).collect(),
                (_, LayerKind::Dense) => {
                    let up = &kept.outputs[li - 1];
                    let c = kept.channels[li];
                    rows.iter()
                        .map(|&r| {
                            let pos = up.binary_search(&(r % c)).expect("cascade keeps the feeding unit");
                            (r / c) * up.len() + pos
                        })
                        .collect()
                }
            };
            layers.push(CompactLayer {
                kind: l.kind,
                input_index,
                weights,
                bias: cols.iter().map(|&j| bias[j]).collect(),
            });
        }
        Ok(CompactModel {
            arch: self.arch.clone(),
            layers,
        })
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// Indices that survive the cascade, per parametric layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Kept {
    /// Dense: kept input rows. Conv: kept input channels.
    pub inputs: Vec<Vec<usize>>,
    /// Dense: kept output columns. Conv: kept filters.
    pub outputs: Vec<Vec<usize>>,
    /// Channels of the map feeding each layer; a flattened dense row `r`
    /// belongs to channel `r % channels`.
    pub channels: Vec<usize>,
}

/// Propagate masks through the network.
///
/// A dense row survives if its own group is kept and the unit feeding it
/// survives; a dense column survives if the next layer keeps that row (the
/// output layer keeps all columns); a filter survives if it is kept and, when
/// followed by a dense layer, at least one of its flattened rows is kept.
pub(crate) fn cascade_keep(model: &Model, masks: &Masks) -> Kept {
    let n = model.layers.len();
    // spatial size per channel of the flattened map feeding each dense layer
    let inputs_shapes = model.arch.stage_inputs();
    let mut flat_spatial = vec![1usize; n];
    let mut li = 0;
    for (st, inp) in model.arch.stages.iter().zip(&inputs_shapes) {
        match (st, inp) {
            (Stage::Dense { .. }, InputShape::Image { height, width, .. }) => {
                flat_spatial[li] = height * width;
                li += 1;
            }
            (Stage::Conv { .. } | Stage::Dense { .. }, _) => li += 1,
            _ => {}
        }
    }
    let channels_of = |li: usize| -> usize {
        let l = &model.layers[li];
        l.groups() / flat_spatial[li]
    };

    // which output units/filters of each layer are needed downstream
    let mut out_keep: Vec<Vec<bool>> = model.layers.iter().map(|l| vec![true; l.outputs()]).collect();
    for li in (0..n.saturating_sub(1)).rev() {
        let next = &model.layers[li + 1];
        let next_mask = &masks[li + 1];
        let own: Vec<bool> = match model.layers[li].kind {
            LayerKind::Dense => next_mask.clone(),
            LayerKind::Conv { .. } => {
                let filter_mask = &masks[li];
                match next.kind {
                    LayerKind::Conv { .. } => filter_mask.clone(),
                    LayerKind::Dense => {
                        let c = channels_of(li + 1);
                        let mut any = vec![false; c];
                        for (r, &m) in next_mask.iter().enumerate() {
                            any[r % c] |= m;
                        }
                        filter_mask.iter().zip(&any).map(|(&a, &b)| a && b).collect()
                    }
                }
            }
        };
        out_keep[li] = own;
    }
    if let (Some(last), Some(l)) = (out_keep.last_mut(), model.layers.last()) {
        if let LayerKind::Conv { .. } = l.kind {
            *last = masks[n - 1].clone();
        }
    }
    // conv filters also drop when their own mask is off
    for li in 0..n {
        if let LayerKind::Conv { .. } = model.layers[li].kind {
            for (k, &m) in out_keep[li].iter_mut().zip(&masks[li]) {
                *k &= m;
            }
        }
    }

    let mut inputs = Vec::with_capacity(n);
    for li in 0..n {
        let l = &model.layers[li];
        let upstream: Option<&Vec<bool>> = if li == 0 { None } else { Some(&out_keep[li - 1]) };
        let idx: Vec<usize> = match l.kind {
            LayerKind::Dense => {
                let c = channels_of(li);
                (0..l.groups())
                    .filter(|&r| masks[li][r] && upstream.is_none_or(|u| u[r % c]))
                    .collect()
            }
            LayerKind::Conv { .. } => {
                let cin = l.weight_mu.shape()[2];
                (0..cin).filter(|&c| upstream.is_none_or(|u| u[c])).collect()
            }
        };
        inputs.push(idx);
    }
    let outputs = out_keep
        .iter()
        .map(|k| k.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
        .collect();
    let channels = (0..n)
        .map(|li| match model.layers[li].kind {
            LayerKind::Dense => channels_of(li),
            LayerKind::Conv { .. } => model.layers[li].weight_mu.shape()[2],
        })
        .collect();
    Kept {
        inputs,
        outputs,
        channels,
    }
}

/// A deterministic layer after physical removal of pruned groups.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactLayer {
    pub kind: LayerKind,
    /// Positions of the surviving inputs (dense rows or conv channels) in
    /// the compacted output of the previous layer, or in the raw input for
    /// the first layer.
    pub input_index: Vec<usize>,
    /// `[rows, cols]` for dense layers, `[h, w, C_in', N_f']` for convolutions.
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompactModel {
    pub arch: Architecture,
    pub layers: Vec<CompactLayer>,
}

impl CompactModel {
    /// Number of retained groups per layer, e.g. `[278, 98, 13]`.
    pub fn retained_groups(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Dense => l.weights.shape()[0],
                LayerKind::Conv { .. } => l.weights.shape()[3],
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = x.shape()[0];
        let mut h = match self.arch.input {
            InputShape::Flat(d) => x.reshape(&[k, d])?,
            InputShape::Image {
                height,
                width,
                channels,
            } => x.reshape(&[k, height, width, channels])?,
        };
        let last = self.arch.stages.len() - 1;
        let mut li = 0;
        for (si, st) in self.arch.stages.iter().enumerate() {
            if let Stage::Pool = st {
                h = mean_pool2(&h)?;
                continue;
            }
            let l = &self.layers[li];
            li += 1;
            let out = match l.kind {
                LayerKind::Dense => {
                    let d = h.numel() / k;
                    let src = h.data();
                    let xs = Tensor::from_fn(&[k, l.input_index.len()], |i| {
                        let (r, c) = (i / l.input_index.len(), i % l.input_index.len());
                        src[r * d + l.input_index[c]]
                    });
                    let mut out = xs.matmul(&l.weights)?;
                    for row in out.data_mut().chunks_exact_mut(l.bias.len().max(1)) {
                        row.iter_mut().zip(&l.bias).for_each(|(v, b)| *v += b);
                    }
                    out
                }
                LayerKind::Conv { padding } => {
                    let s = h.shape().to_vec();
                    let (c, nc) = (s[3], l.input_index.len());
                    let src = h.data();
                    let xs = Tensor::from_fn(&[s[0], s[1], s[2], nc], |i| src[(i / nc) * c + l.input_index[i % nc]]);
                    let mut out = conv2d(&xs, &l.weights, padding)?;
                    let nf = l.bias.len();
                    if nf > 0 {
                        for chunk in out.data_mut().chunks_exact_mut(nf) {
                            chunk.iter_mut().zip(&l.bias).for_each(|(v, b)| *v += b);
                        }
                    }
                    out
                }
            };
            h = if si == last { out } else { out.map(|v| v.max(0.0)) };
        }
        if let Some(l) = self.layers.last() {
            if let LayerKind::Conv { .. } = l.kind {
                return Err(Error::Contract("compact model ends in a convolution".into()));
            }
        }
        Ok(h)
    }
}
