//! Stochastic variational training: ELBO, Adam, warm-up and std ceilings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::dists::{horseshoe_scale_neg_kl, kl_conditional_gaussian, neg_kl_nj_scale};
use crate::error::{Error, Result};
use crate::layers::{BayesLayer, KlVars, LayerVars, Prior, Rng, Scales};
use crate::model::{Architecture, InputShape, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Ceiling on the weight posterior standard deviation, per parametric layer.
    pub std_ceilings: Vec<Option<f64>>,
    /// Scale of the global half-Cauchy prior (horseshoe only).
    pub tau0: f64,
    pub dataset: String,
    /// Batch size used for deterministic evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            batch_size: 50,
            warmup_epochs: 10,
            seed: 1,
            std_ceilings: Vec::new(),
            tau0: 1e-5,
            dataset: "mnist".into(),
            eval_batch_size: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return bad("tau0 must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("invalid Adam hyperparameters");
        }
        if self.std_ceilings.iter().flatten().any(|c| !(*c > 0.0)) {
            return bad("std ceilings must be positive");
        }
        Ok(())
    }
}

/// First-layer std ceilings used for the LeNet models: 0.2 for flat inputs,
/// 0.5 for images.
pub fn default_std_ceilings(arch: &Architecture) -> Vec<Option<f64>> {
    let n = arch.weight_shapes().len();
    let mut v = vec![None; n];
    if n > 0 {
        v[0] = Some(match arch.input {
            InputShape::Flat(_) => 0.2,
            InputShape::Image { .. } => 0.5,
        });
    }
    v
}

/// Parts of the evidence lower bound for one minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// Summed cross-entropy over the minibatch (nats).
    pub neg_log_likelihood: f64,
    pub kl_weights: f64,
    pub kl_scales: f64,
    /// `N_total / batch_size`.
    pub rescale: f64,
    pub kl_scale: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn assemble(neg_log_likelihood: f64, kl_weights: f64, kl_scales: f64, rescale: f64, kl_scale: f64) -> Self {
        ElboBreakdown {
            neg_log_likelihood,
            kl_weights,
            kl_scales,
            rescale,
            kl_scale,
            total: -neg_log_likelihood * rescale - kl_scale * (kl_weights + kl_scales),
        }
    }

    pub fn recompute(&self) -> f64 {
        Self::assemble(
            self.neg_log_likelihood,
            self.kl_weights,
            self.kl_scales,
            self.rescale,
            self.kl_scale,
        )
        .total
    }
}

/// `min(1, epoch / warmup_epochs)`, or 1 without warm-up.
pub fn warmup_schedule(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

pub fn init_model(arch: &Architecture, prior: Prior, seed: u64) -> Result<Model> {
    Model::init(arch, prior, seed)
}

/// Clamp weight posterior standard deviations to the per-layer ceilings.
pub fn constrain_stds(model: &mut Model, ceilings: &[Option<f64>]) {
    for (layer, c) in model.layers.iter_mut().zip(ceilings) {
        if let Some(c) = c {
            let cap = 2.0 * c.ln();
            layer.weight_log_sigma2.data_mut().iter_mut().for_each(|v| {
                if *v > cap {
                    *v = cap;
                }
            });
        }
    }
}

/// Exact KL terms of one layer: `(weights + biases, scales)`.
pub fn layer_kl(layer: &BayesLayer, tau0: f64) -> Result<(f64, f64)> {
    let gauss = |mu: &Tensor, ls2: &Tensor| -> Result<f64> {
        mu.data()
            .iter()
            .zip(ls2.data())
            .try_fold(0.0, |acc, (&m, &l)| Ok(acc + kl_conditional_gaussian(m, l.exp())?))
    };
    let kw = gauss(&layer.weight_mu, &layer.weight_log_sigma2)? + gauss(&layer.bias_mu, &layer.bias_log_sigma2)?;
    let kz = match &layer.scales {
        Scales::Gnj(s) => {
            s.mu.data()
                .iter()
                .zip(s.log_sigma2.data())
                .try_fold(0.0, |acc, (&m, &l)| {
                    Ok::<_, Error>(acc - neg_kl_nj_scale(l - (m * m).ln())?)
                })?
        }
        Scales::Ghs(s) => -horseshoe_scale_neg_kl(s.s_a(), s.s_b(), &s.alphas(), &s.betas(), tau0)?,
    };
    Ok((kw, kz))
}

/// Exact KL terms summed over the model.
pub fn model_kl(model: &Model, tau0: f64) -> Result<(f64, f64)> {
    model.layers.iter().try_fold((0.0, 0.0), |(a, b), l| {
        let (w, z) = layer_kl(l, tau0)?;
        Ok((a + w, b + z))
    })
}

/// Graph of the negative ELBO divided by `n_total`, which is the loss
/// minimized by training.
pub struct Objective {
    pub graph: Graph,
    pub vars: Vec<LayerVars>,
    pub loss: Var,
    pub kl: Vec<KlVars>,
    pub breakdown: ElboBreakdown,
}

#[allow(clippy::too_many_arguments)]
pub fn objective(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    n_total: usize,
    kl_scale: f64,
    tau0: f64,
    rng: &mut Rng,
    track: bool,
) -> Result<Objective> {
    if labels.is_empty() {
        return Err(Error::Contract("empty minibatch".into()));
    }
    if !(0.0..=1.0).contains(&kl_scale) {
        return Err(Error::Contract(format!("kl_scale {kl_scale} outside [0, 1]")));
    }
    let mut g = Graph::new();
    let vars = model.register(&mut g, track);
    let xin = g.constant(model.shape_input(x)?);
    let logits = model.forward_stochastic(&mut g, &vars, xin, rng)?;
    let nll = g.softmax_cross_entropy(logits, labels)?;
    let kl = model.kl(&mut g, &vars, tau0)?;
    let mut kl_w = 0.0;
    let mut kl_z = 0.0;
    let mut kl_sum: Option<Var> = None;
    for k in &kl {
        kl_w += g.value(k.weights).data()[0];
        kl_z += g.value(k.scales).data()[0];
        let t = g.add(k.weights, k.scales)?;
        kl_sum = Some(match kl_sum {
            Some(s) => g.add(s, t)?,
            None => t,
        });
    }
    let n = n_total as f64;
    let b = labels.len() as f64;
    let nll_term = g.scale(nll, 1.0 / b);
    let loss = match kl_sum {
        Some(s) => {
            let s = g.scale(s, kl_scale / n);
            g.add(nll_term, s)?
        }
        None => nll_term,
    };
    let breakdown = ElboBreakdown::assemble(g.value(nll).data()[0], kl_w, kl_z, n / b, kl_scale);
    if !breakdown.total.is_finite() {
        let layer = kl
            .iter()
            .position(|k| !(g.value(k.weights).all_finite() && g.value(k.scales).all_finite()))
            .or_else(|| {
                model
                    .layers
                    .iter()
                    .position(|l| !l.params().iter().all(|t| t.all_finite()))
            });
        return Err(Error::NonFinite {
            layer,
            detail: format!("ELBO is {:?}", breakdown),
        });
    }
    Ok(Objective {
        graph: g,
        vars,
        loss,
        kl,
        breakdown,
    })
}

/// ELBO estimate for one minibatch with a single noise sample.
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    n_total: usize,
    kl_scale: f64,
    tau0: f64,
    rng: &mut Rng,
) -> Result<ElboBreakdown> {
    Ok(objective(model, x, labels, n_total, kl_scale, tau0, rng, false)?.breakdown)
}

/// Adam with bias correction, minimizing.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.numel() {
                return Err(crate::error::dim_err("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    layer: None,
                    detail: format!("gradient of parameter {i}"),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example training cross-entropy over the epoch.
    pub nll: f64,
    pub kl_w: f64,
    pub kl_z: f64,
    pub kl_scale: f64,
    /// Deterministic test error with no pruning, in `[0, 1]`.
    pub test_err: f64,
}

/// Independent random streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// One optimizer step on a minibatch; returns the breakdown before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    n_total: usize,
    kl_scale: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<ElboBreakdown> {
    let mut obj = objective(model, x, labels, n_total, kl_scale, cfg.tau0, rng, true)?;
    obj.graph.backward(obj.loss)?;
    let mut grads: Vec<Tensor> = Vec::new();
    for (li, lv) in obj.vars.iter().enumerate() {
        for &v in &lv.0 {
            let g = obj
                .graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(obj.graph.shape(v)));
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    layer: Some(li),
                    detail: "non-finite gradient".into(),
                });
            }
            grads.push(g);
        }
    }
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut params: Vec<&mut Tensor> = model.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
    adam.step(&mut params, &grad_refs)?;
    constrain_stds(model, &cfg.std_ceilings);
    Ok(obj.breakdown)
}

/// Train a fresh model; `on_epoch` sees each record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    arch: &Architecture,
    prior: Prior,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = init_model(arch, prior, cfg.seed)?;
    if train_set.example_size() != arch.input.numel() {
        return Err(crate::error::dim_err(
            "train",
            &[arch.input.numel()],
            &[train_set.example_size()],
        ));
    }
    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut noise_rng = stream(cfg.seed, 2);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let masks = model.full_masks();
    let test_x = test_set.flat_inputs();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let kl_scale = warmup_schedule(epoch, cfg.warmup_epochs);
        order.shuffle(&mut shuffle_rng);
        let mut nll = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(idx);
            let b = train_step(&mut model, &mut adam, &x, &y, n, kl_scale, cfg, &mut noise_rng)?;
            nll += b.neg_log_likelihood;
        }
        let (kl_w, kl_z) = model_kl(&model, cfg.tau0)?;
        let test_err = if test_set.is_empty() {
            0.0
        } else {
            model.error_rate(&test_x, &test_set.labels, &masks, cfg.eval_batch_size)?
        };
        let rec = EpochRecord {
            epoch,
            nll: nll / n as f64,
            kl_w,
            kl_z,
            kl_scale,
            test_err,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok((model, log))
}
