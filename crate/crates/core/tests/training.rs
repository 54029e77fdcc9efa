use bayescomp::data::{self, Split};
use bayescomp::layers::{Rng, Scales};
use bayescomp::train::{self, Adam, TrainConfig};
use bayescomp::{prune, Architecture, Error, Model, Prior, Tensor};
use rand::SeedableRng;

fn blobs() -> (bayescomp::Dataset, bayescomp::Dataset) {
    (
        data::synth_blobs(1000, 2, 2, 10.0, 1, Split::Train).unwrap(),
        data::synth_blobs(1000, 2, 2, 10.0, 2, Split::Test).unwrap(),
    )
}

fn blob_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        warmup_epochs: 10,
        seed,
        dataset: "blobs".into(),
        ..Default::default()
    }
}

#[test]
fn tiny_mlp_separates_blobs() {
    let (tr, te) = blobs();
    let arch: Architecture = "2-16-2".parse().unwrap();
    for prior in [Prior::Gnj, Prior::Ghs] {
        let (model, log) = train::train(&blob_config(3), &arch, prior, &tr, &te, |_| {}).unwrap();
        let last = log.last().unwrap();
        assert_eq!(last.test_err, 0.0, "{prior}: {last:?}");
        let err = model
            .error_rate(&te.flat_inputs(), &te.labels, &model.full_masks(), 100)
            .unwrap();
        assert_eq!(err, 0.0);
        for r in &log {
            assert!(r.nll.is_finite() && r.kl_w.is_finite() && r.kl_z.is_finite(), "{r:?}");
            assert!(r.kl_w >= 0.0 && r.kl_z >= 0.0, "{prior}: negative KL {r:?}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (tr, te) = blobs();
    let arch: Architecture = "2-8-2".parse().unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        warmup_epochs: 2,
        ..blob_config(7)
    };
    for prior in [Prior::Gnj, Prior::Ghs] {
        let (m1, l1) = train::train(&cfg, &arch, prior, &tr, &te, |_| {}).unwrap();
        let (m2, l2) = train::train(&cfg, &arch, prior, &tr, &te, |_| {}).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        let other = TrainConfig { seed: 8, ..cfg.clone() };
        let (m3, _) = train::train(&other, &arch, prior, &tr, &te, |_| {}).unwrap();
        assert_ne!(m1, m3);
    }
}

#[test]
fn epoch_callback_sees_every_record() {
    let (tr, te) = blobs();
    let cfg = TrainConfig {
        epochs: 4,
        warmup_epochs: 2,
        ..blob_config(1)
    };
    let mut seen = Vec::new();
    let (_, log) = train::train(&cfg, &"2-4-2".parse().unwrap(), Prior::Gnj, &tr, &te, |r| {
        seen.push(r.clone())
    })
    .unwrap();
    assert_eq!(seen, log);
    let scales: Vec<f64> = log.iter().map(|r| r.kl_scale).collect();
    assert_eq!(scales, vec![0.0, 0.5, 1.0, 1.0]);
}

#[test]
fn input_size_mismatch_is_rejected() {
    let (tr, te) = blobs();
    let arch: Architecture = "3-4-2".parse().unwrap();
    assert!(matches!(
        train::train(&blob_config(1), &arch, Prior::Gnj, &tr, &te, |_| {}),
        Err(Error::Dimension { .. })
    ));
}

// ---------------------------------------------------------------------------
// ELBO assembly

fn batch() -> (Tensor, Vec<usize>) {
    let ds = data::synth_blobs(20, 3, 4, 3.0, 5, Split::Train).unwrap();
    (ds.inputs, ds.labels)
}

#[test]
fn zero_kl_scale_keeps_only_the_likelihood() {
    let (x, y) = batch();
    let model = Model::init(&"4-6-3".parse().unwrap(), Prior::Ghs, 2).unwrap();
    let b = train::elbo(&model, &x, &y, 1000, 0.0, 1e-5, &mut Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.total, -b.neg_log_likelihood * b.rescale);
    assert!(b.kl_weights > 0.0 && b.kl_scales > 0.0);
    assert_eq!(b.rescale, 50.0);
}

/// Independent form of KL(N(μ, σ²) ‖ N(0, 1)).
fn kl_std_normal(mu: f64, sigma2: f64) -> f64 {
    0.5 * (sigma2 + mu * mu - 1.0 - sigma2.ln())
}

#[test]
fn weight_kl_is_the_sum_over_weights_and_biases() {
    let (x, y) = batch();
    for prior in [Prior::Gnj, Prior::Ghs] {
        let model = Model::init(&"4-6-3".parse().unwrap(), prior, 4).unwrap();
        let b = train::elbo(&model, &x, &y, 20, 1.0, 1e-5, &mut Rng::seed_from_u64(0)).unwrap();
        let mut expect = 0.0;
        for l in &model.layers {
            for (mu, ls2) in [(&l.weight_mu, &l.weight_log_sigma2), (&l.bias_mu, &l.bias_log_sigma2)] {
                expect += mu
                    .data()
                    .iter()
                    .zip(ls2.data())
                    .map(|(&m, &s)| kl_std_normal(m, s.exp()))
                    .sum::<f64>();
            }
        }
        assert!(
            (b.kl_weights - expect).abs() <= 1e-12 * expect,
            "{prior}: {} vs {expect}",
            b.kl_weights
        );
        let (kw, kz) = train::model_kl(&model, 1e-5).unwrap();
        assert!((kw - b.kl_weights).abs() <= 1e-12 * kw);
        assert!((kz - b.kl_scales).abs() <= 1e-12 * kz.abs().max(1.0));
    }
}

#[test]
fn prior_matching_weights_have_zero_kl() {
    let (x, y) = batch();
    let mut model = Model::init(&"4-3".parse().unwrap(), Prior::Gnj, 1).unwrap();
    for l in &mut model.layers {
        l.weight_mu = Tensor::zeros(l.weight_mu.shape());
        l.weight_log_sigma2 = Tensor::zeros(l.weight_log_sigma2.shape());
        l.bias_mu = Tensor::zeros(l.bias_mu.shape());
        l.bias_log_sigma2 = Tensor::zeros(l.bias_log_sigma2.shape());
    }
    let b = train::elbo(&model, &x, &y, 20, 1.0, 1e-5, &mut Rng::seed_from_u64(0)).unwrap();
    assert_eq!(b.kl_weights, 0.0);
}

#[test]
fn non_finite_parameters_name_the_layer() {
    let (x, y) = batch();
    let mut model = Model::init(&"4-6-3".parse().unwrap(), Prior::Gnj, 1).unwrap();
    model.layers[1].weight_log_sigma2.data_mut()[0] = f64::NAN;
    match train::elbo(&model, &x, &y, 20, 1.0, 1e-5, &mut Rng::seed_from_u64(0)) {
        Err(Error::NonFinite { layer: Some(1), .. }) => {}
        other => panic!("expected a non-finite error in layer 1, got {other:?}"),
    }
}

#[test]
fn kl_scale_outside_unit_interval_is_rejected() {
    let (x, y) = batch();
    let model = Model::init(&"4-3".parse().unwrap(), Prior::Gnj, 1).unwrap();
    assert!(train::elbo(&model, &x, &y, 20, 1.5, 1e-5, &mut Rng::seed_from_u64(0)).is_err());
    assert!(train::elbo(&model, &x, &y, 20, 1.0, 1e-5, &mut Rng::seed_from_u64(0)).is_ok());
}

// ---------------------------------------------------------------------------
// Initialization

#[test]
fn init_statistics() {
    let arch: Architecture = "200-500-10".parse().unwrap();
    let gnj = Model::init(&arch, Prior::Gnj, 5).unwrap();
    let w = gnj.layers[0].weight_mu.data();
    let sd = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
    assert!((sd - 0.1).abs() < 0.002, "weight-mean std {sd}");
    let log_sigma: Vec<f64> = gnj.layers[0].weight_log_sigma2.data().iter().map(|v| 0.5 * v).collect();
    let m = log_sigma.iter().sum::<f64>() / log_sigma.len() as f64;
    let v = log_sigma.iter().map(|x| (x - m).powi(2)).sum::<f64>() / log_sigma.len() as f64;
    assert!(
        (m + 9.0).abs() < 1e-3 && (v / 1e-4 - 1.0).abs() < 0.02,
        "log σ mean {m}, var {v}"
    );
    for l in &gnj.layers {
        for s in prune::nj_scores(l).unwrap() {
            assert!((s - 1e-8f64.ln()).abs() < 1e-9);
        }
    }

    let ghs = Model::init(&arch, Prior::Ghs, 5).unwrap();
    for l in &ghs.layers {
        let Scales::Ghs(s) = &l.scales else { unreachable!() };
        let imp = s.implied();
        for (&m, &v) in imp.mu_z_tilde.iter().zip(&imp.sigma2_z_tilde) {
            let (mu, var) = (m + imp.mu_s, v + imp.sigma2_s);
            // log-normal mean and variance of z = s·z̃
            let mean = (mu + 0.5 * var).exp();
            let variance = (var.exp() - 1.0) * (2.0 * mu + var).exp();
            assert!((mean - 1.0).abs() < 1e-7);
            assert!((variance / 1e-8 - 1.0).abs() < 1e-3, "variance {variance}");
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[test]
fn adam_converges_on_a_quadratic() {
    let mut x = Tensor::from_vec(vec![0.0]);
    let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
    let mut steps = 0;
    while (x.data()[0] - 3.0).abs() >= 1e-6 {
        let g = Tensor::from_vec(vec![2.0 * (x.data()[0] - 3.0)]);
        adam.step(&mut [&mut x], &[&g]).unwrap();
        steps += 1;
        assert!(steps <= 5000, "not within 1e-6 after 5000 steps: {}", x.data()[0]);
    }
}

#[test]
fn adam_rejects_non_finite_and_mismatched_gradients() {
    let mut x = Tensor::from_vec(vec![0.0, 1.0]);
    let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    assert!(adam
        .step(&mut [&mut x], &[&Tensor::from_vec(vec![f64::NAN, 0.0])])
        .is_err());
    assert!(adam.step(&mut [&mut x], &[&Tensor::from_vec(vec![1.0])]).is_err());
}

// ---------------------------------------------------------------------------
// Maximum-likelihood limit

/// Plain two-layer ReLU network `x -> (x⊙z1)W1 + b1 -> relu -> (h⊙z2)W2 + b2`
/// with hand-written backpropagation and Adam, used as a reference.
struct Mlp {
    params: Vec<Vec<f64>>, // w1, b1, z1, w2, b2, z2
    dims: [usize; 3],
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Mlp {
    fn loss_and_grads(&self, x: &[f64], y: &[usize]) -> (f64, Vec<Vec<f64>>) {
        let [d, h, c] = self.dims;
        let [w1, b1, z1, w2, b2, z2] = [0, 1, 2, 3, 4, 5].map(|i| &self.params[i]);
        let n = y.len();
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let xi = &x[i * d..(i + 1) * d];
            let xs: Vec<f64> = (0..d).map(|j| xi[j] * z1[j]).collect();
            let a1: Vec<f64> = (0..h)
                .map(|k| b1[k] + (0..d).map(|j| xs[j] * w1[j * h + k]).sum::<f64>())
                .collect();
            let h1: Vec<f64> = a1.iter().map(|&a| a.max(0.0)).collect();
            let hs: Vec<f64> = (0..h).map(|k| h1[k] * z2[k]).collect();
            let a2: Vec<f64> = (0..c)
                .map(|o| b2[o] + (0..h).map(|k| hs[k] * w2[k * c + o]).sum::<f64>())
                .collect();
            let mx = a2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + a2.iter().map(|a| (a - mx).exp()).sum::<f64>().ln();
            loss += lse - a2[yi];
            let da2: Vec<f64> = (0..c)
                .map(|o| ((a2[o] - lse).exp() - f64::from(u8::from(o == yi))) / n as f64)
                .collect();
            let mut dhs = vec![0.0; h];
            for k in 0..h {
                for o in 0..c {
                    grads[3][k * c + o] += hs[k] * da2[o];
                    dhs[k] += da2[o] * w2[k * c + o];
                }
                grads[5][k] += dhs[k] * h1[k];
            }
            for o in 0..c {
                grads[4][o] += da2[o];
            }
            let da1: Vec<f64> = (0..h).map(|k| if a1[k] > 0.0 { dhs[k] * z2[k] } else { 0.0 }).collect();
            for j in 0..d {
                let mut dxs = 0.0;
                for k in 0..h {
                    grads[0][j * h + k] += xs[j] * da1[k];
                    dxs += da1[k] * w1[j * h + k];
                }
                grads[2][j] += dxs * xi[j];
            }
            for k in 0..h {
                grads[1][k] += da1[k];
            }
        }
        (loss / n as f64, grads)
    }

    fn adam(&mut self, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (p, ((g, m), v)) in self
            .params
            .iter_mut()
            .zip(grads.iter().zip(&mut self.m).zip(&mut self.v))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(self.t));
                let vh = v[i] / (1.0 - b2.powi(self.t));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[test]
fn zero_variance_zero_kl_training_is_maximum_likelihood() {
    let ds = data::synth_blobs(60, 3, 4, 2.0, 9, Split::Train).unwrap();
    let (x, y) = (ds.inputs.clone(), ds.labels.clone());
    let mut model = Model::init(&"4-8-3".parse().unwrap(), Prior::Gnj, 6).unwrap();
    // variances far below double resolution of the means
    for l in &mut model.layers {
        for (name, t) in l.param_names().iter().zip(l.params_mut()) {
            if name.ends_with("log_sigma2") {
                *t = Tensor::full(t.shape(), -200.0);
            }
        }
    }
    let mut reference = reference_from(&model);
    let (start, _) = reference.loss_and_grads(x.data(), &y);

    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..Default::default()
    };
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = Rng::seed_from_u64(0);
    for step in 0..100 {
        let b = train::train_step(&mut model, &mut adam, &x, &y, y.len(), 0.0, &cfg, &mut rng).unwrap();
        let (loss, grads) = reference.loss_and_grads(x.data(), &y);
        reference.adam(&grads, cfg.learning_rate);
        let ours = b.neg_log_likelihood / y.len() as f64;
        assert!(
            (ours - loss).abs() <= 1e-10 * loss.max(1e-3),
            "step {step}: {ours} vs {loss}"
        );
    }
    let (final_loss, _) = reference.loss_and_grads(x.data(), &y);
    assert!(
        final_loss < 0.5 * start,
        "training made no progress: {start} -> {final_loss}"
    );
}

fn reference_from(model: &Model) -> Mlp {
    let p = |li: usize, i: usize| model.layers[li].params()[i].data().to_vec();
    let params = vec![p(0, 0), p(0, 2), p(0, 4), p(1, 0), p(1, 2), p(1, 4)];
    let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    Mlp {
        m: zeros.clone(),
        v: zeros,
        params,
        dims: [4, 8, 3],
        t: 0,
    }
}
