//! Local reparametrization against sampling the full weight hierarchy.

use bayescomp::layers::Rng;
use bayescomp::{Architecture, BayesLayer, Graph, Model, Prior, Tensor};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

const CHUNK: usize = 100_000;

#[derive(Default)]
struct Moments {
    n: f64,
    s: f64,
    s2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.s += x;
        self.s2 += x * x;
    }
    fn mean(&self) -> f64 {
        self.s / self.n
    }
    fn var(&self) -> f64 {
        self.s2 / self.n - self.mean() * self.mean()
    }
}

/// A single-output layer with hand-set parameters.
fn layer(arch: &str, prior: Prior, rng: &mut Rng) -> BayesLayer {
    let arch = Architecture::with_output(arch, 1).unwrap();
    let mut layer = Model::init(&arch, prior, 0).unwrap().layers.remove(0);
    let names = layer.param_names();
    for (name, t) in names.iter().zip(layer.params_mut()) {
        for x in t.data_mut() {
            *x = match *name {
                "weight_mu" => rng.random_range(0.3..1.0),
                "z_mu" => rng.random_range(0.7..1.3),
                "bias_mu" => rng.random_range(-0.5..0.5),
                n if n.ends_with("log_sigma2") => rng.random_range(-4.0..-2.0),
                // log-normal locations of the horseshoe scales
                _ => rng.random_range(-0.3..0.3),
            };
        }
    }
    layer
}

fn ln_draw(mu: f64, log_s2: f64, rng: &mut Rng) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    (mu + (0.5 * log_s2).exp() * e).exp()
}

/// Draw every group scale from its own posterior, then the weights, then
/// form the pre-activation of the single output unit.
fn direct(layer: &BayesLayer, h: &[f64], rng: &mut Rng) -> f64 {
    let p = layer.params();
    let groups = layer.groups();
    let z: Vec<f64> = match layer.prior() {
        Prior::Gnj => (0..groups)
            .map(|i| {
                let e: f64 = rng.sample(StandardNormal);
                p[4].data()[i] + (0.5 * p[5].data()[i]).exp() * e
            })
            .collect(),
        Prior::Ghs => {
            let s_a = ln_draw(p[8].data()[0], p[9].data()[0], rng);
            let s_b = ln_draw(p[10].data()[0], p[11].data()[0], rng);
            let s = (s_a * s_b).sqrt();
            (0..groups)
                .map(|i| {
                    let a = ln_draw(p[4].data()[i], p[5].data()[i], rng);
                    let b = ln_draw(p[6].data()[i], p[7].data()[i], rng);
                    s * (a * b).sqrt()
                })
                .collect()
        }
    };
    // dense weights are [groups, 1]; a 1-filter kernel [k, k, c, 1] is
    // flattened in the same order as the patch `h`, with one shared scale
    let dense = groups == h.len();
    let mut out = 0.0;
    for (j, &x) in h.iter().enumerate() {
        let e: f64 = rng.sample(StandardNormal);
        let w = p[0].data()[j] + (0.5 * p[1].data()[j]).exp() * e;
        out += x * w * if dense { z[j] } else { z[0] };
    }
    let e: f64 = rng.sample(StandardNormal);
    out + p[2].data()[0] + (0.5 * p[3].data()[0]).exp() * e
}

/// Relative differences `(mean, variance)` between `samples` local
/// reparametrization draws and as many direct draws.
pub fn compare(arch: &str, prior: Prior, input_shape: &[usize], seed: u64, samples: usize) -> (f64, f64) {
    let mut rng = Rng::seed_from_u64(seed);
    let layer = layer(arch, prior, &mut rng);
    let per: usize = input_shape.iter().product();
    let h: Vec<f64> = (0..per).map(|_| rng.random_range(0.5..1.5)).collect();

    let mut local = Moments::default();
    let mut noise = Rng::seed_from_u64(seed + 1);
    let mut left = samples;
    while left > 0 {
        let chunk = left.min(CHUNK);
        left -= chunk;
        let mut shape = vec![chunk];
        shape.extend_from_slice(input_shape);
        let x = Tensor::from_fn(&shape, |i| h[i % per]);
        let mut g = Graph::new();
        let vars = layer.register(&mut g, false);
        let xv = g.constant(x);
        let out = layer.forward_stochastic(&mut g, &vars, xv, &mut noise).unwrap();
        assert_eq!(g.value(out).numel(), chunk);
        g.value(out).data().iter().for_each(|&v| local.push(v));
    }

    let mut hier = Moments::default();
    let mut draws = Rng::seed_from_u64(seed + 2);
    for _ in 0..samples {
        hier.push(direct(&layer, &h, &mut draws));
    }

    (
        (local.mean() - hier.mean()).abs() / hier.mean().abs(),
        (local.var() - hier.var()).abs() / hier.var(),
    )
}
