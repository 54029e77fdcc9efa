//! Whole-model ELBO gradients against central finite differences.

use bayescomp::layers::Rng;
use bayescomp::{train, Architecture, Model, Prior, Tensor};
use rand::{Rng as _, SeedableRng};

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Move every parameter away from its initial value so that scale posteriors
/// carry real uncertainty and all gradient paths are exercised.
fn perturbed(arch: &str, classes: usize, prior: Prior, seed: u64) -> Model {
    let arch = Architecture::with_output(arch, classes).unwrap();
    let mut model = Model::init(&arch, prior, seed).unwrap();
    let mut rng = Rng::seed_from_u64(seed + 100);
    for layer in &mut model.layers {
        let names = layer.param_names();
        for (name, t) in names.iter().zip(layer.params_mut()) {
            for x in t.data_mut() {
                *x = if name.ends_with("log_sigma2") {
                    rng.random_range(-4.0..-1.0)
                } else if *name == "z_mu" {
                    rng.random_range(0.5..1.5)
                } else {
                    *x + rng.random_range(-0.5..0.5)
                };
            }
        }
    }
    model
}

/// Loss of one minibatch with the noise stream pinned by `seed`.
fn model_loss(model: &Model, x: &Tensor, labels: &[usize], seed: u64) -> (f64, Vec<Tensor>) {
    let mut rng = Rng::seed_from_u64(seed);
    let mut obj = train::objective(model, x, labels, 50, 1.0, 1.0, &mut rng, true).unwrap();
    obj.graph.backward(obj.loss).unwrap();
    let grads = obj
        .vars
        .iter()
        .flat_map(|lv| lv.0.iter())
        .map(|&v| {
            obj.graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(obj.graph.shape(v)))
        })
        .collect();
    let loss = obj.graph.value(obj.loss).item().unwrap();
    (loss, grads)
}

/// Worst relative error between the tape gradient of the minibatch loss and
/// central differences, for every parameter tensor of every layer.
pub fn model_errors(arch: &str, prior: Prior, input: &[usize]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let model = perturbed(arch, 3, prior, 9);
    let mut rng = Rng::seed_from_u64(10);
    let x = Tensor::from_fn(input, |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..input[0]).map(|i| i % 3).collect();
    let (_, grads) = model_loss(&model, &x, &labels, 42);
    let mut gi = 0;
    for li in 0..model.layers.len() {
        let names = model.layers[li].param_names();
        for (pi, name) in names.iter().enumerate() {
            let n = model.layers[li].params()[pi].numel();
            let mut worst: f64 = 0.0;
            for j in 0..n {
                let mut plus = model.clone();
                plus.layers[li].params_mut()[pi].data_mut()[j] += H;
                let mut minus = model.clone();
                minus.layers[li].params_mut()[pi].data_mut()[j] -= H;
                let numeric =
                    (model_loss(&plus, &x, &labels, 42).0 - model_loss(&minus, &x, &labels, 42).0) / (2.0 * H);
                worst = worst.max(rel_err(grads[gi].data()[j], numeric));
            }
            out.push((format!("layer {li} {name}"), worst));
            gi += 1;
        }
    }
    out
}
