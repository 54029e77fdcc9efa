//! Reverse-mode gradients against central finite differences.

mod support;

use bayescomp::layers::Rng;
use bayescomp::{Graph, Padding, Prior, Result, Tensor, Var};
use rand::{Rng as _, SeedableRng};

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst relative error between the tape gradient of `f` and central
/// differences, over every element of every input.
fn check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Contract a tensor-valued output to a scalar with fixed random weights so
/// every output element carries a distinct sensitivity.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(g.shape(v), -1.0, 1.0, &mut rng));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn random_shape(rng: &mut Rng) -> Vec<usize> {
    vec![rng.random_range(1..5), rng.random_range(1..6)]
}

type Unary = fn(&mut Graph, Var) -> Result<Var>;

#[test]
fn elementwise_ops() {
    let ops: Vec<(&str, Unary, f64, f64)> = vec![
        ("neg", |g, a| Ok(g.neg(a)), -2.0, 2.0),
        ("scale", |g, a| Ok(g.scale(a, -1.7)), -2.0, 2.0),
        ("add_scalar", |g, a| Ok(g.add_scalar(a, 0.3)), -2.0, 2.0),
        ("exp", |g, a| Ok(g.exp(a)), -2.0, 2.0),
        ("log", |g, a| g.log(a), 0.2, 3.0),
        ("sqrt", |g, a| g.sqrt(a), 0.2, 3.0),
        ("square", |g, a| Ok(g.square(a)), -2.0, 2.0),
        ("sigmoid", |g, a| Ok(g.sigmoid(a)), -4.0, 4.0),
        ("softplus", |g, a| Ok(g.softplus(a)), -4.0, 4.0),
        ("relu", |g, a| Ok(g.relu(a)), 0.1, 2.0),
        ("relu_negative", |g, a| Ok(g.relu(a)), -2.0, -0.1),
    ];
    let mut rng = Rng::seed_from_u64(1);
    for (name, op, lo, hi) in ops {
        for trial in 0..10 {
            let x = random_tensor(&random_shape(&mut rng), lo, hi, &mut rng);
            let e = check(&[x], &|g, v| {
                let y = op(g, v[0])?;
                weighted_sum(g, y, trial)
            });
            assert!(e < 1e-6, "{name}: relative error {e}");
        }
    }
}

#[test]
fn binary_ops() {
    type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
    let ops: Vec<(&str, Binary)> = vec![
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    let mut rng = Rng::seed_from_u64(2);
    for (name, op) in ops {
        for trial in 0..10 {
            let shape = random_shape(&mut rng);
            let a = random_tensor(&shape, -2.0, 2.0, &mut rng);
            let b = random_tensor(&shape, -2.0, 2.0, &mut rng);
            let e = check(&[a, b], &|g, v| {
                let y = op(g, v[0], v[1])?;
                weighted_sum(g, y, trial)
            });
            assert!(e < 1e-6, "{name}: relative error {e}");
        }
    }
}

#[test]
fn sum_of_product_gradient() {
    let mut rng = Rng::seed_from_u64(3);
    let a = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    let e = check(&[a, b], &|g, v| {
        let p = g.mul(v[0], v[1])?;
        Ok(g.sum(p))
    });
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn matmul_gradient() {
    let mut rng = Rng::seed_from_u64(4);
    for trial in 0..10 {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = random_tensor(&[m, k], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[k, n], -1.0, 1.0, &mut rng);
        let e = check(&[a, b], &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-4, "matmul: relative error {e}");
    }
}

#[test]
fn conv_gradient() {
    let mut rng = Rng::seed_from_u64(5);
    for trial in 0..10 {
        let padding = if trial % 2 == 0 { Padding::Valid } else { Padding::Same };
        let (n, hw, c, k, f) = (
            rng.random_range(1..3),
            rng.random_range(3..6),
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let x = random_tensor(&[n, hw, hw, c], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[k, k, c, f], -1.0, 1.0, &mut rng);
        let e = check(&[x, w], &|g, v| {
            let y = g.conv2d(v[0], v[1], padding)?;
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-5, "conv {padding:?}: relative error {e}");
    }
}

#[test]
fn shape_ops() {
    let mut rng = Rng::seed_from_u64(6);
    for trial in 0..10 {
        let (n, c) = (rng.random_range(1..4), rng.random_range(1..5));
        let x = random_tensor(&[n, 4, 2, c], -1.0, 1.0, &mut rng);
        let e = check(&[x], &|g, v| {
            let y = g.mean_pool2(v[0])?;
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-6, "mean_pool2: relative error {e}");

        let row = random_tensor(&[c], -1.0, 1.0, &mut rng);
        let e = check(&[row], &|g, v| {
            let y = g.broadcast_rows(v[0], &[n, 3, c])?;
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-6, "broadcast_rows: relative error {e}");

        let col = random_tensor(&[n], -1.0, 1.0, &mut rng);
        let e = check(&[col], &|g, v| {
            let y = g.broadcast_samples(v[0], &[n, c])?;
            let y = g.reshape(y, &[n * c])?;
            weighted_sum(g, y, trial)
        });
        assert!(e < 1e-6, "broadcast_samples/reshape: relative error {e}");
    }
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (n, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let logits = random_tensor(&[n, c], -3.0, 3.0, &mut rng);
        let e = check(&[logits], &|g, v| g.softmax_cross_entropy(v[0], &labels));
        assert!(e < 1e-6, "softmax_cross_entropy: relative error {e}");
    }
}

fn check_model(arch: &str, prior: Prior, input: &[usize]) {
    for (name, worst) in support::gradients::model_errors(arch, prior, input) {
        assert!(worst < 1e-4, "{prior} {arch} {name}: relative error {worst}");
    }
}

#[test]
fn dense_gnj_layer_gradients() {
    check_model("5-4", Prior::Gnj, &[4, 5]);
}

#[test]
fn dense_ghs_layer_gradients() {
    check_model("5-4", Prior::Ghs, &[4, 5]);
}

#[test]
fn conv_gnj_layer_gradients() {
    check_model("6x6x2-c3x3-p", Prior::Gnj, &[2, 6, 6, 2]);
}

#[test]
fn conv_ghs_layer_gradients() {
    check_model("6x6x2-c3x3-p", Prior::Ghs, &[2, 6, 6, 2]);
}
