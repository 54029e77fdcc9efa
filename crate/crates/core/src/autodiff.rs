//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Leaves created
//! with [`Graph::param`] are tracked and receive gradients; leaves created with
//! [`Graph::constant`] do not, and nothing downstream of only constants is
//! differentiated.
//!
//! Gradients of tracked leaves accumulate across repeated `backward` calls
//! until [`Graph::zero_grad`] is called.

use crate::error::{dim_err, domain_err, Error, Result};
use crate::tensor::{gemm, mean_pool2, mean_pool2_backward, transpose_raw, ConvGeom, Padding, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    MeanPool2(Var),
    Reshape(Var),
    Broadcast(Var),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    tracked: bool,
}

/// The gradient tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`, computed without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tracked: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].tracked = true;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if any has been propagated.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// All tracked leaves that currently hold a gradient.
    pub fn gradients(&self) -> Vec<(Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, name, f)?
        } else if tb.numel() == 1 && tb.ndim() == 0 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else if ta.numel() == 1 && ta.ndim() == 0 {
            let s = ta.data()[0];
            tb.map(|x| f(s, x))
        } else {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].value.data().iter().find(|x| !(**x >= 0.0)) {
            return Err(domain_err("log", format!("argument {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].value.data().iter().find(|x| !(**x >= 0.0)) {
            return Err(domain_err("sqrt", format!("argument {x}")));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (x, k) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let geom = ConvGeom::new(x.shape(), k.shape(), padding)?;
        let value = Tensor::new(geom.out_shape(), geom.forward(x.data(), k.data()))?;
        let rg = self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad;
        Ok(self.push(value, Op::Conv2d(input, kernel, geom), rg))
    }

    pub fn mean_pool2(&mut self, a: Var) -> Result<Var> {
        let value = mean_pool2(&self.nodes[a.0].value)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::MeanPool2(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Repeat `a` along its size-1 axes to reach `shape` (equal rank required).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.ndim() != shape.len() || src.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(dim_err("broadcast", src.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), broadcast_data(src, shape))?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    /// Broadcast a `[C]` vector across the rows of an `[N, C]` (or `[N, ..., C]`) target.
    pub fn broadcast_rows(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let mut s = vec![1; shape.len()];
        if let (Some(last), Some(&c)) = (s.last_mut(), self.shape(v).last()) {
            *last = c;
        }
        let r = self.reshape(v, &s)?;
        self.broadcast(r, shape)
    }

    /// Broadcast a `[N]` vector (one value per sample) across an `[N, ...]` target.
    pub fn broadcast_samples(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let mut s = vec![1; shape.len()];
        if let (Some(first), Some(&n)) = (s.first_mut(), self.shape(v).first()) {
            *first = n;
        }
        let r = self.reshape(v, &s)?;
        self.broadcast(r, shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Sum(a), rg)
    }

    /// Summed softmax cross-entropy of `[N, C]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let &[n, c] = t.shape() else {
            return Err(dim_err("softmax_cross_entropy", t.shape(), &[labels.len(), 0]));
        };
        if n != labels.len() {
            return Err(dim_err("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(domain_err("softmax_cross_entropy", format!("label {y} >= {c} classes")));
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[y];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagate gradients from a scalar `output` to every tracked leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        pending[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.tracked {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (target, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut pending[target.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    res.push((*a, reduce_to(g.clone(), val(*a))));
                }
                if self.rg(*b) {
                    res.push((*b, reduce_to(g.map(|x| sign * x), val(*b))));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    res.push((*a, reduce_to(mul_bcast(g, val(*b)), val(*a))));
                }
                if self.rg(*b) {
                    res.push((*b, reduce_to(mul_bcast(g, val(*a)), val(*b))));
                }
            }
            Op::Neg(a) => res.push((*a, g.map(|x| -x))),
            Op::Scale(a, c) => res.push((*a, g.map(|x| c * x))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Exp(a) => res.push((*a, g.zip_map(out, "exp'", |g, y| g * y)?)),
            Op::Log(a) => res.push((*a, g.zip_map(val(*a), "log'", |g, x| g / x)?)),
            Op::Sqrt(a) => res.push((
                *a,
                // subgradient 0 at the origin
                g.zip_map(out, "sqrt'", |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })?,
            )),
            Op::Square(a) => res.push((*a, g.zip_map(val(*a), "square'", |g, x| 2.0 * g * x)?)),
            Op::Sigmoid(a) => res.push((*a, g.zip_map(out, "sigmoid'", |g, y| g * y * (1.0 - y))?)),
            Op::Softplus(a) => res.push((*a, g.zip_map(val(*a), "softplus'", |g, x| g * sigmoid(x))?)),
            Op::Relu(a) => res.push((*a, g.zip_map(val(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.rg(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    let mut d = vec![0.0; m * k];
                    gemm(g.data(), &bt, &mut d, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], d)?));
                }
                if self.rg(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    let mut d = vec![0.0; k * n];
                    gemm(&at, g.data(), &mut d, k, m, n);
                    res.push((*b, Tensor::new(vec![k, n], d)?));
                }
            }
            Op::Conv2d(x, k, geom) => {
                let (dx, dk) = geom.backward(val(*x).data(), val(*k).data(), g.data());
                if self.rg(*x) {
                    res.push((*x, Tensor::new(val(*x).shape().to_vec(), dx)?));
                }
                if self.rg(*k) {
                    res.push((*k, Tensor::new(val(*k).shape().to_vec(), dk)?));
                }
            }
            Op::MeanPool2(a) => {
                let shape = val(*a).shape().to_vec();
                let d = mean_pool2_backward(&shape, g.data());
                res.push((*a, Tensor::new(shape, d)?));
            }
            Op::Reshape(a) => res.push((*a, g.reshape(val(*a).shape())?)),
            Op::Broadcast(a) => res.push((*a, reduce_to(g.clone(), val(*a)))),
            Op::Sum(a) => {
                let s = g.data()[0];
                res.push((*a, Tensor::full(val(*a).shape(), s)));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let s = g.data()[0];
                let c = val(*logits).shape()[1];
                let mut d: Vec<f64> = probs.iter().map(|p| s * p).collect();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * c + y] -= s;
                }
                res.push((*logits, Tensor::new(val(*logits).shape().to_vec(), d)?));
            }
        }
        Ok(res)
    }
}

fn broadcast_data(src: &Tensor, shape: &[usize]) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for ax in (0..rank).rev() {
        src_strides[ax] = if src.shape()[ax] == 1 { 0 } else { stride };
        stride *= src.shape()[ax];
    }
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let data = src.data();
    for _ in 0..numel {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `g` down to the shape of `target` (inverse of scalar or size-1-axis broadcast).
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        return g;
    }
    if target.numel() == 1 && target.ndim() == 0 {
        return Tensor::scalar(g.sum());
    }
    let shape = g.shape().to_vec();
    let rank = shape.len();
    let mut dst_strides = vec![0usize; rank];
    let mut stride = 1;
    for ax in (0..rank).rev() {
        dst_strides[ax] = if target.shape()[ax] == 1 { 0 } else { stride };
        stride *= target.shape()[ax];
    }
    let mut out = vec![0.0; target.numel()];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in g.data() {
        out[off] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += dst_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= dst_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("reduce_to preserves target shape")
}

fn mul_bcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        g.zip_map(other, "mul'", |a, b| a * b).expect("same shape")
    } else {
        let s = other.data()[0];
        g.map(|x| x * s)
    }
}
