//! Dense row-major `f64` tensors and the numeric kernels the layers need.
//!
//! Every kernel here sums in a fixed order, so results are bitwise
//! reproducible across runs and equal to a plain nested-loop evaluation
//! that accumulates in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(dim_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!(
                "{op} expects a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`. Each output element is
/// accumulated from 0.0 in ascending `k` order.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let panels = n / NR;
    // pack full-width column panels of b contiguously: [panel][p][NR]
    let mut packed = vec![0.0; panels * k * NR];
    for jp in 0..panels {
        let dst = &mut packed[jp * k * NR..(jp + 1) * k * NR];
        for p in 0..k {
            dst[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + jp * NR..p * n + jp * NR + NR]);
        }
    }

    let mut i = 0;
    while i + MR <= m {
        for jp in 0..panels {
            let panel = &packed[jp * k * NR..(jp + 1) * k * NR];
            let mut acc = [[0.0f64; NR]; MR];
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                for r in 0..MR {
                    let av = rows[r][p];
                    for j in 0..NR {
                        acc[r][j] += av * bp[j];
                    }
                }
            }
            for r in 0..MR {
                c[(i + r) * n + jp * NR..(i + r) * n + jp * NR + NR].copy_from_slice(&acc[r]);
            }
        }
        i += MR;
    }
    while i < m {
        let row = &a[i * k..(i + 1) * k];
        for jp in 0..panels {
            let panel = &packed[jp * k * NR..(jp + 1) * k * NR];
            let mut acc = [0.0f64; NR];
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let av = row[p];
                for j in 0..NR {
                    acc[j] += av * bp[j];
                }
            }
            c[i * n + jp * NR..i * n + jp * NR + NR].copy_from_slice(&acc);
        }
        i += 1;
    }
    // ragged right edge
    for i in 0..m {
        for j in panels * NR..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

/// Spatial padding mode for stride-1 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Geometry of a stride-1 NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        let (&[batch, in_h, in_w, in_c], &[k_h, k_w, k_c, out_c]) = (input, kernel) else {
            return Err(dim_err("conv2d", input, kernel));
        };
        if k_c != in_c {
            return Err(dim_err("conv2d", input, kernel));
        }
        let (pad_top, pad_left, pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => ((k_h - 1) / 2, (k_w - 1) / 2, k_h - 1, k_w - 1),
        };
        if k_h == 0 || k_w == 0 || k_h > in_h + pad_h || k_w > in_w + pad_w {
            return Err(dim_err("conv2d", input, kernel));
        }
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            pad_top,
            pad_left,
            out_h: in_h + pad_h - k_h + 1,
            out_w: in_w + pad_w - k_w + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input pixel feeding output (y, x) through kernel tap (dy, dx), if inside.
    #[inline]
    fn source(&self, y: usize, x: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let sy = (y + dy).checked_sub(self.pad_top)?;
        let sx = (x + dx).checked_sub(self.pad_left)?;
        (sy < self.in_h && sx < self.in_w).then_some((sy, sx))
    }

    /// Patch matrix `[B·H'·W', kh·kw·C_in]`, rows ordered (b, y, x), columns (dy, dx, c).
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let plen = self.patch_len();
        let mut cols = vec![0.0; self.rows() * plen];
        let mut row = 0;
        for b in 0..self.batch {
            for y in 0..self.out_h {
                for x in 0..self.out_w {
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    for dy in 0..self.k_h {
                        for dx in 0..self.k_w {
                            if let Some((sy, sx)) = self.source(y, x, dy, dx) {
                                let src = ((b * self.in_h + sy) * self.in_w + sx) * self.in_c;
                                let off = (dy * self.k_w + dx) * self.in_c;
                                dst[off..off + self.in_c].copy_from_slice(&input[src..src + self.in_c]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Scatter-add a patch-matrix gradient back onto the input layout.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let plen = self.patch_len();
        let mut out = vec![0.0; self.batch * self.in_h * self.in_w * self.in_c];
        let mut row = 0;
        for b in 0..self.batch {
            for y in 0..self.out_h {
                for x in 0..self.out_w {
                    let src = &cols[row * plen..(row + 1) * plen];
                    for dy in 0..self.k_h {
                        for dx in 0..self.k_w {
                            if let Some((sy, sx)) = self.source(y, x, dy, dx) {
                                let dst = ((b * self.in_h + sy) * self.in_w + sx) * self.in_c;
                                let off = (dy * self.k_w + dx) * self.in_c;
                                for c in 0..self.in_c {
                                    out[dst + c] += src[off + c];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let cols = self.im2col(input);
        let mut out = vec![0.0; self.rows() * self.out_c];
        gemm(&cols, kernel, &mut out, self.rows(), self.patch_len(), self.out_c);
        out
    }

    /// Gradients `(d input, d kernel)` given the upstream gradient of the output.
    pub fn backward(&self, input: &[f64], kernel: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = self.rows();
        let plen = self.patch_len();
        let cols = self.im2col(input);
        let cols_t = transpose_raw(&cols, rows, plen);
        let mut d_kernel = vec![0.0; plen * self.out_c];
        gemm(&cols_t, grad_out, &mut d_kernel, plen, rows, self.out_c);
        let kernel_t = transpose_raw(kernel, plen, self.out_c);
        let mut d_cols = vec![0.0; rows * plen];
        gemm(grad_out, &kernel_t, &mut d_cols, rows, self.out_c, plen);
        (self.col2im(&d_cols), d_kernel)
    }
}

pub(crate) fn transpose_raw(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// Stride-1 cross-correlation, NHWC input and `[h, w, C_in, C_out]` kernels.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), kernel.shape(), padding)?;
    Tensor::new(geom.out_shape(), geom.forward(input.data(), kernel.data()))
}

/// 2×2, stride-2 mean pooling over the spatial axes of an NHWC tensor.
pub fn mean_pool2(input: &Tensor) -> Result<Tensor> {
    let &[b, h, w, c] = input.shape() else {
        return Err(dim_err("mean_pool2", input.shape(), &[0, 2, 2, 0]));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err("mean_pool2", input.shape(), &[b, 2, 2, c]));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; b * oh * ow * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let dst = ((n * oh + y) * ow + xx) * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = ((n * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += x[src + ch];
                        }
                    }
                }
                for v in &mut out[dst..dst + c] {
                    *v *= 0.25;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

pub(crate) fn mean_pool2_backward(in_shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * h * w * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((n * oh + y) * ow + xx) * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((n * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] = 0.25 * grad_out[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}
