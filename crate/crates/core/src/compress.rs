//! Storage accounting for pruned, reduced-precision and clustered models.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Rng;
use crate::model::CompactModel;
use crate::prune::PruneReport;
use crate::quant::QuantReport;
use crate::tensor::Tensor;

pub const FULL_BITS: u64 = 32;
/// Bits charged per weight-shape dimension of every layer.
pub const METADATA_BITS_PER_DIM: u64 = 32;
pub const DEFAULT_CLUSTERS: usize = 32;
pub const DEFAULT_CSC_INDEX_BITS: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_index: Vec<usize>,
    pub col_ptr: Vec<usize>,
    pub index_bits: u32,
    pub value_bits: u32,
}

impl CscMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn bits(&self) -> u64 {
        self.nnz() as u64 * u64::from(self.value_bits + self.index_bits)
            + (self.cols as u64 + 1) * u64::from(self.index_bits)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for c in 0..self.cols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                t.data_mut()[self.row_index[k] * self.cols + c] = self.values[k];
            }
        }
        t
    }
}

pub fn csc_encode(m: &Tensor, index_bits: u32, value_bits: u32) -> Result<CscMatrix> {
    let &[rows, cols] = m.shape() else {
        return Err(crate::error::dim_err("csc_encode", &[0, 0], m.shape()));
    };
    if index_bits < 64 && (rows as u128) > (1u128 << index_bits) {
        return Err(Error::Config(format!(
            "{rows} rows do not fit {index_bits}-bit indices"
        )));
    }
    let mut values = Vec::new();
    let mut row_index = Vec::new();
    let mut col_ptr = Vec::with_capacity(cols + 1);
    col_ptr.push(0);
    for c in 0..cols {
        for r in 0..rows {
            let v = m.data()[r * cols + c];
            if v != 0.0 {
                values.push(v);
                row_index.push(r);
            }
        }
        col_ptr.push(values.len());
    }
    Ok(CscMatrix {
        rows,
        cols,
        values,
        row_index,
        col_ptr,
        index_bits,
        value_bits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    /// Sorted ascending.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared errors after each Lloyd iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl KMeans {
    pub fn index_bits(&self) -> u32 {
        ceil_log2(self.centroids.len())
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.assignments.iter().map(|&a| self.centroids[a]).collect()
    }
}

pub fn ceil_log2(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

fn nearest(sorted: &[f64], v: f64) -> usize {
    let i = sorted.partition_point(|&c| c < v);
    if i == 0 {
        0
    } else if i == sorted.len() || v - sorted[i - 1] <= sorted[i] - v {
        i - 1
    } else {
        i
    }
}

fn sse(values: &[f64], centroids: &[f64], assign: &[usize]) -> f64 {
    values
        .iter()
        .zip(assign)
        .map(|(v, &a)| (v - centroids[a]).powi(2))
        .sum()
}

/// Lloyd's algorithm in one dimension with k-means++ seeding.
/// `k` is reduced to the number of distinct values.
pub fn kmeans_1d(values: &[f64], k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    if values.is_empty() || k == 0 {
        return Err(Error::Contract("kmeans_1d needs values and k >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            layer: None,
            detail: "kmeans_1d input".into(),
        });
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= k {
        let assignments = values.iter().map(|&v| nearest(&distinct, v)).collect();
        return Ok(KMeans {
            centroids: distinct,
            assignments,
            objective: vec![0.0],
            converged: true,
        });
    }

    let mut rng = Rng::seed_from_u64(seed);
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let c = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = values.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            values[pick]
        } else {
            break;
        };
        centroids.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);
    centroids.dedup();

    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
    let mut objective = vec![sse(values, &centroids, &assign)];
    let mut converged = false;
    for _ in 0..max_iters {
        let mut sum = vec![0.0; centroids.len()];
        let mut cnt = vec![0usize; centroids.len()];
        for (v, &a) in values.iter().zip(&assign) {
            sum[a] += v;
            cnt[a] += 1;
        }
        let mut next: Vec<f64> = centroids
            .iter()
            .zip(sum.iter().zip(&cnt))
            .map(|(&c, (&s, &n))| if n > 0 { s / n as f64 } else { c })
            .collect();
        next.sort_by(f64::total_cmp);
        let new_assign: Vec<usize> = values.iter().map(|&v| nearest(&next, v)).collect();
        let obj = sse(values, &next, &new_assign);
        let prev = *objective.last().expect("nonempty");
        if obj > prev {
            // numerical noise only; keep the better solution
            converged = true;
            break;
        }
        let done = new_assign == assign && next == centroids;
        centroids = next;
        assign = new_assign;
        objective.push(obj);
        if done {
            converged = true;
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments: assign,
        objective,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAccounting {
    pub layer: usize,
    pub original_bits: u64,
    pub bits_pruning: u64,
    pub bits_fast: u64,
    pub bits_max: u64,
    pub weight_bits: u32,
    pub clusters: usize,
    pub index_bits: u32,
    pub kmeans_converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Retained weights as a percentage of all weights.
    pub sparsity_pct: f64,
    pub rate_pruning: f64,
    pub rate_fast: f64,
    pub rate_max: f64,
    /// Deterministic test error of the pruned model, in percent.
    pub error_pct: f64,
    pub original_bits: u64,
    pub bits_pruning: u64,
    pub bits_fast: u64,
    pub bits_max: u64,
    pub architecture: String,
    pub layers: Vec<LayerAccounting>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: DEFAULT_CLUSTERS,
            max_iters: 300,
            seed: 0,
        }
    }
}

/// Account for the three storage scenarios: pruning only; pruning with
/// per-layer weight bit widths; pruning with clustered weights stored as
/// codebook indices. Biases and metadata are counted at full precision in
/// every scenario and in the original model.
pub fn compression_report(
    prune: &PruneReport,
    compact: &CompactModel,
    quant: &QuantReport,
    error_rate: f64,
    clusters: ClusterConfig,
) -> Result<CompressionReport> {
    if prune.layers.len() != compact.layers.len() || quant.rows.len() != compact.layers.len() {
        return Err(Error::Contract("reports describe different numbers of layers".into()));
    }
    let mut layers = Vec::with_capacity(compact.layers.len());
    let mut warnings = Vec::new();
    for ((p, c), q) in prune.layers.iter().zip(&compact.layers).zip(&quant.rows) {
        let meta = METADATA_BITS_PER_DIM * p.retained_shape.len() as u64;
        let original = FULL_BITS * (p.original_weights + p.original_biases) as u64 + meta;
        let biases = FULL_BITS * p.retained_biases as u64;
        let w = p.retained_weights as u64;
        let bits_pruning = FULL_BITS * w + biases + meta;
        let bits_fast = u64::from(q.total_bits) * w + biases + meta;
        let (bits_max, clusters_used, index_bits, ok) = if w == 0 {
            (biases + meta, 0, 0, true)
        } else {
            let km = kmeans_1d(c.weights.data(), clusters.k, clusters.max_iters, clusters.seed)?;
            if !km.converged {
                warnings.push(format!(
                    "layer {}: k-means stopped after {} iterations",
                    p.layer, clusters.max_iters
                ));
            }
            let ib = km.index_bits();
            let k = km.centroids.len();
            (
                u64::from(ib) * w + FULL_BITS * k as u64 + biases + meta,
                k,
                ib,
                km.converged,
            )
        };
        if q.clamped {
            warnings.push(format!("layer {}: unit roundoff >= 1, mantissa clamped", p.layer));
        }
        layers.push(LayerAccounting {
            layer: p.layer,
            original_bits: original,
            bits_pruning,
            bits_fast,
            bits_max,
            weight_bits: q.total_bits,
            clusters: clusters_used,
            index_bits,
            kmeans_converged: ok,
        });
    }
    let sum = |f: fn(&LayerAccounting) -> u64| layers.iter().map(f).sum::<u64>();
    let original_bits = sum(|l| l.original_bits);
    let (bp, bf, bm) = (sum(|l| l.bits_pruning), sum(|l| l.bits_fast), sum(|l| l.bits_max));
    let rate = |b: u64| {
        if b == 0 {
            f64::INFINITY
        } else {
            original_bits as f64 / b as f64
        }
    };
    let total_w = prune.original_weights();
    Ok(CompressionReport {
        sparsity_pct: if total_w == 0 {
            0.0
        } else {
            100.0 * prune.retained_weights() as f64 / total_w as f64
        },
        rate_pruning: rate(bp),
        rate_fast: rate(bf),
        rate_max: rate(bm),
        error_pct: 100.0 * error_rate,
        original_bits,
        bits_pruning: bp,
        bits_fast: bf,
        bits_max: bm,
        architecture: prune.architecture.clone(),
        layers,
        warnings,
    })
}
