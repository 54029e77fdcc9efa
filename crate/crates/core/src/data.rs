//! Datasets: MNIST IDX files, rescaling and synthetic blobs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Inputs are `[N, D]` or `[N, H, W, C]`; labels lie in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Format(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Values per example.
    pub fn example_size(&self) -> usize {
        self.inputs.numel() / self.len().max(1)
    }

    /// The first `n` examples (or all, if fewer).
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let d = self.example_size();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n;
        Dataset {
            inputs: Tensor::new(shape, self.inputs.data()[..n * d].to_vec()).expect("consistent"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Gather rows into a flat `[len, D]` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.example_size();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let x = Tensor::new(vec![idx.len(), d], data).expect("consistent");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Flat `[N, D]` view of all inputs.
    pub fn flat_inputs(&self) -> Tensor {
        self.inputs
            .reshape(&[self.len(), self.example_size()])
            .expect("consistent")
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = read_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Raw IDX images: `(count, rows, cols, bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGES_MAGIC, "images")?;
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "images: expected {need} pixel bytes, found {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC, "labels")?;
    let n = read_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated(format!(
            "labels: expected {n} bytes, found {}",
            payload.len()
        )));
    }
    Ok(&payload[..n])
}

/// Load an IDX image/label pair as raw pixel values in `[0, 255]`, shaped
/// `[N, rows, cols, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let ib = fs::read(images_path)?;
    let lb = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib)?;
    let labels = parse_idx_labels(&lb)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let inputs = Tensor::new(vec![n, rows, cols, 1], pixels.iter().map(|&p| f64::from(p)).collect())?;
    let classes = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(1).max(10);
    Dataset::new(inputs, labels.iter().map(|&y| y as usize).collect(), classes, split)
}

/// Write an IDX pair; used for fixtures.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::CountMismatch {
            images: pixels.len() / (rows * cols).max(1),
            labels: n,
        });
    }
    let mut f = fs::File::create(images_path)?;
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    let mut f = fs::File::create(labels_path)?;
    for v in [LABELS_MAGIC, n as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(labels)?;
    Ok(())
}

/// Map byte intensities onto `[-1, 1]`.
pub fn rescale(mut ds: Dataset) -> Dataset {
    ds.inputs.data_mut().iter_mut().for_each(|x| *x = *x / 127.5 - 1.0);
    ds
}

pub const MNIST_FILES: [(&str, &str, Split); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test),
];

/// Load and rescale the MNIST train and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |(i, l, s): (&str, &str, Split)| -> Result<Dataset> {
        let (ip, lp) = (dir.join(i), dir.join(l));
        for p in [&ip, &lp] {
            if !p.exists() {
                return Err(Error::Config(format!("missing MNIST file {}", p.display())));
            }
        }
        Ok(rescale(load_idx(&ip, &lp, s)?))
    };
    Ok((load(MNIST_FILES[0])?, load(MNIST_FILES[1])?))
}

/// Default data directory: `$BCMP_DATA_DIR` or `./data/mnist`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("BCMP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Unit-variance Gaussian blobs. Class centers sit on the axes (or at
/// `±separation/2` on the first axis for two classes), so centers are
/// equidistant.
pub fn synth_blobs(n: usize, classes: usize, dim: usize, separation: f64, seed: u64, split: Split) -> Result<Dataset> {
    if classes == 0 || n < classes || dim == 0 {
        return Err(Error::Config(format!(
            "synth_blobs needs n >= classes >= 1 and dim >= 1 (n={n}, classes={classes}, dim={dim})"
        )));
    }
    if classes > 2 && classes > dim {
        return Err(Error::Config(format!(
            "{classes} equidistant centers need dim >= {classes}"
        )));
    }
    let center = |c: usize, j: usize| -> f64 {
        match classes {
            1 => 0.0,
            2 => {
                if j == 0 {
                    if c == 0 {
                        -0.5 * separation
                    } else {
                        0.5 * separation
                    }
                } else {
                    0.0
                }
            }
            // axis-aligned simplex vertices are √2·a apart
            _ => {
                if j == c {
                    separation / std::f64::consts::SQRT_2
                } else {
                    0.0
                }
            }
        }
    };
    let mut rng = Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for j in 0..dim {
            data.push(center(c, j) + rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_endpoints() {
        let ds = Dataset::new(
            Tensor::from_vec(vec![0.0, 127.5, 255.0]).reshape(&[3, 1]).unwrap(),
            vec![0; 3],
            1,
            Split::Train,
        )
        .unwrap();
        assert_eq!(rescale(ds).inputs.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn blobs_are_seeded() {
        let a = synth_blobs(100, 3, 4, 10.0, 5, Split::Train).unwrap();
        let b = synth_blobs(100, 3, 4, 10.0, 5, Split::Train).unwrap();
        assert_eq!(a, b);
        let one = synth_blobs(10, 1, 2, 10.0, 5, Split::Train).unwrap();
        assert!(one.labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn magic_and_truncation() {
        let mut bytes = vec![0, 0, 8, 2];
        bytes.extend_from_slice(&[0; 12]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::BadMagic { found: 0x802, .. })
        ));
        let mut ok = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        ok.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(parse_idx_images(&ok), Err(Error::Truncated(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Truncated(_))));
    }
}
