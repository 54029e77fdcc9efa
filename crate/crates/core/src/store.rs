//! The `BCMP` model container.
//!
//! Layout (all integers little-endian):
//!
//! | field        | type                                    |
//! |--------------|-----------------------------------------|
//! | magic        | `b"BCMP"`                               |
//! | version      | `u32`                                   |
//! | payload size | `u64`                                   |
//! | payload      | `payload size` bytes                    |
//! | checksum     | `u64`, CRC-64/XZ of the payload         |
//!
//! The payload holds the architecture string, the prior, then for each
//! parametric layer its kind and parameter tensors (rank, dims, `f64` data),
//! followed by optional masks, quantization metadata and configuration.
//! Strings and JSON blocks are `u32` length-prefixed UTF-8.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::layers::{BayesLayer, GhsScales, GnjScales, LayerKind, Prior, Scales};
use crate::model::{Architecture, Masks, Model};
use crate::quant::QuantReport;
use crate::tensor::{Padding, Tensor};

pub const MAGIC: [u8; 4] = *b"BCMP";
pub const VERSION: u32 = 1;
pub const DEFAULT_CAP: u64 = 1 << 30;
const HEADER: usize = 16;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub masks: Option<Masks>,
    pub quant: Option<QuantReport>,
    /// Resolved configuration of the run that produced the model, as JSON.
    pub config: Option<serde_json::Value>,
}

impl ModelFile {
    pub fn new(model: Model) -> Self {
        ModelFile {
            model,
            masks: None,
            quant: None,
            config: None,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(file: &ModelFile) -> Result<Vec<u8>> {
    file.model.validate()?;
    let mut w = Writer(Vec::new());
    w.bytes(file.model.arch.to_string().as_bytes());
    w.u8(match file.model.prior() {
        Prior::Gnj => 0,
        Prior::Ghs => 1,
    });
    w.u32(file.model.layers.len() as u32);
    for l in &file.model.layers {
        w.u8(match l.kind {
            LayerKind::Dense => 0,
            LayerKind::Conv {
                padding: Padding::Valid,
            } => 1,
            LayerKind::Conv { padding: Padding::Same } => 2,
        });
        let params = l.params();
        w.u32(params.len() as u32);
        for t in params {
            w.tensor(t);
        }
    }
    match &file.masks {
        Some(m) => {
            file.model.check_masks(m)?;
            w.u8(1);
            for layer in m {
                w.u64(layer.len() as u64);
                w.0.extend(layer.iter().map(|&b| u8::from(b)));
            }
        }
        None => w.u8(0),
    }
    for json in [
        file.quant.as_ref().map(serde_json::to_vec).transpose()?,
        file.config.as_ref().map(serde_json::to_vec).transpose()?,
    ] {
        match json {
            Some(j) => {
                w.u8(1);
                w.bytes(&j);
            }
            None => w.u8(0),
        }
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(payload.len() + HEADER + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&CRC64.checksum(&payload).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    cap: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    /// Reject a declared size before allocating for it.
    fn check(&self, declared: u64, what: &str) -> Result<usize> {
        if declared > self.cap {
            return Err(Error::TooLarge {
                declared,
                cap: self.cap,
            });
        }
        let left = (self.buf.len() - self.pos) as u64;
        if declared > left {
            return Err(Error::Truncated(format!(
                "{what}: {declared} bytes declared, {left} left"
            )));
        }
        Ok(declared as usize)
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)?;
        let n = self.check(u64::from(n), what)?;
        self.take(n, what)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = self.u64("tensor dim")?;
            numel = numel.checked_mul(d).ok_or(Error::TooLarge {
                declared: u64::MAX,
                cap: self.cap,
            })?;
            shape.push(d as usize);
        }
        let bytes = numel.checked_mul(8).ok_or(Error::TooLarge {
            declared: u64::MAX,
            cap: self.cap,
        })?;
        let n = self.check(bytes, "tensor data")?;
        let raw = self.take(n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(bytes: &[u8], cap: u64) -> Result<ModelFile> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
        });
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated("header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if declared > cap {
        return Err(Error::TooLarge { declared, cap });
    }
    let len = declared as usize;
    if bytes.len() < HEADER + len + 8 {
        return Err(Error::Truncated(format!(
            "payload of {len} bytes declared, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER..HEADER + len];
    let stored = u64::from_le_bytes(bytes[HEADER + len..HEADER + len + 8].try_into().expect("8 bytes"));
    let computed = CRC64.checksum(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if bytes.len() != HEADER + len + 8 {
        return Err(Error::Format("trailing bytes after checksum".into()));
    }

    let mut r = Reader {
        buf: payload,
        pos: 0,
        cap,
    };
    let arch_s = std::str::from_utf8(r.bytes("architecture")?).map_err(|e| Error::Format(e.to_string()))?;
    let arch: Architecture = arch_s.parse()?;
    let prior = match r.u8("prior")? {
        0 => Prior::Gnj,
        1 => Prior::Ghs,
        p => return Err(Error::Format(format!("unknown prior tag {p}"))),
    };
    let n_layers = r.u32("layer count")? as usize;
    if n_layers != arch.weight_shapes().len() {
        return Err(Error::Format(format!("{n_layers} layers for architecture {arch}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = match r.u8("layer kind")? {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv {
                padding: Padding::Valid,
            },
            2 => LayerKind::Conv { padding: Padding::Same },
            k => return Err(Error::Format(format!("unknown layer kind {k}"))),
        };
        let n = r.u32("parameter count")? as usize;
        let want = match prior {
            Prior::Gnj => 6,
            Prior::Ghs => 12,
        };
        if n != want {
            return Err(Error::Format(format!("{n} parameter blocks, expected {want}")));
        }
        let mut p: Vec<Tensor> = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
        let mut next = || p.remove(0);
        let (weight_mu, weight_log_sigma2, bias_mu, bias_log_sigma2) = (next(), next(), next(), next());
        let scales = match prior {
            Prior::Gnj => Scales::Gnj(GnjScales {
                mu: next(),
                log_sigma2: next(),
            }),
            Prior::Ghs => Scales::Ghs(GhsScales {
                alpha_mu: next(),
                alpha_log_sigma2: next(),
                beta_mu: next(),
                beta_log_sigma2: next(),
                sa_mu: next(),
                sa_log_sigma2: next(),
                sb_mu: next(),
                sb_log_sigma2: next(),
            }),
        };
        layers.push(BayesLayer {
            kind,
            weight_mu,
            weight_log_sigma2,
            bias_mu,
            bias_log_sigma2,
            scales,
        });
    }
    let model = Model { arch, layers };
    model.validate()?;
    let masks = match r.u8("mask flag")? {
        0 => None,
        1 => {
            let mut m = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let len = r.u64("mask length")?;
                let len = r.check(len, "mask")?;
                let raw = r.take(len, "mask")?;
                m.push(
                    raw.iter()
                        .map(|&b| match b {
                            0 => Ok(false),
                            1 => Ok(true),
                            _ => Err(Error::Format(format!("mask byte {b}"))),
                        })
                        .collect::<Result<Vec<bool>>>()?,
                );
            }
            model.check_masks(&m)?;
            Some(m)
        }
        f => return Err(Error::Format(format!("mask flag {f}"))),
    };
    let mut json = |what: &str| -> Result<Option<&[u8]>> {
        match r.u8(what)? {
            0 => Ok(None),
            1 => Ok(Some(r.bytes(what)?)),
            f => Err(Error::Format(format!("{what} flag {f}"))),
        }
    };
    let quant = json("quant")?.map(serde_json::from_slice).transpose()?;
    let config = json("config")?.map(serde_json::from_slice).transpose()?;
    if r.pos != payload.len() {
        return Err(Error::Format("unread bytes in payload".into()));
    }
    Ok(ModelFile {
        model,
        masks,
        quant,
        config,
    })
}

pub fn save(file: &ModelFile, path: &Path) -> Result<()> {
    fs::write(path, encode(file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelFile> {
    load_with_cap(path, DEFAULT_CAP)
}

pub fn load_with_cap(path: &Path, cap: u64) -> Result<ModelFile> {
    let size = fs::metadata(path)?.len();
    if size > cap.saturating_add(HEADER as u64 + 8) {
        return Err(Error::TooLarge { declared: size, cap });
    }
    decode(&fs::read(path)?, cap)
}
