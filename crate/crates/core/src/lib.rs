//! Bayesian compression of neural networks with group sparsity priors.
//!
//! Small networks are trained by stochastic variational inference under a
//! group normal-Jeffreys or group horseshoe prior. Whole neurons and filters
//! are then pruned by thresholding their scale posteriors, per-layer bit
//! widths are derived from posterior marginal variances, and the resulting
//! storage cost is accounted for under three scenarios.
//!
//! ```no_run
//! use bayescomp::{data, model::Architecture, pipeline, train, Prior};
//!
//! let (train_set, test_set) = data::load_mnist("data/mnist".as_ref())?;
//! let arch = Architecture::lenet_300_100();
//! let cfg = train::TrainConfig::default();
//! let (model, _log) = train::train(&cfg, &arch, Prior::Gnj, &train_set, &test_set, |_| {})?;
//! let report = pipeline::compress_model(&model, &test_set, &Default::default())?;
//! println!("{}", report.compression.rate_pruning);
//! # Ok::<(), bayescomp::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod compress;
pub mod data;
pub mod dists;
pub mod error;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod shrinkage;
pub mod special;
pub mod store;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use compress::CompressionReport;
pub use data::Dataset;
pub use error::{Error, Result};
pub use layers::{BayesLayer, LayerKind, Prior, Rng};
pub use model::{Architecture, Masks, Model};
pub use prune::PruneReport;
pub use quant::{QuantReport, RoundoffRule};
pub use store::ModelFile;
pub use tensor::{conv2d, mean_pool2, Padding, Tensor};
pub use train::{ElboBreakdown, TrainConfig};
