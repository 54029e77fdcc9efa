//! Prune, quantize and account for a trained model in one pass.

use serde::{Deserialize, Serialize};

use crate::compress::{compression_report, ClusterConfig, CompressionReport};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::Model;
use crate::prune::{
    histograms, model_scores, prune, suggest_threshold, GroupScores, HistogramRow, PruneReport, Thresholds,
};
use crate::quant::{quantize, QuantReport, RoundoffRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressOptions {
    /// `None` uses the default threshold of the model's score kind.
    pub thresholds: Option<Thresholds>,
    pub roundoff_rule: RoundoffRule,
    pub clusters: ClusterConfig,
    pub eval_batch_size: usize,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions {
            thresholds: None,
            roundoff_rule: RoundoffRule::Std,
            clusters: ClusterConfig::default(),
            eval_batch_size: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub prune: PruneReport,
    pub quant: QuantReport,
    pub compression: CompressionReport,
    pub scores: GroupScores,
    pub histogram: Vec<HistogramRow>,
    /// Widest-gap threshold suggestion per layer.
    pub suggested_thresholds: Vec<Option<f64>>,
}

pub fn compress_model(model: &Model, test: &Dataset, opts: &CompressOptions) -> Result<PipelineReport> {
    let pr = prune(model, opts.thresholds.as_ref())?;
    let quant = quantize(model, &pr.masks, opts.roundoff_rule)?;
    let compact = model.compact(&pr.masks)?;
    let err = model.error_rate(&test.flat_inputs(), &test.labels, &pr.masks, opts.eval_batch_size)?;
    let compression = compression_report(&pr, &compact, &quant, err, opts.clusters)?;
    let scores = model_scores(model)?;
    let histogram = histograms(&scores);
    let suggested_thresholds = (0..scores.layers.len())
        .map(|l| {
            let rows: Vec<HistogramRow> = histogram.iter().filter(|r| r.layer == l).cloned().collect();
            suggest_threshold(&rows)
        })
        .collect();
    Ok(PipelineReport {
        prune: pr,
        quant,
        compression,
        scores,
        histogram,
        suggested_thresholds,
    })
}
