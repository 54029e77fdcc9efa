use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bayescomp::compress::ClusterConfig;
use bayescomp::data::{self, Dataset, Split};
use bayescomp::pipeline::{compress_model, CompressOptions};
use bayescomp::prune::{self, Thresholds};
use bayescomp::quant::{self, RoundoffRule};
use bayescomp::shrinkage;
use bayescomp::store::{self, ModelFile};
use bayescomp::train::{self, default_std_ceilings, TrainConfig};
use bayescomp::{Architecture, Prior};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "bayescomp",
    version,
    about = "Train, prune, quantize and account for Bayesian-compressed networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write it with its epoch log.
    Train(TrainArgs),
    /// Threshold group scores and store the masks in the model file.
    Prune(PruneArgs),
    /// Assign per-layer bit widths from posterior marginal variances.
    Quantize(QuantArgs),
    /// Prune, quantize and write compression, quantization and histogram reports.
    Compress(CompressArgs),
    /// Summarize a model file.
    Report(ModelArg),
    /// Compare shrinkage coefficients of half-Cauchy scales with Beta laws.
    AnalyzeShrinkage(ShrinkArgs),
    /// Write group-score histograms as CSV.
    ExportHistograms(HistArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the MNIST IDX files [env: BCMP_DATA_DIR, default: data/mnist].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
#[command(rename_all = "kebab-case")]
struct TrainArgs {
    /// JSON file with any of the run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prior: Option<Prior>,
    /// Input and hidden layers, e.g. `784-300-100` or `28x28x1-c5x20-p-c5x50-p-500`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau0: Option<f64>,
    /// Per-layer std ceilings, comma separated; `none` leaves a layer free.
    #[arg(long)]
    std_ceilings: Option<String>,
    /// `mnist` or `blobs`.
    #[arg(long)]
    dataset: Option<String>,
    /// Train on the first N examples only.
    #[arg(long)]
    subset: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "model.bcmp")]
    out: PathBuf,
    /// Also write the epoch log (JSON lines) here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
#[command(rename_all = "kebab-case")]
struct ThresholdArgs {
    /// One threshold for all layers; groups scoring at or above it are pruned.
    #[arg(long, conflicts_with = "thresholds", allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Per-layer thresholds, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    thresholds: Option<String>,
}

impl ThresholdArgs {
    fn resolve(&self) -> Result<Option<Thresholds>> {
        Ok(match (&self.threshold, &self.thresholds) {
            (Some(t), _) => Some(Thresholds::Global(*t)),
            (None, Some(s)) => Some(Thresholds::PerLayer(parse_list(s)?)),
            (None, None) => None,
        })
    }
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Output model file with masks [default: overwrite --model].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(rename_all = "kebab-case")]
struct QuantArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value = "std")]
    roundoff_rule: RoundoffRule,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(rename_all = "kebab-case")]
struct CompressArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, default_value = "std")]
    roundoff_rule: RoundoffRule,
    /// Codebook size for the clustered scenario.
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    #[command(flatten)]
    data: DataArgs,
    /// Directory for compression.json, quant.json, prune.json and the histogram CSV.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ShrinkArgs {
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything a training run depends on; embedded in the model file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    prior: Prior,
    arch: String,
    subset: Option<usize>,
    data_dir: Option<PathBuf>,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prior: Prior::Gnj,
            arch: "784-300-100".into(),
            subset: None,
            data_dir: None,
            train: TrainConfig::default(),
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect()
}

fn data_dir(flag: Option<&Path>, stored: Option<&Path>) -> PathBuf {
    flag.or(stored)
        .map(Path::to_path_buf)
        .unwrap_or_else(data::default_data_dir)
}

/// Load the named dataset as `(train, test)`.
fn load_data(cfg: &RunConfig, dir: &Path, input_size: usize) -> Result<(Dataset, Dataset)> {
    let (tr, te) = match cfg.train.dataset.as_str() {
        "mnist" => data::load_mnist(dir).with_context(|| {
            format!(
                "cannot load MNIST from {} (set --data-dir or BCMP_DATA_DIR)",
                dir.display()
            )
        })?,
        "blobs" => {
            let n = cfg.subset.unwrap_or(2000);
            (
                data::synth_blobs(n, 2, input_size, 10.0, cfg.train.seed, Split::Train)?,
                data::synth_blobs(
                    n.div_ceil(4).max(2),
                    2,
                    input_size,
                    10.0,
                    cfg.train.seed ^ 0x5eed,
                    Split::Test,
                )?,
            )
        }
        other => bail!("unknown dataset {other:?} (expected mnist or blobs)"),
    };
    Ok(match cfg.subset {
        Some(n) => (tr.subset(n), te),
        None => (tr, te),
    })
}

fn echo_config<T: Serialize>(cfg: &T) -> Result<()> {
    println!("{}", serde_json::json!({ "config": cfg }));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelFile> {
    store::load(path).with_context(|| format!("loading {}", path.display()))
}

fn stored_run(file: &ModelFile) -> RunConfig {
    file.config
        .as_ref()
        .and_then(|c| c.get("run").cloned())
        .and_then(|c| serde_json::from_value(c).ok())
        .unwrap_or_default()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.prior {
        cfg.prior = v;
    }
    if let Some(v) = a.arch {
        cfg.arch = v;
    }
    if let Some(v) = a.subset {
        cfg.subset = Some(v);
    }
    if let Some(v) = a.data.data_dir {
        cfg.data_dir = Some(v);
    }
    let t = &mut cfg.train;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { t.$f = v; } )* };
    }
    set!(epochs, batch_size, warmup_epochs, learning_rate, seed, tau0, dataset);
    if a.config.is_none() && a.warmup_epochs.is_none() {
        // default warm-up is a fifth of the run
        t.warmup_epochs = t.epochs / 5;
    }
    let classes = 10;
    let blobs = t.dataset == "blobs";
    let arch = Architecture::with_output(&cfg.arch, if blobs { 2 } else { classes })?;
    if let Some(s) = &a.std_ceilings {
        t.std_ceilings = s
            .split(',')
            .map(|v| match v.trim() {
                "none" | "" => Ok(None),
                x => x.parse().map(Some).with_context(|| format!("bad ceiling {x:?}")),
            })
            .collect::<Result<_>>()?;
    } else if t.std_ceilings.is_empty() {
        t.std_ceilings = default_std_ceilings(&arch);
    }
    t.validate()?;
    echo_config(&cfg)?;

    let dir = data_dir(cfg.data_dir.as_deref(), None);
    let (tr, te) = load_data(&cfg, &dir, arch.input.numel())?;
    let mut log_file = match &a.log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut io_err = None;
    let (model, _) = train::train(&cfg.train, &arch, cfg.prior, &tr, &te, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing epoch log");
    }
    let mut file = ModelFile::new(model);
    file.config = Some(serde_json::json!({ "run": cfg }));
    store::save(&file, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let mut file = load_model(&a.model.model)?;
    let th = a.thresholds.resolve()?;
    echo_config(&serde_json::json!({ "model": a.model.model, "thresholds": th }))?;
    let report = prune::prune(&file.model, th.as_ref())?;
    println!("{}", serde_json::to_string(&report)?);
    file.masks = Some(report.masks);
    let out = a.out.unwrap_or(a.model.model);
    store::save(&file, &out)?;
    eprintln!("architecture {}; wrote {}", report.architecture, out.display());
    Ok(())
}

fn cmd_quantize(a: QuantArgs) -> Result<()> {
    let mut file = load_model(&a.model.model)?;
    echo_config(&serde_json::json!({ "model": a.model.model, "roundoff_rule": a.roundoff_rule }))?;
    let masks = match &file.masks {
        Some(m) => m.clone(),
        None => prune::prune(&file.model, None)?.masks,
    };
    let report = quant::quantize(&file.model, &masks, a.roundoff_rule)?;
    for row in &report.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    file.masks = Some(masks);
    file.quant = Some(report);
    let out = a.out.unwrap_or(a.model.model);
    store::save(&file, &out)?;
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let file = load_model(&a.model.model)?;
    let run = stored_run(&file);
    let opts = CompressOptions {
        thresholds: a.thresholds.resolve()?,
        roundoff_rule: a.roundoff_rule,
        clusters: ClusterConfig {
            k: a.clusters,
            ..Default::default()
        },
        ..Default::default()
    };
    let resolved = serde_json::json!({ "model": a.model.model, "options": opts, "run": run });
    echo_config(&resolved)?;
    let dir = data_dir(a.data.data_dir.as_deref(), run.data_dir.as_deref());
    let (_, test) = load_data(&run, &dir, file.model.arch.input.numel())?;
    let rep = compress_model(&file.model, &test, &opts)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut compression = serde_json::to_value(&rep.compression)?;
    compression["config"] = resolved.clone();
    write_json(&a.out_dir.join("compression.json"), &compression)?;
    write_json(
        &a.out_dir.join("quant.json"),
        &serde_json::json!({ "rows": rep.quant.rows, "config": resolved }),
    )?;
    write_json(
        &a.out_dir.join("prune.json"),
        &serde_json::json!({ "report": rep.prune, "suggested_thresholds": rep.suggested_thresholds, "config": resolved }),
    )?;
    let kind = rep.scores.kind.name();
    fs::write(
        a.out_dir.join(format!("histogram_{kind}.csv")),
        prune::histogram_csv(&rep.histogram),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "sparsity_pct": rep.compression.sparsity_pct,
            "rate_pruning": rep.compression.rate_pruning,
            "rate_fast": rep.compression.rate_fast,
            "rate_max": rep.compression.rate_max,
            "error_pct": rep.compression.error_pct,
            "architecture": rep.compression.architecture,
            "bits": rep.quant.bits(),
        })
    );
    for w in &rep.compression.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_report(a: ModelArg) -> Result<()> {
    let file = load_model(&a.model)?;
    let run = stored_run(&file);
    let (kl_w, kl_z) = train::model_kl(&file.model, run.train.tau0)?;
    let pr = match &file.masks {
        Some(m) => prune::cascade(&file.model, m)?,
        None => prune::prune(&file.model, None)?,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "architecture": file.model.arch.to_string(),
            "prior": file.model.prior(),
            "groups": file.model.group_counts(),
            "retained": pr.architecture,
            "masks_stored": file.masks.is_some(),
            "kl_weights": kl_w,
            "kl_scales": kl_z,
            "quant": file.quant,
            "config": file.config,
        }))?
    );
    Ok(())
}

fn cmd_analyze_shrinkage(a: ShrinkArgs) -> Result<()> {
    echo_config(&serde_json::json!({ "samples": a.samples, "seed": a.seed, "bins": a.bins }))?;
    if a.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let (summary, hs, nj) = shrinkage::analyze(a.samples, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(
        a.out_dir.join("shrinkage_horseshoe.csv"),
        shrinkage::density_csv(&shrinkage::density_table(&hs, a.bins, 0.5, 0.5)),
    )?;
    fs::write(
        a.out_dir.join("shrinkage_nj.csv"),
        shrinkage::density_csv(&shrinkage::density_table(
            &nj,
            a.bins,
            summary.nj_epsilon,
            summary.nj_epsilon,
        )),
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_export_histograms(a: HistArgs) -> Result<()> {
    let file = load_model(&a.model.model)?;
    let scores = prune::model_scores(&file.model)?;
    let rows = prune::histograms(&scores);
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from(format!("histogram_{}.csv", scores.kind.name())));
    fs::write(&out, prune::histogram_csv(&rows))?;
    for l in 0..scores.layers.len() {
        let layer_rows: Vec<_> = rows.iter().filter(|r| r.layer == l).cloned().collect();
        println!(
            "{}",
            serde_json::json!({ "layer": l, "suggested_threshold": prune::suggest_threshold(&layer_rows) })
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let model_path = match &cli.cmd {
        Cmd::Prune(a) => Some(a.model.model.clone()),
        Cmd::Quantize(a) => Some(a.model.model.clone()),
        Cmd::Compress(a) => Some(a.model.model.clone()),
        Cmd::Report(a) => Some(a.model.clone()),
        Cmd::ExportHistograms(a) => Some(a.model.model.clone()),
        _ => None,
    };
    if let Some(p) = model_path {
        if !p.exists() {
            eprintln!("error: model file {} not found", p.display());
            return ExitCode::from(2);
        }
    }
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Compress(a) => cmd_compress(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::AnalyzeShrinkage(a) => cmd_analyze_shrinkage(a),
        Cmd::ExportHistograms(a) => cmd_export_histograms(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
