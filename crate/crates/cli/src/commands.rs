use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use calibkit_core::data::{load_records, write_records};
use calibkit_core::features::{build_feature_matrix, read_feature_csv, write_feature_csv};
use calibkit_core::gbm::{feature_importance, write_importance_csv};
use calibkit_core::metrics::{evaluate, write_reliability_csv, write_roc_csv, DEFAULT_BINS};
use calibkit_core::model::{
    fit_calibrator, identity_probs, labels_for, predict, CalibrationData, FitOptions, Method, ScoreTarget,
};
use calibkit_core::split::{split_indices, SplitPart, DEFAULT_FIT_FRACTION};
use calibkit_core::synth::{gen_flow_signal, gen_miscalibrated, FlowSignalConfig, MiscalibratedConfig};
use calibkit_core::{CalibratorModel, Error, FeatureConfig, FeatureSet, GbmConfig, HeadMode, Result, DEFAULT_TOP_K};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "calibkit", version, about = "Post-hoc confidence calibration for top-k answer rankers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic ranked records.
    Synth(SynthArgs),
    /// Turn ranked records into a feature table.
    Extract(ExtractArgs),
    /// Fit a calibrator and write it as JSON.
    Fit(FitArgs),
    /// Evaluate a calibrator: summary JSON, reliability and ROC tables.
    Eval(EvalArgs),
    /// Dump split-count feature importances of a gbm model.
    Importance(ImportanceArgs),
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Overconfident scores sharpened by a known temperature.
    Miscalibrated,
    /// Attention flows whose entropy carries label signal.
    FlowSignal,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "miscalibrated")]
    kind: SynthKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Sharpening factor applied to the latent logits (miscalibrated).
    #[arg(long, default_value_t = 1.0)]
    sharpen: f64,
    /// Probability that a flow's shape follows correctness (flow-signal).
    #[arg(long, default_value_t = 0.7)]
    signal_strength: f64,
    /// Layers per attention record [default: 4 miscalibrated, 12 flow-signal].
    #[arg(long)]
    layers: Option<usize>,
    /// Heads per layer [default: 2 miscalibrated, 4 flow-signal].
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 1.4)]
    latent_scale: f64,
    /// Noise between latent logits and reported scores (flow-signal).
    #[arg(long, default_value_t = 1.0)]
    score_noise: f64,
    /// Latent answer classes (flow-signal).
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeatureArgs {
    /// `mean` or `head:N`.
    #[arg(long, default_value = "mean", value_parser = parse_with::<HeadMode>)]
    head_mode: HeadMode,
    /// `full` or `base` (flow entropy and deltas removed).
    #[arg(long, default_value = "full", value_parser = parse_with::<FeatureSet>)]
    feature_set: FeatureSet,
}

impl FeatureArgs {
    fn config(&self) -> FeatureConfig {
        FeatureConfig {
            head_mode: self.head_mode,
            feature_set: self.feature_set,
        }
    }
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputFormat {
    /// `.csv` is a feature table, anything else ranked records.
    Auto,
    Records,
    Features,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Ranked records (NDJSON) or a feature table (CSV).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: InputFormat,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Seed of the fit/eval partition.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// `topk` or `rank:J`.
    #[arg(long, default_value = "topk", value_parser = parse_with::<ScoreTarget>)]
    target: ScoreTarget,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_with::<Method>)]
    method: Method,
    /// Partition to fit on: `fit`, `eval` or `all`.
    #[arg(long, default_value = "fit", value_parser = parse_with::<SplitPart>)]
    split: SplitPart,
    #[command(flatten)]
    gbm: GbmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GbmArgs {
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    min_child_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    subsample: f64,
    #[arg(long, default_value_t = 1.0)]
    colsample: f64,
    /// Seed for row and column subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GbmArgs {
    fn config(&self) -> GbmConfig {
        GbmConfig {
            num_rounds: self.rounds,
            max_depth: self.max_depth,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            gamma: self.gamma,
            min_child_weight: self.min_child_weight,
            subsample: self.subsample,
            colsample: self.colsample,
            early_stopping_rounds: None,
            rng_seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model JSON, or `identity` for the raw target score.
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "eval", value_parser = parse_with::<SplitPart>)]
    split: SplitPart,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Summary JSON path; the summary is also printed to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Reliability table `bin_lo,bin_hi,count,conf,acc`.
    #[arg(long)]
    reliability: Option<PathBuf>,
    /// ROC table `threshold,fpr,tpr`.
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Importance(a) => importance(a),
    }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut out = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut out)?;
        out.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let (records, config) = match a.kind {
        SynthKind::Miscalibrated => {
            let cfg = MiscalibratedConfig {
                n: a.n,
                k: a.k,
                sharpen: a.sharpen,
                seed: a.seed,
                latent_scale: a.latent_scale,
                num_layers: a.layers.unwrap_or(4),
                num_heads: a.heads.unwrap_or(2),
            };
            (gen_miscalibrated(&cfg)?, json!({"kind": "miscalibrated", "config": cfg}))
        }
        SynthKind::FlowSignal => {
            let cfg = FlowSignalConfig {
                n: a.n,
                k: a.k,
                num_layers: a.layers.unwrap_or(12),
                num_heads: a.heads.unwrap_or(4),
                signal_strength: a.signal_strength,
                seed: a.seed,
                num_classes: a.classes,
                latent_scale: a.latent_scale,
                score_noise: a.score_noise,
            };
            (gen_flow_signal(&cfg)?, json!({"kind": "flow-signal", "config": cfg}))
        }
    };
    write_atomic(&a.out, |out| write_records(out, &records))?;
    print_json(&config)
}

fn load_ranked(path: &Path, k: usize) -> Result<Vec<calibkit_core::RankedQueryRecord>> {
    let loaded = load_records(path, k)?;
    if loaded.resorted > 0 {
        eprintln!(
            "warning: {} record(s) had candidates out of score order and were re-sorted",
            loaded.resorted
        );
    }
    Ok(loaded.records)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let records = load_ranked(&a.input, a.k)?;
    let matrix = build_feature_matrix(&records, &a.features.config())?;
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    write_atomic(&a.out, |out| write_feature_csv(out, &matrix, &labels))
}

fn load_data(a: &DataArgs) -> Result<CalibrationData> {
    let is_csv = match a.format {
        InputFormat::Records => false,
        InputFormat::Features => true,
        InputFormat::Auto => a
            .input
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv")),
    };
    if is_csv {
        let (matrix, labels) = read_feature_csv(BufReader::new(File::open(&a.input)?))?;
        Ok(CalibrationData::Features { matrix, labels })
    } else {
        Ok(CalibrationData::Records(load_ranked(&a.input, a.k)?))
    }
}

fn partition(data: &CalibrationData, part: SplitPart, seed: u64) -> Result<CalibrationData> {
    let rows = split_indices(&data.split_keys(), seed, part, DEFAULT_FIT_FRACTION);
    if rows.is_empty() {
        return Err(Error::Degenerate(format!("the `{part}` partition is empty")));
    }
    Ok(data.select(&rows))
}

fn fit(a: FitArgs) -> Result<()> {
    let data = partition(&load_data(&a.data)?, a.split, a.data.split_seed)?;
    let opts = FitOptions {
        features: a.data.features.config(),
        gbm: a.gbm.config(),
    };
    let outcome = fit_calibrator(a.method, &data, a.data.target, &opts)?;
    for w in &outcome.summary.warnings {
        eprintln!("warning: {w}");
    }
    let text = outcome.model.to_json()?;
    write_atomic(&a.out, |out| Ok(out.write_all(text.as_bytes())?))?;
    print_json(&outcome.summary)
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = partition(&load_data(&a.data)?, a.split, a.data.split_seed)?;
    let target = a.data.target;
    let (probs, labels) = if a.model == "identity" {
        identity_probs(&data, target)?
    } else {
        let model = CalibratorModel::load(&a.model)?;
        let labels = labels_for(&model, &data, target)?;
        (predict(&model, &data, target, &a.data.features.config())?, labels)
    };
    let ev = evaluate(&probs, &labels, a.bins)?;
    if let Some(path) = &a.report {
        let mut text = serde_json::to_string_pretty(&ev.report)?;
        text.push('\n');
        write_atomic(path, |out| Ok(out.write_all(text.as_bytes())?))?;
    }
    if let Some(path) = &a.reliability {
        write_atomic(path, |out| write_reliability_csv(out, &ev.reliability))?;
    }
    if let Some(path) = &a.roc {
        write_atomic(path, |out| write_roc_csv(out, &ev.roc))?;
    }
    print_json(&ev.report)
}

fn importance(a: ImportanceArgs) -> Result<()> {
    let model = CalibratorModel::load(&a.model)?;
    let CalibratorModel::Gbm(gbm) = model else {
        return Err(Error::Incompatible(format!(
            "importances need a gbm model, got {}",
            model.method()
        )));
    };
    let ranked = feature_importance(&gbm);
    write_atomic(&a.out, |out| write_importance_csv(out, &ranked))
}
