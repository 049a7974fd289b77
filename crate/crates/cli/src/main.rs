//! `enscal` command-line front end.
//!
//! Exit codes: 0 success, 2 input, format or parameter error, 3 validation
//! or shape error, 4 verification failure. JSON and CSV payloads go to
//! stdout (or `--output`); diagnostics go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use enscal::ensemble::{
    calibrate_post, calibrate_pre, combine, fit_weights_auc, fit_weights_max_ll, post_logits, CombinationWeights,
    MaxLlOptions,
};
use enscal::io::{self, Format, Kind, PredictionData};
use enscal::metrics::{reliability, Bandwidth, MetricReport, ReportOptions, SkceOptions, Targets};
use enscal::scaling::{fit_dynamic, fit_temperature, scale, FitConfig, Optimizer, RegionBoundaries, TemperatureModel};
use enscal::synth::{self, SynthesisConfig, VerifyOptions};
use enscal::{BinningScheme, Ensemble, EnsemblePredictions, LabeledPredictionSet, LogitEnsemble, LogitSet, SampleSet};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug)]
enum CliError {
    Lib(enscal::Error),
    Json(serde_json::Error),
    Usage(String),
    Verification,
}

impl From<enscal::Error> for CliError {
    fn from(e: enscal::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if !e.is_format_error() => 3,
            CliError::Verification => 4,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e} [{}]", e.code()),
            CliError::Json(e) => write!(f, "invalid JSON: {e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Verification => write!(f, "verification failed"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "enscal",
    version,
    about = "Calibration metrics, temperature scaling and ensemble combination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Metric report for one prediction set (several members are averaged).
    Metrics(MetricsArgs),
    /// Fit a temperature model by minimising ECE.
    Fit(FitArgs),
    /// Combine members, optionally calibrating before or after.
    Combine(CombineArgs),
    /// Generate synthetic datasets.
    Synth(SynthArgs),
    /// Check the ensemble calibration propositions on data.
    Verify(VerifyArgs),
    /// Reliability curve as CSV.
    Reliability(ReliabilityArgs),
    /// ACE and ECE across bin counts as CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Inputs {
    /// Prediction files; `.csv` is read as CSV, anything else as binary.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct Binning {
    /// Number of equal-width bins.
    #[arg(long, default_value_t = 15)]
    bins: usize,
    /// Use exact-value regions instead of bins.
    #[arg(long)]
    exact: bool,
}

impl Binning {
    fn scheme(self) -> Result<BinningScheme> {
        if self.exact {
            Ok(BinningScheme::ExactValue)
        } else {
            Ok(BinningScheme::fixed(self.bins)?)
        }
    }
}

#[derive(Args)]
struct MetricsArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    binning: Binning,
    /// Also compute the kernel calibration error.
    #[arg(long)]
    skce: bool,
    /// `auto` for the median heuristic, or a positive number.
    #[arg(long, default_value = "auto")]
    bandwidth: String,
    /// Row cap for the kernel estimator; 0 uses every row.
    #[arg(long, default_value_t = enscal::metrics::SKCE_MAX_ROWS)]
    skce_max_rows: usize,
    /// Emit a one-row CSV instead of JSON.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum FitMode {
    Global,
    Dynamic,
    PerMember,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum OptimizerArg {
    Grid,
    Sgd,
}

#[derive(Args)]
struct FitArgs {
    /// Logit files. With several members, global and dynamic modes fit the
    /// log of the weighted combination.
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value = "global")]
    mode: FitMode,
    #[arg(long, default_value_t = 6)]
    regions: usize,
    #[arg(long, value_enum, default_value = "grid")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 400)]
    iterations: usize,
    #[command(flatten)]
    binning: Binning,
    /// Combination weights for ensemble fits: uniform, maxll, auc or a JSON file.
    #[arg(long, default_value = "uniform")]
    weights: String,
    /// Where to write the bare model JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Calibration {
    None,
    Pre,
    Post,
    Dyn,
}

#[derive(Args)]
struct CombineArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// uniform, maxll, auc, or a JSON file holding an array of weights.
    #[arg(long, default_value = "uniform")]
    weights: String,
    #[arg(long, value_enum, default_value = "none")]
    calibrate: Calibration,
    /// Temperature model JSON, as written by `fit`.
    #[arg(long)]
    temp_model: Option<PathBuf>,
    #[command(flatten)]
    binning: Binning,
    /// Where to write the combined predictions.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Algorithm {
    Alg1,
    Alg2,
    Example1,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    algorithm: Algorithm,
    #[arg(long, default_value_t = 2)]
    b: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated proposition numbers.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    props: Vec<u8>,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// True posterior rows to measure gaps against instead of the labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "uniform")]
    weights: String,
}

#[derive(Args)]
struct ReliabilityArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated bin counts; `exact` adds exact-value regions.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10,15,20,50,100")]
    bins: Vec<String>,
    /// True posterior rows to measure gaps against instead of the labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "uniform")]
    weights: String,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load_all(paths: &[PathBuf]) -> Result<PredictionData> {
    let mut merged: Option<PredictionData> = None;
    for path in paths {
        let data = io::load(path, Format::from_path(path))?;
        match &mut merged {
            None => merged = Some(data),
            Some(m) => {
                if m.kind != data.kind {
                    return Err(enscal::Error::Shape("inputs mix probabilities and logits".into()).into());
                }
                if m.labels != data.labels {
                    return Err(enscal::Error::Shape(format!("{} has different labels", path.display())).into());
                }
                m.members.extend(data.members);
            }
        }
    }
    Ok(merged.expect("at least one input"))
}

fn load_predictions(paths: &[PathBuf]) -> Result<EnsemblePredictions> {
    Ok(Ensemble::new(load_all(paths)?.into_prediction_sets()?)?)
}

fn load_logits(paths: &[PathBuf]) -> Result<LogitEnsemble> {
    Ok(Ensemble::new(load_all(paths)?.into_logit_sets()?)?)
}

fn load_truth(path: &Path) -> Result<LabeledPredictionSet> {
    let mut sets = io::load(path, Format::from_path(path))?.into_prediction_sets()?;
    if sets.len() != 1 {
        return Err(enscal::Error::Shape("truth file must hold one member".into()).into());
    }
    Ok(sets.remove(0))
}

/// The single member, or the uniform average of several.
fn single_or_average(ens: &EnsemblePredictions) -> Result<LabeledPredictionSet> {
    if ens.len() == 1 {
        Ok(ens.members()[0].clone())
    } else {
        Ok(combine(ens, &CombinationWeights::uniform(ens.len()))?)
    }
}

fn resolve_weights(spec: &str, ens: &EnsemblePredictions) -> Result<CombinationWeights> {
    let w = match spec {
        "uniform" => CombinationWeights::uniform(ens.len()),
        "maxll" => fit_weights_max_ll(ens, &MaxLlOptions::default())?.weights,
        "auc" => fit_weights_auc(ens)?.weights,
        path => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<CombinationWeights>(&text)
                .map_err(|e| CliError::Usage(format!("weights file {path}: {e}")))?
        }
    };
    if w.len() != ens.len() {
        return Err(enscal::Error::Shape(format!("{} weights for {} members", w.len(), ens.len())).into());
    }
    Ok(w)
}

/// Reads a bare model or the `model` field of a `fit` summary.
fn read_model(path: &Path) -> Result<TemperatureModel> {
    let value: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let value = match value.get("model") {
        Some(inner) => inner.clone(),
        None => value,
    };
    Ok(serde_json::from_value(value)?)
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"), output)
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let ens = load_predictions(&args.inputs.inputs)?;
    let preds = single_or_average(&ens)?;
    let bandwidth = match args.bandwidth.as_str() {
        "auto" => Bandwidth::Auto,
        v => Bandwidth::Fixed(
            v.parse()
                .map_err(|_| CliError::Usage(format!("bandwidth must be `auto` or a number, got {v}")))?,
        ),
    };
    let options = ReportOptions {
        scheme: args.binning.scheme()?,
        skce: args.skce.then_some(SkceOptions {
            bandwidth,
            max_rows: (args.skce_max_rows > 0).then_some(args.skce_max_rows),
        }),
    };
    let report = MetricReport::compute(&preds, options)?;
    if args.csv {
        emit(&report.to_csv(), args.output.as_deref())
    } else {
        emit_json(&report, args.output.as_deref())
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let logits = load_logits(&args.inputs.inputs)?;
    let config = FitConfig {
        optimizer: match args.optimizer {
            OptimizerArg::Grid => Optimizer::GridRefine,
            OptimizerArg::Sgd => Optimizer::Sgd {
                learning_rate: args.learning_rate,
                iterations: args.iterations,
            },
        },
        scheme: args.binning.scheme()?,
        ..FitConfig::default()
    };
    let mut summary = if args.mode == FitMode::PerMember {
        let fits = logits
            .members()
            .iter()
            .map(|z| fit_temperature(z, &config))
            .collect::<enscal::Result<Vec<_>>>()?;
        let model = TemperatureModel::PerMember(fits.iter().map(|f| f.t).collect());
        json!({
            "model": model,
            "ece": fits.iter().map(|f| f.ece).collect::<Vec<_>>(),
            "ece_before": fits.iter().map(|f| f.ece_at_one).collect::<Vec<_>>(),
        })
    } else {
        let target: LogitSet = if logits.len() == 1 {
            logits.members()[0].clone()
        } else {
            let probs = logits.softmax();
            let w = resolve_weights(&args.weights, &probs)?;
            post_logits(&probs, &w)?
        };
        match args.mode {
            FitMode::Global => {
                let fit = fit_temperature(&target, &config)?;
                json!({
                    "model": TemperatureModel::Global(fit.t),
                    "ece": fit.ece,
                    "ece_before": fit.ece_at_one,
                })
            }
            _ => {
                let fit = fit_dynamic(&target, args.regions, RegionBoundaries::Quantile, &config)?;
                json!({
                    "model": fit.model,
                    "ece": fit.ece,
                    "ece_before": fit.global.ece_at_one,
                    "global_t": fit.global.t,
                    "global_ece": fit.global.ece,
                    "region_counts": fit.region_counts,
                })
            }
        }
    };
    summary["optimizer"] = match config.optimizer {
        Optimizer::GridRefine => json!({ "kind": "grid" }),
        Optimizer::Sgd {
            learning_rate,
            iterations,
        } => json!({ "kind": "sgd", "learning_rate": learning_rate, "iterations": iterations }),
    };
    if let Some(path) = &args.output {
        fs::write(path, serde_json::to_string_pretty(&summary["model"])? + "\n")?;
    }
    emit_json(&summary, None)
}

fn cmd_combine(args: CombineArgs) -> Result<()> {
    let data = load_all(&args.inputs.inputs)?;
    let scheme = args.binning.scheme()?;
    let options = ReportOptions { scheme, skce: None };
    let model = match (&args.temp_model, args.calibrate) {
        (_, Calibration::None) => None,
        (Some(path), _) => Some(read_model(path)?),
        (None, _) => return Err(CliError::Usage("--calibrate needs --temp-model".into())),
    };
    let (weights, before, after) = match (args.calibrate, model) {
        (Calibration::Pre, Some(model)) => {
            if data.kind != Kind::Logits {
                return Err(enscal::Error::Validation("pre-combination calibration needs logits".into()).into());
            }
            let logits = Ensemble::new(data.into_logit_sets()?)?;
            let TemperatureModel::PerMember(temps) = &model else {
                return Err(enscal::Error::Parameter(
                    "pre-combination calibration needs per-member temperatures".into(),
                )
                .into());
            };
            if temps.len() != logits.len() {
                return Err(
                    enscal::Error::Shape(format!("{} temperatures for {} members", temps.len(), logits.len())).into(),
                );
            }
            // weights are estimated on the calibrated members
            let calibrated = Ensemble::new(
                logits
                    .members()
                    .iter()
                    .zip(temps)
                    .map(|(z, &t)| scale(z, t))
                    .collect::<enscal::Result<Vec<_>>>()?,
            )?;
            let w = resolve_weights(&args.weights, &calibrated)?;
            let before = combine(&logits.softmax(), &w)?;
            let after = calibrate_pre(&logits, &model, &w)?;
            (w, before, after)
        }
        (Calibration::Post | Calibration::Dyn, Some(model)) => {
            let expect_regional = args.calibrate == Calibration::Dyn;
            if matches!(model, TemperatureModel::Regional { .. }) != expect_regional {
                let need = if expect_regional { "a regional" } else { "a global" };
                return Err(enscal::Error::Parameter(format!("--calibrate needs {need} model")).into());
            }
            let ens = Ensemble::new(data.into_prediction_sets()?)?;
            let w = resolve_weights(&args.weights, &ens)?;
            let before = combine(&ens, &w)?;
            let after = calibrate_post(&ens, &w, &model)?;
            (w, before, after)
        }
        _ => {
            let ens = Ensemble::new(data.into_prediction_sets()?)?;
            let w = resolve_weights(&args.weights, &ens)?;
            let combined = combine(&ens, &w)?;
            (w, combined.clone(), combined)
        }
    };
    if let Some(path) = &args.output {
        io::store(
            &PredictionData::from_prediction_set(&after),
            path,
            Format::from_path(path),
        )?;
    }
    emit_json(
        &json!({
            "weights": weights,
            "calibration": match args.calibrate {
                Calibration::None => "none",
                Calibration::Pre => "pre",
                Calibration::Post => "post",
                Calibration::Dyn => "dyn",
            },
            "before": MetricReport::compute(&before, options)?,
            "after": MetricReport::compute(&after, options)?,
            "output": args.output,
        }),
        None,
    )
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir)?;
    let config = SynthesisConfig {
        bin_size: args.b,
        classes: args.k,
        members: args.m,
        samples: args.n,
        seed: args.seed,
    };
    let mut files = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let store = |data: &PredictionData, name: &str, files: &mut Vec<String>| -> Result<()> {
        io::store(data, &args.out_dir.join(name), Format::Binary)?;
        files.push(name.to_string());
        Ok(())
    };
    let algorithm = match args.algorithm {
        Algorithm::Alg1 => {
            let truth = synth::sample_dirichlet_truth(&config)?;
            let ens = synth::gen_calibrated_members(&truth, &config)?;
            let width = (config.members - 1).to_string().len();
            for (m, member) in ens.members().iter().enumerate() {
                store(
                    &PredictionData::from_prediction_set(member),
                    &format!("member_{m:0width$}.bin"),
                    &mut files,
                )?;
            }
            let truth_set = LabeledPredictionSet::new(truth.distribution, truth.labels)?;
            store(
                &PredictionData::from_prediction_set(&truth_set),
                "truth.bin",
                &mut files,
            )?;
            "alg1"
        }
        Algorithm::Alg2 => {
            config.validate()?;
            let labels = synth::balanced_labels(config.samples, config.classes, config.seed);
            let out = synth::gen_binned_predictions(&labels, &config)?;
            if out.unequal_class_counts {
                warnings.push(format!(
                    "class counts are unequal: {} samples do not split evenly over {} classes",
                    config.samples, config.classes
                ));
            }
            store(
                &PredictionData::from_prediction_set(&out.predictions),
                "predictions.bin",
                &mut files,
            )?;
            "alg2"
        }
        Algorithm::Example1 => {
            let model = synth::example1_model(args.tau)?;
            let gaps = |top| synth::dist_region_gaps(&model, top);
            let value = json!({
                "tau": args.tau,
                "regions": model.regions(),
                "errors": synth::dist_calibration_errors(&model, BinningScheme::ExactValue),
                "all_label_gaps": gaps(false),
                "top_label_gaps": gaps(true),
            });
            fs::write(
                args.out_dir.join("model.json"),
                serde_json::to_string_pretty(&value)? + "\n",
            )?;
            files.push("model.json".into());
            "example1"
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut manifest = json!({
        "algorithm": algorithm,
        "bin_size": config.bin_size,
        "classes": config.classes,
        "members": config.members,
        "samples": config.samples,
        "seed": config.seed,
        "files": files,
        "warnings": warnings,
    });
    if args.algorithm == Algorithm::Example1 {
        manifest["tau"] = json!(args.tau);
    }
    fs::write(
        args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    emit_json(&manifest, None)
}

fn check_truth(truth: &LabeledPredictionSet, ens: &EnsemblePredictions) -> Result<()> {
    if truth.probs().dim() != (ens.n(), ens.k()) {
        return Err(enscal::Error::Shape("truth does not match the ensemble".into()).into());
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let ens = load_predictions(&args.inputs.inputs)?;
    let w = resolve_weights(&args.weights, &ens)?;
    let truth = args.truth.as_deref().map(load_truth).transpose()?;
    if let Some(t) = &truth {
        check_truth(t, &ens)?;
    }
    let report = synth::verify_propositions(
        &ens,
        &w,
        truth.as_ref().map(|t| t.probs()),
        &VerifyOptions {
            propositions: args.props,
            tolerance: args.tolerance,
        },
    )?;
    emit_json(&report, None)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification)
    }
}

fn cmd_reliability(args: ReliabilityArgs) -> Result<()> {
    let preds = single_or_average(&load_predictions(&args.inputs.inputs)?)?;
    let curve = reliability(&preds, BinningScheme::fixed(args.bins)?);
    emit(&curve.to_csv(), args.output.as_deref())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let ens = load_predictions(&args.inputs.inputs)?;
    let w = resolve_weights(&args.weights, &ens)?;
    let preds = combine(&ens, &w)?;
    let schemes = args
        .bins
        .iter()
        .map(|b| match b.as_str() {
            "exact" => Ok(BinningScheme::ExactValue),
            v => {
                let bins = v
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bin count must be an integer or `exact`, got {v}")))?;
                Ok(BinningScheme::fixed(bins)?)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = args.truth.as_deref().map(load_truth).transpose()?;
    let targets = match &truth {
        Some(t) => {
            check_truth(t, &ens)?;
            Targets::Distribution(t.probs())
        }
        None => Targets::Labels(preds.labels()),
    };
    let rows = synth::epsilon_sweep(preds.probs(), targets, None, &schemes);
    if args.json {
        emit_json(&rows, args.output.as_deref())
    } else {
        emit(&synth::sweep_csv(&rows), args.output.as_deref())
    }
}

fn configure_threads() -> Result<()> {
    let Some(value) = std::env::var_os("CALIB_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .to_str()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage("CALIB_THREADS must be a positive integer".into()))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Metrics(a) => cmd_metrics(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Combine(a) => cmd_combine(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Reliability(a) => cmd_reliability(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Verification) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
