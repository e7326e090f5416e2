//! `auxnet` command line: config-driven training with metrics/checkpoint
//! output, per-head evaluation, entropy-based prediction, supervision-ratio
//! inspection, and the kernel certification suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use auxnet::checkpoint::{load_checkpoint_any, save_checkpoint, AnyModel};
use auxnet::config::ExperimentConfig;
use auxnet::data::{load_cifar10_binary, load_idx, LabeledData, Normalization};
use auxnet::gradcheck::{certify_kernel, KernelKind};
use auxnet::metrics::{export_ratio_csv, write_atomic, MetricsWriter};
use auxnet::model::{build_model, Model};
use auxnet::predict::{evaluate_heads, predict_with, Selection};
use auxnet::ratio::supervision_ratio;
use auxnet::tensor::Element;
use auxnet::train::{train, Strategy};
use auxnet::Error;

#[derive(Parser)]
#[command(
    name = "auxnet",
    version,
    about = "Residual networks with auxiliary output heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per config and write metrics.csv plus a checkpoint.
    Train(TrainArgs),
    /// Per-head and safe-prediction error of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-sample JSON-lines predictions from a checkpoint.
    Predict(PredictArgs),
    /// Measure supervision ratios of a checkpoint and write ratios.csv.
    InspectRatio(InspectRatioArgs),
    /// Certify every backward kernel against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON with model/heads/data/train sections).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's training strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Override the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for resolved_config.json, metrics.csv, ratios.csv,
    /// and model.ckpt.
    #[arg(long, default_value = "auxnet-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset: `file.bin` (CIFAR-10 binary), `images.idx:labels.idx`, or a
    /// single `.idx` images file with a guessable labels sibling.
    #[arg(long, conflicts_with = "config")]
    data: Option<String>,
    /// Evaluate on the test split of a config's dataset instead.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to predict on (same forms as `eval --data`).
    #[arg(long, conflicts_with = "config")]
    data: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Select per sample by minimum entropy over all heads.
    #[arg(long, conflicts_with = "entropy_threshold")]
    safe: bool,
    /// Early exit: answer at the shallowest head with entropy below t.
    #[arg(long, value_name = "t")]
    entropy_threshold: Option<f64>,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectRatioArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Measurement batch source (defaults to the config's test split).
    #[arg(long, conflicts_with = "config")]
    data: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategies to measure.
    #[arg(long, value_delimiter = ',', default_values_t = vec![Strategy::Plain, Strategy::Joint, Strategy::Pairwise, Strategy::Multipath])]
    strategies: Vec<Strategy>,
    /// Measurement batch size.
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value = "auxnet-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random shapes per kernel.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Max relative error allowed.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::InspectRatio(args) => cmd_inspect_ratio(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let mut experiment = ExperimentConfig::load(&args.config)?;
    if let Some(strategy) = args.strategy {
        experiment.train.strategy = strategy;
    }
    if let Some(seed) = args.seed {
        experiment.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        experiment.train.epochs = epochs;
    }

    std::fs::create_dir_all(&args.out_dir)?;
    write_atomic(
        &args.out_dir.join("resolved_config.json"),
        experiment.echo_json()?.as_bytes(),
    )?;

    let model_config = experiment.model_config();
    let data = experiment.load_data::<f32>()?;
    let mut model: Model<f32> = build_model(&model_config)?;
    println!(
        "training {} (depth {}, heads {:?}, {} parameters) with {} for {} epochs",
        model_name(&model),
        model_config.depth,
        model_config.head_positions,
        model.parameter_count(),
        experiment.train.strategy,
        experiment.train.epochs
    );

    let mut writer = MetricsWriter::open(args.out_dir.join("metrics.csv"), model.num_heads())?;
    let report = train(&mut model, &data, &experiment.train)?;
    for row in &report.rows {
        writer.record_epoch(report.strategy, row)?;
    }
    if !report.ratio_traces.is_empty() {
        export_ratio_csv(&args.out_dir.join("ratios.csv"), &report.ratio_traces)?;
    }
    let ckpt = args.out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;

    if let Some(last) = report.rows.last() {
        println!("final-epoch test error per head:");
        for (k, err) in last.test_err.iter().enumerate() {
            println!(
                "  head {} @ layer {:>3}: {err:.2}%",
                k + 1,
                model_config.head_positions[k]
            );
        }
    }
    println!("wrote {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let model = load_checkpoint_any(&args.checkpoint)?;
    match model {
        AnyModel::F32(m) => eval_model(&m, &args),
        AnyModel::F64(m) => eval_model(&m, &args),
    }
}

fn eval_model<T: Element>(model: &Model<T>, args: &EvalArgs) -> Result<ExitCode, Error> {
    let data = load_eval_data::<T>(&args.data, &args.config, model.config.num_classes)?;
    let report = evaluate_heads(model, &data, 256)?;
    println!("evaluated {} samples", report.samples);
    println!("head  layer  error%   prediction-ratio%");
    for (k, err) in report.per_head_err.iter().enumerate() {
        println!(
            "{:>4}  {:>5}  {:>6.2}   {:>6.2}",
            k + 1,
            model.config.head_positions[k],
            err,
            report.prediction_ratio[k]
        );
    }
    println!("safe prediction error: {:.2}%", report.safe_err);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VoteLine {
    head: usize,
    class: usize,
    entropy: f64,
}

#[derive(Serialize)]
struct PredictionLine {
    sample_id: usize,
    per_head: Vec<VoteLine>,
    chosen_head: usize,
    chosen_class: usize,
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode, Error> {
    let model = load_checkpoint_any(&args.checkpoint)?;
    let selection = if let Some(t) = args.entropy_threshold {
        Selection::EntropyThreshold(t)
    } else if args.safe {
        Selection::MinEntropy
    } else {
        Selection::FinalHead
    };
    let lines = match model {
        AnyModel::F32(m) => predict_lines(&m, &args, selection)?,
        AnyModel::F64(m) => predict_lines(&m, &args, selection)?,
    };
    match &args.out {
        Some(path) => write_atomic(path, lines.join("\n").as_bytes())?,
        None => {
            for line in lines {
                println!("{line}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn predict_lines<T: Element>(
    model: &Model<T>,
    args: &PredictArgs,
    selection: Selection,
) -> Result<Vec<String>, Error> {
    let data = load_eval_data::<T>(&args.data, &args.config, model.config.num_classes)?;
    let mut lines = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + 256).min(data.len());
        let (batch, _) = data.slice(start, end);
        let preds = predict_with(model, &batch, selection)?;
        for (offset, p) in preds.iter().enumerate() {
            let line = PredictionLine {
                sample_id: start + offset,
                per_head: p
                    .per_head
                    .iter()
                    .map(|v| VoteLine {
                        head: v.head + 1,
                        class: v.class,
                        entropy: v.entropy,
                    })
                    .collect(),
                chosen_head: p.chosen_head + 1,
                chosen_class: p.chosen_class,
            };
            lines.push(serde_json::to_string(&line)?);
        }
        start = end;
    }
    Ok(lines)
}

fn cmd_inspect_ratio(args: InspectRatioArgs) -> Result<ExitCode, Error> {
    let model = load_checkpoint_any(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join("ratios.csv");
    match model {
        AnyModel::F32(m) => inspect_ratio(&m, &args, &path),
        AnyModel::F64(m) => inspect_ratio(&m, &args, &path),
    }
}

fn inspect_ratio<T: Element>(
    model: &Model<T>,
    args: &InspectRatioArgs,
    path: &Path,
) -> Result<ExitCode, Error> {
    let data = load_eval_data::<T>(&args.data, &args.config, model.config.num_classes)?;
    let take = args.batch.clamp(2, data.len());
    let (batch, labels) = data.slice(0, take);
    let mut traces = Vec::new();
    for &strategy in &args.strategies {
        traces.push(supervision_ratio(model, &batch, &labels, strategy, 0)?);
    }
    export_ratio_csv(path, &traces)?;
    println!(
        "wrote {} ({} strategies x {} layers, {} samples)",
        path.display(),
        args.strategies.len(),
        model.depth(),
        take
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let mut all_passed = true;
    for kind in KernelKind::ALL {
        let reports = certify_kernel(kind, args.cases, args.tolerance);
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
        let passed = reports.iter().all(|r| r.passed);
        all_passed &= passed;
        println!(
            "{:16} {} cases, max rel err {:.3e}  [{}]",
            kind.name(),
            reports.len(),
            worst,
            if passed { "PASS" } else { "FAIL" }
        );
        for r in reports.iter().filter(|r| !r.passed) {
            println!("    {} -> {:.3e}", r.case, r.max_rel_err);
        }
    }
    if all_passed {
        println!("all kernels certified at {:.0e}", args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: kernel certification failed");
        Ok(ExitCode::from(1))
    }
}

/// Resolves `--data` / `--config` into a labeled evaluation set.
fn load_eval_data<T: Element>(
    data: &Option<String>,
    config: &Option<PathBuf>,
    num_classes: usize,
) -> Result<LabeledData<T>, Error> {
    match (data, config) {
        (Some(spec), _) => {
            let set = parse_data_arg::<T>(spec)?;
            if let Some(&bad) = set.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Data(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
            Ok(set)
        }
        (None, Some(path)) => {
            let experiment = ExperimentConfig::load(path)?;
            let split = experiment.load_data::<T>()?;
            Ok(split.test)
        }
        (None, None) => Err(Error::InvalidConfig(
            "provide --data <path> or --config <file>".into(),
        )),
    }
}

/// `file.bin` is CIFAR-10 binary; `a.idx:b.idx` an explicit IDX pair; a lone
/// `.idx` images path looks for a labels sibling (`images` -> `labels`, else
/// `<path>.labels`).
fn parse_data_arg<T: Element>(spec: &str) -> Result<LabeledData<T>, Error> {
    if let Some((images, labels)) = spec.split_once(':') {
        return load_idx(
            Path::new(images),
            Path::new(labels),
            Normalization::Scale255,
        );
    }
    let path = Path::new(spec);
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => load_cifar10_binary(path, Normalization::Scale255),
        Some("idx") => {
            let name = path.file_name().unwrap().to_string_lossy();
            let labels = if name.contains("images") {
                path.with_file_name(name.replace("images", "labels"))
            } else {
                let mut s = path.as_os_str().to_os_string();
                s.push(".labels");
                PathBuf::from(s)
            };
            if !labels.exists() {
                return Err(Error::Data(format!(
                    "cannot locate labels file for {spec} (tried {}); pass images.idx:labels.idx",
                    labels.display()
                )));
            }
            load_idx(path, &labels, Normalization::Scale255)
        }
        _ => Err(Error::Data(format!(
            "unrecognized data path '{spec}' (expected .bin, .idx, or images.idx:labels.idx)"
        ))),
    }
}

fn model_name<T: Element>(model: &Model<T>) -> String {
    format!(
        "auxnet-{}-{}",
        model.config.depth,
        model.config.head_positions.len()
    )
}
