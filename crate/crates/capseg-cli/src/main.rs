//! `capseg` binary: reproducible segmentation-loss experiments.
//!
//! Four subcommands cover the full loop: `synth` writes a synthetic dataset,
//! `train` fits one loss on it, `eval` scores a checkpoint, and `compare`
//! trains all three losses from one shared initialization and joins their
//! training curves and test metrics side by side.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (including
//! flag parsing), 1 for runtime failures.

mod manifest;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::Utc;
use clap::{Args, Parser, Subcommand};

use capseg::data::{self, LoadStats, SegSample, Split, SynthParams};
use capseg::losses::{LossConfig, LossError, LossKind, VariabilityMode};
use capseg::metrics::{write_metrics_csv, EvalReport};
use capseg::model::{Model, ModelConfig, ModelError};
use capseg::trainer::{
    self, Checkpoint, EpochLog, OptimizerKind, OptimizerState, PostprocessConfig, TrainConfig,
    TrainError,
};

#[derive(Parser)]
#[command(name = "capseg", version, about = "Segmentation loss laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with expert and non-expert masks.
    Synth(SynthArgs),
    /// Train one loss on a dataset split.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-case metrics and contour overlays.
    Eval(EvalArgs),
    /// Train and evaluate all three losses under one seed.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root directory to write into.
    #[arg(long)]
    out: PathBuf,
    /// Split subdirectory to populate.
    #[arg(long, default_value_t = Split::Train)]
    split: Split,
    /// Number of samples.
    #[arg(long, default_value_t = 128)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative amplitude of the non-expert boundary wobble.
    #[arg(long, default_value_t = 0.15)]
    perturb: f64,
    /// Amplitude of the multiplicative speckle noise.
    #[arg(long, default_value_t = 0.15)]
    speckle: f64,
    /// Consecutive samples sharing one case id.
    #[arg(long, default_value_t = 4)]
    slices_per_case: usize,
}

/// Training and loss hyperparameters shared by `train` and `compare`.
#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Batch size.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Square dilation kernel side growing annotator disagreement into the
    /// hard region (odd; 1 disables dilation).
    #[arg(long, default_value_t = 5)]
    ks: usize,
    /// Scale applied to every focal term.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Fixed focusing exponent of the per-pixel focal map.
    #[arg(long, default_value_t = 2.0)]
    gamma_f: f64,
    /// Stability offset inside logarithms.
    #[arg(long, default_value_t = 1e-7)]
    epsilon: f64,
    /// How annotation variability is scored: literal or disagreement.
    #[arg(long, default_value_t = VariabilityMode::Literal)]
    variability_mode: VariabilityMode,
    /// Add a dice term on the full-resolution head.
    #[arg(long)]
    combine_dice: bool,
    /// Weight of the dice term when enabled.
    #[arg(long, default_value_t = 1.0)]
    dice_weight: f64,
    /// sgd_momentum or adam.
    #[arg(long, default_value_t = OptimizerKind::SgdMomentum)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square input side; defaults to the preset's native size.
    #[arg(long)]
    input_size: Option<usize>,
    /// Model preset: desk or full_scale_224.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Polynomial learning-rate decay power; constant rate when absent.
    #[arg(long)]
    poly_decay: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Split::Train)]
    split: Split,
    /// adaptive_focal, focal or ag_bce.
    #[arg(long, default_value_t = LossKind::AdaptiveFocal)]
    loss: LossKind,
    /// Checkpoint to continue from. Hyperparameters then come from the
    /// checkpoint; only --epochs (the new total) applies.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    /// Probability threshold for the predicted mask.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Apply a 3x3 morphological opening to predictions.
    #[arg(long)]
    opening: bool,
    /// Keep only the largest connected component of each prediction.
    #[arg(long)]
    largest_component: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Dataset root directory; must contain both splits.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Split::Train)]
    train_split: Split,
    #[arg(long, default_value_t = Split::Test)]
    eval_split: Split,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    opening: bool,
    #[arg(long)]
    largest_component: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug)]
enum CliError {
    /// Bad flags, paths or configuration: exit code 2.
    Usage(String),
    /// Failure while doing otherwise valid work: exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Runtime(err) => write!(f, "{err:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        use data::DataError::*;
        match e {
            Config(_) | Read { .. } | Write { .. } | MissingExpertMask(_)
            | UnmatchedExpertMask(_) => CliError::Usage(e.to_string()),
            NonFinite { .. } | ShapeMismatch { .. } => CliError::Runtime(anyhow::Error::new(e)),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_)
            | TrainError::EmptyDataset
            | TrainError::EmptyTestSet
            | TrainError::Model(ModelError::Config(_))
            | TrainError::Loss(LossError::InvalidConfig(_)) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(anyhow::Error::new(other)),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(anyhow::Error::new(other)),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let params = SynthParams {
        perturb: args.perturb,
        speckle: args.speckle,
        slices_per_case: args.slices_per_case,
        ..SynthParams::default()
    };
    let samples = data::synth_generate(args.count, args.size, &params, args.seed)?;
    data::save_dataset(&args.out, args.split, &samples)?;

    let cases = samples
        .iter()
        .map(|s| s.case_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let disagreement = samples
        .iter()
        .map(|s| {
            s.expert_mask
                .xor(&s.nonexpert_mask)
                .expect("sample masks share one shape")
                .mean()
        })
        .sum::<f64>()
        / samples.len() as f64;
    println!(
        "wrote {} samples ({} cases) to {}",
        samples.len(),
        cases,
        args.out.join(args.split.dir_name()).display()
    );
    println!("mean annotator disagreement: {disagreement:.4} of pixels");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let started = Utc::now();
    check_data_dir(&args.data)?;
    create_run_dir(&args.out)?;

    let (raw, stats) = data::load_dataset(&args.data, args.split)?;
    report_load(args.split, raw.len(), &stats);

    // A resumed run replays the checkpoint's configuration; only the epoch
    // target moves. A fresh run takes everything from the flags.
    let (mut model, mut state, mut logs, train_cfg, loss_cfg, start_epoch) = match &args.resume {
        Some(ckpt_path) => {
            if !ckpt_path.is_file() {
                return Err(CliError::Usage(format!(
                    "checkpoint {} not found",
                    ckpt_path.display()
                )));
            }
            let ckpt = trainer::load_checkpoint(ckpt_path)?;
            if args.hyper.epochs < ckpt.epoch {
                return Err(CliError::Usage(format!(
                    "--epochs {} is below the checkpoint's {} completed epochs",
                    args.hyper.epochs, ckpt.epoch
                )));
            }
            let (model, state) = ckpt.restore()?;
            let mut cfg = ckpt.train_config.clone();
            cfg.epochs = args.hyper.epochs;
            println!(
                "resuming {} from {} ({} epochs done, training to {})",
                cfg.loss_kind,
                ckpt_path.display(),
                ckpt.epoch,
                cfg.epochs
            );
            (model, state, ckpt.logs.clone(), cfg, ckpt.loss_config.clone(), ckpt.epoch)
        }
        None => {
            let model_cfg = resolve_model_config(&args.hyper)?;
            let model = Model::new(model_cfg, args.hyper.seed)?;
            let state = OptimizerState::new(args.hyper.optimizer, model.store().total_len());
            let cfg = train_config(&args.hyper, args.loss);
            (model, state, Vec::new(), cfg, loss_config(&args.hyper), 0)
        }
    };

    let samples = resize_all(&raw, model.cfg().input_size)?;
    println!(
        "training {} for {} epochs on {} samples",
        train_cfg.loss_kind,
        train_cfg.epochs - start_epoch,
        samples.len()
    );
    let new_logs = trainer::train_epochs(
        &mut model,
        &samples,
        &train_cfg,
        &loss_cfg,
        &mut state,
        start_epoch,
    )?;
    for log in &new_logs {
        println!(
            "epoch {:>3}  loss {:.6}  {:.1}s",
            log.epoch, log.mean_loss, log.wall_seconds
        );
    }
    logs.extend(new_logs);

    let mut config = config_entries(&train_cfg, &loss_cfg, model.cfg());
    config.insert("data".into(), args.data.display().to_string());
    config.insert("split".into(), args.split.to_string());
    config.insert("preset".into(), args.hyper.preset.clone());
    if let Some(resume) = &args.resume {
        config.insert("resume".into(), resume.display().to_string());
    }
    write_train_artifacts(&args.out, &model, &train_cfg, &loss_cfg, &state, &logs, &config)?;

    let mut run = manifest::RunManifest::new(started, config);
    run.dataset_fingerprint = manifest::fingerprint_dataset(&args.data)?;
    manifest::write_manifest(&args.out.join("manifest.json"), &run)?;
    println!(
        "artifacts in {}: loss_log.csv, checkpoint.json, config.txt, manifest.json",
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let started = Utc::now();
    if !args.checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found",
            args.checkpoint.display()
        )));
    }
    check_data_dir(&args.data)?;
    create_run_dir(&args.out)?;

    let ckpt = trainer::load_checkpoint(&args.checkpoint)?;
    let (model, _) = ckpt.restore()?;
    let (raw, stats) = data::load_dataset(&args.data, args.split)?;
    report_load(args.split, raw.len(), &stats);
    let samples = resize_all(&raw, model.cfg().input_size)?;

    let post = PostprocessConfig {
        opening: args.opening,
        largest_component: args.largest_component,
    };
    let report = trainer::evaluate(&model, &samples, args.threshold, &post)?;

    let metrics_path = args.out.join("metrics.csv");
    let file = fs::File::create(&metrics_path)
        .with_context(|| format!("write {}", metrics_path.display()))?;
    write_metrics_csv(&report, file).context("write metrics.csv")?;

    let overlay_dir = args.out.join("overlays");
    fs::create_dir_all(&overlay_dir)
        .with_context(|| format!("create {}", overlay_dir.display()))?;
    for sample in &samples {
        let pred = trainer::predict_mask(&model, &sample.image, args.threshold, &post)?;
        let path = overlay_dir.join(format!("{}.png", sample.stem()));
        render::save_overlay(&path, &sample.image, &sample.expert_mask, &pred)?;
    }

    let mut config = BTreeMap::new();
    config.insert("checkpoint".to_string(), args.checkpoint.display().to_string());
    config.insert("data".to_string(), args.data.display().to_string());
    config.insert("split".to_string(), args.split.to_string());
    config.insert("threshold".to_string(), args.threshold.to_string());
    config.insert("opening".to_string(), args.opening.to_string());
    config.insert("largest_component".to_string(), args.largest_component.to_string());
    config.insert("input_size".to_string(), model.cfg().input_size.to_string());
    manifest::write_config_txt(&args.out.join("config.txt"), &config)?;
    let mut run = manifest::RunManifest::new(started, config);
    run.dataset_fingerprint = manifest::fingerprint_dataset(&args.data)?;
    manifest::write_manifest(&args.out.join("manifest.json"), &run)?;

    println!(
        "evaluated {} cases ({} slices): mean dice {:.4}, mean hd95 {}",
        report.cases.len(),
        samples.len(),
        report.mean_dice,
        fmt_hd95(report.mean_hd95)
    );
    println!(
        "artifacts in {}: metrics.csv, overlays/, config.txt, manifest.json",
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let started = Utc::now();
    check_data_dir(&args.data)?;
    create_run_dir(&args.out)?;

    let model_cfg = resolve_model_config(&args.hyper)?;
    let loss_cfg = loss_config(&args.hyper);
    let (raw_train, train_stats) = data::load_dataset(&args.data, args.train_split)?;
    report_load(args.train_split, raw_train.len(), &train_stats);
    let (raw_eval, eval_stats) = data::load_dataset(&args.data, args.eval_split)?;
    report_load(args.eval_split, raw_eval.len(), &eval_stats);
    let train_samples = resize_all(&raw_train, model_cfg.input_size)?;
    let eval_samples = resize_all(&raw_eval, model_cfg.input_size)?;
    let post = PostprocessConfig {
        opening: args.opening,
        largest_component: args.largest_component,
    };

    let mut curves: Vec<(LossKind, Vec<EpochLog>)> = Vec::new();
    let mut reports: Vec<(LossKind, EvalReport)> = Vec::new();
    for kind in LossKind::ALL {
        let dir = args.out.join(kind.as_str());
        create_run_dir(&dir)?;
        let train_cfg = train_config(&args.hyper, kind);
        // Same seed for every loss: identical initialization and batch
        // order, so curves differ only through the loss itself.
        let mut model = Model::new(model_cfg.clone(), args.hyper.seed)?;
        let mut state = OptimizerState::new(train_cfg.optimizer, model.store().total_len());
        println!(
            "training {} for {} epochs on {} samples",
            kind,
            train_cfg.epochs,
            train_samples.len()
        );
        let logs = trainer::train_epochs(
            &mut model,
            &train_samples,
            &train_cfg,
            &loss_cfg,
            &mut state,
            0,
        )?;
        for log in &logs {
            println!(
                "epoch {:>3}  loss {:.6}  {:.1}s",
                log.epoch, log.mean_loss, log.wall_seconds
            );
        }

        let mut config = config_entries(&train_cfg, &loss_cfg, &model_cfg);
        config.insert("data".into(), args.data.display().to_string());
        config.insert("split".into(), args.train_split.to_string());
        config.insert("preset".into(), args.hyper.preset.clone());
        write_train_artifacts(&dir, &model, &train_cfg, &loss_cfg, &state, &logs, &config)?;

        let report = trainer::evaluate(&model, &eval_samples, args.threshold, &post)?;
        let metrics_path = dir.join("metrics.csv");
        let file = fs::File::create(&metrics_path)
            .with_context(|| format!("write {}", metrics_path.display()))?;
        write_metrics_csv(&report, file).context("write metrics.csv")?;

        curves.push((kind, logs));
        reports.push((kind, report));
    }

    write_compare_loss_csv(&args.out.join("compare_loss.csv"), &curves)?;
    write_compare_metrics_csv(&args.out.join("compare_metrics.csv"), &reports)?;
    let series: Vec<render::Series> = curves
        .iter()
        .map(|(kind, logs)| render::Series {
            color: render::series_color(kind.as_str()),
            values: logs.iter().map(|l| l.mean_loss).collect(),
        })
        .collect();
    render::save_loss_curves(&args.out.join("loss_curves.png"), &series)?;

    let mut config = config_entries(&train_config(&args.hyper, LossKind::AdaptiveFocal), &loss_cfg, &model_cfg);
    config.insert("loss".into(), join_kinds(","));
    config.insert("data".into(), args.data.display().to_string());
    config.insert("train_split".into(), args.train_split.to_string());
    config.insert("eval_split".into(), args.eval_split.to_string());
    config.insert("preset".into(), args.hyper.preset.clone());
    config.insert("threshold".into(), args.threshold.to_string());
    config.insert("opening".into(), args.opening.to_string());
    config.insert("largest_component".into(), args.largest_component.to_string());
    manifest::write_config_txt(&args.out.join("config.txt"), &config)?;
    let mut run = manifest::RunManifest::new(started, config);
    run.dataset_fingerprint = manifest::fingerprint_dataset(&args.data)?;
    manifest::write_manifest(&args.out.join("manifest.json"), &run)?;

    println!("{:<16} {:>10} {:>10} {:>10} {:>10}", "loss", "epoch 1", "final", "dice", "hd95");
    for ((kind, logs), (_, report)) in curves.iter().zip(&reports) {
        println!(
            "{:<16} {:>10.6} {:>10.6} {:>10.4} {:>10}",
            kind.to_string(),
            logs.first().map(|l| l.mean_loss).unwrap_or(f64::NAN),
            logs.last().map(|l| l.mean_loss).unwrap_or(f64::NAN),
            report.mean_dice,
            fmt_hd95(report.mean_hd95)
        );
    }
    println!(
        "artifacts in {}: compare_loss.csv, compare_metrics.csv, loss_curves.png, per-loss run directories",
        args.out.display()
    );
    Ok(())
}

fn check_data_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "dataset directory {} not found",
            path.display()
        )))
    }
}

fn create_run_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn report_load(split: Split, count: usize, stats: &LoadStats) {
    println!("loaded {count} samples from the {split} split");
    if stats.missing_nonexpert > 0 {
        println!(
            "note: {} samples had no non-expert mask; the expert mask was reused",
            stats.missing_nonexpert
        );
    }
    if stats.malformed_stems > 0 {
        println!(
            "note: {} file stems were not case_slice shaped; treated as single-slice cases",
            stats.malformed_stems
        );
    }
}

fn resolve_model_config(hyper: &HyperArgs) -> Result<ModelConfig, CliError> {
    let mut cfg = match hyper.preset.as_str() {
        "desk" => ModelConfig::default(),
        "full_scale_224" => ModelConfig::full_scale_224(),
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?}, expected desk or full_scale_224"
            )))
        }
    };
    if let Some(size) = hyper.input_size {
        cfg.input_size = size;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn loss_config(hyper: &HyperArgs) -> LossConfig {
    LossConfig {
        beta: hyper.beta,
        gamma_f: hyper.gamma_f,
        epsilon: hyper.epsilon,
        kernel_size: hyper.ks,
        variability_mode: hyper.variability_mode,
        ..LossConfig::default()
    }
}

fn train_config(hyper: &HyperArgs, loss: LossKind) -> TrainConfig {
    TrainConfig {
        loss_kind: loss,
        combine_dice: hyper.combine_dice,
        dice_weight: hyper.dice_weight,
        epochs: hyper.epochs,
        batch_size: hyper.batch,
        learning_rate: hyper.lr,
        momentum: hyper.momentum,
        weight_decay: hyper.weight_decay,
        optimizer: hyper.optimizer,
        seed: hyper.seed,
        poly_decay_power: hyper.poly_decay,
    }
}

/// Every knob that affects results, keyed by its flag name where one exists.
fn config_entries(
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    model_cfg: &ModelConfig,
) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    put("loss", train_cfg.loss_kind.to_string());
    put("epochs", train_cfg.epochs.to_string());
    put("batch", train_cfg.batch_size.to_string());
    put("lr", train_cfg.learning_rate.to_string());
    put("momentum", train_cfg.momentum.to_string());
    put("weight_decay", train_cfg.weight_decay.to_string());
    put("optimizer", train_cfg.optimizer.to_string());
    put("seed", train_cfg.seed.to_string());
    put("combine_dice", train_cfg.combine_dice.to_string());
    put("dice_weight", train_cfg.dice_weight.to_string());
    put(
        "poly_decay",
        train_cfg
            .poly_decay_power
            .map(|p| p.to_string())
            .unwrap_or_else(|| "none".to_string()),
    );
    put("beta", loss_cfg.beta.to_string());
    put("gamma_f", loss_cfg.gamma_f.to_string());
    put("epsilon", loss_cfg.epsilon.to_string());
    put("ks", loss_cfg.kernel_size.to_string());
    put("gamma_min", loss_cfg.gamma_min.to_string());
    put("gamma_max", loss_cfg.gamma_max.to_string());
    put("variability_mode", loss_cfg.variability_mode.to_string());
    put("hard_weight", loss_cfg.hard_weight.to_string());
    put("easy_weight", loss_cfg.easy_weight.to_string());
    put("input_size", model_cfg.input_size.to_string());
    put("patch_size", model_cfg.patch_size.to_string());
    put("embed_dim", model_cfg.embed_dim.to_string());
    put("depth", model_cfg.depth.to_string());
    put("heads", model_cfg.heads.to_string());
    put("stem_channels", format!("{:?}", model_cfg.stem_channels));
    put("supervision_scales", format!("{:?}", model_cfg.supervision_scales));
    put("scale_weights", format!("{:?}", model_cfg.scale_weights));
    map
}

fn resize_all(samples: &[SegSample], target: usize) -> Result<Vec<SegSample>, CliError> {
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        out.push(data::resize(sample, target)?);
    }
    Ok(out)
}

fn write_train_artifacts(
    dir: &Path,
    model: &Model,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    state: &OptimizerState,
    logs: &[EpochLog],
    config: &BTreeMap<String, String>,
) -> Result<(), CliError> {
    let loss_path = dir.join("loss_log.csv");
    let file =
        fs::File::create(&loss_path).with_context(|| format!("write {}", loss_path.display()))?;
    trainer::write_loss_log_csv(file, logs).context("write loss_log.csv")?;
    let ckpt = Checkpoint::capture(model, train_cfg, loss_cfg, state, train_cfg.epochs, logs);
    trainer::save_checkpoint(&dir.join("checkpoint.json"), &ckpt)?;
    manifest::write_config_txt(&dir.join("config.txt"), config)?;
    Ok(())
}

fn join_kinds(sep: &str) -> String {
    LossKind::ALL
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join(sep)
}

/// One row per epoch, one full-precision loss column per loss kind.
fn write_compare_loss_csv(
    path: &Path,
    curves: &[(LossKind, Vec<EpochLog>)],
) -> Result<(), CliError> {
    use std::io::Write;
    let mut out =
        fs::File::create(path).with_context(|| format!("write {}", path.display()))?;
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "epoch,{}", join_kinds(","))?;
        let epochs = curves.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
        for row in 0..epochs {
            write!(out, "{}", row + 1)?;
            for (_, logs) in curves {
                match logs.get(row) {
                    Some(log) => write!(out, ",{}", log.mean_loss)?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    };
    write().with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn write_compare_metrics_csv(
    path: &Path,
    reports: &[(LossKind, EvalReport)],
) -> Result<(), CliError> {
    use std::io::Write;
    let mut out =
        fs::File::create(path).with_context(|| format!("write {}", path.display()))?;
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "loss,mean_dice,mean_hd95")?;
        for (kind, report) in reports {
            let hd = report.mean_hd95.map(|d| format!("{d:.6}")).unwrap_or_default();
            writeln!(out, "{},{:.6},{}", kind.as_str(), report.mean_dice, hd)?;
        }
        Ok(())
    };
    write().with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn fmt_hd95(hd: Option<f64>) -> String {
    hd.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".to_string())
}
