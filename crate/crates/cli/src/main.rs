//! `gzsl`: generate data, train, fit thresholds, evaluate and run ablations.
//!
//! Every subcommand reads an optional TOML config (`--config`) and applies
//! flag overrides on top. Usage errors exit with 2, runtime failures with 1.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gzsl::dataset::{generate_synthetic, Dataset};
use gzsl::eval::{
    ablation_csv, ablation_rows, confusion_csv, evaluate, report_csv, summary, sweep_beta,
    sweep_csv,
};
use gzsl::model::{Checkpoint, Model};
use gzsl::params::ParamGroup;
use gzsl::trainer::{
    fit_thresholds, history_csv, train_groups, train_two_stage, EpochLoss, Precision,
    ThresholdSamples, TrainConfig,
};
use gzsl::Scalar;

use config::Config;

#[derive(Parser)]
#[command(
    name = "gzsl",
    version,
    about = "Prototype-based generalized zero-shot gesture recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic gesture dataset.
    GenData(GenData),
    /// Train the joint model, then fit its thresholds.
    Train(Train),
    /// Refit the rejection thresholds of a trained checkpoint.
    FitThresholds(FitThresholds),
    /// Evaluate a checkpoint on the test split.
    Eval(Eval),
    /// Compare SAE-only, fixed-threshold, two-stage and end-to-end variants.
    Ablate(Ablate),
    /// Refit thresholds for several β values and report AR/RR.
    SweepBeta(SweepBeta),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes_seen: Option<usize>,
    #[arg(long)]
    classes_unseen: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    sequence_length: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Dataset directory to create.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DataModel {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ThresholdFlags {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    threshold_epochs: Option<usize>,
    #[arg(long)]
    threshold_lr: Option<f64>,
    #[arg(long, value_parser = ["all", "correct"])]
    threshold_samples: Option<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    io: DataModel,
    /// Directory for the loss history.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(flatten)]
    thresholds: ThresholdFlags,
    /// Save the checkpoint without thresholds.
    #[arg(long)]
    no_thresholds: bool,
}

#[derive(Args)]
struct FitThresholds {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    io: DataModel,
    #[command(flatten)]
    thresholds: ThresholdFlags,
    /// Where to write the updated checkpoint (default: overwrite the input).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    io: DataModel,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    io: DataModel,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Epochs per stage for the separately trained model.
    #[arg(long)]
    epochs: Option<usize>,
    /// Leave out the separately trained model.
    #[arg(long)]
    no_two_stage: bool,
}

#[derive(Args)]
struct SweepBeta {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    io: DataModel,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated β values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::FitThresholds(a) => refit(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepBeta(a) => sweep(a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataModel {
    fn apply(self, config: &mut Config) {
        set(&mut config.paths.data_dir, self.data_dir);
        set(&mut config.paths.checkpoint, self.checkpoint);
    }
}

impl ThresholdFlags {
    fn apply(self, train: &mut TrainConfig) {
        set(&mut train.beta, self.beta);
        set(&mut train.threshold_epochs, self.threshold_epochs);
        set(&mut train.threshold_lr, self.threshold_lr);
        if let Some(s) = self.threshold_samples {
            train.threshold_samples = match s.as_str() {
                "correct" => ThresholdSamples::Correct,
                _ => ThresholdSamples::All,
            };
        }
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(Checkpoint::load(path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ck.save(path)
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

fn print_epoch(e: &EpochLoss) {
    eprintln!(
        "epoch {:>4}  total {:.5}  dce {:.5}  pl {:.5}  attr {:.5}  res {:.5}",
        e.epoch + 1,
        e.total,
        e.dce,
        e.pl,
        e.attr,
        e.res
    );
}

/// Runs `f` with the model type matching a precision tag.
macro_rules! with_precision {
    ($tag:expr, $f:ident ( $($arg:expr),* )) => {
        match $tag {
            "f32" => $f::<f32>($($arg),*),
            "f64" => $f::<f64>($($arg),*),
            other => bail!("unsupported precision {other}"),
        }
    };
}

fn gen_data(a: GenData) -> Result<()> {
    let mut config = Config::load(a.common.config.as_deref())?;
    let spec = &mut config.data;
    set(&mut spec.seed, a.seed);
    set(&mut spec.seen_classes, a.classes_seen);
    set(&mut spec.unseen_classes, a.classes_unseen);
    set(&mut spec.train_per_class, a.train_per_class);
    set(&mut spec.test_per_class, a.test_per_class);
    set(&mut spec.sequence_length, a.sequence_length);
    set(&mut spec.noise, a.noise);
    set(&mut config.paths.data_dir, a.out_dir);
    let ds = generate_synthetic(&config.data)?;
    let dir = &config.paths.data_dir;
    ds.save(dir)
        .with_context(|| format!("writing dataset to {}", dir.display()))?;
    println!(
        "wrote {} train / {} test sequences ({} seen + {} unseen classes) to {}",
        ds.train.len(),
        ds.test.len(),
        ds.table.seen_count(),
        ds.table.unseen_count(),
        dir.display()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut config = Config::load(a.common.config.as_deref())?;
    a.io.apply(&mut config);
    set(&mut config.paths.out_dir, a.out_dir);
    let t = &mut config.train;
    set(&mut t.seed, a.seed);
    set(&mut t.epochs, a.epochs);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.batch_size, a.batch_size);
    if let Some(p) = a.precision {
        t.precision = if p == "f64" {
            Precision::F64
        } else {
            Precision::F32
        };
    }
    a.thresholds.apply(t);
    config.train.validate()?;
    let tag = match config.train.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    with_precision!(tag, train_as(&config, !a.no_thresholds))
}

fn train_as<S: Scalar>(config: &Config, thresholds: bool) -> Result<()> {
    let ds = load_dataset(&config.paths.data_dir)?;
    let (train_view, _) = ds.split_views();
    let mut model = Model::<S>::new(config.model.for_dataset(&ds), config.train.seed)?;
    model.normalization = ds.manifest.normalization.clone();
    let start = Instant::now();
    let history = train_groups(
        &mut model,
        &train_view,
        &ds.table,
        &config.train,
        config.train.weights(),
        &ParamGroup::ALL,
        &mut print_epoch,
    )?;
    eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());
    write(
        &config.paths.out_dir.join("history.csv"),
        &history_csv(&history),
    )?;
    if thresholds {
        let fit = fit_thresholds(&model, &train_view, &ds.table, &config.train)?;
        eprintln!(
            "threshold loss {:.5}",
            fit.loss.last().copied().unwrap_or(f64::NAN)
        );
        model.thresholds = Some(fit.thresholds);
    }
    save_checkpoint(
        &model.to_checkpoint(Some(&config.train)),
        &config.paths.checkpoint,
    )?;
    println!("wrote {}", config.paths.checkpoint.display());
    Ok(())
}

fn refit(a: FitThresholds) -> Result<()> {
    let mut config = Config::load(a.common.config.as_deref())?;
    a.io.apply(&mut config);
    a.thresholds.apply(&mut config.train);
    config.train.validate()?;
    let output = a.output.unwrap_or_else(|| config.paths.checkpoint.clone());
    let ck = load_checkpoint(&config.paths.checkpoint)?;
    with_precision!(ck.precision.as_str(), refit_as(&config, &ck, &output))
}

fn refit_as<S: Scalar>(config: &Config, ck: &Checkpoint, output: &Path) -> Result<()> {
    let ds = load_dataset(&config.paths.data_dir)?;
    let (train_view, _) = ds.split_views();
    let mut model = Model::<S>::from_checkpoint(ck)?;
    let fit = fit_thresholds(&model, &train_view, &ds.table, &config.train)?;
    println!(
        "beta {}  threshold loss {:.5} -> {:.5}",
        config.train.beta,
        fit.loss.first().copied().unwrap_or(f64::NAN),
        fit.loss.last().copied().unwrap_or(f64::NAN)
    );
    model.thresholds = Some(fit.thresholds);
    save_checkpoint(&model.to_checkpoint(ck.train.as_ref()), output)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let mut config = Config::load(a.common.config.as_deref())?;
    a.io.apply(&mut config);
    set(&mut config.paths.out_dir, a.out_dir);
    let ck = load_checkpoint(&config.paths.checkpoint)?;
    with_precision!(ck.precision.as_str(), eval_as(&config, &ck))
}

fn eval_as<S: Scalar>(config: &Config, ck: &Checkpoint) -> Result<()> {
    let ds = load_dataset(&config.paths.data_dir)?;
    let (_, test) = ds.split_views();
    let model = Model::<S>::from_checkpoint(ck)?;
    let report = evaluate(&model, &test, &ds.table)?;
    let out = &config.paths.out_dir;
    write(
        &out.join("report.csv"),
        &report_csv(&[("end_to_end", &report)]),
    )?;
    write(
        &out.join("confusion.csv"),
        &confusion_csv(&ds.table, &report),
    )?;
    let line = summary(&report);
    write(&out.join("summary.txt"), &format!("{line}\n"))?;
    println!("{line}");
    println!("{:.4} s per sample", report.seconds_per_sample);
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let mut config = Config::load(a.common.config.as_deref())?;
    a.io.apply(&mut config);
    set(&mut config.paths.out_dir, a.out_dir);
    if a.no_two_stage {
        config.eval.two_stage = false;
    }
    let ck = load_checkpoint(&config.paths.checkpoint)?;
    let mut train_config = ck.train.clone().unwrap_or_else(|| config.train.clone());
    set(&mut train_config.epochs, a.epochs);
    with_precision!(
        ck.precision.as_str(),
        ablate_as(&config, &ck, &train_config)
    )
}

fn ablate_as<S: Scalar>(
    config: &Config,
    ck: &Checkpoint,
    train_config: &TrainConfig,
) -> Result<()> {
    let ds = load_dataset(&config.paths.data_dir)?;
    let (train_view, test) = ds.split_views();
    let joint = Model::<S>::from_checkpoint(ck)?;
    let out = &config.paths.out_dir;
    let two_stage = if config.eval.two_stage {
        let mut model = Model::<S>::new(ck.model.clone(), train_config.seed)?;
        model.normalization = joint.normalization.clone();
        eprintln!("training the two-stage model");
        train_two_stage(
            &mut model,
            &train_view,
            &ds.table,
            train_config,
            &mut print_epoch,
        )?;
        let fit = fit_thresholds(&model, &train_view, &ds.table, train_config)?;
        model.thresholds = Some(fit.thresholds);
        save_checkpoint(
            &model.to_checkpoint(Some(train_config)),
            &out.join("two_stage.json"),
        )?;
        Some(model)
    } else {
        None
    };
    let rows = ablation_rows(
        &joint,
        two_stage.as_ref(),
        &test,
        &ds.table,
        &config.eval.fixed_thresholds,
    )?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let named: Vec<(&str, &_)> = rows.iter().map(|r| (r.name.as_str(), &r.report)).collect();
    write(&out.join("ablation_report.csv"), &report_csv(&named))?;
    for row in &rows {
        println!("{:<24} {}", row.name, summary(&row.report));
    }
    Ok(())
}

fn sweep(a: SweepBeta) -> Result<()> {
    let mut config = Config::load(a.common.config.as_deref())?;
    a.io.apply(&mut config);
    set(&mut config.paths.out_dir, a.out_dir);
    set(&mut config.eval.betas, a.values);
    if config.eval.betas.is_empty() {
        bail!("no beta values given");
    }
    let ck = load_checkpoint(&config.paths.checkpoint)?;
    with_precision!(ck.precision.as_str(), sweep_as(&config, &ck))
}

fn sweep_as<S: Scalar>(config: &Config, ck: &Checkpoint) -> Result<()> {
    let ds = load_dataset(&config.paths.data_dir)?;
    let (train_view, test) = ds.split_views();
    let model = Model::<S>::from_checkpoint(ck)?;
    let mut train_config = ck.train.clone().unwrap_or_else(|| config.train.clone());
    train_config.threshold_epochs = config.train.threshold_epochs;
    train_config.threshold_lr = config.train.threshold_lr;
    let rows = sweep_beta(
        &model,
        &train_view,
        &test,
        &ds.table,
        &train_config,
        &config.eval.betas,
    )?;
    let csv = sweep_csv(&rows);
    write(&config.paths.out_dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
