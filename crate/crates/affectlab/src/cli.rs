//! Command-line surface: dataset generation, the three training pipelines,
//! prediction, evaluation and ensembling. Configuration comes from
//! `key = value` files plus flags, with flags taking precedence; the
//! `AFFECTLAB_RUNS` environment variable sets the default run-directory
//! root. Exit codes: 0 success, 2 configuration error, 3 data error,
//! 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{synth_dataset, Task};
use crate::engine::{
    ensemble_predict, load_model, predict_rows, pretrain_mae, train_lsd, train_mtl, LoadedModel,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{eval_lsd_files, eval_mtl_files};

#[derive(Parser, Debug)]
#[command(name = "affectlab", version, about = "Multi-task facial affect recognition and masked co-training on synthetic data", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory (PNG images + labels.csv).
    GenData(GenDataArgs),
    /// Masked-autoencoder pretraining of the encoder.
    PretrainMae(TrainArgs),
    /// Multi-task training (AU + expression + valence/arousal).
    TrainMtl(TrainArgs),
    /// Masked co-training for expression recognition.
    TrainLsd(TrainArgs),
    /// Predict on a dataset directory with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a prediction file against a label file.
    Evaluate(EvaluateArgs),
    /// Average predictions over several checkpoints or runs.
    Ensemble(EnsembleArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// key = value configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (labels.csv + PNGs); omitted -> synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (default: $AFFECTLAB_RUNS/<command>-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    lr_scaling: Option<bool>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_grad: Option<f64>,
    #[arg(long)]
    layer_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    accum_iters: Option<usize>,
    #[arg(long)]
    drop_path: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    exp_sum_variant: Option<bool>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    cnn_epochs: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Synthetic dataset size when --data is not given.
    #[arg(long)]
    data_n: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    /// Comma-separated checkpoint directories (different-epochs ensemble).
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<PathBuf>,
    /// Comma-separated run directories; each contributes its best epoch
    /// (different-parameters ensemble).
    #[arg(long, value_delimiter = ',')]
    runs: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "mtl" => Ok(Task::Mtl),
        "lsd" => Ok(Task::Lsd),
        other => Err(format!("unknown task '{other}' (expected mtl or lsd)")),
    }
}

/// All configuration keys a config file may set.
const CONFIG_KEYS: &[&str] = &[
    "preset",
    "base_lr",
    "lr_scaling",
    "weight_decay",
    "batch_size",
    "clip_grad",
    "layer_decay",
    "warmup_epochs",
    "total_epochs",
    "accum_iters",
    "drop_path",
    "mask_ratio",
    "lambda",
    "seed",
    "k1",
    "k2",
    "exp_sum_variant",
    "augment",
    "cnn_epochs",
    "val_fraction",
    "init_checkpoint",
    "data_n",
];

/// Keys each training subcommand actually consumes (the rest of the shared
/// namespace only warns).
fn relevant_keys(kind: &str) -> Vec<&'static str> {
    let common = vec![
        "preset",
        "base_lr",
        "lr_scaling",
        "weight_decay",
        "batch_size",
        "clip_grad",
        "layer_decay",
        "warmup_epochs",
        "total_epochs",
        "accum_iters",
        "seed",
        "val_fraction",
        "init_checkpoint",
        "data_n",
        "augment",
    ];
    let mut keys = common;
    match kind {
        "pretrain-mae" => keys.push("mask_ratio"),
        "train-mtl" => keys.extend(["drop_path", "k1", "k2", "exp_sum_variant", "cnn_epochs"]),
        "train-lsd" => keys.extend(["drop_path", "mask_ratio", "lambda"]),
        _ => {}
    }
    keys
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                i + 1
            )));
        };
        let key = k.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown configuration key '{key}'",
                path.display(),
                i + 1
            )));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn set_cfg(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("invalid value '{value}' for key '{key}'"));
    match key {
        "preset" => cfg.preset = value.to_string(),
        "base_lr" => cfg.base_lr = value.parse().map_err(|_| bad())?,
        "lr_scaling" => cfg.lr_scaling = value.parse().map_err(|_| bad())?,
        "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad())?,
        "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
        "clip_grad" => cfg.clip_grad = value.parse().map_err(|_| bad())?,
        "layer_decay" => cfg.layer_decay = value.parse().map_err(|_| bad())?,
        "warmup_epochs" => cfg.warmup_epochs = value.parse().map_err(|_| bad())?,
        "total_epochs" => cfg.total_epochs = value.parse().map_err(|_| bad())?,
        "accum_iters" => cfg.accum_iters = value.parse().map_err(|_| bad())?,
        "drop_path" => cfg.drop_path = value.parse().map_err(|_| bad())?,
        "mask_ratio" => cfg.mask_ratio = value.parse().map_err(|_| bad())?,
        "lambda" => cfg.lambda = value.parse().map_err(|_| bad())?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
        "k1" => cfg.k1 = value.parse().map_err(|_| bad())?,
        "k2" => cfg.k2 = value.parse().map_err(|_| bad())?,
        "exp_sum_variant" => cfg.exp_sum_variant = value.parse().map_err(|_| bad())?,
        "augment" => cfg.augment = value.parse().map_err(|_| bad())?,
        "cnn_epochs" => cfg.cnn_epochs = value.parse().map_err(|_| bad())?,
        "val_fraction" => cfg.val_fraction = value.parse().map_err(|_| bad())?,
        "init_checkpoint" => {
            cfg.init_checkpoint = if value.is_empty() {
                None
            } else {
                Some(PathBuf::from(value))
            }
        }
        "data_n" => cfg.data_n = value.parse().map_err(|_| bad())?,
        other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
    }
    Ok(())
}

fn build_config(
    kind: &str,
    args: &TrainArgs,
    base: TrainConfig,
    warn: &mut dyn Write,
) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let file = parse_config_file(path)?;
        let relevant = relevant_keys(kind);
        for (k, v) in &file {
            if !relevant.contains(&k.as_str()) {
                let _ = writeln!(warn, "warning: configuration key '{k}' is unused by {kind}");
            }
            set_cfg(&mut cfg, k, v)?;
        }
    }
    macro_rules! flag {
        ($field:ident, $arg:expr) => {
            if let Some(v) = &$arg {
                cfg.$field = v.clone();
            }
        };
    }
    flag!(seed, args.seed);
    flag!(preset, args.preset);
    flag!(base_lr, args.base_lr);
    flag!(lr_scaling, args.lr_scaling);
    flag!(weight_decay, args.weight_decay);
    flag!(batch_size, args.batch_size);
    flag!(clip_grad, args.clip_grad);
    flag!(layer_decay, args.layer_decay);
    flag!(warmup_epochs, args.warmup_epochs);
    flag!(total_epochs, args.epochs);
    flag!(accum_iters, args.accum_iters);
    flag!(drop_path, args.drop_path);
    flag!(mask_ratio, args.mask_ratio);
    flag!(lambda, args.lambda);
    flag!(k1, args.k1);
    flag!(k2, args.k2);
    flag!(exp_sum_variant, args.exp_sum_variant);
    flag!(augment, args.augment);
    flag!(cnn_epochs, args.cnn_epochs);
    flag!(val_fraction, args.val_fraction);
    if let Some(p) = &args.init_checkpoint {
        cfg.init_checkpoint = Some(p.clone());
    }
    flag!(data_n, args.data_n);
    cfg.validate()?;
    Ok(cfg)
}

fn runs_root() -> PathBuf {
    std::env::var_os("AFFECTLAB_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir_for(kind: &str, args: &TrainArgs, cfg: &TrainConfig) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| runs_root().join(format!("{kind}-seed{}", cfg.seed)))
}

fn load_training_data(args: &TrainArgs, cfg: &TrainConfig, task: Task) -> Result<Vec<crate::data::LabeledImage>> {
    match &args.data {
        Some(dir) => crate::data::read_dataset_dir(dir),
        None => Ok(synth_dataset(cfg.data_n, task, cfg.seed)),
    }
}

fn read_eval_images(dir: &Path) -> Result<(Vec<String>, Vec<crate::data::ImageTensor>)> {
    let data = crate::data::read_dataset_dir(dir)?;
    let mut ids = Vec::with_capacity(data.len());
    let mut images = Vec::with_capacity(data.len());
    for s in data {
        let mut rng = crate::nn::derive_rng(0, &[0]);
        ids.push(s.id);
        images.push(crate::data::augment(&s.image, crate::data::AugmentMode::Eval, &mut rng)?);
    }
    Ok((ids, images))
}

fn predict_with_models(
    models: &[LoadedModel],
    data_dir: &Path,
    out: &Path,
) -> Result<()> {
    let (ids, images) = read_eval_images(data_dir)?;
    let mut rows = Vec::with_capacity(ids.len());
    for (chunk_ids, chunk_imgs) in ids.chunks(32).zip(images.chunks(32)) {
        let refs: Vec<&crate::data::ImageTensor> = chunk_imgs.iter().collect();
        let chunk_rows = if models.len() == 1 {
            predict_rows(&models[0], &refs, chunk_ids)?
        } else {
            ensemble_predict(models, &refs, chunk_ids)?
        };
        rows.extend(chunk_rows);
    }
    crate::data::write_predictions_csv(out, &rows)
}

fn best_checkpoint_of_run(run_dir: &Path) -> Result<PathBuf> {
    let report = fs::read_to_string(run_dir.join("report.txt"))
        .map_err(|e| Error::io(run_dir.join("report.txt"), e))?;
    let epoch = report
        .lines()
        .find_map(|l| l.strip_prefix("best_epoch = "))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Input(format!("{}: no best_epoch in report", run_dir.display())))?;
    Ok(run_dir.join("checkpoints").join(format!("epoch_{epoch:03}")))
}

/// Entry point shared by the binary and the tests. Returns the process exit
/// code and writes human output to `out`.
pub fn run(argv: &[String], out: &mut dyn Write) -> i32 {
    match run_inner(argv, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(argv: &[String], out: &mut dyn Write) -> Result<()> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with zero-ish intent;
            // print and treat as success, real parse errors are config errors
            let text = e.render().to_string();
            let _ = write!(out, "{text}");
            if e.use_stderr() {
                return Err(Error::Config("invalid command line".into()));
            }
            return Ok(());
        }
    };
    match cli.command {
        Command::GenData(args) => {
            if args.n < 1 {
                return Err(Error::Config("n must be >= 1".into()));
            }
            let data = synth_dataset(args.n, args.task, args.seed);
            crate::data::write_dataset_dir(&args.out, &data)?;
            writeln!(out, "wrote {} samples to {}", args.n, args.out.display())
                .map_err(|e| Error::io(&args.out, e))?;
            Ok(())
        }
        Command::PretrainMae(args) => {
            let mut base = TrainConfig::emma_default();
            base.mask_ratio = 0.75;
            base.total_epochs = 2;
            base.weight_decay = 0.05;
            let cfg = build_config("pretrain-mae", &args, base, out)?;
            let data = load_training_data(&args, &cfg, Task::Lsd)?;
            let run_dir = run_dir_for("pretrain-mae", &args, &cfg);
            let summary = pretrain_mae(&cfg, &data, &run_dir)?;
            writeln!(
                out,
                "pretrained {} epochs, final loss {:.6}, checkpoint {}",
                cfg.total_epochs,
                -summary.final_train_score,
                summary.final_checkpoint.display()
            )
            .map_err(|e| Error::io(&run_dir, e))?;
            Ok(())
        }
        Command::TrainMtl(args) => {
            let cfg = build_config("train-mtl", &args, TrainConfig::emma_default(), out)?;
            let data = load_training_data(&args, &cfg, Task::Mtl)?;
            let run_dir = run_dir_for("train-mtl", &args, &cfg);
            let summary = train_mtl(&cfg, &data, &run_dir)?;
            writeln!(
                out,
                "trained {} epochs, best val P_MTL {:.6} at epoch {}, run dir {}",
                cfg.total_epochs,
                summary.best_score,
                summary.best_epoch,
                run_dir.display()
            )
            .map_err(|e| Error::io(&run_dir, e))?;
            Ok(())
        }
        Command::TrainLsd(args) => {
            let cfg = build_config("train-lsd", &args, TrainConfig::cotex_default(), out)?;
            let data = load_training_data(&args, &cfg, Task::Lsd)?;
            let run_dir = run_dir_for("train-lsd", &args, &cfg);
            let summary = train_lsd(&cfg, &data, &run_dir)?;
            writeln!(
                out,
                "trained {} epochs, best val P_LSD {:.6} at epoch {}, run dir {}",
                cfg.total_epochs,
                summary.best_score,
                summary.best_epoch,
                run_dir.display()
            )
            .map_err(|e| Error::io(&run_dir, e))?;
            Ok(())
        }
        Command::Predict(args) => {
            let model = load_model(&args.checkpoint)?;
            predict_with_models(&[model], &args.data, &args.out)?;
            writeln!(out, "wrote predictions to {}", args.out.display())
                .map_err(|e| Error::io(&args.out, e))?;
            Ok(())
        }
        Command::Evaluate(args) => {
            let report = match args.task {
                Task::Mtl => eval_mtl_files(&args.pred, &args.labels)?,
                Task::Lsd => eval_lsd_files(&args.pred, &args.labels)?,
            };
            write!(out, "{}", report.format_text()).map_err(|e| Error::io(&args.pred, e))?;
            Ok(())
        }
        Command::Ensemble(args) => {
            let mut paths = args.checkpoints.clone();
            for run in &args.runs {
                paths.push(best_checkpoint_of_run(run)?);
            }
            if paths.is_empty() {
                return Err(Error::Config(
                    "ensemble needs --checkpoints and/or --runs".into(),
                ));
            }
            let models: Vec<LoadedModel> =
                paths.iter().map(|p| load_model(p)).collect::<Result<_>>()?;
            predict_with_models(&models, &args.data, &args.out)?;
            writeln!(
                out,
                "wrote {}-model ensemble predictions to {}",
                models.len(),
                args.out.display()
            )
            .map_err(|e| Error::io(&args.out, e))?;
            Ok(())
        }
    }
}
