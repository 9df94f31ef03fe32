//! Command-line verbs, run configuration and checkpoints.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 divergence,
//! 4 checkpoint mismatch, 5 gradient check.

pub mod checkpoint;
pub mod config;
mod gradcheck;

pub use checkpoint::{
    assign_tensors, checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, read_checkpoint,
};
pub use config::{parse_scales, DatasetKind, RunConfig};
pub use gradcheck::{gradcheck, GradcheckEntry, GradcheckReport, GRADCHECK_EPS, GRADCHECK_TOL};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{generate_scale_task, load_cifar10_binary, Dataset, Split};
use crate::error::Error;
use crate::model::{prefix_macs, AnyModel, Head, Parameterized, SrnnHalfGru, SrnnVanilla};
use crate::numerics::Tensor;
use crate::train::{fine_tune_with, fit_with, init_single, EpochRecord, PreparedSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_top1,val_top5";
pub const EVAL_HEADER: &str = "head,top1,top5";
pub const BENCH_HEADER: &str = "scales_used,top1,mac_count";

#[derive(Debug, Parser)]
#[command(name = "srnn", version, about = "Scale recurrent networks over image pyramids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (unless `pretrained` is set) and train the configured head.
    Train { config: PathBuf },
    /// Compare single scales, both ensembles and every recurrent checkpoint.
    Eval {
        /// One or more checkpoints followed by the run config.
        #[arg(num_args = 2.., required = true)]
        paths: Vec<PathBuf>,
    },
    /// Check both recurrent heads' gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Accuracy and cost of a recurrent head stopped after each pyramid prefix.
    Bench { checkpoint: PathBuf, config: PathBuf },
}

/// A failed command: message plus exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(e: Error) -> Self {
        Self::new(EXIT_CONFIG, e.to_string())
    }

    fn checkpoint(path: &Path, e: Error) -> Self {
        Self::new(EXIT_CHECKPOINT, format!("{}: {e}", path.display()))
    }

    fn run(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::MissingTensors(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train { config } => cmd_train(&config).map(|_| ()),
        Command::Eval { mut paths } => {
            let config = paths.pop().expect("clap enforces two paths");
            cmd_eval(&paths, &config).map(|_| ())
        }
        Command::Gradcheck { seed, seeds, corrupt } => {
            cmd_gradcheck(seed, seeds.max(1), corrupt.as_deref()).map(|_| ())
        }
        Command::Bench { checkpoint, config } => cmd_bench(&checkpoint, &config).map(|_| ()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => generate_scale_task(&cfg.synthetic_spec()).map_err(CliError::config),
        DatasetKind::Cifar10 => {
            let load = |p: &Option<PathBuf>, split| {
                let p = p.as_ref().expect("validated");
                load_cifar10_binary(p, split).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", p.display())))
            };
            Ok((load(&cfg.data_path, Split::Train)?, load(&cfg.val_path, Split::Val)?))
        }
    }
}

fn channels_of(ds: &Dataset) -> usize {
    ds.samples().first().map_or(1, |s| s.image.channels())
}

/// Untrained model of the given kind, shaped by the run config.
fn template(cfg: &RunConfig, kind: Option<Head>, in_channels: usize, classes: usize) -> CliResult<AnyModel> {
    let base = init_single(
        cfg.cnn_config(in_channels).map_err(CliError::config)?,
        classes,
        cfg.train.seed,
    );
    Ok(match kind {
        Some(Head::SrnnVanilla) => AnyModel::Vanilla(SrnnVanilla::from_pretrained(&base)),
        Some(Head::SrnnHalfGru) => AnyModel::HalfGru(SrnnHalfGru::from_pretrained(&base)),
        _ => AnyModel::Single(base),
    })
}

/// Recurrent head stored in a checkpoint, judged by its tensor names.
fn stored_head(tensors: &[(String, Tensor)]) -> Option<Head> {
    let has = |n: &str| tensors.iter().any(|(name, _)| name == n);
    if has("gate.Wz") || has("gate.Uz") || has("gate.bias") {
        Some(Head::SrnnHalfGru)
    } else if has("srnn.U") {
        Some(Head::SrnnVanilla)
    } else {
        None
    }
}

fn load_model(
    path: &Path,
    cfg: &RunConfig,
    expect: Option<Head>,
    in_channels: usize,
    classes: usize,
) -> CliResult<AnyModel> {
    let tensors = read_checkpoint(path).map_err(|e| CliError::checkpoint(path, e))?;
    let kind = stored_head(&tensors).or(expect);
    let mut model = template(cfg, kind, in_channels, classes)?;
    assign_tensors(&mut model, &tensors).map_err(|e| CliError::checkpoint(path, e))?;
    Ok(model)
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.4},{:.4}",
            r.epoch, r.lr, r.train_loss, r.val_top1, r.val_top5
        );
    }
    s
}

/// Files written by a successful `train`.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub model: AnyModel,
}

pub fn cmd_train(config_path: &Path) -> CliResult<TrainReport> {
    let cfg = RunConfig::load(config_path).map_err(CliError::config)?;
    let (train, val) = load_data(&cfg)?;
    let (in_ch, classes) = (channels_of(&train), train.classes());
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", cfg.out_dir.display())))?;
    let mut progress = |stage: &str, r: &EpochRecord| {
        eprintln!(
            "{stage:>12} epoch {:>3}  lr {:<8}  loss {:.4}  val top-1 {:>6.2}%",
            r.epoch, r.lr, r.train_loss, r.val_top1
        );
    };
    let head = cfg.head();
    let (model, history, pretrained, pretrain_history) = match &cfg.pretrained {
        Some(path) => {
            let AnyModel::Single(base) = load_model(path, &cfg, None, in_ch, classes)? else {
                return Err(CliError::new(
                    EXIT_CHECKPOINT,
                    format!("{}: expected a single-scale checkpoint", path.display()),
                ));
            };
            if head == Head::Single {
                let out = fit_with(&cfg.train, &train, &val, base, &mut progress).map_err(CliError::run)?;
                (out.model, out.history, None, Vec::new())
            } else {
                let (m, h) = fine_tune_with(&cfg.train, &train, &val, &base, &mut progress).map_err(CliError::run)?;
                (m, h, None, Vec::new())
            }
        }
        None => {
            let base = init_single(
                cfg.cnn_config(in_ch).map_err(CliError::config)?,
                classes,
                cfg.train.seed,
            );
            let out = fit_with(&cfg.train, &train, &val, base, &mut progress).map_err(CliError::run)?;
            let pre = (head != Head::Single && cfg.train.pretrain_epochs > 0).then_some(out.pretrained);
            (out.model, out.history, pre, out.pretrain_history)
        }
    };
    let dir = &cfg.out_dir;
    write_file(&dir.join("metrics.csv"), metrics_csv(&history).as_bytes())?;
    if let Some(pre) = &pretrained {
        write_file(
            &dir.join("pretrain_metrics.csv"),
            metrics_csv(&pretrain_history).as_bytes(),
        )?;
        write_file(
            &dir.join("pretrained.srnn"),
            &encode_checkpoint(&pre.named_params()).map_err(CliError::run)?,
        )?;
    }
    write_file(
        &dir.join("model.srnn"),
        &encode_checkpoint(&model.named_params()).map_err(CliError::run)?,
    )?;
    if let Some(last) = history.last() {
        println!(
            "{head}: {} epochs, final val top-1 {:.2}%, top-5 {:.2}%  -> {}",
            history.len(),
            last.val_top1,
            last.val_top5,
            dir.display()
        );
    }
    Ok(TrainReport {
        out_dir: dir.clone(),
        history,
        model,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub top1: f64,
    pub top5: f64,
}

fn format_scale((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

/// Evaluation rows in fixed order: single scales ascending, `ens_prob`,
/// `ens_logit`, then recurrent heads (vanilla before half-GRU).
///
/// Single-scale and ensemble rows use the single-scale checkpoint when one
/// is given, otherwise the base network of the first checkpoint.
pub fn eval_rows(models: &[AnyModel], val: &Dataset, scales: &[(usize, usize)]) -> crate::Result<Vec<EvalRow>> {
    let base = models
        .iter()
        .find(|m| matches!(m, AnyModel::Single(_)))
        .or(models.first())
        .ok_or_else(|| Error::contract("no model to evaluate"))?;
    let base = AnyModel::Single(base.base().clone());
    let set = PreparedSet::new(val, scales)?;
    let all: Vec<usize> = (0..scales.len()).collect();
    let mut rows = Vec::new();
    let mut push = |name: String, model: &AnyModel, head: Head, levels: &[usize]| -> crate::Result<()> {
        let e = set.evaluate(levels, |l| model.predict(head, l))?;
        rows.push(EvalRow {
            name,
            top1: e.top1,
            top5: e.top5,
        });
        Ok(())
    };
    for (i, &s) in scales.iter().enumerate() {
        push(format!("single@{}", format_scale(s)), &base, Head::Single, &[i])?;
    }
    push(Head::EnsProb.name().into(), &base, Head::EnsProb, &all)?;
    push(Head::EnsLogit.name().into(), &base, Head::EnsLogit, &all)?;
    for head in [Head::SrnnVanilla, Head::SrnnHalfGru] {
        for m in models.iter().filter(|m| m.srnn_head() == Some(head)) {
            push(head.name().into(), m, head, &all)?;
        }
    }
    Ok(rows)
}

fn table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:<16} {:>8} {:>8}\n", "head", "top-1 %", "top-5 %");
    for r in rows {
        let _ = writeln!(s, "{:<16} {:>8.2} {:>8.2}", r.name, r.top1, r.top5);
    }
    s
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4}", r.name, r.top1, r.top5);
    }
    s
}

pub fn cmd_eval(checkpoints: &[PathBuf], config_path: &Path) -> CliResult<Vec<EvalRow>> {
    let cfg = RunConfig::load(config_path).map_err(CliError::config)?;
    let (train, val) = load_data(&cfg)?;
    let (in_ch, classes) = (channels_of(&train), train.classes());
    let expect = (!cfg.head().is_ensemble() && cfg.head() != Head::Single).then_some(cfg.head());
    let models = checkpoints
        .iter()
        .map(|p| {
            load_model(
                p,
                &cfg,
                if checkpoints.len() == 1 { expect } else { None },
                in_ch,
                classes,
            )
        })
        .collect::<CliResult<Vec<_>>>()?;
    let rows = eval_rows(&models, &val, &cfg.train.scales).map_err(CliError::run)?;
    print!("{}", table(&rows));
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", cfg.out_dir.display())))?;
    write_file(&cfg.out_dir.join("eval.csv"), eval_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn cmd_gradcheck(seed: u64, seeds: u64, corrupt: Option<&str>) -> CliResult<GradcheckReport> {
    let mut all = GradcheckReport::default();
    for s in seed..seed + seeds {
        let report = gradcheck(s, corrupt).map_err(|e| CliError::new(EXIT_GRADCHECK, e.to_string()))?;
        for e in &report.entries {
            println!(
                "seed {s:<3} {:<13} {:<18} rel {:.3e}",
                e.head.name(),
                e.param,
                e.rel_error
            );
        }
        all.entries.extend(report.entries);
    }
    let worst = all.worst().cloned().expect("both heads have parameters");
    println!(
        "worst: {} {} rel {:.3e} (tolerance {GRADCHECK_TOL:e}, eps {GRADCHECK_EPS:e})",
        worst.head.name(),
        worst.param,
        worst.rel_error
    );
    if all.passed() {
        Ok(all)
    } else {
        Err(CliError::new(
            EXIT_GRADCHECK,
            format!(
                "gradient check failed: {} {} relative error {:.3e}",
                worst.head.name(),
                worst.param,
                worst.rel_error
            ),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub scales_used: usize,
    pub top1: f64,
    pub mac_count: u64,
}

pub fn bench_rows(model: &AnyModel, val: &Dataset, scales: &[(usize, usize)]) -> crate::Result<Vec<BenchRow>> {
    let head = model
        .srnn_head()
        .ok_or_else(|| Error::contract("anytime benchmark needs a recurrent model"))?;
    let base = model.base();
    let macs = prefix_macs(&base.cnn.config, base.classes(), head, scales)?;
    let set = PreparedSet::new(val, scales)?;
    (1..=scales.len())
        .map(|k| {
            let levels: Vec<usize> = (0..k).collect();
            let e = set.evaluate(&levels, |l| model.predict(head, l))?;
            Ok(BenchRow {
                scales_used: k,
                top1: e.top1,
                mac_count: macs[k - 1],
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{}", r.scales_used, r.top1, r.mac_count);
    }
    s
}

pub fn cmd_bench(checkpoint: &Path, config_path: &Path) -> CliResult<Vec<BenchRow>> {
    let cfg = RunConfig::load(config_path).map_err(CliError::config)?;
    let (train, val) = load_data(&cfg)?;
    let expect = match cfg.head() {
        h @ (Head::SrnnVanilla | Head::SrnnHalfGru) => h,
        _ => Head::SrnnHalfGru,
    };
    let model = load_model(checkpoint, &cfg, Some(expect), channels_of(&train), train.classes())?;
    let rows = bench_rows(&model, &val, &cfg.train.scales).map_err(CliError::run)?;
    println!("{:>11} {:>8} {:>14}", "scales_used", "top-1 %", "MACs/image");
    for r in &rows {
        println!("{:>11} {:>8.2} {:>14}", r.scales_used, r.top1, r.mac_count);
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", cfg.out_dir.display())))?;
    write_file(&cfg.out_dir.join("bench.csv"), bench_csv(&rows).as_bytes())?;
    Ok(rows)
}
