//! The `elt` command line.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure (NaN or divergence), 5 I/O error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{self, BenchPoint, BenchSettings, Kernel};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synth::SyntheticScenario;
use crate::data::{self, Manifest, WindowDataset};
use crate::error::{EltError, ErrorKind, Result};
use crate::eval::{self, ApplianceThresholds, EvalReport};
use crate::model::EltModel;
use crate::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub fn exit_code(err: &EltError) -> i32 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
        ErrorKind::Io => EXIT_IO,
    }
}

/// File names inside a preprocessed data directory.
pub const TRAIN_CACHE: &str = "train.cache";
pub const TEST_CACHE: &str = "test.cache";
pub const CHECKPOINT_FILE: &str = "best.eltc";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "elt", version, about = "Energy disaggregation with a localness transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// n_local in 0..=4
    LocalHeads,
    /// l_win in {10, 15, 20, 25, 30}
    Window,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic household (channel CSVs plus manifest).
    Synth {
        /// Scenario TOML; the built-in two-appliance scenario when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the built-in scenario.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Align, normalize and cache windows for one appliance.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        appliance: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 599)]
        input_len: usize,
        #[arg(long, default_value_t = data::SAMPLE_PERIOD)]
        period: i64,
    },
    /// Train a model; writes the best checkpoint and per-epoch history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Preprocessed data directory; falls back to the config's manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score checkpoints on held-out windows.
    Eval {
        /// Repeat together with --data and --appliance to evaluate several
        /// appliances; a macro-average row is added.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, required = true)]
        appliance: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Skip writing the per-window trace CSV.
        #[arg(long)]
        no_trace: bool,
    },
    /// Disaggregate a mains CSV with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = data::SAMPLE_PERIOD)]
        period: i64,
    },
    /// Time attention kernels against sequence length.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384])]
        lengths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ["standard".to_string(), "linear".to_string(), "local".to_string()])]
        kernels: Vec<String>,
        #[arg(long, default_value_t = 64)]
        d_head: usize,
        #[arg(long, default_value_t = 32)]
        l_win: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        /// Also time whole-model inference at these input lengths (odd).
        #[arg(long, value_delimiter = ',')]
        model_lengths: Vec<usize>,
    },
    /// Train and evaluate over an ablation grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Preprocess {
            manifest,
            appliance,
            out,
            input_len,
            period,
        } => preprocess(&manifest, &appliance, &out, input_len, period),
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.run.out.clone())
                .ok_or_else(|| EltError::Config("train needs --out or run.out in the config".into()))?;
            let ckpt = train_run(&cfg, data.as_deref(), &out)?;
            println!("{}", ckpt.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            appliance,
            out,
            stride,
            no_trace,
        } => evaluate(&checkpoint, &data, &appliance, &out, stride, !no_trace),
        Command::Predict {
            checkpoint,
            input,
            out,
            period,
        } => predict(&checkpoint, &input, &out, period),
        Command::Bench {
            lengths,
            out,
            kernels,
            d_head,
            l_win,
            reps,
            warmups,
            model_lengths,
        } => {
            let settings = BenchSettings {
                d_head,
                l_win,
                reps,
                warmups,
                ..BenchSettings::default()
            };
            let kernels = kernels.iter().map(|k| k.parse()).collect::<Result<Vec<Kernel>>>()?;
            run_bench(&kernels, &lengths, &settings, &model_lengths, &out)
        }
        Command::Sweep {
            config,
            grid,
            out,
            data,
        } => sweep(&RunConfig::load(&config)?, grid, data.as_deref(), &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EltError::io(dir, e))
}

pub fn synth(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let scenario = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| EltError::io(p, e))?;
            SyntheticScenario::from_toml(&text)?
        }
        None => SyntheticScenario::two_appliance(seed),
    };
    create_dir(out)?;
    let manifest = scenario.write(out)?;
    let resolved = out.join("scenario.resolved.toml");
    std::fs::write(&resolved, scenario.to_toml()).map_err(|e| EltError::io(&resolved, e))?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn preprocess(manifest: &Path, appliance: &str, out: &Path, input_len: usize, period: i64) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let prepared = data::prepare(&m, appliance, input_len, period)?;
    create_dir(out)?;
    data::write_cache(&out.join(TRAIN_CACHE), &prepared.train)?;
    data::write_cache(&out.join(TEST_CACHE), &prepared.test)?;
    println!(
        "{}: {} training windows, {} test windows",
        out.display(),
        prepared.train.len(),
        prepared.test.len()
    );
    Ok(())
}

/// Training and test datasets for a run, from a cache directory or by
/// preparing the config's manifest.
pub fn load_datasets(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<(WindowDataset, WindowDataset)> {
    let (train, test) = match data_dir {
        Some(dir) => (
            data::read_cache(&dir.join(TRAIN_CACHE), cfg.data.train_stride)?,
            data::read_cache(&dir.join(TEST_CACHE), cfg.data.eval_stride)?,
        ),
        None => {
            let manifest = cfg
                .data
                .manifest
                .as_deref()
                .ok_or_else(|| EltError::Config("no --data directory and no data.manifest in the config".into()))?;
            let appliance = cfg
                .data
                .appliance
                .as_deref()
                .ok_or_else(|| EltError::Config("data.appliance is required with data.manifest".into()))?;
            let p = data::prepare(&Manifest::load(manifest)?, appliance, cfg.model.input_len, cfg.data.period)?;
            (p.train.with_stride(cfg.data.train_stride)?, p.test.with_stride(cfg.data.eval_stride)?)
        }
    };
    if let Some(a) = &cfg.data.appliance {
        if *a != train.appliance {
            return Err(EltError::Config(format!(
                "config names appliance `{a}` but the data is for `{}`",
                train.appliance
            )));
        }
    }
    if train.input_len != cfg.model.input_len {
        return Err(EltError::Config(format!(
            "model.input_len is {} but the cached windows have length {}",
            cfg.model.input_len, train.input_len
        )));
    }
    Ok((train, test))
}

/// Trains per `cfg`, writing the resolved config, history and best
/// checkpoint under `out`. Returns the checkpoint path.
pub fn train_run(cfg: &RunConfig, data_dir: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.sync();
    cfg.validate()?;
    let (train_set, _) = load_datasets(&cfg, data_dir)?;
    create_dir(out)?;
    cfg.run.out = Some(out.to_path_buf());
    cfg.write_resolved(out)?;
    let model = EltModel::init(cfg.model.clone(), cfg.run.seed)?;
    let outcome = train::train(model, &train_set, &cfg.train)?;
    train::write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    let path = out.join(CHECKPOINT_FILE);
    Checkpoint::from_training(&outcome, &train_set).save(&path)?;
    Ok(path)
}

fn thresholds_for(ckpt: &Checkpoint) -> ApplianceThresholds {
    let mut t = ApplianceThresholds::default();
    if let Some(w) = ckpt.on_threshold {
        t.insert(&ckpt.appliance, w);
    }
    t
}

/// Scores one checkpoint on a preprocessed test cache.
pub fn evaluate_one(
    checkpoint: &Path,
    data_dir: &Path,
    appliance: &str,
    stride: usize,
) -> Result<(EvalReport, Vec<eval::TracePoint>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let test = data::read_cache(&data_dir.join(TEST_CACHE), stride)?;
    if ckpt.appliance != appliance || test.appliance != appliance {
        return Err(EltError::Config(format!(
            "appliance mismatch: requested `{appliance}`, checkpoint `{}`, data `{}`",
            ckpt.appliance, test.appliance
        )));
    }
    let same = |a: data::NormStats, b: data::NormStats| a.mean.to_bits() == b.mean.to_bits() && a.std.to_bits() == b.std.to_bits();
    if !same(ckpt.mains_stats, test.mains_stats) || !same(ckpt.appliance_stats, test.appliance_stats) {
        return Err(EltError::Data(
            "normalization statistics of the checkpoint and the test cache differ".into(),
        ));
    }
    if test.input_len != ckpt.model.config().input_len {
        return Err(EltError::Config(format!(
            "checkpoint expects windows of {}, cache has {}",
            ckpt.model.config().input_len,
            test.input_len
        )));
    }
    eval::report(&ckpt.model, &test, appliance, &thresholds_for(&ckpt))
}

pub fn evaluate(
    checkpoints: &[PathBuf],
    data_dirs: &[PathBuf],
    appliances: &[String],
    out: &Path,
    stride: usize,
    trace: bool,
) -> Result<()> {
    if checkpoints.len() != data_dirs.len() || checkpoints.len() != appliances.len() {
        return Err(EltError::Config(format!(
            "--checkpoint, --data and --appliance must be given the same number of times ({}, {}, {})",
            checkpoints.len(),
            data_dirs.len(),
            appliances.len()
        )));
    }
    if stride == 0 {
        return Err(EltError::Config("--stride must be >= 1".into()));
    }
    create_dir(out)?;
    let mut reports = Vec::new();
    for ((c, d), a) in checkpoints.iter().zip(data_dirs).zip(appliances) {
        let (report, points) = evaluate_one(c, d, a, stride)?;
        if trace {
            eval::write_trace(&out.join(format!("trace_{a}.csv")), &points)?;
        }
        println!(
            "{}: mae {:.3} W, f1 {:.4}, mcc {:.4} over {} windows",
            report.appliance, report.mae, report.f1, report.mcc, report.samples
        );
        reports.push(report);
    }
    if reports.len() > 1 {
        reports.extend(eval::macro_average(&reports));
    }
    eval::write_reports(out, &reports)
}

pub fn predict(checkpoint: &Path, input: &Path, out: &Path, period: i64) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let series = data::load_channel(input)?;
    let l = ckpt.model.config().input_len;
    let mid = data::midpoint(l);
    let file = File::create(out).map_err(|e| EltError::io(out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(out, e);
    writeln!(w, "timestamp,pred_watts").map_err(io)?;
    let mut written = 0usize;
    for (start, values) in data::resample_single(&series, period)? {
        let norm: Vec<f64> = values.iter().map(|&v| ckpt.mains_stats.normalize(v)).collect();
        for off in 0..data::window_count(norm.len(), l, 1) {
            let pred = ckpt.model.predict(&norm[off..off + l])?;
            let ts = start + (off + mid) as i64 * period;
            writeln!(w, "{ts},{}", eval::denormalize(pred, &ckpt.appliance_stats)).map_err(io)?;
            written += 1;
        }
    }
    w.flush().map_err(io)?;
    if written == 0 {
        return Err(EltError::Data(format!(
            "{}: no gap-free run of {l} samples to predict on",
            input.display()
        )));
    }
    Ok(())
}

pub fn run_bench(
    kernels: &[Kernel],
    lengths: &[usize],
    settings: &BenchSettings,
    model_lengths: &[usize],
    out: &Path,
) -> Result<()> {
    let mut points: Vec<BenchPoint> = Vec::new();
    for &k in kernels {
        let mut ok = Vec::new();
        for r in bench::time_kernel(k, lengths, settings)? {
            match r {
                Ok(p) => ok.push(p),
                Err(f) => eprintln!("{} at length {}: {}", f.kernel, f.length, f.message),
            }
        }
        match (bench::count_exponent(&ok), bench::time_exponent(&ok)) {
            (Ok(c), Ok(t)) => println!(
                "{k}: multiply exponent {:.6}, time exponent {:.3} (residual {:.3})",
                c.slope, t.slope, t.residual
            ),
            _ => println!("{k}: too few points to fit an exponent"),
        }
        points.extend(ok);
    }
    if !model_lengths.is_empty() {
        for global in [crate::attention::GlobalKind::Linear, crate::attention::GlobalKind::Standard] {
            let template = crate::model::ModelConfig {
                global_attention: global,
                ..crate::model::ModelConfig::default()
            };
            points.extend(bench::time_model(&template, model_lengths, settings)?);
        }
    }
    bench::write_csv(out, &points)
}

pub const SWEEP_HEADER: &str = "grid,value,n_local,l_win,best_epoch,best_val_mse,mae,f1,mcc";

/// The ablation values for `grid`.
pub fn grid_values(grid: Grid) -> Vec<usize> {
    match grid {
        Grid::LocalHeads => (0..=4).collect(),
        Grid::Window => vec![10, 15, 20, 25, 30],
    }
}

pub fn sweep(cfg: &RunConfig, grid: Grid, data_dir: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.sync();
    if grid == Grid::LocalHeads && cfg.model.n_heads < 4 {
        return Err(EltError::Config(format!(
            "the local_heads grid needs model.n_heads >= 4, got {}",
            cfg.model.n_heads
        )));
    }
    let (train_set, test_set) = load_datasets(&cfg, data_dir)?;
    let mut thresholds = ApplianceThresholds::default();
    if let Some(t) = train_set.on_threshold {
        thresholds.insert(&train_set.appliance, t);
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = File::create(out).map_err(|e| EltError::io(out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(out, e);
    writeln!(w, "{SWEEP_HEADER}").map_err(io)?;
    let name = match grid {
        Grid::LocalHeads => "local_heads",
        Grid::Window => "window",
    };
    for value in grid_values(grid) {
        let mut model_cfg = cfg.model.clone();
        match grid {
            Grid::LocalHeads => model_cfg.n_local = value,
            Grid::Window => model_cfg.l_win = value,
        }
        model_cfg.validate()?;
        let model = EltModel::init(model_cfg.clone(), cfg.run.seed)?;
        let outcome = train::train(model, &train_set, &cfg.train)?;
        let (report, _) = eval::report(&outcome.best, &test_set, &train_set.appliance, &thresholds)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        writeln!(
            w,
            "{name},{value},{},{},{},{},{},{},{}",
            model_cfg.n_local,
            model_cfg.l_win,
            outcome.best_epoch.map_or(String::new(), |e| e.to_string()),
            opt(outcome.best_val_mse),
            report.mae,
            report.f1,
            report.mcc
        )
        .map_err(io)?;
        w.flush().map_err(io)?;
        println!("{name}={value}: mae {:.3} f1 {:.4} mcc {:.4}", report.mae, report.f1, report.mcc);
    }
    if let Some(dir) = out.parent() {
        cfg.write_resolved(if dir.as_os_str().is_empty() { Path::new(".") } else { dir })?;
    }
    Ok(())
}
