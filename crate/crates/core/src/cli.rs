//! The `hebb` command line: `train`, `eval`, `bench` and `viz`.
//!
//! Exit codes: 0 on success, 1 when something fails after work has started,
//! 2 for usage and validation errors (bad flags, bad config, missing or
//! malformed inputs). Validation always happens before any output is written.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use crate::config::{resolve_data_path, Config, Datasets};
use crate::data::{load_idx_pair, Dataset};
use crate::engine::{
    apply_freeze, evaluate, hebbian_evaluate, init_head, EvalMetrics, EventKind, HebbianPlan, HebbianTrainer, Phase,
    RunRecord, SupervisedTrainer, HEAD_INIT_STREAM,
};
use crate::error::{HebbError, Result};
use crate::layers::{LayerKind, LayerNode, Model};
use crate::rules::KrotovParams;
use crate::tensor::{RngState, Tensor};
use crate::viz::{
    append_lines, append_metrics_row, export_weight_grid, unit_convergence, weight_stats, WeightGridSpec,
    METRICS_HEADER, WEIGHT_STATS_HEADER,
};

/// RNG stream for the initial weights.
const INIT_STREAM: u64 = 3;

#[derive(Debug, Parser)]
#[command(name = "hebb", version, about = "Hebbian (Krotov-Hopfield) training with a backprop-trained head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Hebbian phase, then the supervised phase.
    Train(TrainArgs),
    /// Score a checkpoint on the config's test set.
    Eval(EvalArgs),
    /// Time Hebbian epochs of a single dense layer.
    Bench(BenchArgs),
    /// Render a layer's weights from a checkpoint as a PGM image.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, CSV logs and images.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2000)]
    pub units: usize,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    /// Measured epochs; one warm-up epoch runs first.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `bench.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "mnist/train-images-idx3-ubyte")]
    pub images: PathBuf,
    #[arg(long, default_value = "mnist/train-labels-idx1-ubyte")]
    pub labels: PathBuf,
    /// Use only the first N samples.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub layer: String,
    /// Grid as ROWSxCOLS.
    #[arg(long, default_value = "5x5")]
    pub grid: String,
    /// Units to sample; defaults to filling the grid.
    #[arg(long)]
    pub units: Option<usize>,
    /// Output PGM path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model config, needed to lay out dense units whose input is not a square image.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: HebbError,
}

trait Stage<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(|error| Failure { code: 2, error })
    }
    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(|error| Failure { code: 1, error })
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => with_threads(a.threads, || cmd_train(a).map(|_| ())),
        Command::Eval(a) => with_threads(a.threads, || cmd_eval(a).map(|_| ())),
        Command::Bench(a) => with_threads(a.threads, || cmd_bench(a).map(|_| ())),
        Command::Viz(a) => cmd_visualize(a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    if threads == Some(0) {
        return Err(HebbError::Config("--threads must be >= 1".into())).usage();
    }
    let n = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| HebbError::Config(format!("cannot start {n} threads: {e}")))
        .runtime()?;
    pool.install(f)
}

/// Final metrics of a training run, also written to `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub threads: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub record: RunRecord,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = Config::load(&args.config).usage()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut model = cfg.build_model().usage()?;
    let data = cfg.load_data().usage()?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| HebbError::io(&args.out, e))
        .runtime()?;
    let summary = run_experiment(&cfg, &mut model, &data, &args.out).runtime()?;
    println!("train loss: {}", summary.train_loss);
    println!("train accuracy: {}", summary.train_accuracy);
    println!("test loss: {}", summary.test_loss);
    println!("test accuracy: {}", summary.test_accuracy);
    Ok(summary)
}

/// Layout of one unit's weights for image export.
pub fn unit_shape(weight_shape: &[usize], input_shape: Option<&[usize]>) -> Result<Vec<usize>> {
    let squeeze = |s: &[usize]| -> Vec<usize> {
        match s {
            [1, h, w] => vec![*h, *w],
            _ => s.to_vec(),
        }
    };
    match (weight_shape, input_shape) {
        ([_, c, kh, kw], _) => Ok(squeeze(&[*c, *kh, *kw])),
        ([_, d], Some(s)) if s.len() == 3 && s.iter().product::<usize>() == *d => Ok(squeeze(s)),
        ([_, d], _) => {
            let side = (*d as f64).sqrt().round() as usize;
            if side * side == *d {
                Ok(vec![side, side])
            } else {
                Err(HebbError::dim(
                    "weight image",
                    format!("cannot lay out units of {d} inputs as an image; pass the model config"),
                ))
            }
        }
        (s, _) => Err(HebbError::dim("weight image", format!("unsupported weight shape {s:?}"))),
    }
}

fn layer_unit_shape(model: &Model, layer: &str) -> Result<Vec<usize>> {
    let idx = model.index_of(layer)?;
    let shapes = model.shapes()?;
    unit_shape(model.layers[idx].param("weight")?.shape(), Some(&shapes[idx]))
}

fn export_layer(model: &Model, layer: &str, units: usize, seed: u64, path: &Path) -> Result<()> {
    let weights = model.layer(layer)?.weight_matrix()?;
    let n = units.min(weights.rows());
    let spec = WeightGridSpec::square(layer_unit_shape(model, layer)?, n, seed);
    export_weight_grid(&weights, &spec, path)
}

fn stats_lines(model: &Model, phase: Phase, epoch: usize, hebbian: &[String], p: f64) -> Result<Vec<String>> {
    let mut lines = vec![];
    for layer in &model.layers {
        let Ok(w) = layer.param("weight") else { continue };
        let s = weight_stats(w);
        let conv = if hebbian.contains(&layer.name) {
            let r = unit_convergence(&layer.weight_matrix()?, p)?;
            (r.iter().sum::<f64>() / r.len() as f64).to_string()
        } else {
            String::new()
        };
        lines.push(format!(
            "{},{epoch},{},{},{},{},{},{conv}",
            phase.as_str(),
            layer.name,
            s.min,
            s.max,
            s.mean,
            s.std
        ));
    }
    Ok(lines)
}

fn progress(phase: Phase, epoch: usize, total: usize, row: &crate::engine::EpochRow) {
    let metrics = match (row.loss, row.accuracy) {
        (Some(l), Some(a)) => format!(" loss {l:.4} accuracy {a:.4}"),
        _ => String::new(),
    };
    eprintln!(
        "{} epoch {epoch}/{total} lr {:.6}{metrics} ({:.1} s)",
        phase.as_str(),
        row.lr,
        row.seconds
    );
}

/// Both training phases with logging and checkpoints under `out`.
///
/// Writes `metrics.csv`, `weight_stats.csv`, `hebbian.ckpt`, `final.ckpt`,
/// weight images of the Hebbian layers and `summary.json`.
pub fn run_experiment(cfg: &Config, model: &mut Model, data: &Datasets, out: &Path) -> Result<TrainSummary> {
    let plan = cfg.plan();
    let rng = RngState::new(plan.seed);
    let hebb_layers = plan.hebbian.layers.clone();
    let p = plan.hebbian.krotov.p;
    let metrics_path = out.join("metrics.csv");
    let stats_path = out.join("weight_stats.csv");
    for (path, header) in [(&metrics_path, METRICS_HEADER), (&stats_path, WEIGHT_STATS_HEADER)] {
        std::fs::write(path, format!("{header}\n")).map_err(|e| HebbError::io(path, e))?;
    }
    let mut record = RunRecord {
        seed: plan.seed,
        threads: rayon::current_num_threads(),
        ..Default::default()
    };

    let mut init = rng.fork(INIT_STREAM);
    for layer in &mut model.layers {
        if hebb_layers.contains(&layer.name) {
            layer.init_standard_normal(&mut init);
        } else {
            layer.init_scaled(&mut init);
        }
    }

    if !hebb_layers.is_empty() {
        let mut images = vec![];
        let total = plan.hebbian.epochs;
        let out_cfg = &cfg.output;
        let mut trainer = HebbianTrainer::new(plan.hebbian.clone())?;
        trainer.handlers.register(EventKind::EpochCompleted, |ctx| {
            let epoch = ctx.event.epoch;
            if out_cfg.hebbian_eval_every > 0 && epoch % out_cfg.hebbian_eval_every == 0 {
                let m = hebbian_evaluate(ctx.model, &data.train, &data.eval, &plan)?;
                if let Some(row) = ctx.row.as_deref_mut() {
                    row.loss = Some(m.loss);
                    row.accuracy = Some(m.accuracy);
                }
            }
            if let Some(row) = ctx.row.as_deref() {
                append_metrics_row(&metrics_path, row)?;
                progress(Phase::Hebbian, epoch, total, row);
            }
            append_lines(
                &stats_path,
                WEIGHT_STATS_HEADER,
                &stats_lines(ctx.model, Phase::Hebbian, epoch, &hebb_layers, p)?,
            )?;
            if out_cfg.image_every > 0 && epoch % out_cfg.image_every == 0 {
                for layer in &hebb_layers {
                    let path = out.join(format!("weights_{layer}_hebbian_{epoch:04}.pgm"));
                    export_layer(ctx.model, layer, out_cfg.grid_units, plan.seed, &path)?;
                    images.push(path);
                }
            }
            Ok(())
        });
        let hebb_record = trainer.run(model, &data.train, &rng)?;
        drop(trainer);
        record.extend(hebb_record);
        record.artifacts.extend(images);
        let ckpt = out.join("hebbian.ckpt");
        save_checkpoint(model, &ckpt)?;
        record.artifacts.push(ckpt);
    }

    apply_freeze(model, &plan.supervised)?;
    init_head(model, &plan.supervised, &mut rng.fork(HEAD_INIT_STREAM))?;
    let total = plan.supervised.epochs;
    let mut trainer = SupervisedTrainer::new(plan.supervised.clone());
    trainer.handlers.register(EventKind::EpochCompleted, |ctx| {
        let epoch = ctx.event.epoch;
        if let Some(row) = ctx.row.as_deref() {
            append_metrics_row(&metrics_path, row)?;
            progress(Phase::Supervised, epoch, total, row);
        }
        append_lines(
            &stats_path,
            WEIGHT_STATS_HEADER,
            &stats_lines(ctx.model, Phase::Supervised, epoch, &hebb_layers, p)?,
        )
    });
    let outcome = trainer.run(model, &data.train, &data.eval, &rng)?;
    drop(trainer);
    record.extend(outcome.record);

    let ckpt = out.join("final.ckpt");
    save_checkpoint(model, &ckpt)?;
    record.artifacts.push(ckpt);
    for layer in &hebb_layers {
        let path = out.join(format!("weights_{layer}_final.pgm"));
        export_layer(model, layer, cfg.output.grid_units, plan.seed, &path)?;
        record.artifacts.push(path);
    }
    let train = evaluate(model, &data.train)?;
    let test = evaluate(model, &data.test)?;
    let summary = TrainSummary {
        seed: plan.seed,
        threads: record.threads,
        train_loss: train.loss,
        train_accuracy: train.accuracy,
        test_loss: test.loss,
        test_accuracy: test.accuracy,
        stopped_early: outcome.stopped_early,
        best_epoch: outcome.best_epoch,
        record,
    };
    let path = out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json).map_err(|e| HebbError::io(&path, e))?;
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalMetrics> {
    let cfg = Config::load(&args.config).usage()?;
    let mut model = cfg.build_model().usage()?;
    let tensors = load_checkpoint(&args.checkpoint).usage()?;
    apply_checkpoint(&mut model, tensors).usage()?;
    let [_, _, images, labels] = cfg.resolve_data().usage()?;
    let test = load_idx_pair(&images, &labels).usage()?;
    let m = evaluate(&model, &test).usage()?;
    println!("test loss: {}", m.loss);
    println!("test accuracy: {}", m.accuracy);
    Ok(m)
}

/// Timing of a benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub units: usize,
    pub batch_size: usize,
    pub threads: usize,
    pub epochs: usize,
    /// Every epoch, warm-up first.
    pub seconds: Vec<f64>,
    /// Mean over the measured epochs.
    pub mean_seconds: f64,
    /// CRC32 of the final weights' little-endian bytes.
    pub checksum: u32,
}

/// Hebbian training of one dense layer of `units` on `data` for `epochs`
/// measured epochs plus a warm-up epoch. Runs on the current thread pool.
pub fn run_bench(data: &Dataset, units: usize, batch_size: usize, epochs: usize, seed: u64) -> Result<(BenchReport, Tensor)> {
    if epochs == 0 {
        return Err(HebbError::Config("bench needs at least one measured epoch".into()));
    }
    let d: usize = data.sample_shape().iter().product();
    let layer = LayerNode::new(
        "hidden",
        LayerKind::Linear {
            in_features: d,
            out_features: units,
            bias: false,
        },
    )?;
    let mut model = Model::new(vec![layer], data.sample_shape().to_vec(), units)?;
    let rng = RngState::new(seed);
    model.layers[0].init_standard_normal(&mut rng.fork(INIT_STREAM));
    let plan = HebbianPlan {
        layers: vec!["hidden".into()],
        krotov: KrotovParams::default(),
        lr: 0.04,
        epochs: epochs + 1,
        batch_size,
        image_batch_size: None,
        shuffle: true,
        freeze_after: false,
    };
    let record = HebbianTrainer::new(plan)?.run(&mut model, data, &rng)?;
    let seconds: Vec<f64> = record.rows.iter().map(|r| r.seconds).collect();
    let mean_seconds = seconds[1..].iter().sum::<f64>() / epochs as f64;
    let weights = model.layers[0].param("weight")?.clone();
    let mut crc = crc32fast::Hasher::new();
    for v in weights.data() {
        crc.update(&v.to_le_bytes());
    }
    Ok((
        BenchReport {
            units,
            batch_size,
            threads: rayon::current_num_threads(),
            epochs,
            seconds,
            mean_seconds,
            checksum: crc.finalize(),
        },
        weights,
    ))
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<BenchReport> {
    if args.units == 0 || args.batch_size == 0 || args.epochs == 0 {
        return Err(HebbError::Config("--units, --batch-size and --epochs must be >= 1".into())).usage();
    }
    if args.units < KrotovParams::default().k {
        return Err(HebbError::Config(format!("--units must be >= k = {}", KrotovParams::default().k))).usage();
    }
    let images = resolve_data_path(&args.images).usage()?;
    let labels = resolve_data_path(&args.labels).usage()?;
    let mut data = load_idx_pair(&images, &labels).usage()?;
    if let Some(n) = args.subset {
        data = data.head(n).usage()?;
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| HebbError::io(out, e)).runtime()?;
    }
    let (report, _) = run_bench(&data, args.units, args.batch_size, args.epochs, args.seed).runtime()?;
    println!(
        "units {} batch_size {} threads {} samples {}",
        report.units,
        report.batch_size,
        report.threads,
        data.len()
    );
    for (i, s) in report.seconds.iter().enumerate() {
        println!("epoch {i}{} {s:.3} s", if i == 0 { " (warm-up)" } else { "" });
    }
    println!("mean seconds/epoch: {:.3}", report.mean_seconds);
    println!("weights crc32: {:08x}", report.checksum);
    if let Some(out) = &args.out {
        let mut text = String::from("units,batch_size,threads,epoch,seconds,warmup\n");
        for (i, s) in report.seconds.iter().enumerate() {
            text.push_str(&format!(
                "{},{},{},{i},{s},{}\n",
                report.units,
                report.batch_size,
                report.threads,
                i == 0
            ));
        }
        let path = out.join("bench.csv");
        std::fs::write(&path, text).map_err(|e| HebbError::io(&path, e)).runtime()?;
    }
    Ok(report)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || HebbError::Config(format!("--grid {s:?}: expected ROWSxCOLS, e.g. 5x5"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

pub fn cmd_visualize(args: &VizArgs) -> CliResult<PathBuf> {
    let (rows, cols) = parse_grid(&args.grid).usage()?;
    let tensors = load_checkpoint(&args.checkpoint).usage()?;
    let key = format!("{}.weight", args.layer);
    let Some((_, weight)) = tensors.iter().find(|(n, _)| *n == key) else {
        return Err(HebbError::Config(format!(
            "checkpoint has no layer {} with weights",
            args.layer
        )))
        .usage();
    };
    let input_shape = match &args.config {
        Some(path) => {
            let cfg = Config::load(path).usage()?;
            let mut model = cfg.build_model().usage()?;
            apply_checkpoint(&mut model, tensors.clone()).usage()?;
            let idx = model.index_of(&args.layer).usage()?;
            Some(model.shapes().usage()?[idx].clone())
        }
        None => None,
    };
    let shape = unit_shape(weight.shape(), input_shape.as_deref()).usage()?;
    let weights = weight.clone().flatten_rows();
    let spec = WeightGridSpec {
        unit_shape: shape,
        rows,
        cols,
        sample_count: args.units.unwrap_or((rows * cols).min(weights.rows())),
        seed: args.seed,
    };
    export_weight_grid(&weights, &spec, &args.out).usage()?;
    println!("wrote {}", args.out.display());
    Ok(args.out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_unit_shapes() {
        assert_eq!(parse_grid("20x20").unwrap(), (20, 20));
        assert!(parse_grid("5").is_err());
        assert!(parse_grid("0x3").is_err());
        assert_eq!(unit_shape(&[400, 1, 5, 5], None).unwrap(), vec![5, 5]);
        assert_eq!(unit_shape(&[8, 3, 2, 2], None).unwrap(), vec![3, 2, 2]);
        assert_eq!(unit_shape(&[2000, 784], None).unwrap(), vec![28, 28]);
        assert_eq!(unit_shape(&[10, 12], Some(&[3, 2, 2])).unwrap(), vec![3, 2, 2]);
        assert!(unit_shape(&[10, 12], None).is_err());
    }

    #[test]
    fn bad_flags_exit_2() {
        assert_eq!(main_from_args(["hebb", "train", "--config"]), 2);
        assert_eq!(main_from_args(["hebb", "frobnicate"]), 2);
        assert_eq!(
            main_from_args(["hebb", "train", "--config", "/nonexistent.json", "--out", "/tmp/x"]),
            2
        );
    }
}
