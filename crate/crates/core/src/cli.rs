//! Command-line front end wiring the whole pipeline.
//!
//! Exit codes: 0 success, 1 domain failure (one `ERROR kind=...` or
//! `CAPACITY=FAIL ...` line), 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::tiles::{balance_and_split, balance_and_split_indices, label_for, sample_pixels, tile_and_label, SampleMode, CLOUDY_THRESHOLD};
use crate::data::{generate_scene, load_dataset, save_dataset, Dataset, Split};
use crate::deploy::{check_buffers, compile, estimate_latency, render_report, verdict, DeviceModel};
use crate::error::{Error, Result};
use crate::eval::{benchmark, confusion, mask_fraction, render_confusion, tile_metrics_from_fractions, write_metrics_csv, Executor, MetricsRow};
use crate::ir::io::{load_model_with, save_model_with};
use crate::ir::{build_architecture, build_architecture_at, cost_report, init_params, Arch, Graph, Weights};
use crate::prune::{prune, PruneSpec};
use crate::quant::{calibrate, load_quantized, quantize_graph, save_quantized, QuantTable, QuantizedModel};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{fit, TrainConfig};

/// File written next to a QAT-trained model holding the table it was tuned with.
pub const QAT_TABLE: &str = "quant_table.json";
/// Calibration inputs drawn from the head of the training split.
const CALIBRATION_SAMPLES: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "cloudfit", version, about = "Compress, quantize and deploy cloud-detection CNNs")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "CF_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Accelerator activation-buffer capacity.
    #[arg(long, global = true, default_value_t = 4 << 20)]
    pub device_capacity_bytes: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and write train/val datasets.
    GenData(GenDataArgs),
    /// Build an architecture with seeded initial weights.
    Build(BuildArgs),
    /// Print per-layer parameters and FLOPs.
    Summarize(ArchArgs),
    /// Train (or fine-tune, optionally with QAT) a model.
    Train(TrainArgs),
    /// Derive per-tensor quantization exponents.
    Calibrate(CalibrateArgs),
    /// Produce an int8 model package.
    Quantize(QuantizeArgs),
    /// Channel-prune a model to a FLOP-reduction target.
    Prune(PruneArgs),
    /// Lower a model to an execution plan and write its report.
    Compile(TargetArgs),
    /// Check a model against the activation-buffer capacity.
    Check(TargetArgs),
    /// Write per-record predictions.
    Infer(ModelDataArgs),
    /// Write confusion metrics.
    Evaluate(ModelDataArgs),
    /// Time repeated single inferences.
    Benchmark(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Single-pixel spectra.
    Pixel,
    /// 5x5 patches labelled by the centre pixel.
    Patch,
    /// Whole tiles with a cloudy / not-cloudy label.
    Tile,
    /// Whole tiles with their cloud mask as target.
    Segmentation,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long, default_value_t = 256)]
    pub scene_size: usize,
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    #[arg(long, default_value_t = 500)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    /// Dataset directory name under `<out-dir>/data` (defaults to the task).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long)]
    pub arch: Arch,
    /// Square input side for tile models.
    #[arg(long)]
    pub input: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Architecture to train from scratch.
    #[arg(long, conflicts_with = "init")]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub input: Option<usize>,
    /// Model package to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Dataset directory holding `train/` and `val/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long)]
    pub augment: bool,
    /// Fine-tune with fake quantization (needs `--init`).
    #[arg(long, requires = "init")]
    pub qat: bool,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory holding `train/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Quant table; defaults to the model's QAT table, else calibrates on `--data`.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory holding `train/` and `val/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Target FLOP reduction in [0, 1).
    #[arg(long)]
    pub pr: f64,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub fine_tune_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    #[arg(long, conflicts_with_all = ["arch", "input"])]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub input: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A single split directory (e.g. `<dataset>/val`).
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Split directory with inputs; random inputs when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
}

/// A float or int8 model package.
pub enum LoadedModel {
    Float { graph: Graph, weights: Weights },
    Quantized(QuantizedModel),
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join(crate::quant::int8::WEIGHTS_I8).exists() {
            Ok(LoadedModel::Quantized(load_quantized(dir)?))
        } else {
            let (graph, weights, _) = load_model_with(dir)?;
            Ok(LoadedModel::Float { graph, weights })
        }
    }

    pub fn graph(&self) -> &Graph {
        match self {
            LoadedModel::Float { graph, .. } => graph,
            LoadedModel::Quantized(qm) => &qm.graph,
        }
    }

    pub fn executor(&self) -> Executor<'_> {
        match self {
            LoadedModel::Float { graph, weights } => Executor::F32 { graph, weights },
            LoadedModel::Quantized(qm) => Executor::Int8(qm),
        }
    }

    fn float(self, dir: &Path) -> Result<(Graph, Weights)> {
        match self {
            LoadedModel::Float { graph, weights } => Ok((graph, weights)),
            LoadedModel::Quantized(_) => Err(Error::Argument(format!("{} is an int8 package; a float model is needed", dir.display()))),
        }
    }
}

/// Parses `argv` (program name first) and runs, writing to stdout/stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let _ = writeln!(out, "seed={}", cli.seed);
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "ERROR kind={} {}", e.kind(), e.to_string().replace('\n', " "));
            if matches!(e, Error::Argument(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn model_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
}

fn graph_for(arch: Arch, input: Option<usize>) -> Result<Graph> {
    match input {
        Some(side) => build_architecture_at(arch, side),
        None => Ok(build_architecture(arch)),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn load_splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_dataset(&dir.join("train"))?, load_dataset(&dir.join("val"))?))
}

fn calibration_inputs(ds: &Dataset) -> Vec<Tensor> {
    ds.records.iter().take(CALIBRATION_SAMPLES).map(|r| r.input.clone()).collect()
}

fn read_table(path: &Path) -> Result<QuantTable> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn table_json(t: &QuantTable) -> Result<String> {
    Ok(serde_json::to_string_pretty(t)? + "\n")
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let dev = DeviceModel::with_capacity(cli.device_capacity_bytes);
    let models = cli.out_dir.join("models");
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, out),
        Command::Build(a) => {
            let g = graph_for(a.arch.arch, a.arch.input)?;
            let w = init_params(&g, &mut Rng::new(cli.seed))?;
            let dir = models.join(a.name.clone().unwrap_or_else(|| a.arch.arch.name().into()));
            save_model_with(&g, &w, &dir, None)?;
            let c = cost_report(&g)?;
            writeln!(out, "model={} params={} flops={}", dir.display(), c.total_params, c.total_flops)?;
            Ok(0)
        }
        Command::Summarize(a) => {
            let g = graph_for(a.arch, a.input)?;
            let c = cost_report(&g)?;
            writeln!(out, "{:<16} {:<18} {:>12} {:>16}", "node", "kind", "params", "flops")?;
            for (id, nc) in &c.per_node {
                writeln!(out, "{:<16} {:<18} {:>12} {:>16}", id, g.node(id).unwrap().op.kind(), nc.params, nc.flops)?;
            }
            writeln!(out, "params={} flops={}", c.total_params, c.total_flops)?;
            Ok(0)
        }
        Command::Train(a) => train_cmd(cli, a, out),
        Command::Calibrate(a) => {
            let (g, w) = LoadedModel::load(&a.model)?.float(&a.model)?;
            let ds = load_dataset(&a.data.join("train"))?;
            let table = calibrate(&g, &w, &calibration_inputs(&ds))?;
            let path = a.output.clone().unwrap_or_else(|| cli.out_dir.join("quant").join(format!("{}.json", model_name(&a.model))));
            write_file(&path, table_json(&table)?.as_bytes())?;
            writeln!(out, "table={} activations={} weights={}", path.display(), table.activations.len(), table.weights.len())?;
            Ok(0)
        }
        Command::Quantize(a) => {
            let (g, w) = LoadedModel::load(&a.model)?.float(&a.model)?;
            let qat = a.model.join(QAT_TABLE);
            let table = match (&a.table, &a.data) {
                (Some(t), _) => read_table(t)?,
                (None, _) if qat.exists() => read_table(&qat)?,
                (None, Some(d)) => calibrate(&g, &w, &calibration_inputs(&load_dataset(&d.join("train"))?))?,
                (None, None) => return Err(Error::Argument("quantize needs --table, a QAT-trained model, or --data".into())),
            };
            let qm = quantize_graph(&g, &w, &table)?;
            let dir = models.join(a.name.clone().unwrap_or_else(|| format!("{}_int8", model_name(&a.model))));
            save_quantized(&qm, &dir)?;
            writeln!(out, "model={} layers={}", dir.display(), qm.layers.len())?;
            Ok(0)
        }
        Command::Prune(a) => {
            let (g, w) = LoadedModel::load(&a.model)?.float(&a.model)?;
            let (train_set, val_set) = load_splits(&a.data)?;
            let spec = PruneSpec { target_pr: a.pr, steps: a.steps, fine_tune_epochs: a.fine_tune_epochs, ..Default::default() };
            let cfg = TrainConfig {
                learning_rate: a.lr,
                batch_size: a.batch,
                seed: cli.seed,
                max_epochs: a.fine_tune_epochs.max(1),
                patience: a.fine_tune_epochs.max(1),
                ..Default::default()
            };
            let (pg, pw, report) = prune(&g, &w, &spec, &train_set, &val_set, &cfg)?;
            let name = a.name.clone().unwrap_or_else(|| format!("{}_pruned", model_name(&a.model)));
            save_model_with(&pg, &pw, &models.join(&name), Some(report.to_json()))?;
            let csv_path = cli.out_dir.join(format!("prune_{name}.csv"));
            create_parent(&csv_path)?;
            report.write_csv(fs::File::create(&csv_path)?)?;
            writeln!(
                out,
                "model={} flop_reduction={:.4} param_reduction={:.4}",
                models.join(&name).display(),
                report.flop_reduction(),
                report.param_reduction()
            )?;
            Ok(0)
        }
        Command::Compile(a) | Command::Check(a) => {
            let (g, name) = match &a.model {
                Some(dir) => (LoadedModel::load(dir)?.graph().clone(), model_name(dir)),
                None => {
                    let arch = a.arch.unwrap();
                    let g = graph_for(arch, a.input)?;
                    let name = format!("{}_{}", arch.name(), g.input_shape[1]);
                    (g, name)
                }
            };
            let plan = compile(&g, &dev)?;
            let result = check_buffers(&plan, &dev);
            if matches!(cli.command, Command::Compile(_)) {
                let path = cli.out_dir.join("plans").join(format!("{name}.txt"));
                write_file(&path, render_report(&plan, &dev).as_bytes())?;
                let lat = estimate_latency(&plan, &dev);
                writeln!(out, "plan={} steps={} latency_ms={:.4}", path.display(), plan.steps.len(), lat.milliseconds)?;
                writeln!(out, "{}", verdict(&result))?;
                Ok(0)
            } else {
                writeln!(out, "{}", verdict(&result))?;
                if let Err(e) = &result {
                    writeln!(out, "footprint={} capacity={}", e.footprint, e.capacity)?;
                }
                Ok(if result.is_ok() { 0 } else { 1 })
            }
        }
        Command::Infer(a) => infer_cmd(cli, a, out),
        Command::Evaluate(a) => evaluate_cmd(cli, a, out),
        Command::Benchmark(a) => {
            let model = LoadedModel::load(&a.model)?;
            let inputs: Vec<Tensor> = match &a.data {
                Some(d) => load_dataset(d)?.records.into_iter().take(16).map(|r| r.input).collect(),
                None => {
                    let shape = &model.graph().input_shape;
                    let mut rng = Rng::new(cli.seed);
                    (0..4)
                        .map(|_| {
                            let n = shape.iter().product();
                            Tensor::from_f32(shape, (0..n).map(|_| rng.next_f64() as f32).collect())
                        })
                        .collect::<Result<_>>()?
                }
            };
            let r = benchmark(model.executor(), &inputs, a.warmup, a.runs)?;
            let path = cli.out_dir.join(format!("bench_{}.csv", model_name(&a.model)));
            create_parent(&path)?;
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["run", "ms"])?;
            for (i, t) in r.times_ms.iter().enumerate() {
                w.write_record([i.to_string(), format!("{t:.6}")])?;
            }
            w.flush()?;
            writeln!(
                out,
                "model={} executor={} mean_ms={:.4} median_ms={:.4} fps={:.2}",
                r.model, r.executor, r.mean_ms, r.median_ms, r.fps
            )?;
            Ok(0)
        }
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs, out: &mut dyn Write) -> Result<i32> {
    if a.scenes == 0 {
        return Err(Error::Argument("at least one scene is needed".into()));
    }
    let base = Rng::new(cli.seed);
    let scenes: Vec<_> = (0..a.scenes)
        .map(|i| {
            // spread cloud cover so both tile classes occur
            let density = if a.scenes == 1 { 0.5 } else { 0.15 + 0.7 * i as f64 / (a.scenes - 1) as f64 };
            generate_scene(base.fork(i as u64 + 1).next_u64(), a.scene_size, a.scene_size, density)
        })
        .collect();
    let (train_set, val_set) = match a.task {
        Task::Pixel | Task::Patch => {
            let mode = if a.task == Task::Pixel { SampleMode::Spectra } else { SampleMode::Patches5x5 };
            let ds = sample_pixels(&scenes, a.n_per_class, mode, cli.seed)?;
            let labels: Vec<u8> = ds.records.iter().map(|r| r.label).collect();
            let (tr, va) = balance_and_split_indices(&labels, a.train_frac, cli.seed)?;
            let pick = |idx: &[usize], split| Dataset::new(split, idx.iter().map(|&i| ds.records[i].clone()).collect());
            (pick(&tr, Split::Train), pick(&va, Split::Val))
        }
        Task::Tile | Task::Segmentation => {
            let mut tiles = Vec::new();
            for s in &scenes {
                tiles.extend(tile_and_label(s, a.tile, CLOUDY_THRESHOLD)?);
            }
            let (tr, va) = balance_and_split(&tiles, |t| t.label, a.train_frac, cli.seed)?;
            let convert = |ts: Vec<_>, split| {
                let records = ts
                    .iter()
                    .map(|t: &crate::data::tiles::TileRecord| {
                        if a.task == Task::Tile {
                            t.to_classification_record()
                        } else {
                            t.to_segmentation_record()
                        }
                    })
                    .collect();
                Dataset::new(split, records)
            };
            (convert(tr, Split::Train), convert(va, Split::Val))
        }
    };
    let name = a.name.clone().unwrap_or_else(|| format!("{:?}", a.task).to_lowercase());
    let dir = cli.out_dir.join("data").join(name);
    save_dataset(&train_set, &dir.join("train"))?;
    save_dataset(&val_set, &dir.join("val"))?;
    let (tc, vc) = (train_set.class_counts(), val_set.class_counts());
    writeln!(out, "data={} train={}+{} val={}+{}", dir.display(), tc[0], tc[1], vc[0], vc[1])?;
    Ok(0)
}

fn train_cmd(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let (g, init) = match (&a.init, a.arch) {
        (Some(dir), _) => LoadedModel::load(dir)?.float(dir)?,
        (None, Some(arch)) => {
            let g = graph_for(arch, a.input)?;
            let w = init_params(&g, &mut Rng::new(cli.seed).fork(0))?;
            (g, w)
        }
        (None, None) => return Err(Error::Argument("train needs --arch or --init".into())),
    };
    let (train_set, val_set) = load_splits(&a.data)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        max_epochs: a.epochs,
        patience: a.patience,
        batch_size: a.batch,
        seed: cli.seed,
        qat_enabled: a.qat,
        augmentation_enabled: a.augment,
    };
    let table = if a.qat { Some(calibrate(&g, &init, &calibration_inputs(&train_set))?) } else { None };
    let (w, history) = fit(&g, init, &train_set, &val_set, &cfg, table.as_ref())?;
    let name = a.name.clone().unwrap_or_else(|| match &a.init {
        Some(dir) if a.qat => format!("{}_qat", model_name(dir)),
        Some(dir) => format!("{}_ft", model_name(dir)),
        None => g.arch_name.clone(),
    });
    let dir = cli.out_dir.join("models").join(&name);
    // keep the provenance of an already-pruned starting point
    let pruning = a.init.as_ref().map(|d| load_model_with(d)).transpose()?.and_then(|(_, _, p)| p);
    save_model_with(&g, &w, &dir, pruning)?;
    if let Some(t) = &table {
        fs::write(dir.join(QAT_TABLE), table_json(t)?)?;
    } else if dir.join(QAT_TABLE).exists() {
        fs::remove_file(dir.join(QAT_TABLE))?;
    }
    let csv_path = cli.out_dir.join(format!("train_{name}.csv"));
    history.write_csv(fs::File::create(&csv_path)?)?;
    let best = history.best().unwrap();
    writeln!(
        out,
        "model={} epochs={} best_epoch={} val_loss={:.6} val_acc={:.4}",
        dir.display(),
        history.epochs.len(),
        best.epoch,
        best.val_loss,
        best.val_acc
    )?;
    Ok(0)
}

/// Per-record score: probability for classifiers, thresholded cloud fraction
/// for segmentation masks.
fn scores(model: &LoadedModel, ds: &Dataset) -> Result<Vec<(f64, Vec<f64>)>> {
    let exec = model.executor();
    ds.records
        .iter()
        .map(|r| {
            let y = exec.run(&r.input)?.to_f64_vec();
            let s = if y.len() == 1 { y[0] } else { mask_fraction(&y) };
            Ok((s, y))
        })
        .collect()
}

fn infer_cmd(cli: &Cli, a: &ModelDataArgs, out: &mut dyn Write) -> Result<i32> {
    let model = LoadedModel::load(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let segmentation = output_elems(model.graph())? > 1;
    let path = cli.out_dir.join(format!("predictions_{}.csv", model_name(&a.model)));
    create_parent(&path)?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["index", "label", "score", "prediction"])?;
    let mut cloudy = 0;
    for (i, (s, _)) in scores(&model, &ds)?.into_iter().enumerate() {
        let pred = if segmentation { label_for(s, CLOUDY_THRESHOLD) } else { (s >= crate::eval::DECISION_THRESHOLD) as u8 };
        cloudy += pred as usize;
        w.write_record([i.to_string(), ds.records[i].label.to_string(), format!("{s:.9}"), pred.to_string()])?;
    }
    w.flush()?;
    writeln!(out, "predictions={} records={} cloudy={}", path.display(), ds.len(), cloudy)?;
    Ok(0)
}

fn evaluate_cmd(cli: &Cli, a: &ModelDataArgs, out: &mut dyn Write) -> Result<i32> {
    let model = LoadedModel::load(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let name = model_name(&a.model);
    let results = scores(&model, &ds)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    if output_elems(model.graph())? > 1 {
        let (mut preds, mut truth) = (Vec::new(), Vec::new());
        for ((_, y), r) in results.iter().zip(&ds.records) {
            preds.extend_from_slice(y);
            truth.extend(r.target.to_f64_vec().iter().map(|&t| (t >= 0.5) as u8));
        }
        let pixel = confusion(&preds, &truth)?;
        let fractions: Vec<f64> = results.iter().map(|(s, _)| *s).collect();
        let truth_fractions: Vec<f64> = ds.records.iter().map(|r| r.cloud_fraction).collect();
        let tile = tile_metrics_from_fractions(&fractions, &truth_fractions, CLOUDY_THRESHOLD)?;
        text += &render_confusion(&format!("{name} pixel-level"), &pixel);
        text += &render_confusion(&format!("{name} tile-level"), &tile);
        rows.push(MetricsRow::new(&name, "pixel", &pixel));
        rows.push(MetricsRow::new(&name, "tile", &tile));
    } else {
        let preds: Vec<f64> = results.iter().map(|(s, _)| *s).collect();
        let labels: Vec<u8> = ds.records.iter().map(|r| r.label).collect();
        let m = confusion(&preds, &labels)?;
        text += &render_confusion(&name, &m);
        rows.push(MetricsRow::new(&name, "sample", &m));
    }
    let csv_path = cli.out_dir.join(format!("metrics_{name}.csv"));
    create_parent(&csv_path)?;
    write_metrics_csv(&rows, fs::File::create(&csv_path)?)?;
    write_file(&cli.out_dir.join(format!("metrics_{name}.txt")), text.as_bytes())?;
    for r in &rows {
        writeln!(
            out,
            "level={} accuracy={:.4} fp_rate={:.4} fn_rate={:.4}",
            r.level, r.accuracy, r.fp_rate, r.fn_rate
        )?;
    }
    Ok(0)
}

/// Output elements per input; more than one means a segmentation mask.
fn output_elems(g: &Graph) -> Result<usize> {
    let shapes = crate::ir::infer_shapes(g, &g.input_shape)?;
    Ok(shapes[g.output_id()?].iter().product())
}

#[cfg(test)]
mod tests;
