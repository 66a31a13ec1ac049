//! The `qfk` command line: one subcommand per pipeline step.
//!
//! Every file a command writes lands under `--output-dir`, and each command
//! records its arguments and outputs in `run.json` there. Outputs depend
//! only on inputs and `--seed`, except the measured `fps` fields.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qfk_core::bench::compare_report;
use qfk_core::compiler::{compile, fold_batchnorm, MAX_BATCH};
use qfk_core::dataset::{
    cluster_faces, make_mask, split_dataset, FramePair, DEFAULT_CLUSTER_DISTANCE,
    DEFAULT_MASK_THRESHOLD,
};
use qfk_core::graph::Graph;
use qfk_core::image::{BinaryMask, RgbImage};
use qfk_core::quantizer::{minmax_qparams, StatsMap, Strategy};
use qfk_core::runtime::{
    evaluate, execute_plan, mask_probabilities, preprocess, run_graph_f32, to_results, Arena,
    InferenceResult, PreprocessConfig, SerialExecutor,
};
use qfk_core::uynet::{build_uynet, UYNetConfig, Variant};
use qfk_core::{Error as CoreError, Shape, TensorF32, TensorI8};

use crate::bench::{measure_fps, BenchConfig, BenchTarget};
use crate::container::{self, ContainerError, Model, ModelMeta};
use crate::exec::ParallelExecutor;
use crate::io::{self, Prediction, Predictions, ResultsReport};
use crate::npy;

#[derive(Debug, Parser)]
#[command(
    name = "qfk",
    version,
    about = "Quantized U-YNet deepfake localization and classification"
)]
pub struct Cli {
    /// Directory receiving every output file.
    #[arg(long, global = true, env = "QFK_OUTPUT_DIR", default_value = "qfk-out")]
    pub output_dir: PathBuf,
    /// Seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground-truth masks and a leakage-free split manifest from frame pairs.
    Prep(PrepArgs),
    /// Construct a U-YNet with seeded random weights.
    Build(BuildArgs),
    /// Record activation ranges over a directory of images.
    Calibrate(CalibrateArgs),
    /// Fold batch norms and quantize to INT8.
    Quantize(QuantizeArgs),
    /// Compile an INT8 model and dump the execution plan.
    Compile(CompileArgs),
    /// Masks and labels for a directory of images.
    Infer(InferArgs),
    /// Throughput of one or more models on synthetic inputs.
    Bench(BenchArgs),
    /// Accuracy of saved predictions against a labels file.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    Npy,
    Png,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepArgs {
    /// Directory with `real/` frames and optional same-named `fake/` frames.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MASK_THRESHOLD)]
    pub threshold: u8,
    /// Normalized average-hash distance under which faces are merged.
    #[arg(long, default_value_t = DEFAULT_CLUSTER_DISTANCE)]
    pub cluster_distance: f64,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    #[arg(long, value_enum, default_value_t = MaskFormat::Npy)]
    pub mask_format: MaskFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum VariantArg {
    Full,
    SegOnly,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::SegOnly => Variant::SegOnly,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    /// Conv layers in the classification branch (default: as many as the
    /// segmentation path).
    #[arg(long)]
    pub class_convs: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    #[arg(long, default_value = "model.qfk")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Minmax,
    Percentile,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Minmax => Strategy::MinMax,
            StrategyArg::Percentile => Strategy::Percentile,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// FP32 model.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of calibration images.
    #[arg(long)]
    pub images: PathBuf,
    /// Accept calibration sets outside 100-1000 images.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value_t = StrategyArg::Minmax)]
    pub strategy: StrategyArg,
    #[arg(long, default_value = "calibration.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    /// FP32 model.
    #[arg(long)]
    pub model: PathBuf,
    /// Output of `calibrate`.
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long, default_value = "model.int8.qfk")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompileArgs {
    /// INT8 model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "plan.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// INT8 model, or an FP32 model for the reference path.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of input frames; frame ids are file stems.
    #[arg(long)]
    pub images: PathBuf,
    /// Labels JSON; adds report.json.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Run stages on the calling thread only.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Models to measure; INT8 models run through compiled plans.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Timed images per model.
    #[arg(long, default_value_t = 80)]
    pub images: usize,
    #[arg(long, default_value_t = qfk_core::bench::DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = qfk_core::bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Name recorded in reports.
    #[arg(long, default_value = "local")]
    pub node: String,
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// predictions.json written by `infer`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
}

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Data = 3,
    Internal = 4,
}

impl ExitKind {
    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Data => "data",
            ExitKind::Internal => "internal",
        }
    }
}

/// Invalid arguments are usage errors; everything else a command can fail
/// on is a data error.
pub fn classify(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        let core = cause.downcast_ref::<CoreError>().or_else(|| {
            match cause.downcast_ref::<ContainerError>() {
                Some(ContainerError::Model(e)) => Some(e),
                _ => None,
            }
        });
        if let Some(e) = core {
            return match e {
                CoreError::InvalidConfig(_)
                | CoreError::InvalidRatios(_)
                | CoreError::TooFewImages { .. }
                | CoreError::NoWarmup
                | CoreError::NeedTwoReports { .. }
                | CoreError::BatchSize { .. } => ExitKind::Usage,
                _ => ExitKind::Data,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return ExitKind::Usage;
        }
    }
    ExitKind::Data
}

/// An argument combination the command cannot act on.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Single-line machine-readable error record.
pub fn error_line(kind: ExitKind, message: &str) -> String {
    let message: String = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind.name(), "code": kind as i32, "message": message }).to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct RunEntry {
    seed: u64,
    args: serde_json::Value,
    outputs: Vec<String>,
}

/// `run.json`: provenance of every command run against an output directory.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    qfk_version: String,
    container_version: u16,
    commands: BTreeMap<String, RunEntry>,
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    written: Vec<String>,
}

impl Ctx {
    fn path(&mut self, rel: &Path) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create {}", dir.display()))?;
        }
        self.written.push(rel.to_string_lossy().replace('\\', "/"));
        Ok(p)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(Path::new(rel))?;
        io::write_json(&p, value)
    }

    fn record(mut self, command: &str, args: &impl Serialize) -> Result<()> {
        let path = self.out.join("run.json");
        let mut record = match path.exists() {
            true => io::read_json::<RunRecord>(&path)?,
            false => RunRecord {
                qfk_version: env!("CARGO_PKG_VERSION").into(),
                container_version: container::VERSION,
                commands: BTreeMap::new(),
            },
        };
        record.qfk_version = env!("CARGO_PKG_VERSION").into();
        self.written.sort();
        self.written.dedup();
        record.commands.insert(
            command.into(),
            RunEntry {
                seed: self.seed,
                args: serde_json::to_value(args)?,
                outputs: self.written,
            },
        );
        io::write_json(&path, &record)
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.output_dir).with_context(|| {
        format!(
            "cannot create output directory {}",
            cli.output_dir.display()
        )
    })?;
    let mut ctx = Ctx {
        out: cli.output_dir,
        seed: cli.seed,
        written: Vec::new(),
    };
    match &cli.command {
        Command::Prep(a) => {
            prep(&mut ctx, a)?;
            ctx.record("prep", a)
        }
        Command::Build(a) => {
            build(&mut ctx, a)?;
            ctx.record("build", a)
        }
        Command::Calibrate(a) => {
            calibrate(&mut ctx, a)?;
            ctx.record("calibrate", a)
        }
        Command::Quantize(a) => {
            quantize(&mut ctx, a)?;
            ctx.record("quantize", a)
        }
        Command::Compile(a) => {
            compile_cmd(&mut ctx, a)?;
            ctx.record("compile", a)
        }
        Command::Infer(a) => {
            infer(&mut ctx, a)?;
            ctx.record("infer", a)
        }
        Command::Bench(a) => {
            bench(&mut ctx, a)?;
            ctx.record("bench", a)
        }
        Command::Eval(a) => {
            eval(&mut ctx, a)?;
            ctx.record("eval", a)
        }
    }
}

fn prep(ctx: &mut Ctx, a: &PrepArgs) -> Result<()> {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| usage("--ratios takes three values"))?;
    let real_dir = a.pairs.join("real");
    let fake_dir = a.pairs.join("fake");
    let pairs: Vec<FramePair> = io::list_images(&real_dir)?
        .into_iter()
        .map(|real| {
            let frame_id = io::frame_id(&real);
            let fake = real
                .file_name()
                .map(|n| fake_dir.join(n))
                .filter(|p| p.is_file());
            FramePair {
                frame_id,
                real_path: real.to_string_lossy().into_owned(),
                fake_path: fake.map(|p| p.to_string_lossy().into_owned()),
            }
        })
        .collect();
    if pairs.is_empty() {
        bail!("no frames in {}", real_dir.display());
    }

    let frames: Vec<(String, RgbImage, BinaryMask)> = pairs
        .par_iter()
        .map(|p| {
            let real = io::load_image(Path::new(&p.real_path))?;
            let mask = match &p.fake_path {
                Some(f) => make_mask(&real, &io::load_image(Path::new(f))?, a.threshold)
                    .with_context(|| format!("frame {}", p.frame_id))?,
                None => BinaryMask::zeros(real.width(), real.height()),
            };
            Ok((p.frame_id.clone(), real, mask))
        })
        .collect::<Result<_>>()?;

    let mut labels = BTreeMap::new();
    let mut mask_paths = BTreeMap::new();
    for (p, (id, _, mask)) in pairs.iter().zip(&frames) {
        let rel = match a.mask_format {
            MaskFormat::Npy => format!("masks/{id}.npy"),
            MaskFormat::Png => format!("masks/{id}.png"),
        };
        let path = ctx.path(Path::new(&rel))?;
        match a.mask_format {
            MaskFormat::Npy => {
                let data = mask.data().iter().map(|&v| v as f32).collect();
                let t = TensorF32::new(Shape::new(vec![mask.height(), mask.width()])?, data)?;
                npy::save_mask_npy(&t, &path)?;
            }
            MaskFormat::Png => io::save_mask_png(mask, &path)?,
        }
        mask_paths.insert(id.clone(), rel);
        labels.insert(id.clone(), u8::from(p.is_fake()));
    }

    let faces: Vec<(String, RgbImage)> = frames.into_iter().map(|(id, img, _)| (id, img)).collect();
    let clusters = cluster_faces(&faces, a.cluster_distance)?;
    let mut manifest = split_dataset(&clusters, ratios, ctx.seed)?;
    for r in &mut manifest.records {
        r.mask_path = mask_paths.get(&r.frame_id).cloned();
    }
    ctx.write_json("manifest.json", &manifest)?;
    ctx.write_json("labels.json", &labels)
}

fn build(ctx: &mut Ctx, a: &BuildArgs) -> Result<()> {
    let cfg = UYNetConfig {
        input_size: (a.height, a.width),
        encoder_depth: a.depth,
        base_channels: a.base_channels,
        class_conv_layers: a.class_convs,
        variant: a.variant.into(),
    };
    let g = build_uynet(&cfg, ctx.seed)?;
    let meta = ModelMeta {
        config: Some(cfg),
        seed: Some(ctx.seed),
        folded: false,
    };
    let path = ctx.path(&a.out)?;
    container::write_model(&path, &container::encode_graph(&g, &meta))?;
    Ok(())
}

fn read_fp32(path: &Path) -> Result<(Graph, ModelMeta)> {
    match container::read_model(path)? {
        (Model::Fp32(g), meta) => Ok((g, meta)),
        (Model::Int8(_), _) => Err(usage(format!(
            "{} is an INT8 model; an FP32 model is required",
            path.display()
        ))),
    }
}

fn folded(g: Graph, meta: &ModelMeta) -> Result<Graph> {
    Ok(if meta.folded { g } else { fold_batchnorm(&g)? })
}

/// Target (width, height) of a graph's input.
fn input_size(shape: &Shape) -> Result<(usize, usize)> {
    let (_, _, h, w) = shape
        .as_nchw()
        .ok_or_else(|| CoreError::InvalidShape(format!("model input {shape} is not NCHW")))?;
    Ok((w, h))
}

/// Decodes and preprocesses every image in `dir`, in file-name order.
fn load_inputs(dir: &Path, cfg: &PreprocessConfig) -> Result<Vec<(String, TensorF32, TensorI8)>> {
    let files = io::list_images(dir)?;
    if files.is_empty() {
        bail!("no images in {}", dir.display());
    }
    files
        .par_iter()
        .map(|f| {
            let img = io::load_image(f)?;
            let (x, q) = preprocess(&img, cfg).with_context(|| format!("image {}", f.display()))?;
            Ok((io::frame_id(f), x, q))
        })
        .collect()
}

/// Saved calibration statistics.
#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub strategy: Strategy,
    pub images: usize,
    pub stats: StatsMap,
}

fn calibrate(ctx: &mut Ctx, a: &CalibrateArgs) -> Result<()> {
    let (g, meta) = read_fp32(&a.model)?;
    let g = folded(g, &meta)?;
    let pre = PreprocessConfig::new(input_size(&g.input_shape)?, minmax_qparams(0.0, 1.0));
    let files = io::list_images(&a.images)?;
    // fail on the set size before decoding anything
    qfk_core::quantizer::check_calibration_size(files.len(), a.force)?;
    let images: Vec<TensorF32> = load_inputs(&a.images, &pre)?
        .into_iter()
        .map(|(_, x, _)| x)
        .collect();
    let strategy = a.strategy.into();
    let stats = crate::calibrate::calibrate(&g, &images, strategy, a.force)?;
    ctx.write_json(
        &a.out.to_string_lossy(),
        &CalibrationFile {
            strategy,
            images: images.len(),
            stats,
        },
    )
}

fn quantize(ctx: &mut Ctx, a: &QuantizeArgs) -> Result<()> {
    let (g, meta) = read_fp32(&a.model)?;
    let g = folded(g, &meta)?;
    let cal: CalibrationFile = io::read_json(&a.calibration)?;
    let qg = crate::calibrate::quantize(&g, &cal.stats, cal.strategy)?;
    let meta = ModelMeta {
        folded: true,
        ..meta
    };
    let path = ctx.path(&a.out)?;
    container::write_model(&path, &container::encode_quantized(&qg, &meta))?;
    Ok(())
}

fn read_int8_plan(path: &Path) -> Result<qfk_core::compiler::Plan> {
    match container::read_model(path)? {
        (Model::Int8(qg), _) => Ok(compile(&qg)?),
        (Model::Fp32(_), _) => Err(usage(format!(
            "{} is an FP32 model; run quantize first",
            path.display()
        ))),
    }
}

fn compile_cmd(ctx: &mut Ctx, a: &CompileArgs) -> Result<()> {
    let plan = read_int8_plan(&a.model)?;
    ctx.write_json(&a.out.to_string_lossy(), &plan)
}

/// Per-frame outputs of `infer`; results are absent for segmentation-only
/// models.
struct Inference {
    masks: Vec<TensorF32>,
    results: Option<Vec<InferenceResult>>,
    seconds: f64,
}

fn infer_int8(
    plan: &qfk_core::compiler::Plan,
    inputs: &[TensorI8],
    serial: bool,
) -> Result<Inference> {
    let mut arena = Arena::new(plan);
    let mut masks = Vec::with_capacity(inputs.len());
    let mut results = plan.class_output.map(|_| Vec::with_capacity(inputs.len()));
    let start = Instant::now();
    for chunk in inputs.chunks(MAX_BATCH) {
        let out = if serial {
            execute_plan(plan, chunk, &mut arena, &SerialExecutor)?
        } else {
            execute_plan(plan, chunk, &mut arena, &ParallelExecutor)?
        };
        match &mut results {
            Some(all) => {
                for r in to_results(&out)? {
                    masks.push(r.mask.clone());
                    all.push(r);
                }
            }
            None => masks.extend((0..chunk.len()).map(|i| mask_probabilities(&out.mask, i))),
        }
    }
    Ok(Inference {
        masks,
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn infer_f32(g: &Graph, inputs: &[TensorF32]) -> Result<Inference> {
    let mut masks = Vec::with_capacity(inputs.len());
    let mut results = g.outputs.class.map(|_| Vec::with_capacity(inputs.len()));
    let start = Instant::now();
    for chunk in inputs.chunks(MAX_BATCH) {
        let out = run_graph_f32(g, &TensorF32::concat_batch(chunk)?)?;
        let per = out.mask.data().len() / chunk.len();
        let dims = out.mask.shape().dims()[1..].to_vec();
        for i in 0..chunk.len() {
            let m = TensorF32::new(
                Shape::new(dims.clone())?,
                out.mask.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            if let (Some(all), Some(s)) = (&mut results, &out.scores) {
                all.push(InferenceResult::from_score(m.clone(), s[i].clamp(0.0, 1.0)));
            }
            masks.push(m);
        }
    }
    Ok(Inference {
        masks,
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn infer(ctx: &mut Ctx, a: &InferArgs) -> Result<()> {
    let labels = a.labels.as_deref().map(io::read_labels).transpose()?;
    let (ids, run) = match container::read_model(&a.model)? {
        (Model::Int8(qg), _) => {
            let plan = compile(&qg)?;
            let [_, h, w] = plan.input_dims;
            let inputs = load_inputs(
                &a.images,
                &PreprocessConfig::new((w, h), plan.input_qparams),
            )?;
            let qs: Vec<TensorI8> = inputs.iter().map(|(_, _, q)| q.clone()).collect();
            let ids: Vec<String> = inputs.into_iter().map(|(id, _, _)| id).collect();
            (ids, infer_int8(&plan, &qs, a.serial)?)
        }
        (Model::Fp32(g), meta) => {
            let g = folded(g, &meta)?;
            let pre = PreprocessConfig::new(input_size(&g.input_shape)?, minmax_qparams(0.0, 1.0));
            let inputs = load_inputs(&a.images, &pre)?;
            let xs: Vec<TensorF32> = inputs.iter().map(|(_, x, _)| x.clone()).collect();
            let ids: Vec<String> = inputs.into_iter().map(|(id, _, _)| id).collect();
            (ids, infer_f32(&g, &xs)?)
        }
    };

    for (id, mask) in ids.iter().zip(&run.masks) {
        let path = ctx.path(Path::new(&format!("masks/{id}.npy")))?;
        npy::save_mask_npy(mask, &path)?;
    }
    let Some(results) = &run.results else {
        if labels.is_some() {
            return Err(usage(
                "labels need a full model; this model has no classification output",
            ));
        }
        return Ok(());
    };
    let predictions: Predictions = ids
        .iter()
        .zip(results)
        .map(|(id, r)| {
            (
                id.clone(),
                Prediction {
                    label: r.label,
                    score: r.score,
                },
            )
        })
        .collect();
    ctx.write_json("predictions.json", &predictions)?;
    if let Some(labels) = labels {
        let report = evaluate(&prediction_pairs(&predictions), &labels)?;
        let fps = qfk_core::bench::fps(ids.len(), run.seconds).ok();
        ctx.write_json("report.json", &ResultsReport::new(&report, fps))?;
    }
    Ok(())
}

fn prediction_pairs(p: &Predictions) -> Vec<(String, u8)> {
    p.iter().map(|(id, r)| (id.clone(), r.label)).collect()
}

#[derive(Serialize)]
struct BenchOutput {
    reports: Vec<qfk_core::bench::BenchReport>,
    comparison: Option<qfk_core::bench::Comparison>,
}

fn bench(ctx: &mut Ctx, a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        node_name: a.node.clone(),
        images: a.images,
        batch: a.batch,
        warmup: a.warmup,
        seed: ctx.seed,
    };
    let mut reports = Vec::new();
    for path in &a.model {
        let report = match container::read_model(path)? {
            (Model::Fp32(g), meta) => measure_fps(BenchTarget::Fp32(&folded(g, &meta)?), &cfg)?,
            (Model::Int8(qg), _) => {
                let plan = compile(&qg)?;
                measure_fps(
                    BenchTarget::Int8 {
                        plan: &plan,
                        parallel: !a.serial,
                    },
                    &cfg,
                )?
            }
        };
        reports.push(report);
    }
    let comparison = match reports.len() {
        0 | 1 => None,
        _ => Some(compare_report(&reports)?),
    };
    if let Some(c) = &comparison {
        let p = ctx.path(Path::new("bench.csv"))?;
        std::fs::write(&p, c.csv())?;
        let p = ctx.path(Path::new("bench.txt"))?;
        std::fs::write(&p, c.text())?;
    }
    ctx.write_json(
        "bench.json",
        &BenchOutput {
            reports,
            comparison,
        },
    )
}

fn eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let predictions: Predictions = io::read_json(&a.predictions)?;
    let labels = io::read_labels(&a.labels)?;
    let report = evaluate(&prediction_pairs(&predictions), &labels)?;
    ctx.write_json("report.json", &ResultsReport::new(&report, None))
}
