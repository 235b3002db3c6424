//! Command-line entry point: every pipeline stage as a subcommand.
//!
//! Conventions shared by all subcommands:
//! - parameters come from an optional TOML config (see [`crate::config`]);
//!   command-line flags override config values;
//! - every artifact embeds the fully resolved config for provenance;
//! - JSON outputs are pretty-printed UTF-8 with a trailing newline, CSV
//!   outputs start with a `# config:` comment line;
//! - reruns with identical config and seeds produce byte-identical files;
//! - failures print exactly one machine-parsable line to stderr,
//!   `error[<class>]: <message>`, and exit with the class code:
//!   2 usage, 3 schema, 4 I/O, 5 numeric.

use crate::autodiff::Tape;
use crate::config::{Config, ConfigError};
use crate::data::{
    extract_patches, gen_synthetic_with, prune_redundant_nodes, read_graph, read_sample_dirs,
    write_sample, DataError, Sample, SynthConfig, SynthStyle,
};
use crate::graph::{BoundingBox, SpatialGraph};
use crate::loss::{combined_loss_parts, BoxVar, LossError, PredVarSet, SampleLossInputs};
use crate::matching::{cost_matrix, hungarian, MatchError, MatchWeights, Matching, PredictionSet};
use crate::metrics::{compute_report, MetricError, MetricReport, SampleMetricsRow, ScoredGraph};
use crate::project3d::{project, ProjectError};
use crate::sampling::{
    enumerate_edges, fixed_budget_sample, regularized_sample, EdgeSampleSet, SamplingError,
};
use crate::train::{
    ablate, evaluate, ratio_grid, standard_grid, train, AblateEntry, AblateRow, TrainError,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Schema(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Schema(_) => "schema",
            CliError::Io(_) => "io",
            CliError::Numeric(_) => "numeric",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Io(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Schema(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // One line, always: collapse any embedded newlines.
        let flat = self.message().replace('\n', "; ");
        write!(f, "error[{}]: {}", self.class(), flat)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            ConfigError::Schema(m) => CliError::Schema(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericFailure { .. } => CliError::Numeric(e.to_string()),
            TrainError::Checkpoint(ref c) => match c {
                crate::autodiff::CheckpointError::Io(_) => CliError::Io(e.to_string()),
                _ => CliError::Schema(e.to_string()),
            },
            TrainError::Loss(l) => l.into(),
            TrainError::Match(m) => m.into(),
            TrainError::Sampling(s) => s.into(),
            TrainError::Metric(m) => m.into(),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::NonFiniteCost { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<SamplingError> for CliError {
    fn from(e: SamplingError) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Assignment(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Schema(e.to_string()),
        }
    }
}

impl From<ProjectError> for CliError {
    fn from(e: ProjectError) -> Self {
        CliError::Schema(e.to_string())
    }
}

fn io_err(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context} {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "img2graph",
    version,
    about = "Image-to-graph pipeline: synthetic data, preprocessing, 2D->3D projection, \
             relation sampling, matching, losses, metrics, and a toy trainer"
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap for data-parallel sample processing (0 = one worker per core).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image+graph dataset.
    GenSynthetic(GenSyntheticArgs),
    /// Extract patches and prune near-straight degree-2 nodes.
    Preprocess(PreprocessArgs),
    /// Lift 2D samples into rotated 3D volumes.
    Project(ProjectArgs),
    /// Sample active/background relation pairs from dataset graphs.
    SampleEdges(SampleEdgesArgs),
    /// Match a prediction set against a ground-truth graph.
    Match(MatchArgs),
    /// Evaluate the combined loss of a prediction set on one sample.
    Loss(LossArgs),
    /// Score a predicted dataset against ground truth.
    Metrics(MetricsArgs),
    /// Train the toy model and evaluate it.
    TrainToy(TrainToyArgs),
    /// Run an ablation grid and emit a comparison table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// 2 or 3.
    #[arg(long)]
    pub dims: Option<usize>,
    /// grid or tree.
    #[arg(long)]
    pub style: Option<String>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input dataset directory.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Splice angle threshold in degrees.
    #[arg(long)]
    pub prune_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Input 2D dataset directory.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleEdgesArgs {
    /// Input dataset directory.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output JSON file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the fixed-budget sampler with this total instead of the ratio.
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Prediction set JSON file.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Ground-truth graph JSON file.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Output JSON file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Prediction set JSON file.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Ground-truth graph JSON file.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Output JSON file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Predicted dataset directory (graphs scored with unit confidence).
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Output JSON report file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Use the two-point {0.5, 0.95} IoU threshold set.
    #[arg(long)]
    pub two_point: bool,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Target dataset directory (falls back to paths.target).
    #[arg(long, value_name = "DIR")]
    pub target: Option<PathBuf>,
    /// Source dataset directory for joint pretraining (paths.source).
    #[arg(long, value_name = "DIR")]
    pub source: Option<PathBuf>,
    /// Held-out evaluation dataset (paths.eval; defaults to the target set).
    #[arg(long, value_name = "DIR")]
    pub eval: Option<PathBuf>,
    /// Output directory for checkpoint, loss log, and report.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Grid config TOML; its [train] table is the base configuration and
    /// its [ablate] table picks seeds and mode. Defaults to --config.
    #[arg(long, value_name = "FILE")]
    pub grid: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub target: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub source: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub eval: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses arguments, runs the requested subcommand, and returns the process
/// exit code. The caller passes it to `std::process::exit`.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            // Collapse clap's rendering into the one-line error contract.
            let rendered = e.to_string();
            let mut lines = rendered
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && *l != "For more information, try '--help'.");
            let mut msg = lines.next().unwrap_or("invalid arguments").to_string();
            if let Some(extra) = lines.next() {
                let _ = write!(msg, " {extra}");
            }
            let msg = msg.trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(msg));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    match cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(cfg, a),
        Command::Preprocess(a) => cmd_preprocess(cfg, a),
        Command::Project(a) => cmd_project(cfg, a),
        Command::SampleEdges(a) => cmd_sample_edges(cfg, a),
        Command::Match(a) => cmd_match(cfg, a),
        Command::Loss(a) => cmd_loss(cfg, a),
        Command::Metrics(a) => cmd_metrics(cfg, a),
        Command::TrainToy(a) => cmd_train_toy(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
    }
}

// ---------------------------------------------------------------------------
// Shared output plumbing
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err("cannot create", parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Schema(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err("cannot create", parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err("cannot read", path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// `# config:` provenance line for CSV artifacts.
fn config_comment(cfg: &Config) -> Result<String, CliError> {
    let compact = serde_json::to_string(cfg)
        .map_err(|e| CliError::Schema(format!("serialize config: {e}")))?;
    Ok(format!("# config: {compact}\n"))
}

/// Runs `f` under a worker cap. Zero means the rayon default.
fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Schema(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn load_dataset(dir: &Path) -> Result<Vec<(String, Sample)>, CliError> {
    let samples = read_sample_dirs(dir)?;
    if samples.is_empty() {
        return Err(CliError::Schema(format!(
            "dataset {} contains no sample directories",
            dir.display()
        )));
    }
    Ok(samples)
}

fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    cfg: &Config,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}");
        write_sample(&dir.join(&name), s)?;
        names.push(name);
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        config: &'a Config,
        count: usize,
        samples: Vec<String>,
        #[serde(flatten)]
        extra: BTreeMap<String, serde_json::Value>,
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            config: cfg,
            count: samples.len(),
            samples: names,
            extra,
        },
    )
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_synthetic(mut cfg: Config, a: GenSyntheticArgs) -> Result<(), CliError> {
    let s = &mut cfg.synthetic;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.samples {
        s.samples = v;
    }
    if let Some(v) = a.dims {
        s.dims = v;
    }
    if let Some(v) = a.style {
        s.style = v;
    }
    if s.dims != 2 && s.dims != 3 {
        return Err(CliError::Schema(format!(
            "dims must be 2 or 3, got {}",
            s.dims
        )));
    }
    let style: SynthStyle = s.style.parse().map_err(CliError::Schema)?;
    let synth = SynthConfig {
        size_2d: s.size_2d,
        size_3d: s.size_3d,
        ..SynthConfig::default()
    };
    let samples = gen_synthetic_with(s.seed, s.samples, s.dims, style, &synth);
    write_dataset(&a.out, &samples, &cfg, BTreeMap::new())
}

fn cmd_preprocess(mut cfg: Config, a: PreprocessArgs) -> Result<(), CliError> {
    let p = &mut cfg.preprocess;
    if let Some(v) = a.patch_size {
        p.patch_size = v;
    }
    if let Some(v) = a.stride {
        p.stride = v;
    }
    if let Some(v) = a.prune_threshold {
        p.prune_threshold_deg = v;
    }
    let p = cfg.preprocess.clone();
    let input = load_dataset(&a.input)?;
    let per_sample: Vec<Result<Vec<Sample>, CliError>> = with_pool(cfg.jobs, || {
        use rayon::prelude::*;
        input
            .par_iter()
            .map(|(_, s)| {
                let size = vec![p.patch_size; s.image.dims];
                let stride = vec![p.stride; s.image.dims];
                let patches = extract_patches(&s.image, &s.graph, &size, &stride)?;
                Ok(patches
                    .into_iter()
                    .map(|mut patch| {
                        patch.graph =
                            prune_redundant_nodes(&patch.graph, p.prune_threshold_deg);
                        patch
                    })
                    .collect())
            })
            .collect()
    })?;
    let mut out = Vec::new();
    for r in per_sample {
        out.extend(r?);
    }
    write_dataset(&a.out, &out, &cfg, BTreeMap::new())
}

fn cmd_project(mut cfg: Config, a: ProjectArgs) -> Result<(), CliError> {
    let pr = &mut cfg.projection;
    if let Some(v) = a.seed {
        pr.seed = v;
    }
    if let Some(v) = a.depth {
        pr.depth = v;
    }
    if let Some(v) = a.height {
        pr.height = v;
    }
    if let Some(v) = a.width {
        pr.width = v;
    }
    let pr = cfg.projection.clone();
    let shape = [pr.height, pr.width, pr.depth];
    let input = load_dataset(&a.input)?;
    let rotated: Vec<Result<crate::project3d::Rotated, CliError>> = with_pool(cfg.jobs, || {
        use rayon::prelude::*;
        input
            .par_iter()
            .enumerate()
            .map(|(i, (_, s))| Ok(project(s, shape, pr.seed.wrapping_add(i as u64))?))
            .collect()
    })?;
    let mut samples = Vec::with_capacity(rotated.len());
    let mut dropped = Vec::with_capacity(rotated.len());
    for r in rotated {
        let r = r?;
        dropped.push(r.dropped_fraction);
        samples.push(r.sample);
    }
    let extra = BTreeMap::from([(
        "dropped_fraction".to_string(),
        serde_json::to_value(&dropped).unwrap(),
    )]);
    write_dataset(&a.out, &samples, &cfg, extra)
}

fn cmd_sample_edges(mut cfg: Config, a: SampleEdgesArgs) -> Result<(), CliError> {
    let sec = &mut cfg.sampling;
    if let Some(v) = a.ratio {
        sec.ratio = v;
    }
    if let Some(v) = a.seed {
        sec.seed = v;
    }
    if a.budget.is_some() {
        sec.budget = a.budget;
    }
    let sec = cfg.sampling.clone();
    // Reject a bad ratio before touching the input dataset.
    if !(0.0..=1.0).contains(&sec.ratio) || sec.ratio == 0.0 {
        return Err(CliError::Schema(format!(
            "sampling.ratio must lie in (0,1], got {}",
            sec.ratio
        )));
    }
    let input = load_dataset(&a.input)?;
    let graphs: Vec<SpatialGraph> = input.iter().map(|(_, s)| s.graph.clone()).collect();
    let (active, background) = enumerate_edges(&graphs);
    let set = match sec.budget {
        Some(budget) => fixed_budget_sample(&active, &background, budget, sec.seed)?,
        None => regularized_sample(&active, &background, sec.ratio, sec.seed)?,
    };
    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a Config,
        raw_active: usize,
        raw_background: usize,
        achieved_ratio: f64,
        set: &'a EdgeSampleSet,
    }
    write_json(
        &a.out,
        &Output {
            config: &cfg,
            raw_active: active.len(),
            raw_background: background.len(),
            achieved_ratio: set.achieved_ratio(),
            set: &set,
        },
    )
}

/// Boxes with the configured half-extent around ground-truth nodes, for
/// matching and loss targets.
fn target_boxes(g: &SpatialGraph, half: f64) -> Vec<BoundingBox> {
    g.nodes
        .iter()
        .map(|n| BoundingBox::new(n.clone(), vec![half; g.dims]))
        .collect()
}

fn cmd_match(cfg: Config, a: MatchArgs) -> Result<(), CliError> {
    let preds: PredictionSet = read_json(&a.pred)?;
    preds.validate()?;
    let gt = read_graph(&a.gt)?;
    let gt_boxes = target_boxes(&gt, cfg.loss.box_half);
    let weights = MatchWeights::for_dims(gt.dims);
    let cost = cost_matrix(&preds, &gt_boxes, &weights);
    let matching = hungarian(&cost)?;
    let total_cost: f64 = matching
        .pairs
        .iter()
        .map(|&(p, g)| cost[p][g])
        .sum();
    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a Config,
        matching: &'a Matching,
        total_cost: f64,
    }
    write_json(
        &a.out,
        &Output {
            config: &cfg,
            matching: &matching,
            total_cost,
        },
    )
}

fn cmd_loss(mut cfg: Config, a: LossArgs) -> Result<(), CliError> {
    if let Some(v) = a.ratio {
        cfg.sampling.ratio = v;
    }
    if let Some(v) = a.seed {
        cfg.sampling.seed = v;
    }
    let preds: PredictionSet = read_json(&a.pred)?;
    preds.validate()?;
    let gt = read_graph(&a.gt)?;
    let gt_boxes = target_boxes(&gt, cfg.loss.box_half);
    let weights_m = MatchWeights::for_dims(gt.dims);
    let cost = cost_matrix(&preds, &gt_boxes, &weights_m);
    let matching = hungarian(&cost)?;

    // Rebuild the prediction as tape constants; gradients are not needed,
    // the loss module only runs forward here.
    let mut tape = Tape::new();
    let boxes: Vec<BoxVar> = preds
        .boxes
        .iter()
        .map(|b| BoxVar {
            center: b.center.iter().map(|&v| tape.value(v)).collect(),
            extent: b.extent.iter().map(|&v| tape.value(v)).collect(),
        })
        .collect();
    let cls_prob: Vec<_> = preds.cls_prob.iter().map(|&v| tape.value(v)).collect();
    let rel_prob: BTreeMap<(usize, usize), _> = preds
        .rel_prob
        .iter()
        .map(|r| (r.pair, tape.value(r.prob)))
        .collect();
    let pred_vars = PredVarSet {
        boxes,
        cls_prob,
        rel_prob,
    };
    let (active, background) = enumerate_edges(std::slice::from_ref(&gt));
    let set = match cfg.sampling.budget {
        Some(budget) => fixed_budget_sample(&active, &background, budget, cfg.sampling.seed)?,
        None => regularized_sample(&active, &background, cfg.sampling.ratio, cfg.sampling.seed)?,
    };
    let inputs = [SampleLossInputs {
        pred: &pred_vars,
        gt_boxes: &gt_boxes,
        matching: &matching,
    }];
    let parts = combined_loss_parts(
        &mut tape,
        &inputs,
        &set,
        None,
        &cfg.loss.weights,
        cfg.loss.reslt_mean,
    )?;
    let total = tape.data(parts.total);
    if !total.is_finite() {
        return Err(CliError::Numeric(format!(
            "combined loss is not finite: {total}"
        )));
    }
    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a Config,
        reg: f64,
        giou: f64,
        cls: f64,
        reslt: f64,
        total: f64,
    }
    write_json(
        &a.out,
        &Output {
            config: &cfg,
            reg: tape.data(parts.reg),
            giou: tape.data(parts.giou),
            cls: tape.data(parts.cls),
            reslt: tape.data(parts.reslt),
            total,
        },
    )
}

fn cmd_metrics(mut cfg: Config, a: MetricsArgs) -> Result<(), CliError> {
    if a.two_point {
        cfg.metrics.two_point = true;
    }
    let mcfg = cfg.metrics.to_metric_config();
    let pred = load_dataset(&a.pred)?;
    let gt = load_dataset(&a.gt)?;
    if pred.len() != gt.len() {
        return Err(CliError::Schema(format!(
            "prediction dataset has {} samples, ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    let preds: Vec<ScoredGraph> = pred
        .into_iter()
        .map(|(_, s)| ScoredGraph::unit_scores(s.graph))
        .collect();
    let gts: Vec<SpatialGraph> = gt.into_iter().map(|(_, s)| s.graph).collect();
    let (report, per_sample) = compute_report(&preds, &gts, &mcfg)?;
    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a Config,
        report: &'a MetricReport,
        per_sample: &'a [SampleMetricsRow],
    }
    write_json(
        &a.out,
        &Output {
            config: &cfg,
            report: &report,
            per_sample: &per_sample,
        },
    )
}

fn resolve_dir(flag: Option<PathBuf>, cfg_path: &Option<String>) -> Option<PathBuf> {
    flag.or_else(|| cfg_path.as_ref().map(PathBuf::from))
}

fn loss_log_csv(cfg: &Config, log: &[crate::train::EpochLog]) -> Result<String, CliError> {
    let mut csv = config_comment(cfg)?;
    csv.push_str("phase,epoch,mean_loss,alpha\n");
    for e in log {
        let _ = writeln!(csv, "{},{},{},{}", e.phase, e.epoch, e.mean_loss, e.alpha);
    }
    Ok(csv)
}

fn cmd_train_toy(mut cfg: Config, a: TrainToyArgs) -> Result<(), CliError> {
    let target_dir = resolve_dir(a.target, &cfg.paths.target)
        .ok_or_else(|| CliError::Schema("no target dataset: pass --target or set paths.target".into()))?;
    let source_dir = resolve_dir(a.source, &cfg.paths.source);
    let eval_dir = resolve_dir(a.eval, &cfg.paths.eval);
    cfg.paths.target = Some(target_dir.display().to_string());
    cfg.paths.source = source_dir.as_ref().map(|p| p.display().to_string());
    cfg.paths.eval = eval_dir.as_ref().map(|p| p.display().to_string());

    let target: Vec<Sample> = load_dataset(&target_dir)?.into_iter().map(|(_, s)| s).collect();
    let source: Vec<Sample> = match &source_dir {
        Some(d) => load_dataset(d)?.into_iter().map(|(_, s)| s).collect(),
        None => Vec::new(),
    };
    let eval_set: Vec<Sample> = match &eval_dir {
        Some(d) => load_dataset(d)?.into_iter().map(|(_, s)| s).collect(),
        None => target.clone(),
    };

    let mut outcome = train(&cfg.train, &source, &target)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err("cannot create", &a.out, e))?;
    outcome
        .model
        .save(&a.out.join("checkpoint.json"), &outcome.tape)
        .map_err(TrainError::from)?;
    write_text(&a.out.join("loss_log.csv"), &loss_log_csv(&cfg, &outcome.log)?)?;

    let mcfg = cfg.metrics.to_metric_config();
    let (report, per_sample) = evaluate(
        &mut outcome.tape,
        &outcome.model,
        &cfg.train,
        &eval_set,
        &mcfg,
    )?;
    #[derive(Serialize)]
    struct Output<'a> {
        config: &'a Config,
        report: &'a MetricReport,
        per_sample: &'a [SampleMetricsRow],
    }
    write_json(
        &a.out.join("report.json"),
        &Output {
            config: &cfg,
            report: &report,
            per_sample: &per_sample,
        },
    )
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Comparison table: one row per configuration and seed. Metric columns
/// follow the report's field order.
fn ablate_csv(cfg: &Config, rows: &[AblateRow]) -> Result<String, CliError> {
    let mut csv = config_comment(cfg)?;
    csv.push_str("config,seed,node_map,node_mar,edge_map,edge_mar,smd,topo_precision,topo_recall\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.config,
            r.seed,
            m.node_map,
            m.node_mar,
            m.edge_map,
            m.edge_mar,
            m.smd,
            csv_opt(m.topo_precision),
            csv_opt(m.topo_recall),
        );
    }
    Ok(csv)
}

fn cmd_ablate(mut cfg: Config, a: AblateArgs) -> Result<(), CliError> {
    if let Some(grid_path) = &a.grid {
        let grid_cfg = Config::load(Some(grid_path))?;
        cfg.train = grid_cfg.train;
        cfg.ablate = grid_cfg.ablate;
    }
    let target_dir = resolve_dir(a.target, &cfg.paths.target)
        .ok_or_else(|| CliError::Schema("no target dataset: pass --target or set paths.target".into()))?;
    let source_dir = resolve_dir(a.source, &cfg.paths.source);
    let eval_dir = resolve_dir(a.eval, &cfg.paths.eval);
    cfg.paths.target = Some(target_dir.display().to_string());
    cfg.paths.source = source_dir.as_ref().map(|p| p.display().to_string());
    cfg.paths.eval = eval_dir.as_ref().map(|p| p.display().to_string());

    let target: Vec<Sample> = load_dataset(&target_dir)?.into_iter().map(|(_, s)| s).collect();
    let source: Vec<Sample> = match &source_dir {
        Some(d) => load_dataset(d)?.into_iter().map(|(_, s)| s).collect(),
        None => Vec::new(),
    };
    let eval_set: Vec<Sample> = match &eval_dir {
        Some(d) => load_dataset(d)?.into_iter().map(|(_, s)| s).collect(),
        None => target.clone(),
    };

    let entries: Vec<AblateEntry> = match cfg.ablate.mode.as_str() {
        "standard" => standard_grid(&cfg.train),
        "ratio" => ratio_grid(&cfg.train, &cfg.ablate.ratios),
        other => {
            return Err(CliError::Schema(format!(
                "unknown ablate mode '{other}' (expected standard or ratio)"
            )))
        }
    };
    if entries.iter().any(|e| e.config.pretrain_epochs > 0) && source.is_empty() {
        return Err(CliError::Schema(
            "grid includes pretraining but no source dataset was given".into(),
        ));
    }
    let mcfg = cfg.metrics.to_metric_config();
    let rows = ablate(&entries, &cfg.ablate.seeds, &source, &target, &eval_set, &mcfg)?;
    write_text(&a.out, &ablate_csv(&cfg, &rows)?)
}
