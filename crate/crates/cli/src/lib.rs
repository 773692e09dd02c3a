//! `fairprune` command-line pipeline: train → capture → score → plan/sweep →
//! apply → eval, plus baseline comparison, convergence runs and iterative
//! pruning. Every command prints one JSON summary line on success.
//!
//! Exit codes: 0 success, 1 internal error, 2 missing or invalid input,
//! 3 contract mismatch between artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use fairprune::baselines::{
    bracket_uniform_rate, run_comparison, summarize, write_csv, BaselineError, BaselineSpec,
    CompareConfig, Method,
};
use fairprune::convergence::{
    gaussian_units, run_convergence, ConvergenceConfig, ConvergenceError,
};
use fairprune::diagnostics::{
    diagnose_layer, discover_layers, DiagnosticsError, ErrorMode, LayerDumps, ReportMeta,
    ScoreConfig, ScoreReport, SwConfig,
};
use fairprune::dumpio::DumpError;
use fairprune::mininet::{
    capture, evaluate, finetune, load_csv, train, BlobSpec, Dataset, MiniNet, NetError, Split,
    TrainConfig,
};
use fairprune::planner::{build_plan, check_level, sweep, ParamLayout, PlanError, PruningPlan};
use fairprune::rng;
use fairprune::surgery::{apply, count_params, layout_of, SurgeryError};

pub const LAYOUT_FILE: &str = "layout.json";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn internal(m: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: m.into(),
        }
    }
    pub fn input(m: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: m.into(),
        }
    }
    pub fn contract(m: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: m.into(),
        }
    }
}

impl From<DumpError> for CliError {
    fn from(e: DumpError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Diverged { .. } => CliError::internal(e.to_string()),
            NetError::InputShape { .. } | NetError::BadLabel { .. } => {
                CliError::contract(e.to_string())
            }
            _ => CliError::input(e.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Layout(_) => CliError::contract(e.to_string()),
            _ => CliError::input(e.to_string()),
        }
    }
}

impl From<SurgeryError> for CliError {
    fn from(e: SurgeryError) -> Self {
        CliError::contract(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Plan(p) => p.into(),
            BaselineError::Net(n) => n.into(),
            BaselineError::Surgery(s) => s.into(),
            BaselineError::Io(m) => CliError::internal(m),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<ConvergenceError> for CliError {
    fn from(e: ConvergenceError) -> Self {
        match e {
            ConvergenceError::Io(m) => CliError::internal(m),
            other => CliError::input(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "fairprune",
    version,
    about = "Utilization-score structured pruning pipeline"
)]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Omit timestamps and timings so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a dense ReLU classifier.
    Train(TrainArgs),
    /// Write FPD1 dumps of every hidden layer over the pruning split.
    Capture(CaptureArgs),
    /// Compute utilization scores and reconstruction errors from dumps.
    Score(ScoreArgs),
    /// Build a pruning plan from a score report at one ToD level.
    Plan(PlanArgs),
    /// Build one plan per ToD level from a score report.
    Sweep(SweepArgs),
    /// Remove the units of a plan from a checkpoint.
    Apply(ApplyArgs),
    /// Accuracy and loss of one or more checkpoints.
    Eval(EvalArgs),
    /// FAIR versus baseline pruning over seeded trials.
    Compare(CompareArgs),
    /// Utilization-score stability versus pruning-set size.
    Converge(ConvergeArgs),
    /// Repeated capture → score → plan → apply → fine-tune rounds.
    Iterate(IterateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CSV with a `label` column and optional `split` column.
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Gaussian blobs `K,p,sep,n` (n train, n test, 0.32·n prune) or
    /// `K,p,sep,train,prune,test`.
    #[arg(long, value_parser = parse_synthetic)]
    pub synthetic: Option<Synthetic>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Synthetic {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train: usize,
    pub prune: usize,
    pub test: usize,
}

pub fn parse_synthetic(s: &str) -> std::result::Result<Synthetic, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let int = |i: usize| -> std::result::Result<usize, String> {
        parts[i]
            .parse::<usize>()
            .map_err(|_| format!("{:?} is not a non-negative integer", parts[i]))
    };
    if parts.len() != 4 && parts.len() != 6 {
        return Err("expected K,p,sep,n or K,p,sep,train,prune,test".into());
    }
    let separation: f64 = parts[2]
        .parse()
        .map_err(|_| format!("{:?} is not a number", parts[2]))?;
    let (train, prune, test) = if parts.len() == 4 {
        let n = int(3)?;
        (n, n * 8 / 25, n)
    } else {
        (int(3)?, int(4)?, int(5)?)
    };
    Ok(Synthetic {
        classes: int(0)?,
        dim: int(1)?,
        separation,
        train,
        prune,
        test,
    })
}

pub fn parse_level(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("{s:?} is not a number"))?;
    check_level(a).map_err(|e| e.to_string())?;
    Ok(a)
}

fn parse_sizes(s: &str) -> std::result::Result<usize, String> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| format!("{s:?} is not a positive integer"))
        .and_then(|v| {
            if v == 0 {
                Err("sizes must be positive".into())
            } else {
                Ok(v)
            }
        })
}

fn parse_rate(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("rate {r} not in [0, 1)"))
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "64,32", value_parser = parse_sizes)]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Output checkpoint (FPM1).
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct CaptureArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the dumps.
    #[arg(long)]
    pub dumps: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ErrorModeArg {
    Signed,
    Absolute,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub dumps: PathBuf,
    /// Output score report (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Random projections for vector-valued units.
    #[arg(long, default_value_t = 32)]
    pub projections: usize,
    #[arg(long, value_enum, default_value = "signed")]
    pub error_mode: ErrorModeArg,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_parser = parse_level)]
    pub tod: f64,
    /// Output plan (JSON).
    #[arg(long)]
    pub plan: PathBuf,
    /// Take the parameter layout from this checkpoint instead of the report.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_level)]
    pub tod: Vec<f64>,
    /// Output directory; one `plan_tod{α}.json` per level.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ApplyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Output checkpoint of the pruned network.
    #[arg(long)]
    pub output: PathBuf,
    /// Optional surgery report (JSON).
    #[arg(long)]
    pub surgery_report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Prune,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score report of the checkpoint (needed by fair and random_tod).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1, value_parser = parse_level)]
    pub tod: f64,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "fair,random_tod,random_uniform,l1"
    )]
    pub methods: Vec<Method>,
    /// Rates for l1/random_uniform; defaults to the rate matching FAIR's PR.
    #[arg(long, value_delimiter = ',', value_parser = parse_rate)]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Fine-tuning epochs after pruning.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Output CSV of per-trial rows.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Capture the pool from this checkpoint's pruning split.
    #[arg(long, requires = "layer")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<u32>,
    /// Two-class Gaussian units with these class-1 shifts instead of a network.
    #[arg(long, value_delimiter = ',', conflicts_with = "checkpoint")]
    pub gaussian: Vec<f64>,
    /// Samples per class in the Gaussian pool.
    #[arg(long, default_value_t = 4096)]
    pub pool_per_class: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024", value_parser = parse_sizes)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub resamples: usize,
    #[arg(long, default_value_t = 32)]
    pub projections: usize,
    /// Run resamples sequentially so timings are comparable.
    #[arg(long)]
    pub sequential: bool,
    /// Output prefix; writes `{out}.json` and `{out}.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IterateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.1, value_parser = parse_level)]
    pub tod: f64,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    /// Fine-tuning epochs per round.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub projections: usize,
    /// Final checkpoint.
    #[arg(long)]
    pub output: PathBuf,
    /// Per-round metrics CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run(cli: &Cli) -> Result<String> {
    let ctx = Ctx {
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    let summary = match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Capture(a) => cmd_capture(&ctx, a),
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Plan(a) => cmd_plan(a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Apply(a) => cmd_apply(a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::Converge(a) => cmd_converge(&ctx, a),
        Command::Iterate(a) => cmd_iterate(&ctx, a),
    }?;
    Ok(summary.to_string())
}

struct Ctx {
    seed: u64,
    deterministic: bool,
}

impl Ctx {
    fn projection_seed(&self) -> u64 {
        rng::stream_seed(self.seed, "projections")
    }

    fn seconds(&self, start: Instant) -> Value {
        if self.deterministic {
            Value::Null
        } else {
            json!(start.elapsed().as_secs_f64())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::internal(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

fn load_report(path: &Path) -> Result<ScoreReport> {
    let report = ScoreReport::from_json(&read_text(path)?)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    report.validate()?;
    Ok(report)
}

fn load_plan(path: &Path) -> Result<PruningPlan> {
    PruningPlan::from_json(&read_text(path)?)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_net(path: &Path) -> Result<MiniNet> {
    Ok(MiniNet::load(path)?)
}

fn load_data(ctx: &Ctx, data: &DataArgs) -> Result<Dataset> {
    match (&data.dataset, &data.synthetic) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(CliError::input(format!(
                    "dataset {} not found",
                    path.display()
                )));
            }
            Ok(load_csv(path, ctx.seed)?)
        }
        (None, Some(s)) => Ok(BlobSpec {
            classes: s.classes,
            dim: s.dim,
            separation: s.separation,
            train: s.train,
            prune: s.prune,
            test: s.test,
            seed: ctx.seed,
        }
        .generate()?),
        (None, None) => Err(CliError::input(
            "one of --dataset or --synthetic is required",
        )),
    }
}

fn check_net_data(net: &MiniNet, data: &Dataset) -> Result<()> {
    if net.input_dim() != data.dim() || net.classes() < data.classes {
        return Err(CliError::contract(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            net.input_dim(),
            net.classes(),
            data.dim(),
            data.classes
        )));
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<Value> {
    let start = Instant::now();
    let data = load_data(ctx, &a.data)?;
    let mut sizes = vec![data.dim()];
    sizes.extend(&a.hidden);
    sizes.push(data.classes);
    let net = MiniNet::init(&sizes, ctx.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
    };
    let (net, trace) = train(&net, &data.train, &config)?;
    net.save(&a.checkpoint)?;
    let train_acc = evaluate(&net, &data.train)?.accuracy;
    let test_acc = if data.test.is_empty() {
        Value::Null
    } else {
        json!(evaluate(&net, &data.test)?.accuracy)
    };
    Ok(json!({
        "command": "train",
        "checkpoint": a.checkpoint.display().to_string(),
        "sizes": sizes,
        "params": count_params(&net),
        "epochs": a.epochs,
        "final_loss": trace.last(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "seconds": ctx.seconds(start),
    }))
}

fn cmd_capture(ctx: &Ctx, a: &CaptureArgs) -> Result<Value> {
    let net = load_net(&a.checkpoint)?;
    let data = load_data(ctx, &a.data)?;
    check_net_data(&net, &data)?;
    let cap = capture(&net, &data.prune)?;
    fs::create_dir_all(&a.dumps)
        .map_err(|e| CliError::internal(format!("{}: {e}", a.dumps.display())))?;
    for layer in &cap.layers {
        layer.write(&a.dumps)?;
    }
    let layout = serde_json::to_string_pretty(&layout_of(&net)).expect("layout serializes");
    write_bytes(&a.dumps.join(LAYOUT_FILE), layout.as_bytes())?;
    Ok(json!({
        "command": "capture",
        "dumps": a.dumps.display().to_string(),
        "layers": cap.layers.iter().map(|l| l.layer_id()).collect::<Vec<_>>(),
        "samples": data.prune.len(),
        "total_loss": cap.total_loss,
    }))
}

/// Scores every layer found in `dumps` into a report.
pub fn score_dir(
    dumps: &Path,
    projections: usize,
    projection_seed: u64,
    error_mode: ErrorMode,
    timestamp: Option<u64>,
) -> Result<ScoreReport> {
    if !dumps.is_dir() {
        return Err(CliError::input(format!(
            "dumps directory {} not found",
            dumps.display()
        )));
    }
    let ids = discover_layers(dumps)?;
    if ids.is_empty() {
        return Err(CliError::input(format!("no dumps in {}", dumps.display())));
    }
    let config = ScoreConfig {
        sw: SwConfig {
            projections,
            seed: projection_seed,
        },
        error_mode,
        parallel: true,
    };
    let mut layers = Vec::with_capacity(ids.len());
    let mut files = Vec::new();
    for &id in &ids {
        let set = LayerDumps::read(dumps, id)?;
        layers.push(
            diagnose_layer(&set, &config)
                .map_err(|e| CliError::input(format!("layer {id}: {e}")))?,
        );
        files.extend(
            fairprune::dumpio::DumpKind::ALL
                .iter()
                .map(|&k| fairprune::dumpio::dump_file_name(id, k)),
        );
    }
    let layout_path = dumps.join(LAYOUT_FILE);
    let layout = if layout_path.is_file() {
        Some(
            serde_json::from_str::<ParamLayout>(&read_text(&layout_path)?)
                .map_err(|e| CliError::input(format!("{}: {e}", layout_path.display())))?,
        )
    } else {
        None
    };
    let meta = ReportMeta {
        dumps: files,
        seed: projection_seed,
        num_projections: projections,
        error_mode,
        timestamp,
        layout,
    };
    Ok(ScoreReport::new(layers, meta)?)
}

fn cmd_score(ctx: &Ctx, a: &ScoreArgs) -> Result<Value> {
    let start = Instant::now();
    let timestamp = (!ctx.deterministic).then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    let mode = match a.error_mode {
        ErrorModeArg::Signed => ErrorMode::Signed,
        ErrorModeArg::Absolute => ErrorMode::Absolute,
    };
    let report = score_dir(
        &a.dumps,
        a.projections,
        ctx.projection_seed(),
        mode,
        timestamp,
    )?;
    write_bytes(&a.report, report.to_json().as_bytes())?;
    Ok(json!({
        "command": "score",
        "report": a.report.display().to_string(),
        "layers": report.layers.iter().map(|l| json!({"layer": l.layer_id, "J": l.units})).collect::<Vec<_>>(),
        "seconds": ctx.seconds(start),
    }))
}

fn resolve_layout(report: &ScoreReport, checkpoint: Option<&Path>) -> Result<ParamLayout> {
    match checkpoint {
        Some(p) => Ok(layout_of(&load_net(p)?)),
        None => report.meta.layout.clone().ok_or_else(|| {
            CliError::input("report carries no parameter layout; pass --checkpoint")
        }),
    }
}

fn plan_summary(plan: &PruningPlan) -> Value {
    json!({
        "tod": plan.tod_level,
        "pruning_rate": plan.pruning_rate,
        "removed": plan.layers.iter().map(|l| json!({"layer": l.layer, "removed": l.remove.len(), "achieved_tod": l.achieved_tod})).collect::<Vec<_>>(),
    })
}

fn cmd_plan(a: &PlanArgs) -> Result<Value> {
    let report = load_report(&a.report)?;
    let layout = resolve_layout(&report, a.checkpoint.as_deref())?;
    let plan = build_plan(&report, a.tod, &layout)?;
    write_bytes(&a.plan, plan.to_json().as_bytes())?;
    let mut v = plan_summary(&plan);
    v["command"] = json!("plan");
    v["plan"] = json!(a.plan.display().to_string());
    Ok(v)
}

pub fn sweep_file_name(alpha: f64) -> String {
    format!("plan_tod{alpha}.json")
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<Value> {
    let start = Instant::now();
    let report = load_report(&a.report)?;
    let layout = resolve_layout(&report, a.checkpoint.as_deref())?;
    let plans = sweep(&report, &a.tod, &layout)?;
    fs::create_dir_all(&a.plan)
        .map_err(|e| CliError::internal(format!("{}: {e}", a.plan.display())))?;
    let mut out = Vec::new();
    for (alpha, plan) in a.tod.iter().zip(&plans) {
        let path = a.plan.join(sweep_file_name(*alpha));
        write_bytes(&path, plan.to_json().as_bytes())?;
        let mut v = plan_summary(plan);
        v["plan"] = json!(path.display().to_string());
        out.push(v);
    }
    Ok(json!({"command": "sweep", "plans": out, "seconds": ctx.seconds(start)}))
}

fn cmd_apply(a: &ApplyArgs) -> Result<Value> {
    let net = load_net(&a.checkpoint)?;
    let plan = load_plan(&a.plan)?;
    let (pruned, report) = apply(&net, &plan)?;
    if report.pruning_rate != plan.pruning_rate {
        return Err(CliError::contract(format!(
            "plan records PR {} but surgery realized {}",
            plan.pruning_rate, report.pruning_rate
        )));
    }
    pruned.save(&a.output)?;
    if let Some(p) = &a.surgery_report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_bytes(p, text.as_bytes())?;
    }
    Ok(json!({
        "command": "apply",
        "output": a.output.display().to_string(),
        "sizes": pruned.sizes(),
        "report": report,
    }))
}

fn split_of(data: &Dataset, s: SplitArg) -> &Split {
    match s {
        SplitArg::Train => &data.train,
        SplitArg::Prune => &data.prune,
        SplitArg::Test => &data.test,
    }
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<Value> {
    let data = load_data(ctx, &a.data)?;
    let split = split_of(&data, a.split);
    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let net = load_net(path)?;
        check_net_data(&net, &data)?;
        let m = evaluate(&net, split)?;
        rows.push(json!({
            "checkpoint": path.display().to_string(),
            "sizes": net.sizes(),
            "params": count_params(&net),
            "accuracy": m.accuracy,
            "mean_loss": m.mean_loss,
        }));
    }
    Ok(json!({"command": "eval", "results": rows}))
}

fn cmd_compare(ctx: &Ctx, a: &CompareArgs) -> Result<Value> {
    let start = Instant::now();
    let net = load_net(&a.checkpoint)?;
    let data = load_data(ctx, &a.data)?;
    check_net_data(&net, &data)?;
    let report = a.report.as_deref().map(load_report).transpose()?;
    let layout = layout_of(&net);
    // Without explicit rates, l1/random_uniform run at the two uniform rates
    // bracketing FAIR's PR and are interpolated to it in the summary.
    let mut bracket = None;
    let rates = if a.rates.is_empty() {
        let report = report
            .as_ref()
            .ok_or_else(|| CliError::input("--report is required unless --rates is given"))?;
        let target = build_plan(report, a.tod, &layout)?.pruning_rate;
        let b = bracket_uniform_rate(&layout, target);
        bracket = Some((b, target));
        let mut r = vec![b.lo_rate, b.hi_rate];
        r.dedup();
        r
    } else {
        a.rates.clone()
    };
    let mut specs = Vec::new();
    for &m in &a.methods {
        match m {
            Method::Fair | Method::RandomTod => specs.push(BaselineSpec::with_alpha(m, a.tod)),
            Method::L1 | Method::RandomUniform => {
                specs.extend(rates.iter().map(|&r| BaselineSpec::with_rate(m, r)))
            }
        }
    }
    let config = CompareConfig {
        trials: a.trials,
        seed: ctx.seed,
        ft_epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
    };
    let rows = run_comparison(&net, &data, report.as_ref(), &specs, &config)?;
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    write_bytes(&a.out, &buf)?;
    let dense = evaluate(&net, &data.test)?.accuracy;
    let summary = summarize(&rows);
    let mut matched = Vec::new();
    if let Some((b, target)) = bracket {
        for m in [Method::RandomUniform, Method::L1] {
            let at = |rate: f64| {
                summary
                    .iter()
                    .find(|s| s.method == m && s.rate_or_alpha == rate)
            };
            if let (Some(lo), Some(hi)) = (at(b.lo_rate), at(b.hi_rate)) {
                matched.push(json!({
                    "method": m,
                    "pr": target,
                    "os_mean": b.interpolate(lo.os_mean, hi.os_mean, target),
                    "ft_mean": b.interpolate(lo.ft_mean, hi.ft_mean, target),
                }));
            }
        }
    }
    Ok(json!({
        "command": "compare",
        "out": a.out.display().to_string(),
        "dense_accuracy": dense,
        "summary": summary,
        "matched_pr": matched,
        "seconds": ctx.seconds(start),
    }))
}

fn cmd_converge(ctx: &Ctx, a: &ConvergeArgs) -> Result<Value> {
    let pool = match (&a.checkpoint, a.gaussian.is_empty()) {
        (Some(path), _) => {
            let net = load_net(path)?;
            let data = load_data(ctx, &a.data)?;
            check_net_data(&net, &data)?;
            let layer = a.layer.expect("clap requires --layer");
            let cap = capture(&net, &data.prune)?;
            cap.layers
                .into_iter()
                .find(|l| l.layer_id() == layer)
                .ok_or_else(|| CliError::contract(format!("layer {layer} is not a hidden layer")))?
                .acts
        }
        (None, false) => gaussian_units(&a.gaussian, a.pool_per_class, ctx.seed)?,
        (None, true) => {
            return Err(CliError::input(
                "one of --checkpoint/--layer or --gaussian is required",
            ))
        }
    };
    let config = ConvergenceConfig {
        sizes: a.sizes.clone(),
        resamples: a.resamples,
        seed: ctx.seed,
        sw: SwConfig {
            projections: a.projections,
            seed: ctx.projection_seed(),
        },
        units: None,
        sequential: a.sequential,
    };
    let mut report = run_convergence(&pool, &config)?;
    if ctx.deterministic {
        report.per_size.iter_mut().for_each(|s| s.seconds = 0.0);
    }
    let json_path = a.out.with_extension("json");
    let csv_path = a.out.with_extension("csv");
    write_bytes(&json_path, report.to_json().as_bytes())?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_bytes(&csv_path, &buf)?;
    let sizes: Vec<Value> = report
        .per_size
        .iter()
        .map(|s| {
            let n = s.mean.len() as f64;
            json!({
                "n": s.n,
                "mean_score": s.mean.iter().sum::<f64>() / n,
                "mean_sd": s.sd.iter().sum::<f64>() / n,
                "seconds": if ctx.deterministic { Value::Null } else { json!(s.seconds) },
            })
        })
        .collect();
    Ok(json!({
        "command": "converge",
        "json": json_path.display().to_string(),
        "csv": csv_path.display().to_string(),
        "sizes": sizes,
    }))
}

/// One round of the iterative loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub removed: usize,
    pub round_pr: f64,
    pub cumulative_pr: f64,
    pub os_acc: f64,
    pub ft_acc: f64,
}

fn cmd_iterate(ctx: &Ctx, a: &IterateArgs) -> Result<Value> {
    if a.rounds == 0 {
        return Err(CliError::input("--rounds must be at least 1"));
    }
    let mut net = load_net(&a.checkpoint)?;
    let data = load_data(ctx, &a.data)?;
    check_net_data(&net, &data)?;
    let original = count_params(&net);
    let config = ScoreConfig {
        sw: SwConfig {
            projections: a.projections,
            seed: ctx.projection_seed(),
        },
        ..ScoreConfig::default()
    };
    let mut records = Vec::new();
    let mut status = "completed";
    for round in 1..=a.rounds {
        let cap = capture(&net, &data.prune)?;
        let layers = cap
            .layers
            .iter()
            .map(|l| diagnose_layer(l, &config))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let report = ScoreReport::new(layers, ReportMeta::default())?;
        let plan = build_plan(&report, a.tod, &layout_of(&net))?;
        if plan.is_empty() {
            status = "converged";
            break;
        }
        let (pruned, surgery) = apply(&net, &plan)?;
        let os_acc = evaluate(&pruned, &data.test)?.accuracy;
        net = finetune(&pruned, &data.train, a.epochs, a.lr, a.batch)?;
        records.push(RoundRecord {
            round,
            removed: surgery.layers.iter().map(|l| l.removed).sum(),
            round_pr: surgery.pruning_rate,
            cumulative_pr: (original - count_params(&net)) as f64 / original as f64,
            os_acc,
            ft_acc: evaluate(&net, &data.test)?.accuracy,
        });
    }
    net.save(&a.output)?;
    if let Some(path) = &a.csv {
        let mut text = String::from("round,removed,round_pr,cumulative_pr,os_acc,ft_acc\n");
        for r in &records {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.removed, r.round_pr, r.cumulative_pr, r.os_acc, r.ft_acc
            ));
        }
        write_bytes(path, text.as_bytes())?;
    }
    Ok(json!({
        "command": "iterate",
        "status": status,
        "output": a.output.display().to_string(),
        "sizes": net.sizes(),
        "rounds": records,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_forms() {
        let s = parse_synthetic("10,16,2.0,2000").unwrap();
        assert_eq!((s.train, s.prune, s.test), (2000, 640, 2000));
        let s = parse_synthetic("3, 4, 1.5, 100, 30, 50").unwrap();
        assert_eq!(
            (s.classes, s.dim, s.train, s.prune, s.test),
            (3, 4, 100, 30, 50)
        );
        assert!(parse_synthetic("3,4,x,10").is_err());
        assert!(parse_synthetic("3,4,1").is_err());
    }

    #[test]
    fn level_parsing() {
        assert_eq!(parse_level("0.1").unwrap(), 0.1);
        assert!(parse_level("1.5").is_err());
        assert!(parse_level("0").is_err());
        assert!(parse_level("nan").is_err());
    }

    #[test]
    fn sweep_names_are_distinct() {
        assert_eq!(sweep_file_name(0.05), "plan_tod0.05.json");
        assert_ne!(sweep_file_name(0.1), sweep_file_name(0.3));
    }
}
