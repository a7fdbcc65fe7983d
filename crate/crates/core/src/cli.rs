//! Command-line front end for the `relflow` binary.
//!
//! Every report written with `--out` carries the resolved configuration and
//! is reproducible byte for byte; wall-clock figures go to a sibling
//! `<out>.timing.json`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::attack::{self, CenterMode, SweepConfig};
use crate::datagen::{self, DatasetConfig};
use crate::dataio::{self, FORMAT_VERSION};
use crate::evalmetrics::{self, ConsistencyReport, MetricConfig};
use crate::netcore::{self, Model, ModelSpec, TrainConfig};
use crate::partseg::{self, DetectorConfig};
use crate::pointops::PointCloud;
use crate::relflow::{self, FlowConfig, GroupRule};
use crate::saliency::{self, Tier, TierSet};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "relflow", version, about = "Relevance flow through point-cloud classifiers")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "RELFLOW_SEED", default_value_t = 7)]
    pub seed: u64,
    /// Worker threads for parallel maps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic labelled dataset.
    Gen(GenArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Per-point salience of one cloud at one layer, as PLY or JSON.
    Explain(ExplainArgs),
    /// Plane-level consistency C_p per class.
    EvalPlane(EvalPlaneArgs),
    /// Salient-set IoU against ground-truth parts, per class and layer.
    EvalPart(EvalPartArgs),
    /// Unsupervised part segmentation from salient-region detectors.
    Segment(SegmentArgs),
    /// Salience-guided region relocation attack.
    Attack(AttackArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PointnetLite,
    Pointnet2Lite,
}

impl Arch {
    fn spec(self, classes: usize) -> ModelSpec {
        match self {
            Arch::PointnetLite => ModelSpec::pointnet_lite(classes),
            Arch::Pointnet2Lite => ModelSpec::pointnet2_lite(classes, netcore::Grouping::Knn),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleArg {
    Conserving,
    Literal,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FlowArgs {
    /// Stabiliser added to relevance denominators.
    #[arg(long, default_value_t = relflow::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Relevance split at grouping layers.
    #[arg(long, value_enum, default_value_t = RuleArg::Conserving)]
    pub group_rule: RuleArg,
}

impl FlowArgs {
    fn config(&self) -> Result<FlowConfig> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and nonnegative, got {}", self.epsilon)));
        }
        let group_rule = match self.group_rule {
            RuleArg::Conserving => GroupRule::Conserving,
            RuleArg::Literal => GroupRule::Literal,
        };
        Ok(FlowConfig { epsilon: self.epsilon, group_rule })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = datagen::BUILTIN_CLASSES.map(String::from))]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.01)]
    pub jitter: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the weights.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::PointnetLite)]
    pub arch: Arch,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Dropout on the global feature and hidden FC outputs.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// JSON training report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Cloud as XYZ text.
    #[arg(long)]
    pub input: PathBuf,
    /// Layer whose salience is exported.
    #[arg(long, default_value = "input")]
    pub layer: String,
    /// `.ply` for a colored point cloud, anything else for JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flow: FlowArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalPlaneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = evalmetrics::DEFAULT_TAU)]
    pub tau: f64,
    /// A layer name, or `max` for the best layer per class.
    #[arg(long, default_value = "max")]
    pub layer: String,
    /// Tier set counted as salient, e.g. `salient`, `red`, `pink+red`.
    #[arg(long, default_value = "salient")]
    pub tiers: String,
    #[arg(long, default_value_t = evalmetrics::DEFAULT_KN)]
    pub k_normals: usize,
    #[command(flatten)]
    pub flow: FlowArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalPartArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "salient")]
    pub tiers: String,
    #[command(flatten)]
    pub flow: FlowArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Class to segment (default: every class with more than one part).
    #[arg(long)]
    pub class: Option<String>,
    /// Split the detectors are built on.
    #[arg(long, default_value = "train")]
    pub calibration_split: String,
    /// Clouds per class used for calibration.
    #[arg(long, default_value_t = 50)]
    pub calibration_count: usize,
    #[arg(long, default_value_t = partseg::DEFAULT_Q)]
    pub q: f64,
    #[arg(long, default_value_t = partseg::DEFAULT_MARGIN)]
    pub margin: f64,
    /// Write each segmented cloud as XYZ with the part id as 4th column.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[command(flatten)]
    pub flow: FlowArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Salient,
    Random,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of relocated regions N.
    #[arg(long, default_value_t = 5)]
    pub regions: usize,
    /// Points per region K.
    #[arg(long, default_value_t = 40)]
    pub neighbors: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Salient)]
    pub mode: ModeArg,
    /// Run the full N x K grid in both modes.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',', default_values_t = attack::DEFAULT_NS)]
    pub ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = attack::DEFAULT_KS)]
    pub ks: Vec<usize>,
    /// Attack at most this many clouds (in dataset order).
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub flow: FlowArgs,
}

/// Parses `argv`, runs the command and maps the outcome to an exit code:
/// 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            if text.contains("Usage:") {
                eprint!("{text}");
            } else {
                eprintln!("{text}\n{}", synopsis(&argv));
            }
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::UnknownLayer(_) => 1,
                _ => 2,
            }
        }
    }
}

/// Usage line of the subcommand named in `argv`, or of the whole program.
fn synopsis(argv: &[OsString]) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let name = argv.iter().skip(1).find_map(|a| {
        let a = a.to_str()?;
        cmd.get_subcommands().find(|s| s.get_name() == a).map(|s| s.get_name().to_owned())
    });
    match name {
        Some(n) => cmd.find_subcommand_mut(&n).expect("listed").render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let start = Instant::now();
    let mut out = std::io::stdout().lock();
    let (report_path, timing) = match &cli.command {
        Command::Gen(a) => (None, gen(cli.seed, a, &mut out)?),
        Command::Train(a) => (a.report.clone(), train(cli.seed, a, &mut out)?),
        Command::Explain(a) => (None, explain(a, &mut out)?),
        Command::EvalPlane(a) => (a.data.out.clone(), eval_plane(cli.seed, a, &mut out)?),
        Command::EvalPart(a) => (a.data.out.clone(), eval_part(cli.seed, a, &mut out)?),
        Command::Segment(a) => (a.data.out.clone(), segment(cli.seed, a, &mut out)?),
        Command::Attack(a) => (a.data.out.clone(), run_attack(cli.seed, a, &mut out)?),
    };
    if let Some(path) = report_path {
        let mut t = timing;
        t["format_version"] = json!(FORMAT_VERSION);
        t["elapsed_s"] = json!(start.elapsed().as_secs_f64());
        dataio::write_report(&t, &timing_path(&path))?;
    }
    Ok(())
}

/// `<report>.timing.json` next to the report.
pub fn timing_path(report: &Path) -> PathBuf {
    let mut name = report.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timing.json");
    report.with_file_name(name)
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_owned()
    }
}

fn load_split(data: &Path, split: &str) -> Result<(Vec<String>, Vec<PointCloud>)> {
    let m = dataio::read_manifest(&manifest_path(data))?;
    let clouds = m.load_split(split)?;
    Ok((m.classes.clone(), clouds))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::new(netcore::load_weights(path)?)
}

fn tier_set(s: &str) -> Result<TierSet> {
    s.parse()
}

/// Report body with the run's resolved configuration attached.
fn with_config<T: Serialize, C: Serialize>(command: &str, seed: u64, args: &C, body: &T) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    let mut cfg = serde_json::to_value(args)?;
    cfg["command"] = json!(command);
    cfg["seed"] = json!(seed);
    v["format_version"] = json!(FORMAT_VERSION);
    v["config"] = cfg;
    Ok(v)
}

fn save(path: &Option<PathBuf>, report: &Value) -> Result<()> {
    if let Some(p) = path {
        dataio::validate_report(report)?;
        dataio::write_report(report, p)?;
    }
    Ok(())
}

fn gen(seed: u64, a: &GenArgs, out: &mut impl Write) -> Result<Value> {
    let cfg = DatasetConfig {
        classes: a.classes.clone(),
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        jitter: a.jitter,
        seed,
    };
    let ds = datagen::synthetic_dataset(&cfg)?;
    let m = dataio::write_dataset(&ds, &a.out)?;
    writeln!(out, "wrote {} train and {} test clouds ({} classes) to {}", ds.train.len(), ds.test.len(), m.classes.len(), a.out.display())
        .map_err(io_err)?;
    Ok(json!({}))
}

fn train(seed: u64, a: &TrainArgs, out: &mut impl Write) -> Result<Value> {
    let m = dataio::read_manifest(&manifest_path(&a.data))?;
    let train = m.load_split("train")?;
    let test = m.load_split("test").unwrap_or_default();
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, batch: a.batch, seed, dropout: a.dropout, point_dropout: 0.0 };
    let t = Instant::now();
    let (mut model, history) = netcore::train(a.arch.spec(m.classes.len()), &train, &cfg)?;
    let train_s = t.elapsed().as_secs_f64();
    let meta = model.meta_mut();
    meta.class_names = m.classes.clone();
    meta.dataset_id = format!("synthetic:seed={}:classes={}", m.seed, m.classes.join(","));
    netcore::save_weights(&a.out, model.weights())?;
    let test_accuracy = if test.is_empty() { None } else { Some(netcore::accuracy(&model, &test)?) };
    writeln!(
        out,
        "trained {:?} for {} epochs: final loss {:.4}, test accuracy {}",
        a.arch,
        a.epochs,
        history.epoch_loss.last().copied().unwrap_or(f64::NAN),
        test_accuracy.map_or("n/a".into(), |x| format!("{x:.3}"))
    )
    .map_err(io_err)?;
    let body = json!({
        "arch": a.arch,
        "epoch_loss": history.epoch_loss,
        "epoch_accuracy": history.epoch_accuracy,
        "test_accuracy": test_accuracy,
    });
    save(&a.report, &with_config("train", seed, a, &body)?)?;
    Ok(json!({ "train_s": train_s }))
}

fn explain(a: &ExplainArgs, out: &mut impl Write) -> Result<Value> {
    let model = load_model(&a.model)?;
    let cloud = dataio::read_xyz(&a.input)?;
    let (logits, trace) = model.forward_cloud(&cloud)?;
    let input = trace.layers[0].name.clone();
    let (map, _) = relflow::relevance_flow(&model, &trace, &input, &a.flow.config()?)?;
    let s = relflow::spatial_saliences(&trace, &map).into_iter().find(|s| s.layer == a.layer).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown layer {:?}; point-mapped layers are {}",
            a.layer,
            model.spec().spatial_layers().join(", ")
        ))
    })?;
    let m = saliency::tier(&s.values, &s.layer)?;
    let is_ply = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        saliency::export_ply(&cloud, &m, &a.out)?;
    } else {
        saliency::export_json(&m, &a.out)?;
    }
    let count = |t: Tier| m.tiers.iter().filter(|&&x| x == t).count();
    let names = model.class_names();
    let pred = netcore::layers::argmax(&logits);
    writeln!(
        out,
        "predicted {} | layer {}: red {}, pink {}, blue {} | salient proportion {:.4}",
        names.get(pred).cloned().unwrap_or_else(|| pred.to_string()),
        m.layer,
        count(Tier::Red),
        count(Tier::Pink),
        count(Tier::Blue),
        (count(Tier::Red) + count(Tier::Pink)) as f64 / cloud.len() as f64
    )
    .map_err(io_err)?;
    Ok(json!({}))
}

fn eval_plane(seed: u64, a: &EvalPlaneArgs, out: &mut impl Write) -> Result<Value> {
    let model = load_model(&a.data.model)?;
    let (_, clouds) = load_split(&a.data.data, &a.data.split)?;
    let cfg = MetricConfig { tau: a.tau, k_normals: a.k_normals, tiers: tier_set(&a.tiers)?, flow: a.flow.config()? };
    if !(a.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {}", a.tau)));
    }
    let layer = (a.layer != "max").then_some(a.layer.as_str());
    let classes = evalmetrics::class_cp(&model, &clouds, layer, &cfg)?;
    writeln!(out, "{:<14} {:>5} {:>5} {:>6}  layer", "class", "n_p", "n_t", "C_p").map_err(io_err)?;
    for c in &classes {
        writeln!(out, "{:<14} {:>5} {:>5} {:>6.3}  {}", c.name, c.n_p, c.n_t, c.c_p, c.layer).map_err(io_err)?;
    }
    let report = ConsistencyReport {
        format_version: FORMAT_VERSION,
        layer: a.layer.clone(),
        tau: a.tau,
        tiers: cfg.tiers.label(),
        classes,
        parts: Vec::new(),
    };
    save(&a.data.out, &with_config("eval-plane", seed, a, &report)?)?;
    Ok(json!({}))
}

fn eval_part(seed: u64, a: &EvalPartArgs, out: &mut impl Write) -> Result<Value> {
    let model = load_model(&a.data.model)?;
    let (_, clouds) = load_split(&a.data.data, &a.data.split)?;
    let cfg = MetricConfig { tiers: tier_set(&a.tiers)?, flow: a.flow.config()?, ..MetricConfig::default() };
    let parts = evalmetrics::layer_part_table(&model, &clouds, &cfg)?;
    writeln!(out, "{:<14} {:<12} {:>5} {:>7}", "class", "layer", "part", "IoU").map_err(io_err)?;
    for p in parts.iter().filter(|p| p.best) {
        writeln!(out, "{:<14} {:<12} {:>5} {:>7.4}", p.class, p.layer, p.part_id, p.iou).map_err(io_err)?;
    }
    let report = ConsistencyReport {
        format_version: FORMAT_VERSION,
        layer: "all".into(),
        tau: evalmetrics::DEFAULT_TAU,
        tiers: cfg.tiers.label(),
        classes: Vec::new(),
        parts,
    };
    save(&a.data.out, &with_config("eval-part", seed, a, &report)?)?;
    Ok(json!({}))
}

fn segment(seed: u64, a: &SegmentArgs, out: &mut impl Write) -> Result<Value> {
    let model = load_model(&a.data.model)?;
    let (classes, eval) = load_split(&a.data.data, &a.data.split)?;
    let (_, cal_all) = load_split(&a.data.data, &a.calibration_split)?;
    let cfg = DetectorConfig { q: a.q, margin: a.margin, flow: a.flow.config()?, ..DetectorConfig::default() };
    if a.margin < 0.0 || !(a.q > 0.0) {
        return Err(Error::InvalidArgument("margin must be nonnegative and q positive".into()));
    }
    let targets: Vec<usize> = match &a.class {
        Some(name) => vec![classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {name:?} (have {})", classes.join(", "))))?],
        None => (0..classes.len())
            .filter(|&c| eval.iter().find(|x| x.class_label == Some(c)).is_some_and(|x| x.part_ids().len() > 1))
            .collect(),
    };
    let mut rows = Vec::new();
    writeln!(out, "{:<14} {:<12} {:<9} {:>7} {:>9}  per-part IoU", "class", "layer", "tiers", "mIoU", "baseline").map_err(io_err)?;
    for class in targets {
        let cal: Vec<PointCloud> =
            cal_all.iter().filter(|c| c.class_label == Some(class)).take(a.calibration_count).cloned().collect();
        match partseg::best_layer_segmentation(&model, &cal, &eval, class, &cfg)? {
            Some(r) => {
                let parts: Vec<String> = r.parts.iter().map(|p| format!("{}:{:.3}", p.part_id, p.iou)).collect();
                writeln!(out, "{:<14} {:<12} {:<9} {:>7.4} {:>9.4}  {}", r.class, r.layer, r.tiers, r.miou, r.baseline_miou, parts.join(" "))
                    .map_err(io_err)?;
                if let Some(dir) = &a.export {
                    std::fs::create_dir_all(dir)?;
                    for (i, c) in eval.iter().filter(|c| c.class_label == Some(class)).enumerate() {
                        let seg = partseg::segment(c, &r.detectors)?;
                        let labelled = c.clone().with_labels(Some(seg.labels), c.class_label)?;
                        dataio::write_xyz(&labelled, &dir.join(format!("{}_{i:04}.xyz", r.class)))?;
                    }
                }
                rows.push(serde_json::to_value(&r)?);
            }
            None => {
                writeln!(out, "{:<14} no qualified detector pair", classes[class]).map_err(io_err)?;
                rows.push(json!({ "class": classes[class], "detectors": [], "qualified": 0 }));
            }
        }
    }
    let body = json!({ "classes": rows });
    save(&a.data.out, &with_config("segment", seed, a, &body)?)?;
    Ok(json!({}))
}

fn run_attack(seed: u64, a: &AttackArgs, out: &mut impl Write) -> Result<Value> {
    let model = load_model(&a.data.model)?;
    let (_, mut clouds) = load_split(&a.data.data, &a.data.split)?;
    if let Some(n) = a.limit {
        clouds.truncate(n);
    }
    let mode = match a.mode {
        ModeArg::Salient => CenterMode::Salient,
        ModeArg::Random => CenterMode::Random,
    };
    let cfg = if a.sweep {
        SweepConfig { ns: a.ns.clone(), ks: a.ks.clone(), seed, flow: a.flow.config()?, ..SweepConfig::default() }
    } else {
        SweepConfig { ns: vec![a.regions], ks: vec![a.neighbors], modes: vec![mode], seed, flow: a.flow.config()?, ..SweepConfig::default() }
    };
    let (report, timings) = attack::sweep(&model, &model.spec().arch, &clouds, &cfg)?;
    writeln!(out, "{:<8} {:>3} {:>3} {:>12} {:>12}", "mode", "N", "K", "success", "time/sample").map_err(io_err)?;
    for (c, t) in report.grid.iter().zip(&timings.grid) {
        let mode = if c.mode == CenterMode::Salient { "salient" } else { "random" };
        writeln!(out, "{mode:<8} {:>3} {:>3} {:>11.1}% {:>11.4}s", c.n, c.k, 100.0 * c.rate, t.mean_time_s).map_err(io_err)?;
    }
    // Per-class layout for the headline cell.
    let headline: Vec<_> = report.grid.iter().zip(&timings.grid).filter(|(c, _)| c.n == a.regions && c.k == a.neighbors).collect();
    if !headline.is_empty() {
        writeln!(out, "\nper class at N={}, K={}:", a.regions, a.neighbors).map_err(io_err)?;
        writeln!(out, "{:<14} {:<8} {:>9} {:>9} {:>10}", "class", "mode", "accuracy", "success", "time").map_err(io_err)?;
        for (c, t) in headline {
            let mode = if c.mode == CenterMode::Salient { "salient" } else { "random" };
            for (pc, (_, time)) in c.per_class.iter().zip(&t.per_class) {
                writeln!(out, "{:<14} {mode:<8} {:>8.1}% {:>8.1}% {:>9.4}s", pc.class, 100.0 * pc.accuracy, 100.0 * pc.rate, time)
                    .map_err(io_err)?;
            }
        }
    }
    save(&a.data.out, &with_config("attack", seed, a, &report)?)?;
    Ok(serde_json::to_value(&timings)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["relflow", "no-such-command"]), 1);
        assert_eq!(run(["relflow", "attack", "--regions", "x"]), 1);
        assert_eq!(run(["relflow", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        let code = run([
            "relflow".as_ref(),
            "explain".as_ref(),
            "--model".as_ref(),
            missing.as_os_str(),
            "--input".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            dir.path().join("o.json").as_os_str(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn attack_defaults_are_five_regions_of_forty() {
        let cli = Cli::try_parse_from(["relflow", "attack", "--model", "m", "--data", "d"]).unwrap();
        let Command::Attack(a) = cli.command else { panic!() };
        assert_eq!((a.regions, a.neighbors, a.mode), (5, 40, ModeArg::Salient));
        assert_eq!(a.ns, vec![1, 5, 10, 15, 20]);
        assert_eq!(a.ks, vec![10, 20, 40]);
    }

    #[test]
    fn seed_falls_back_to_environment() {
        // Only this test touches the variable.
        std::env::set_var("RELFLOW_SEED", "99");
        let cli = Cli::try_parse_from(["relflow", "gen", "--out", "x"]).unwrap();
        std::env::remove_var("RELFLOW_SEED");
        assert_eq!(cli.seed, 99);
        let cli = Cli::try_parse_from(["relflow", "--seed", "3", "gen", "--out", "x"]).unwrap();
        assert_eq!(cli.seed, 3);
    }

    #[test]
    fn timing_sidecar_sits_next_to_the_report() {
        assert_eq!(timing_path(Path::new("/a/b/r.json")), PathBuf::from("/a/b/r.json.timing.json"));
    }
}
