//! Command-line surface: `calibrate`, `apply`, `eval`, `simulate`, `report`.
//!
//! Stages talk through files. Exit codes: 0 success, 2 input or schema
//! error, 3 statistical infeasibility, 4 internal invariant violation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::conformal::{calibrate_with, conformalize, CalibrationModel, Penalty};
use crate::error::{Error, Result};
use crate::geometry::{filter_by_confidence, nms, BBox, Detection, ImageId};
use crate::ingest::{
    self, defaults, load_detection_records, load_groundtruth_checked, write_detection_records,
    write_json, write_report, write_reports, DatasetManifest, DetectionRecord, ReportFormat,
    RunConfig,
};
use crate::matching::match_dataset;
use crate::metrics::{ApOptions, Dataset, Interp};
use crate::report::{evaluate, render_table, EvalSettings};
use crate::synthlab::{coverage_experiment, ExperimentSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "confdet",
    version,
    about = "Conformal calibration and evaluation for object detectors"
)]
pub struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-side conformal margins from matched predictions.
    Calibrate(CalibrateArgs),
    /// Expand predicted boxes with a calibration model.
    Apply(ApplyArgs),
    /// Score predictions: mAP, C-mAP, coverage, margins, stretch.
    Eval(EvalArgs),
    /// Run a Monte-Carlo coverage experiment on synthetic scenes.
    Simulate(SimulateArgs),
    /// Merge report files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Preprocess {
    /// Drop detections whose objectness is below this threshold.
    #[arg(long, default_value_t = defaults::CONFIDENCE_FLOOR)]
    pub confidence_floor: f64,
    /// Apply greedy NMS at this IoU threshold before anything else.
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Calibration-split detections.
    #[arg(long)]
    pub preds: PathBuf,
    /// Calibration-split ground truths.
    #[arg(long)]
    pub gts: PathBuf,
    /// Risk level; boxes cover with probability at least 1 - alpha.
    #[arg(long, default_value_t = defaults::ALPHA)]
    pub alpha: f64,
    /// Nonconformity score: additive (pixels) or multiplicative (fractions of width/height).
    #[arg(long, default_value_t = Penalty::Additive)]
    pub penalty: Penalty,
    /// Hungarian pairs below this IoU are not used for calibration.
    #[arg(long, default_value_t = defaults::MIN_IOU)]
    pub min_iou: f64,
    /// Floor every margin at zero so boxes never shrink.
    #[arg(long)]
    pub clamp_nonnegative: bool,
    #[command(flatten)]
    pub pre: Preprocess,
    /// Output model file.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Detections to conformalize.
    #[arg(long)]
    pub preds: PathBuf,
    /// Calibration model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset manifest providing image sizes for --clip-to-image.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Clip conformal boxes to the image frame (needs --manifest).
    #[arg(long)]
    pub clip_to_image: bool,
    /// Output detections file; each record keeps its `original_bbox`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections, raw or conformalized.
    #[arg(long)]
    pub preds: PathBuf,
    /// Ground truths.
    #[arg(long)]
    pub gts: PathBuf,
    /// Conformalize the detections with this model before scoring.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset manifest; checks class ids against its class list.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// IoU threshold t for mAP@t and C-mAP.
    #[arg(long = "iou-t", default_value_t = defaults::IOU_THRESHOLD)]
    pub iou_t: f64,
    /// Hungarian IoU floor used when pairing for coverage.
    #[arg(long, default_value_t = defaults::MIN_IOU)]
    pub min_iou: f64,
    /// Recall grid for AP: 11pt or 101pt.
    #[arg(long, default_value_t = Interp::ElevenPoint)]
    pub interp: Interp,
    /// Number of IoA thresholds between 0.80 and 1.00 for C-mAP@50@80:100.
    #[arg(long, default_value_t = defaults::IOA_STEPS)]
    pub ioa_steps: usize,
    #[command(flatten)]
    pub pre: Preprocess,
    /// Row label in the report; defaults to the detections file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Format of --output: json or table.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Report file.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write a table rendering here.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Run configuration (JSON); its `simulation` section holds the law and sizes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Summary file.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files produced by `eval`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// json or table.
    #[arg(long, default_value = "table")]
    pub format: String,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InsufficientCalibration { .. } => EXIT_INFEASIBLE,
        Error::Internal(_) => EXIT_INTERNAL,
        _ => EXIT_INPUT,
    }
}

/// Runs a parsed command line and maps the outcome to an exit code,
/// reporting errors on stderr.
pub fn main_with(cli: Cli) -> i32 {
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return execute(cli.command);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    pool.install(|| execute(cli.command))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Apply(a) => cmd_apply(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!(
            "--{name} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

impl Preprocess {
    fn validate(&self) -> Result<()> {
        check_unit("confidence-floor", self.confidence_floor)?;
        if let Some(t) = self.nms_iou {
            check_unit("nms-iou", t)?;
        }
        Ok(())
    }

    fn apply(&self, records: Vec<DetectionRecord>) -> Vec<DetectionRecord> {
        let by_image = group_records(records);
        let mut out = Vec::new();
        for (_, recs) in by_image {
            let kept: Vec<DetectionRecord> = recs
                .into_iter()
                .filter(|r| r.detection.objectness() >= self.confidence_floor)
                .collect();
            match self.nms_iou {
                None => out.extend(kept),
                Some(t) => {
                    let dets: Vec<Detection> = kept.iter().map(|r| r.detection.clone()).collect();
                    let survivors = nms(&filter_by_confidence(&dets, 0.0), t);
                    // nms returns clones in confidence order; recover records by position
                    let mut used = vec![false; kept.len()];
                    for s in survivors {
                        if let Some(k) =
                            (0..kept.len()).find(|&k| !used[k] && kept[k].detection == s)
                        {
                            used[k] = true;
                            out.push(kept[k].clone());
                        }
                    }
                }
            }
        }
        out
    }
}

fn group_records(records: Vec<DetectionRecord>) -> BTreeMap<ImageId, Vec<DetectionRecord>> {
    let mut m: BTreeMap<ImageId, Vec<DetectionRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.detection.image_id().clone()).or_default().push(r);
    }
    m
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let cfg = RunConfig {
        alpha: a.alpha,
        penalty: a.penalty,
        min_iou: a.min_iou,
        confidence_floor: a.pre.confidence_floor,
        nms_iou: a.pre.nms_iou,
        clamp_nonnegative: a.clamp_nonnegative,
        ..RunConfig::default()
    };
    cfg.validate()?;
    a.pre.validate()?;

    let records = a.pre.apply(load_detection_records(&a.preds)?);
    let gts = ingest::load_groundtruth(&a.gts)?;
    let preds: BTreeMap<ImageId, Vec<Detection>> = group_records(records)
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|r| r.detection).collect()))
        .collect();
    let matched = match_dataset(&preds, &gts, cfg.min_iou)?;
    let model = calibrate_with(
        &matched.pairs,
        cfg.alpha,
        cfg.penalty,
        cfg.clamp_nonnegative,
    )?;
    model.save(&a.output)?;

    let c = matched.counts();
    println!(
        "calibrated {} model on n = {} pairs ({} unmatched predictions, {} unmatched ground truths)",
        model.penalty, model.n_calibration, c.unmatched_preds, c.unmatched_gts
    );
    println!(
        "alpha = {}  q = [left {}, top {}, right {}, bottom {}]",
        model.alpha, model.q[0], model.q[1], model.q[2], model.q[3]
    );
    Ok(())
}

fn load_manifest(path: Option<&Path>) -> Result<Option<DatasetManifest>> {
    path.map(DatasetManifest::load).transpose()
}

/// Conformalizes every record, keeping the pre-expansion box alongside.
pub fn conformalize_records(
    records: &[DetectionRecord],
    model: &CalibrationModel,
    clip: Option<&DatasetManifest>,
) -> Result<(Vec<DetectionRecord>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut offenders = Vec::new();
    let mut collapsed = 0;
    for (i, r) in records.iter().enumerate() {
        let b = *r.detection.bbox();
        let mut c = match conformalize(&b, model) {
            Ok(c) => c,
            Err(Error::DegeneratePrediction) => {
                offenders.push(i);
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(m) = clip {
            let id = r.detection.image_id();
            let (w, h) = m.dimensions(id).ok_or_else(|| {
                Error::InvalidArgument(format!("manifest has no dimensions for image `{id}`"))
            })?;
            c = c.clipped(w, h)?;
        }
        collapsed += c.collapsed as usize;
        out.push(DetectionRecord {
            detection: r.detection.with_bbox(c.conformal),
            original_bbox: Some(b),
        });
    }
    if !offenders.is_empty() {
        let list: Vec<String> = offenders.iter().map(usize::to_string).collect();
        return Err(Error::InvalidArgument(format!(
            "{} penalty needs positive width and height; degenerate boxes at records {}",
            model.penalty,
            list.join(", ")
        )));
    }
    Ok((out, collapsed))
}

pub fn cmd_apply(a: &ApplyArgs) -> Result<()> {
    if a.clip_to_image && a.manifest.is_none() {
        return Err(Error::InvalidArgument(
            "--clip-to-image requires --manifest".into(),
        ));
    }
    let model = CalibrationModel::load(&a.model)?;
    let manifest = load_manifest(a.manifest.as_deref())?;
    let records = load_detection_records(&a.preds)?;
    let clip = if a.clip_to_image {
        manifest.as_ref()
    } else {
        None
    };
    let (out, collapsed) = conformalize_records(&records, &model, clip)?;
    if collapsed > 0 {
        eprintln!("warning: {collapsed} boxes had an inverted side collapsed to its midline");
    }
    write_detection_records(&a.output, &out)?;
    println!(
        "conformalized {} detections -> {}",
        out.len(),
        a.output.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    if !(a.iou_t > 0.0 && a.iou_t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "--iou-t must lie in (0, 1], got {}",
            a.iou_t
        )));
    }
    check_unit("min-iou", a.min_iou)?;
    if a.ioa_steps == 0 {
        return Err(Error::InvalidArgument(
            "--ioa-steps must be at least 1".into(),
        ));
    }
    a.pre.validate()?;

    let manifest = load_manifest(a.manifest.as_deref())?;
    let n_classes = manifest
        .as_ref()
        .map(|m| m.class_names.len())
        .filter(|&n| n > 0);
    let gts = load_groundtruth_checked(&a.gts, n_classes)?;
    let mut records = a.pre.apply(load_detection_records(&a.preds)?);
    if let Some(path) = &a.model {
        let model = CalibrationModel::load(path)?;
        records = conformalize_records(&records, &model, None)?.0;
    }

    let mut preds: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
    let mut originals: BTreeMap<ImageId, Vec<BBox>> = BTreeMap::new();
    for (id, recs) in group_records(records) {
        originals.insert(
            id.clone(),
            recs.iter().map(DetectionRecord::original).collect(),
        );
        preds.insert(id, recs.into_iter().map(|r| r.detection).collect());
    }
    let data = Dataset::new(preds, gts);
    let settings = EvalSettings {
        iou_threshold: a.iou_t,
        ap: ApOptions {
            interp: a.interp,
            ..ApOptions::default()
        },
        ioa_steps: a.ioa_steps,
        min_iou: a.min_iou,
    };
    let name = a.name.clone().unwrap_or_else(|| {
        a.preds
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let report = evaluate(&name, &data, &originals, &settings)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_report(&report, &a.output, format)?;
    if let Some(t) = &a.table {
        write_report(&report, t, ReportFormat::Table)?;
    }
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let summary = coverage_experiment(&ExperimentSpec {
        law: cfg.simulation.law.clone(),
        alpha: cfg.alpha,
        penalty: cfg.penalty,
        n_calib: cfg.simulation.n_calib,
        n_test: cfg.simulation.n_test,
        n_trials: cfg.simulation.n_trials,
        seed: cfg.seed,
        min_iou: cfg.min_iou,
    })?;
    write_json(&summary, &a.output)?;
    println!(
        "{} trials, alpha = {}, {}: mean coverage {:.4} (min {:.4}, max {:.4}), mean stretch {:.4}",
        summary.n_trials,
        summary.alpha,
        summary.penalty,
        summary.mean_coverage,
        summary.min_coverage,
        summary.max_coverage,
        summary.mean_stretch
    );
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let reports = a
        .inputs
        .iter()
        .map(ingest::read_report)
        .collect::<Result<Vec<_>>>()?;
    match &a.output {
        Some(p) => write_reports(&reports, p, format),
        None => {
            match format {
                ReportFormat::Table => print!("{}", render_table(&reports)),
                ReportFormat::Json => print!(
                    "{}",
                    ingest::to_canonical_json(&reports)
                        .map_err(|e| Error::Internal(e.to_string()))?
                ),
            }
            Ok(())
        }
    }
}
