//! Interchange formats: detections, ground truths, dataset manifests, run
//! configuration and reports.
//!
//! Detection and ground-truth files hold either a single JSON array of
//! records or one record per line. Boxes are absolute pixel coordinates
//! `[xmin, ymin, xmax, ymax]`. Every record is validated on load and a
//! failure names the record index and the offending field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::conformal::{Penalty, TOOLKIT_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, GroundTruthBox, ImageId};
use crate::matching::DEFAULT_MIN_IOU;
use crate::metrics::Interp;
use crate::report::{render_table, EvalReport};
use crate::synthlab::PerturbationLaw;

fn schema(index: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        index,
        field: field.to_owned(),
        message: message.into(),
    }
}

/// Parses a JSON array document or JSON lines into raw records.
fn read_records(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        return serde_json::from_str::<Vec<Value>>(&text).map_err(|e| Error::json(path, e));
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

fn field<'a>(obj: &'a Map<String, Value>, index: usize, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| schema(index, name, "missing required field"))
}

fn as_object(v: &Value, index: usize) -> Result<&Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| schema(index, "<record>", "expected a JSON object"))
}

fn parse_image_id(v: &Value, index: usize) -> Result<ImageId> {
    match v {
        Value::String(s) => Ok(ImageId(s.clone())),
        Value::Number(n) if n.is_i64() || n.is_u64() => Ok(ImageId(n.to_string())),
        _ => Err(schema(index, "image_id", "expected a string or integer")),
    }
}

fn parse_number(v: &Value, index: usize, name: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| schema(index, name, "expected a number"))
}

fn parse_bbox(v: &Value, index: usize, name: &str) -> Result<BBox> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| schema(index, name, "expected [xmin, ymin, xmax, ymax]"))?;
    let mut c = [0.0; 4];
    for (k, x) in arr.iter().enumerate() {
        c[k] = parse_number(x, index, name)?;
    }
    BBox::from_array(c).map_err(|e| schema(index, name, e.to_string()))
}

fn parse_probability(v: &Value, index: usize, name: &str) -> Result<f64> {
    let p = parse_number(v, index, name)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(schema(
            index,
            name,
            format!("probability {p} outside [0, 1]"),
        ));
    }
    Ok(p)
}

/// A detection as stored on disk. `original_bbox` is present in the output
/// of conformalization and holds the box before expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub detection: Detection,
    pub original_bbox: Option<BBox>,
}

impl DetectionRecord {
    /// The box before conformalization (the box itself when absent).
    pub fn original(&self) -> BBox {
        self.original_bbox.unwrap_or(*self.detection.bbox())
    }
}

fn parse_detection(v: &Value, index: usize) -> Result<DetectionRecord> {
    let obj = as_object(v, index)?;
    let image_id = parse_image_id(field(obj, index, "image_id")?, index)?;
    let bbox = parse_bbox(field(obj, index, "bbox")?, index, "bbox")?;
    let objectness = parse_probability(field(obj, index, "objectness")?, index, "objectness")?;
    let probs = field(obj, index, "class_probs")?
        .as_array()
        .ok_or_else(|| schema(index, "class_probs", "expected an array of probabilities"))?
        .iter()
        .map(|p| parse_probability(p, index, "class_probs"))
        .collect::<Result<Vec<f64>>>()?;
    let detection = Detection::new(image_id, bbox, objectness, probs)
        .map_err(|e| schema(index, "class_probs", e.to_string()))?;
    let original_bbox = match obj.get("original_bbox") {
        None | Some(Value::Null) => None,
        Some(b) => Some(parse_bbox(b, index, "original_bbox")?),
    };
    Ok(DetectionRecord {
        detection,
        original_bbox,
    })
}

/// Records in file order.
pub fn load_detection_records(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    read_records(path.as_ref())?
        .iter()
        .enumerate()
        .map(|(i, v)| parse_detection(v, i))
        .collect()
}

fn group<T>(
    items: impl IntoIterator<Item = T>,
    key: impl Fn(&T) -> &ImageId,
) -> BTreeMap<ImageId, Vec<T>> {
    let mut out: BTreeMap<ImageId, Vec<T>> = BTreeMap::new();
    for item in items {
        out.entry(key(&item).clone()).or_default().push(item);
    }
    out
}

/// Detections grouped by image, file order kept within each image.
pub fn load_detections(path: impl AsRef<Path>) -> Result<BTreeMap<ImageId, Vec<Detection>>> {
    let records = load_detection_records(path)?;
    Ok(group(records.into_iter().map(|r| r.detection), |d| {
        d.image_id()
    }))
}

/// Like [`load_detections`] but keeps the pre-expansion boxes.
pub fn load_detection_records_by_image(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<ImageId, Vec<DetectionRecord>>> {
    let records = load_detection_records(path)?;
    Ok(group(records, |r| r.detection.image_id()))
}

fn parse_groundtruth(v: &Value, index: usize, n_classes: Option<usize>) -> Result<GroundTruthBox> {
    let obj = as_object(v, index)?;
    let image_id = parse_image_id(field(obj, index, "image_id")?, index)?;
    let bbox = parse_bbox(field(obj, index, "bbox")?, index, "bbox")?;
    let class_id = field(obj, index, "class_id")?
        .as_u64()
        .ok_or_else(|| schema(index, "class_id", "expected a non-negative integer"))?
        as usize;
    if let Some(c) = n_classes {
        if class_id >= c {
            return Err(schema(
                index,
                "class_id",
                format!("{class_id} not below class count {c}"),
            ));
        }
    }
    GroundTruthBox::new(image_id, bbox, class_id).map_err(|e| schema(index, "bbox", e.to_string()))
}

/// Ground truths grouped by image. Repeated image ids merge into one list.
pub fn load_groundtruth(path: impl AsRef<Path>) -> Result<BTreeMap<ImageId, Vec<GroundTruthBox>>> {
    load_groundtruth_checked(path, None)
}

/// Like [`load_groundtruth`], also checking `class_id < n_classes`.
pub fn load_groundtruth_checked(
    path: impl AsRef<Path>,
    n_classes: Option<usize>,
) -> Result<BTreeMap<ImageId, Vec<GroundTruthBox>>> {
    let gts = read_records(path.as_ref())?
        .iter()
        .enumerate()
        .map(|(i, v)| parse_groundtruth(v, i, n_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(group(gts, |g| g.image_id()))
}

#[derive(Serialize)]
struct DetectionOut<'a> {
    image_id: &'a ImageId,
    bbox: &'a BBox,
    objectness: f64,
    class_probs: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    original_bbox: Option<&'a BBox>,
}

#[derive(Serialize)]
struct GroundTruthOut<'a> {
    image_id: &'a ImageId,
    bbox: &'a BBox,
    class_id: usize,
}

fn write_array<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let lines: Vec<String> = items
        .map(|r| serde_json::to_string(&r).map_err(|e| Error::json(path, e)))
        .collect::<Result<_>>()?;
    let body = if lines.is_empty() {
        "[]\n".to_owned()
    } else {
        format!("[\n  {}\n]\n", lines.join(",\n  "))
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn write_detection_records<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a DetectionRecord>,
) -> Result<()> {
    write_array(
        path.as_ref(),
        records.into_iter().map(|r| DetectionOut {
            image_id: r.detection.image_id(),
            bbox: r.detection.bbox(),
            objectness: r.detection.objectness(),
            class_probs: r.detection.class_probs(),
            original_bbox: r.original_bbox.as_ref(),
        }),
    )
}

pub fn write_detections<'a>(
    path: impl AsRef<Path>,
    dets: impl IntoIterator<Item = &'a Detection>,
) -> Result<()> {
    write_array(
        path.as_ref(),
        dets.into_iter().map(|d| DetectionOut {
            image_id: d.image_id(),
            bbox: d.bbox(),
            objectness: d.objectness(),
            class_probs: d.class_probs(),
            original_bbox: None,
        }),
    )
}

pub fn write_groundtruth<'a>(
    path: impl AsRef<Path>,
    gts: impl IntoIterator<Item = &'a GroundTruthBox>,
) -> Result<()> {
    write_array(
        path.as_ref(),
        gts.into_iter().map(|g| GroundTruthOut {
            image_id: g.image_id(),
            bbox: g.bbox(),
            class_id: g.class_id(),
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Calib,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: ImageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    pub split: Split,
    pub origin: Origin,
}

/// Image inventory with split and origin labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !seen.insert(&img.image_id) {
                return Err(schema(
                    i,
                    "image_id",
                    format!("duplicate image id `{}`", img.image_id),
                ));
            }
            for (name, v) in [("width", img.width), ("height", img.height)] {
                if let Some(v) = v {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(schema(i, name, "must be a positive number"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    /// `(width, height)` of an image when both are known.
    pub fn dimensions(&self, id: &ImageId) -> Option<(f64, f64)> {
        self.images
            .iter()
            .find(|e| &e.image_id == id)
            .and_then(|e| Some((e.width?, e.height?)))
    }

    /// Image ids carrying the given split label.
    pub fn split(&self, split: Split) -> Vec<&ImageId> {
        self.images
            .iter()
            .filter(|e| e.split == split)
            .map(|e| &e.image_id)
            .collect()
    }
}

pub mod defaults {
    pub const ALPHA: f64 = 0.3;
    pub const IOU_THRESHOLD: f64 = 0.5;
    pub const CONFIDENCE_FLOOR: f64 = 0.0;
    pub const MIN_IOU: f64 = super::DEFAULT_MIN_IOU;
    pub const IOA_STEPS: usize = 5;
    pub const SEED: u64 = 0;
    pub const N_CALIB: usize = 1000;
    pub const N_TEST: usize = 1000;
    pub const N_TRIALS: usize = 100;
}

/// Monte-Carlo experiment sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub law: PerturbationLaw,
    pub n_calib: usize,
    pub n_test: usize,
    pub n_trials: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            law: PerturbationLaw::default(),
            n_calib: defaults::N_CALIB,
            n_test: defaults::N_TEST,
            n_trials: defaults::N_TRIALS,
        }
    }
}

/// Every tunable of a run. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub penalty: Penalty,
    pub iou_threshold: f64,
    /// Objectness threshold applied before anything else.
    pub confidence_floor: f64,
    /// Greedy NMS threshold; `None` leaves detections as given.
    pub nms_iou: Option<f64>,
    pub min_iou: f64,
    pub interp: Interp,
    pub ioa_steps: usize,
    pub clip_to_image: bool,
    pub clamp_nonnegative: bool,
    pub seed: u64,
    pub simulation: SimulationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: defaults::ALPHA,
            penalty: Penalty::Additive,
            iou_threshold: defaults::IOU_THRESHOLD,
            confidence_floor: defaults::CONFIDENCE_FLOOR,
            nms_iou: None,
            min_iou: defaults::MIN_IOU,
            interp: Interp::ElevenPoint,
            ioa_steps: defaults::IOA_STEPS,
            clip_to_image: false,
            clamp_nonnegative: false,
            seed: defaults::SEED,
            simulation: SimulationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            ));
        }
        for (name, v) in [
            ("confidence_floor", self.confidence_floor),
            ("min_iou", self.min_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(t) = self.nms_iou {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("nms_iou must lie in [0, 1], got {t}"));
            }
        }
        if self.ioa_steps == 0 {
            return bad("ioa_steps must be at least 1".into());
        }
        self.simulation.law.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON (sorted keys).
    pub fn to_json(&self) -> String {
        to_canonical_json(self).expect("config serializes")
    }
}

/// Pretty JSON with object keys sorted, trailing newline.
pub fn to_canonical_json<T: Serialize>(
    value: &T,
) -> std::result::Result<String, serde_json::Error> {
    // serde_json::Value objects are BTreeMap-backed: round-tripping sorts keys.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = to_canonical_json(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" | "txt" => Ok(ReportFormat::Table),
            other => Err(Error::UnknownFormat(other.to_owned())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ReportFormat::Json => "json",
            ReportFormat::Table => "table",
        })
    }
}

pub fn write_report(
    report: &EvalReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    write_reports(std::slice::from_ref(report), path, format)
}

/// Several reports: a JSON array, or one table row per report.
pub fn write_reports(
    reports: &[EvalReport],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json if reports.len() == 1 => write_json(&reports[0], path),
        ReportFormat::Json => write_json(&reports, path),
        ReportFormat::Table => {
            fs::write(path, render_table(reports)).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Version string stamped into generated artifacts.
pub fn toolkit_version() -> &'static str {
    TOOLKIT_VERSION
}
