//! Precision/recall curves, interpolated average precision, and the
//! classical and conformal mAP families.
//!
//! Predictions are ranked by confidence (stable on ties) and associated
//! greedily: each prediction takes the unused ground truth in its image with
//! the highest IoU. The association consumes that ground truth whenever the
//! IoU reaches the threshold `t`, whatever the rule. The rule then decides
//! the verdict:
//!
//! * [`MatchRule::Classic`]: IoU ≥ t.
//! * [`MatchRule::Conformal`]: IoU ≥ t and the prediction contains the
//!   ground truth (IoA = 1, checked by exact coordinate comparison).
//! * [`MatchRule::MinIoa`]: IoU ≥ t and IoA ≥ s.
//!
//! Because the association is shared, the conformal true positives at every
//! rank are a subset of the classic ones, so C-mAP never exceeds mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalBox;
use crate::error::{Error, Result};
use crate::geometry::{area, contains, ioa, iou, BBox, Detection, GroundTruthBox, ImageId};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// `steps` evenly spaced IoA thresholds from 0.80 to 1.00 inclusive.
pub fn ioa_thresholds(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let d = (steps - 1) as f64;
            (0..steps)
                .map(|k| (80.0 * d + 20.0 * k as f64) / (100.0 * d))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchRule {
    Classic,
    Conformal,
    /// IoU ≥ t and IoA ≥ s. `s ≥ 1` is evaluated as exact containment.
    MinIoa(f64),
}

impl MatchRule {
    fn accepts(&self, overlap: f64, t: f64, pred: &BBox, gt: &BBox) -> bool {
        if overlap < t {
            return false;
        }
        match *self {
            MatchRule::Classic => true,
            MatchRule::Conformal => contains(pred, gt),
            MatchRule::MinIoa(s) if s >= 1.0 => contains(pred, gt),
            MatchRule::MinIoa(s) => ioa(pred, gt).map(|v| v >= s).unwrap_or(false),
        }
    }
}

/// Recall grid used to integrate the interpolated precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interp {
    #[default]
    #[serde(rename = "11pt")]
    ElevenPoint,
    #[serde(rename = "101pt")]
    HundredOnePoint,
}

impl Interp {
    fn divisions(self) -> u64 {
        match self {
            Interp::ElevenPoint => 10,
            Interp::HundredOnePoint => 100,
        }
    }
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "11pt" => Ok(Interp::ElevenPoint),
            "101pt" => Ok(Interp::HundredOnePoint),
            other => Err(Error::InvalidArgument(format!(
                "unknown interpolation `{other}` (expected 11pt or 101pt)"
            ))),
        }
    }
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Interp::ElevenPoint => "11pt",
            Interp::HundredOnePoint => "101pt",
        })
    }
}

/// Cumulative counts after the prediction at one rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub confidence: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: u64,
}

impl PrCurve {
    pub fn false_negatives(&self, i: usize) -> u64 {
        self.n_gt - self.points[i].tp
    }

    pub fn precision_exact(&self, i: usize) -> Ratio<u64> {
        let p = self.points[i];
        Ratio::new(p.tp, p.tp + p.fp)
    }

    /// Zero when there are no ground truths.
    pub fn recall_exact(&self, i: usize) -> Ratio<u64> {
        if self.n_gt == 0 {
            return Ratio::from_integer(0);
        }
        Ratio::new(self.points[i].tp, self.n_gt)
    }

    pub fn precision(&self, i: usize) -> f64 {
        let p = self.points[i];
        p.tp as f64 / (p.tp + p.fp) as f64
    }

    pub fn recall(&self, i: usize) -> f64 {
        if self.n_gt == 0 {
            return 0.0;
        }
        self.points[i].tp as f64 / self.n_gt as f64
    }

    pub fn final_recall(&self) -> f64 {
        if self.points.is_empty() {
            0.0
        } else {
            self.recall(self.points.len() - 1)
        }
    }

    /// Builds a curve from per-rank true-positive flags.
    pub fn from_flags(flags: &[bool], confidences: &[f64], n_gt: u64) -> PrCurve {
        let mut tp = 0;
        let mut fp = 0;
        let points = flags
            .iter()
            .zip(confidences)
            .map(|(&hit, &confidence)| {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                PrPoint { confidence, tp, fp }
            })
            .collect();
        PrCurve { points, n_gt }
    }
}

/// Per-prediction outcome of the ranking pass, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    /// Index into the input prediction list.
    pub pred_index: usize,
    pub confidence: f64,
    /// Best-IoU unused ground truth at the time of association.
    pub gt_index: Option<usize>,
    pub iou: f64,
    pub true_positive: bool,
}

/// Ranks predictions and decides each one's verdict under `rule`.
///
/// Predictions with confidence below `confidence_floor` are dropped first.
/// Single class: callers gate by class beforehand.
pub fn classify(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    t: f64,
    rule: MatchRule,
    confidence_floor: f64,
) -> Vec<Verdict> {
    let mut gts_by_image: BTreeMap<&ImageId, Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        gts_by_image.entry(g.image_id()).or_default().push(j);
    }
    let mut used = vec![false; gts.len()];

    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].confidence() >= confidence_floor)
        .collect();
    order.sort_by(|&a, &b| preds[b].confidence().total_cmp(&preds[a].confidence()));

    order
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            if let Some(candidates) = gts_by_image.get(p.image_id()) {
                for &j in candidates {
                    if used[j] {
                        continue;
                    }
                    let v = iou(p.bbox(), gts[j].bbox());
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
            }
            let (gt_index, overlap, true_positive) = match best {
                Some((j, v)) => {
                    if v >= t {
                        used[j] = true;
                    }
                    (Some(j), v, rule.accepts(v, t, p.bbox(), gts[j].bbox()))
                }
                None => (None, 0.0, false),
            };
            Verdict {
                pred_index: i,
                confidence: p.confidence(),
                gt_index,
                iou: overlap,
                true_positive,
            }
        })
        .collect()
}

/// Precision/recall at every rank.
pub fn rank_and_classify(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    t: f64,
    rule: MatchRule,
    confidence_floor: f64,
) -> PrCurve {
    let verdicts = classify(preds, gts, t, rule, confidence_floor);
    let flags: Vec<bool> = verdicts.iter().map(|v| v.true_positive).collect();
    let confs: Vec<f64> = verdicts.iter().map(|v| v.confidence).collect();
    PrCurve::from_flags(&flags, &confs, gts.len() as u64)
}

/// `p̄(r) = max precision over points with recall ≥ r`.
#[derive(Debug, Clone)]
pub struct InterpolatedPrecision {
    tp: Vec<u64>,
    n_gt: u64,
    suffix_max: Vec<f64>,
}

pub fn interpolate_precision(curve: &PrCurve) -> InterpolatedPrecision {
    let n = curve.points.len();
    let mut suffix_max = vec![0.0; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(curve.precision(i));
        suffix_max[i] = running;
    }
    InterpolatedPrecision {
        tp: curve.points.iter().map(|p| p.tp).collect(),
        n_gt: curve.n_gt,
        suffix_max,
    }
}

impl InterpolatedPrecision {
    fn suffix_from(&self, idx: usize) -> f64 {
        self.suffix_max.get(idx).copied().unwrap_or(0.0)
    }

    /// `p̄(r)`; 0 beyond the highest achieved recall.
    pub fn at(&self, r: f64) -> f64 {
        if self.n_gt == 0 {
            return 0.0;
        }
        let idx = self
            .tp
            .partition_point(|&tp| (tp as f64 / self.n_gt as f64) < r);
        self.suffix_from(idx)
    }

    /// `p̄(num / den)` with the recall comparison done in integers.
    pub fn at_fraction(&self, num: u64, den: u64) -> f64 {
        if self.n_gt == 0 {
            return 0.0;
        }
        let idx = self.tp.partition_point(|&tp| {
            (tp as u128) * (den as u128) < (num as u128) * (self.n_gt as u128)
        });
        self.suffix_from(idx)
    }
}

/// Mean interpolated precision over an evenly spaced recall grid.
pub fn average_precision(curve: &PrCurve, interp: Interp) -> f64 {
    if curve.points.is_empty() || curve.n_gt == 0 {
        return 0.0;
    }
    let ip = interpolate_precision(curve);
    let m = interp.divisions();
    let sum: f64 = (0..=m).map(|i| ip.at_fraction(i, m)).sum();
    sum / (m + 1) as f64
}

/// `(1/11) Σ p̄(r)` over `r ∈ {0.0, 0.1, ..., 1.0}`.
pub fn average_precision_11pt(curve: &PrCurve) -> f64 {
    average_precision(curve, Interp::ElevenPoint)
}

/// Predictions and ground truths keyed by image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub preds: BTreeMap<ImageId, Vec<Detection>>,
    pub gts: BTreeMap<ImageId, Vec<GroundTruthBox>>,
}

impl Dataset {
    pub fn new(
        preds: BTreeMap<ImageId, Vec<Detection>>,
        gts: BTreeMap<ImageId, Vec<GroundTruthBox>>,
    ) -> Self {
        Dataset { preds, gts }
    }

    /// Ground-truth classes present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.gts.values().flatten().map(|g| g.class_id()).collect();
        set.into_iter().collect()
    }

    /// Flattened (predictions, ground truths) of one class, in image-id then
    /// file order.
    pub fn class_slice(&self, class: usize) -> (Vec<Detection>, Vec<GroundTruthBox>) {
        let preds = self
            .preds
            .values()
            .flatten()
            .filter(|d| d.predicted_class() == class)
            .cloned()
            .collect();
        let gts = self
            .gts
            .values()
            .flatten()
            .filter(|g| g.class_id() == class)
            .cloned()
            .collect();
        (preds, gts)
    }

    /// Same ground truths, predictions replaced by `f(pred)`.
    pub fn map_preds(&self, mut f: impl FnMut(&Detection) -> Detection) -> Dataset {
        Dataset {
            preds: self
                .preds
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(&mut f).collect()))
                .collect(),
            gts: self.gts.clone(),
        }
    }
}

/// Knobs shared by the mAP family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApOptions {
    pub interp: Interp,
    pub confidence_floor: f64,
}

impl Default for ApOptions {
    fn default() -> Self {
        ApOptions {
            interp: Interp::ElevenPoint,
            confidence_floor: 0.0,
        }
    }
}

/// Per-class curves at threshold `t`, keyed by class id.
pub fn class_curves(
    data: &Dataset,
    t: f64,
    rule: MatchRule,
    opts: ApOptions,
) -> BTreeMap<usize, PrCurve> {
    data.classes()
        .into_iter()
        .map(|c| {
            let (preds, gts) = data.class_slice(c);
            (
                c,
                rank_and_classify(&preds, &gts, t, rule, opts.confidence_floor),
            )
        })
        .collect()
}

/// Mean over ground-truth classes of the per-class AP at IoU threshold `t`.
/// Zero when there are no ground truths.
pub fn map_at(data: &Dataset, t: f64, rule: MatchRule, opts: ApOptions) -> f64 {
    let curves = class_curves(data, t, rule, opts);
    if curves.is_empty() {
        return 0.0;
    }
    let sum: f64 = curves
        .values()
        .map(|c| average_precision(c, opts.interp))
        .sum();
    sum / curves.len() as f64
}

/// Mean of [`map_at`] over IoU thresholds 0.50:0.05:0.95.
pub fn map_range(data: &Dataset, rule: MatchRule, opts: ApOptions) -> f64 {
    let ts = coco_iou_thresholds();
    ts.iter().map(|&t| map_at(data, t, rule, opts)).sum::<f64>() / ts.len() as f64
}

/// mAP under the containment rule.
pub fn c_map(data: &Dataset, t: f64, opts: ApOptions) -> f64 {
    map_at(data, t, MatchRule::Conformal, opts)
}

/// Mean over IoA thresholds 0.80..=1.00 of mAP at IoU 0.5 with the rule
/// IoU ≥ 0.5 ∧ IoA ≥ s.
pub fn c_map_50_80_100(data: &Dataset, opts: ApOptions, ioa_steps: usize) -> f64 {
    let grid = ioa_thresholds(ioa_steps);
    if grid.is_empty() {
        return 0.0;
    }
    grid.iter()
        .map(|&s| map_at(data, 0.5, MatchRule::MinIoa(s), opts))
        .sum::<f64>()
        / grid.len() as f64
}

/// Mean absolute displacement per side, in pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
    pub total: f64,
}

pub fn margin(boxes: &[ConformalBox]) -> Result<Margins> {
    if boxes.is_empty() {
        return Err(Error::Empty("conformal boxes"));
    }
    let mut sums = [0.0f64; 4];
    for b in boxes {
        let (o, c) = (b.original.to_array(), b.conformal.to_array());
        for k in 0..4 {
            sums[k] += (c[k] - o[k]).abs();
        }
    }
    let n = boxes.len() as f64;
    let [left, top, right, bottom] = sums.map(|s| s / n);
    Ok(Margins {
        left,
        top,
        right,
        bottom,
        total: (left + top + right + bottom) / 4.0,
    })
}

/// Mean of `sqrt(area(conformal) / area(original))`.
pub fn stretch(boxes: &[ConformalBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::Empty("conformal boxes"));
    }
    let mut sum = 0.0;
    for b in boxes {
        let a0 = area(&b.original);
        if a0 <= 0.0 {
            return Err(Error::DegeneratePrediction);
        }
        sum += (area(&b.conformal) / a0).sqrt();
    }
    Ok(sum / boxes.len() as f64)
}

/// Population mean and standard deviation of `sqrt(area)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub mean: f64,
    pub std: f64,
}

pub fn box_area_stats(boxes: &[BBox]) -> Result<AreaStats> {
    if boxes.is_empty() {
        return Err(Error::Empty("boxes"));
    }
    let roots: Vec<f64> = boxes.iter().map(|b| area(b).sqrt()).collect();
    let n = roots.len() as f64;
    let mean = roots.iter().sum::<f64>() / n;
    let var = roots.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(AreaStats {
        mean,
        std: var.sqrt(),
    })
}
