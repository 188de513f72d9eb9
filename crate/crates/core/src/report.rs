//! Aggregated evaluation: the full metric set for one detector/config.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalBox;
use crate::error::{Error, Result};
use crate::geometry::{area, contains, BBox, ImageId};
use crate::matching::hungarian_assign;
use crate::metrics::{
    self, c_map, c_map_50_80_100, class_curves, coco_iou_thresholds, map_at, ApOptions, Dataset,
    Margins, MatchRule,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub ap: ApOptions,
    pub ioa_steps: usize,
    /// IoU floor for the Hungarian pairing behind coverage.
    pub min_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou_threshold: 0.5,
            ap: ApOptions::default(),
            ioa_steps: 5,
            min_iou: crate::matching::DEFAULT_MIN_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub iou_threshold: f64,
    pub interp: metrics::Interp,
    /// mAP keyed by IoU threshold formatted with two decimals.
    pub map_at: BTreeMap<String, f64>,
    pub map_50_95: f64,
    pub c_map: f64,
    pub c_map_50_80_100: f64,
    /// Share of Hungarian-matched pairs whose evaluated box contains the
    /// ground truth.
    pub coverage: f64,
    pub matched_pairs: usize,
    pub unmatched_ground_truths: usize,
    pub margins: Margins,
    pub stretch: f64,
    pub box_area_sqrt_mean: f64,
    pub box_area_sqrt_std: f64,
    /// Classic-rule TP/FP/FN totals keyed like `map_at`.
    pub counts: BTreeMap<String, Counts>,
    pub n_images: usize,
    pub n_predictions: usize,
    pub n_ground_truths: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

fn classic_counts(data: &Dataset, t: f64, opts: ApOptions) -> Counts {
    let mut c = Counts::default();
    for curve in class_curves(data, t, MatchRule::Classic, opts).values() {
        let (tp, fp) = curve.points.last().map(|p| (p.tp, p.fp)).unwrap_or((0, 0));
        c.tp += tp;
        c.fp += fp;
        c.fn_ += curve.n_gt - tp;
    }
    c
}

/// Scores `data`, whose prediction boxes are the ones being evaluated.
///
/// `originals` holds, per image and in the same order, the boxes before
/// conformalization. Images absent from it are treated as unexpanded.
pub fn evaluate(
    name: &str,
    data: &Dataset,
    originals: &BTreeMap<ImageId, Vec<BBox>>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let opts = settings.ap;
    let mut warnings = Vec::new();
    let n_gt: usize = data.gts.values().map(Vec::len).sum();
    let n_pred: usize = data.preds.values().map(Vec::len).sum();
    if n_gt == 0 {
        warnings.push("no ground truths: detection metrics are 0".to_owned());
    }

    let mut thresholds = coco_iou_thresholds();
    if !thresholds.contains(&settings.iou_threshold) {
        thresholds.push(settings.iou_threshold);
    }
    let mut map_table = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for &t in &thresholds {
        map_table.insert(threshold_key(t), map_at(data, t, MatchRule::Classic, opts));
        counts.insert(threshold_key(t), classic_counts(data, t, opts));
    }
    let coco = coco_iou_thresholds();
    let map_50_95 = coco
        .iter()
        .map(|t| map_table[&threshold_key(*t)])
        .sum::<f64>()
        / coco.len() as f64;

    let mut conformal_boxes = Vec::with_capacity(n_pred);
    for (img, dets) in &data.preds {
        let orig = originals.get(img);
        if let Some(o) = orig {
            if o.len() != dets.len() {
                return Err(Error::Internal(format!(
                    "image {img}: {} original boxes for {} predictions",
                    o.len(),
                    dets.len()
                )));
            }
        }
        for (k, d) in dets.iter().enumerate() {
            conformal_boxes.push(ConformalBox {
                original: orig.map(|o| o[k]).unwrap_or(*d.bbox()),
                conformal: *d.bbox(),
                collapsed: false,
            });
        }
    }

    let images: Vec<&ImageId> = data.gts.keys().collect();
    let per_image: Vec<Result<(usize, usize)>> = images
        .par_iter()
        .map(|img| {
            let gts = &data.gts[*img];
            let dets = match data.preds.get(*img) {
                Some(d) => d,
                None => return Ok((0, 0)),
            };
            let as_original: Vec<_> = match originals.get(*img) {
                Some(o) => dets.iter().zip(o).map(|(d, b)| d.with_bbox(*b)).collect(),
                None => dets.clone(),
            };
            let pairs = hungarian_assign(&as_original, gts, settings.min_iou)?;
            let covered = pairs
                .iter()
                .filter(|(i, j, _)| contains(dets[*i].bbox(), gts[*j].bbox()))
                .count();
            Ok((pairs.len(), covered))
        })
        .collect();
    let (mut matched, mut covered) = (0usize, 0usize);
    for r in per_image {
        let (m, c) = r?;
        matched += m;
        covered += c;
    }
    let coverage = if matched == 0 {
        0.0
    } else {
        covered as f64 / matched as f64
    };

    let (margins, stretch, area_stats) = if conformal_boxes.is_empty() {
        if n_pred == 0 {
            warnings.push("no predictions: margin, stretch and box area are 0".to_owned());
        }
        (Margins::default(), 0.0, metrics::AreaStats::default())
    } else {
        let sized: Vec<ConformalBox> = conformal_boxes
            .iter()
            .copied()
            .filter(|b| area(&b.original) > 0.0)
            .collect();
        if sized.len() < conformal_boxes.len() {
            warnings.push(format!(
                "{} zero-area predictions excluded from stretch",
                conformal_boxes.len() - sized.len()
            ));
        }
        let stretch = if sized.is_empty() {
            0.0
        } else {
            metrics::stretch(&sized)?
        };
        let boxes: Vec<BBox> = conformal_boxes.iter().map(|b| b.conformal).collect();
        (
            metrics::margin(&conformal_boxes)?,
            stretch,
            metrics::box_area_stats(&boxes)?,
        )
    };

    Ok(EvalReport {
        model: name.to_owned(),
        iou_threshold: settings.iou_threshold,
        interp: opts.interp,
        map_50_95,
        c_map: c_map(data, settings.iou_threshold, opts),
        c_map_50_80_100: c_map_50_80_100(data, opts, settings.ioa_steps),
        map_at: map_table,
        coverage,
        matched_pairs: matched,
        unmatched_ground_truths: n_gt - matched,
        margins,
        stretch,
        box_area_sqrt_mean: area_stats.mean,
        box_area_sqrt_std: area_stats.std,
        counts,
        n_images: data
            .preds
            .keys()
            .chain(data.gts.keys())
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        n_predictions: n_pred,
        n_ground_truths: n_gt,
        warnings,
    })
}

impl EvalReport {
    /// mAP at the report's own IoU threshold.
    pub fn map(&self) -> f64 {
        self.map_at
            .get(&threshold_key(self.iou_threshold))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Human-readable table, one row per report. Detection metrics and coverage
/// are percentages.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = [
        "Model",
        "mAP",
        "mAP@50:95",
        "C-mAP",
        "C-mAP@50@80:100",
        "Stretch",
        "√BoxArea",
        "Coverage",
        "Margin",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                format!("{:.2}", 100.0 * r.map()),
                format!("{:.2}", 100.0 * r.map_50_95),
                format!("{:.2}", 100.0 * r.c_map),
                format!("{:.2}", 100.0 * r.c_map_50_80_100),
                format!("{:.2}", r.stretch),
                format!("{:.2} ± {:.2}", r.box_area_sqrt_mean, r.box_area_sqrt_std),
                format!("{:.2}", 100.0 * r.coverage),
                format!("{:.2}", r.margins.total),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(header[c].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", padded.join(" | "));
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{conformalize, CalibrationModel, Penalty};
    use crate::geometry::{Detection, GroundTruthBox};

    fn bb(c: [f64; 4]) -> BBox {
        BBox::from_array(c).unwrap()
    }

    fn dataset(pred: BBox, gt: BBox) -> Dataset {
        let mut d = Dataset::default();
        d.preds.insert(
            "a".into(),
            vec![Detection::single_class("a", pred, 0.9).unwrap()],
        );
        d.gts
            .insert("a".into(), vec![GroundTruthBox::new("a", gt, 0).unwrap()]);
        d
    }

    #[test]
    fn evaluates_conformalized_predictions() {
        let pred = bb([10.0, 10.0, 50.0, 50.0]);
        let gt = bb([9.0, 9.0, 52.0, 51.0]);
        let m = CalibrationModel::new(Penalty::Additive, 0.3, [2.0, 3.0, 4.0, 5.0], 10).unwrap();
        let c = conformalize(&pred, &m).unwrap();
        let data = dataset(c.conformal, gt);
        let mut originals = BTreeMap::new();
        originals.insert(ImageId::from("a"), vec![pred]);
        let r = evaluate("c-test", &data, &originals, &EvalSettings::default()).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.c_map, 1.0);
        assert_eq!(r.margins.total, 3.5);
        assert!(r.stretch > 1.0);
        assert_eq!(r.matched_pairs, 1);
        assert_eq!(
            r.counts["0.50"],
            Counts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn raw_predictions_have_unit_stretch() {
        let b = bb([10.0, 10.0, 50.0, 50.0]);
        let r = evaluate(
            "raw",
            &dataset(b, b),
            &BTreeMap::new(),
            &EvalSettings::default(),
        )
        .unwrap();
        assert_eq!(r.stretch, 1.0);
        assert_eq!(r.map(), 1.0);
        assert_eq!(r.map_50_95, 1.0);
        assert_eq!(r.box_area_sqrt_mean, 40.0);
    }

    #[test]
    fn empty_ground_truth_gives_zero_with_warning() {
        let mut d = Dataset::default();
        d.preds.insert(
            "a".into(),
            vec![Detection::single_class("a", bb([0.0, 0.0, 1.0, 1.0]), 0.9).unwrap()],
        );
        let r = evaluate("x", &d, &BTreeMap::new(), &EvalSettings::default()).unwrap();
        assert_eq!((r.map(), r.c_map, r.coverage), (0.0, 0.0, 0.0));
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn table_has_one_row_per_report() {
        let b = bb([10.0, 10.0, 50.0, 50.0]);
        let r = evaluate(
            "m1",
            &dataset(b, b),
            &BTreeMap::new(),
            &EvalSettings::default(),
        )
        .unwrap();
        let mut r2 = r.clone();
        r2.model = "m2".into();
        let t = render_table(&[r, r2]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().nth(2).unwrap().starts_with("| m1"));
        assert!(t.contains("C-mAP@50@80:100"));
    }
}
