//! Per-side nonconformity scores, Bonferroni-corrected quantiles and
//! conformalized boxes.
//!
//! Each matched pair yields four signed residuals, one per box side. A
//! positive residual means the prediction falls short of the ground truth on
//! that side. Calibration takes the corrected `1 - alpha/4` quantile of each
//! side independently; expanding every side of a new prediction by its
//! quantile yields a box that contains the true box with probability at
//! least `1 - alpha` when calibration and test pairs are exchangeable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{contains, BBox, GroundTruthBox};
use crate::matching::MatchedPair;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Number of box sides sharing the risk budget.
pub const SIDES: usize = 4;

/// Relative slack used when deciding whether `(1 - beta)(n + 1)` is an
/// integer. Absorbs the binary rounding of decimal levels like 0.1.
const RANK_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    Additive,
    Multiplicative,
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Penalty::Additive => "additive",
            Penalty::Multiplicative => "multiplicative",
        })
    }
}

impl FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" | "a" => Ok(Penalty::Additive),
            "multiplicative" | "m" => Ok(Penalty::Multiplicative),
            other => Err(Error::InvalidArgument(format!("unknown penalty `{other}`"))),
        }
    }
}

/// Signed per-side residuals. Pixels for the additive penalty, fractions of
/// the predicted width/height for the multiplicative one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreVector {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl ScoreVector {
    pub fn to_array(&self) -> [f64; SIDES] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub fn from_array(a: [f64; SIDES]) -> Self {
        ScoreVector {
            left: a[0],
            top: a[1],
            right: a[2],
            bottom: a[3],
        }
    }
}

pub fn additive_score(pair: &MatchedPair) -> ScoreVector {
    let p = pair.pred.bbox();
    let g = pair.gt.bbox();
    ScoreVector {
        left: p.xmin() - g.xmin(),
        top: p.ymin() - g.ymin(),
        right: g.xmax() - p.xmax(),
        bottom: g.ymax() - p.ymax(),
    }
}

pub fn multiplicative_score(pair: &MatchedPair) -> Result<ScoreVector> {
    let p = pair.pred.bbox();
    let (w, h) = (p.width(), p.height());
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::DegeneratePrediction);
    }
    let a = additive_score(pair);
    Ok(ScoreVector {
        left: a.left / w,
        top: a.top / h,
        right: a.right / w,
        bottom: a.bottom / h,
    })
}

pub fn score(pair: &MatchedPair, penalty: Penalty) -> Result<ScoreVector> {
    match penalty {
        Penalty::Additive => Ok(additive_score(pair)),
        Penalty::Multiplicative => multiplicative_score(pair),
    }
}

/// 1-based rank `ceil((1 - beta)(n + 1))` of the corrected quantile.
///
/// Values within a relative 1e-12 of an integer count as that integer, so
/// decimal levels like 0.1 behave as their exact rational value.
pub fn quantile_rank(n: usize, beta: f64) -> usize {
    let x = (1.0 - beta) * (n as f64 + 1.0);
    let up = x.ceil();
    let below = up - 1.0;
    let rank = if x - below <= RANK_REL_TOL * x.abs().max(1.0) {
        below
    } else {
        up
    };
    (rank.max(1.0)) as usize
}

/// Smallest calibration size for which the corrected quantile at `beta`
/// exists.
pub fn min_calibration_size(beta: f64) -> usize {
    let guess = ((1.0 - beta) / beta).floor().max(2.0) as usize - 1;
    (guess.max(1)..)
        .find(|&n| quantile_rank(n, beta) <= n)
        .expect("finite beta in (0, 1)")
}

fn check_level(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} must lie strictly between 0 and 1, got {v}"
        )));
    }
    Ok(())
}

/// The `ceil((1 - beta)(n + 1))`-th smallest sample.
///
/// Fails when that rank exceeds `n`, i.e. there are too few samples to
/// certify the level.
pub fn corrected_quantile(samples: &[f64], beta: f64) -> Result<f64> {
    check_level("beta", beta)?;
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "calibration score is not finite: {bad}"
        )));
    }
    let n = samples.len();
    let rank = quantile_rank(n, beta);
    if rank > n {
        return Err(Error::InsufficientCalibration {
            n,
            beta,
            rank,
            min_n: min_calibration_size(beta),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// Fitted per-side margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct CalibrationModel {
    pub penalty: Penalty,
    pub alpha: f64,
    /// Corrected quantiles in left, top, right, bottom order.
    pub q: [f64; SIDES],
    pub n_calibration: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    penalty: Penalty,
    alpha: f64,
    q: [f64; SIDES],
    n_calibration: usize,
    toolkit_version: String,
}

impl TryFrom<ModelDoc> for CalibrationModel {
    type Error = Error;

    fn try_from(d: ModelDoc) -> Result<Self> {
        CalibrationModel::new(d.penalty, d.alpha, d.q, d.n_calibration)
    }
}

impl From<CalibrationModel> for ModelDoc {
    fn from(m: CalibrationModel) -> Self {
        ModelDoc {
            penalty: m.penalty,
            alpha: m.alpha,
            q: m.q,
            n_calibration: m.n_calibration,
            toolkit_version: TOOLKIT_VERSION.to_owned(),
        }
    }
}

impl CalibrationModel {
    pub fn new(
        penalty: Penalty,
        alpha: f64,
        q: [f64; SIDES],
        n_calibration: usize,
    ) -> Result<Self> {
        check_level("alpha", alpha)?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("quantiles must be finite".into()));
        }
        Ok(CalibrationModel {
            penalty,
            alpha,
            q,
            n_calibration,
        })
    }

    /// A model that leaves every box unchanged.
    pub fn identity(penalty: Penalty) -> Self {
        CalibrationModel {
            penalty,
            alpha: 0.5,
            q: [0.0; SIDES],
            n_calibration: 0,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }
}

/// Fits the four corrected quantiles at level `alpha / 4`.
pub fn calibrate(pairs: &[MatchedPair], alpha: f64, penalty: Penalty) -> Result<CalibrationModel> {
    calibrate_with(pairs, alpha, penalty, false)
}

/// Like [`calibrate`]; `clamp_nonnegative` floors each quantile at zero so
/// boxes are never shrunk.
pub fn calibrate_with(
    pairs: &[MatchedPair],
    alpha: f64,
    penalty: Penalty,
    clamp_nonnegative: bool,
) -> Result<CalibrationModel> {
    check_level("alpha", alpha)?;
    if pairs.is_empty() {
        return Err(Error::Empty("calibration pairs"));
    }
    let beta = alpha / SIDES as f64;
    let n = pairs.len();
    let needed = quantile_rank(n, beta);
    if needed > n {
        return Err(Error::InsufficientCalibration {
            n,
            beta,
            rank: needed,
            min_n: min_calibration_size(beta),
        });
    }

    let mut per_side: [Vec<f64>; SIDES] = Default::default();
    for pair in pairs {
        let s = score(pair, penalty)?.to_array();
        for (side, v) in per_side.iter_mut().zip(s) {
            side.push(v);
        }
    }
    let mut q = [0.0; SIDES];
    for (qj, samples) in q.iter_mut().zip(&per_side) {
        *qj = corrected_quantile(samples, beta)?;
        if clamp_nonnegative {
            *qj = qj.max(0.0);
        }
    }
    CalibrationModel::new(penalty, alpha, q, n)
}

/// A prediction and its conformalized counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalBox {
    pub original: BBox,
    pub conformal: BBox,
    /// Set when negative margins inverted a side and it was collapsed onto
    /// its midline.
    pub collapsed: bool,
}

impl ConformalBox {
    /// Clips the conformal box to the image frame.
    pub fn clipped(&self, width: f64, height: f64) -> Result<ConformalBox> {
        Ok(ConformalBox {
            conformal: self.conformal.clip(width, height)?,
            ..*self
        })
    }
}

pub fn conformalize(bbox: &BBox, model: &CalibrationModel) -> Result<ConformalBox> {
    let [ql, qt, qr, qb] = model.q;
    let (dl, dt, dr, db) = match model.penalty {
        Penalty::Additive => (ql, qt, qr, qb),
        Penalty::Multiplicative => {
            let (w, h) = (bbox.width(), bbox.height());
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::DegeneratePrediction);
            }
            (ql * w, qt * h, qr * w, qb * h)
        }
    };
    let mut xmin = bbox.xmin() - dl;
    let mut ymin = bbox.ymin() - dt;
    let mut xmax = bbox.xmax() + dr;
    let mut ymax = bbox.ymax() + db;
    let mut collapsed = false;
    if xmin > xmax {
        let mid = 0.5 * (xmin + xmax);
        (xmin, xmax) = (mid, mid);
        collapsed = true;
    }
    if ymin > ymax {
        let mid = 0.5 * (ymin + ymax);
        (ymin, ymax) = (mid, mid);
        collapsed = true;
    }
    Ok(ConformalBox {
        original: *bbox,
        conformal: BBox::new(xmin, ymin, xmax, ymax)?,
        collapsed,
    })
}

/// Fraction of conformal boxes that contain the ground truth at the same
/// index. Empty input yields 0.
pub fn coverage(conformal_boxes: &[ConformalBox], paired_gts: &[GroundTruthBox]) -> Result<f64> {
    if conformal_boxes.len() != paired_gts.len() {
        return Err(Error::LengthMismatch {
            left: conformal_boxes.len(),
            right: paired_gts.len(),
        });
    }
    if conformal_boxes.is_empty() {
        return Ok(0.0);
    }
    let covered = conformal_boxes
        .iter()
        .zip(paired_gts)
        .filter(|(c, g)| contains(&c.conformal, g.bbox()))
        .count();
    Ok(covered as f64 / conformal_boxes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detection;
    use proptest::prelude::*;

    fn pair(p: [f64; 4], g: [f64; 4]) -> MatchedPair {
        MatchedPair::new(
            Detection::single_class("i", BBox::from_array(p).unwrap(), 0.9).unwrap(),
            GroundTruthBox::new("i", BBox::from_array(g).unwrap(), 0).unwrap(),
        )
        .unwrap()
    }

    fn bb(c: [f64; 4]) -> BBox {
        BBox::from_array(c).unwrap()
    }

    #[test]
    fn additive_examples() {
        let b = [10.0, 10.0, 50.0, 50.0];
        assert_eq!(additive_score(&pair(b, b)).to_array(), [0.0; 4]);
        let s = additive_score(&pair(b, [8.0, 12.0, 55.0, 48.0]));
        assert_eq!(s.to_array(), [2.0, -2.0, 5.0, -2.0]);
        let s = additive_score(&pair([0.0, 0.0, 100.0, 100.0], b));
        assert!(s.to_array().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn multiplicative_examples() {
        let b = [10.0, 10.0, 50.0, 50.0];
        assert_eq!(
            multiplicative_score(&pair(b, b)).unwrap().to_array(),
            [0.0; 4]
        );
        let s = multiplicative_score(&pair(b, [8.0, 12.0, 55.0, 48.0])).unwrap();
        assert_eq!(s.to_array(), [0.05, -0.05, 0.125, -0.05]);
        let degenerate = pair([0.0, 0.0, 0.0, 5.0], [0.0, 0.0, 1.0, 5.0]);
        assert!(matches!(
            multiplicative_score(&degenerate),
            Err(Error::DegeneratePrediction)
        ));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(corrected_quantile(&[3.0, 1.0, 2.0], 0.25).unwrap(), 3.0);
        assert_eq!(corrected_quantile(&[7.0], 0.5).unwrap(), 7.0);
        match corrected_quantile(&[1.0, 2.0, 3.0], 0.05) {
            Err(Error::InsufficientCalibration { n, rank, min_n, .. }) => {
                assert_eq!((n, rank, min_n), (3, 4, 19));
            }
            other => panic!("expected insufficiency, got {other:?}"),
        }
        assert!(corrected_quantile(&[], 0.1).is_err());
        assert!(corrected_quantile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn rank_absorbs_decimal_rounding() {
        // (1 - 0.1) * 40 is exactly 36 in rational arithmetic
        assert_eq!(quantile_rank(39, 0.1), 36);
        assert_eq!(quantile_rank(9, 0.1), 9);
        assert_eq!(quantile_rank(99, 0.3 / 4.0), 93);
        assert_eq!(min_calibration_size(0.1), 9);
        assert_eq!(min_calibration_size(0.075), 13);
        assert_eq!(min_calibration_size(0.05), 19);
    }

    #[test]
    fn calibrate_examples() {
        let b = [10.0, 10.0, 50.0, 50.0];
        let perfect: Vec<_> = (0..20).map(|_| pair(b, b)).collect();
        let m = calibrate(&perfect, 0.3, Penalty::Additive).unwrap();
        assert_eq!(m.q, [0.0; 4]);
        assert_eq!(m.n_calibration, 20);

        // left scores 1..=39
        let pairs: Vec<_> = (1..=39)
            .map(|k| pair([10.0 + k as f64, 10.0, 50.0, 50.0], b))
            .collect();
        let m = calibrate(&pairs, 0.4, Penalty::Additive).unwrap();
        assert_eq!(m.q[0], 36.0);

        let three: Vec<_> = (0..3).map(|_| pair(b, b)).collect();
        assert!(matches!(
            calibrate(&three, 0.2, Penalty::Additive),
            Err(Error::InsufficientCalibration { .. })
        ));
        assert!(matches!(
            calibrate(&[], 0.2, Penalty::Additive),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn clamp_floors_negative_quantiles() {
        let pairs: Vec<_> = (0..20)
            .map(|_| pair([0.0, 0.0, 100.0, 100.0], [10.0, 10.0, 50.0, 50.0]))
            .collect();
        let m = calibrate(&pairs, 0.3, Penalty::Additive).unwrap();
        assert!(m.q.iter().all(|&v| v < 0.0));
        let m = calibrate_with(&pairs, 0.3, Penalty::Additive, true).unwrap();
        assert_eq!(m.q, [0.0; 4]);
    }

    #[test]
    fn conformalize_examples() {
        let b = bb([10.0, 10.0, 50.0, 50.0]);
        let id = conformalize(&b, &CalibrationModel::identity(Penalty::Additive)).unwrap();
        assert_eq!(id.conformal, b);

        let m = CalibrationModel::new(Penalty::Additive, 0.3, [2.0, 3.0, 4.0, 5.0], 10).unwrap();
        assert_eq!(
            conformalize(&b, &m).unwrap().conformal.to_array(),
            [8.0, 7.0, 54.0, 55.0]
        );

        let m = CalibrationModel::new(Penalty::Multiplicative, 0.3, [0.1; 4], 10).unwrap();
        assert_eq!(
            conformalize(&b, &m).unwrap().conformal.to_array(),
            [6.0, 6.0, 54.0, 54.0]
        );
        assert!(conformalize(&bb([0.0, 0.0, 0.0, 1.0]), &m).is_err());
    }

    #[test]
    fn inverted_sides_collapse_to_midline() {
        let b = bb([10.0, 10.0, 20.0, 50.0]);
        let m = CalibrationModel::new(Penalty::Additive, 0.3, [-8.0, 0.0, -4.0, 0.0], 10).unwrap();
        let c = conformalize(&b, &m).unwrap();
        assert!(c.collapsed);
        assert_eq!(c.conformal.to_array(), [17.0, 10.0, 17.0, 50.0]);
    }

    #[test]
    fn clipping_to_image() {
        let m = CalibrationModel::new(Penalty::Additive, 0.3, [20.0; 4], 10).unwrap();
        let c = conformalize(&bb([5.0, 5.0, 95.0, 95.0]), &m).unwrap();
        let c = c.clipped(100.0, 100.0).unwrap();
        assert_eq!(c.conformal.to_array(), [0.0, 0.0, 100.0, 100.0]);
    }

    #[test]
    fn coverage_examples() {
        let g = |c| GroundTruthBox::new("i", bb(c), 0).unwrap();
        let cb = |c| ConformalBox {
            original: bb(c),
            conformal: bb(c),
            collapsed: false,
        };
        let big = cb([0.0, 0.0, 10.0, 10.0]);
        let small = cb([4.0, 4.0, 5.0, 5.0]);
        let gt = g([2.0, 2.0, 8.0, 8.0]);
        assert_eq!(
            coverage(&[big, big], &[gt.clone(), gt.clone()]).unwrap(),
            1.0
        );
        assert_eq!(coverage(&[small], std::slice::from_ref(&gt)).unwrap(), 0.0);
        let four = [big, big, small, big];
        let gts = vec![gt.clone(); 4];
        assert_eq!(coverage(&four, &gts).unwrap(), 0.75);
        assert!(matches!(
            coverage(&four, &gts[..3]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn model_json_shape() {
        let m = CalibrationModel::new(Penalty::Multiplicative, 0.3, [0.1, -0.2, 1e-17, 3.0], 42)
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["penalty"], "multiplicative");
        assert_eq!(v["q"].as_array().unwrap().len(), 4);
        assert_eq!(v["n_calibration"], 42);
        assert_eq!(v["toolkit_version"], TOOLKIT_VERSION);
        assert!(CalibrationModel::from_json(r#"{"penalty":"additive","alpha":1.5,"q":[0,0,0,0],"n_calibration":1,"toolkit_version":"x"}"#).is_err());
    }

    proptest! {
        #[test]
        fn model_json_round_trips_bit_exact(
            alpha in 0.001..0.999f64,
            q in proptest::array::uniform4(-1e6..1e6f64),
            n in 0usize..100_000,
            mult in any::<bool>(),
        ) {
            let penalty = if mult { Penalty::Multiplicative } else { Penalty::Additive };
            let m = CalibrationModel::new(penalty, alpha, q, n).unwrap();
            let back = CalibrationModel::from_json(&m.to_json()).unwrap();
            prop_assert_eq!(back.alpha.to_bits(), m.alpha.to_bits());
            for j in 0..4 {
                prop_assert_eq!(back.q[j].to_bits(), m.q[j].to_bits());
            }
            prop_assert_eq!(back, m);
        }

        #[test]
        fn additive_margin_identity(
            x in -500.0..500.0f64, y in -500.0..500.0f64,
            w in 1.0..300.0f64, h in 1.0..300.0f64,
            q in proptest::array::uniform4(0.0..50.0f64),
        ) {
            let b = BBox::new(x, y, x + w, y + h).unwrap();
            let m = CalibrationModel::new(Penalty::Additive, 0.3, q, 10).unwrap();
            let c = conformalize(&b, &m).unwrap();
            prop_assert!(contains(&c.conformal, &b));
            prop_assert!(((b.xmin() - c.conformal.xmin()) - q[0]).abs() < 1e-9);
            prop_assert!(((b.ymin() - c.conformal.ymin()) - q[1]).abs() < 1e-9);
            prop_assert!(((c.conformal.xmax() - b.xmax()) - q[2]).abs() < 1e-9);
            prop_assert!(((c.conformal.ymax() - b.ymax()) - q[3]).abs() < 1e-9);
        }

        #[test]
        fn lower_alpha_never_shrinks_margins(
            scores in proptest::collection::vec(-20.0..20.0f64, 80..200),
            a1 in 0.2..0.9f64, a2 in 0.2..0.9f64,
        ) {
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let q_lo = corrected_quantile(&scores, lo / 4.0).unwrap();
            let q_hi = corrected_quantile(&scores, hi / 4.0).unwrap();
            prop_assert!(q_lo >= q_hi);
        }
    }
}
