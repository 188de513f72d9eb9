//! Axis-aligned box arithmetic and the detection data model.
//!
//! Boxes live in continuous pixel coordinates with `y` growing downward.
//! Every constructor validates its invariants, so a [`BBox`], [`Detection`]
//! or [`GroundTruthBox`] in hand is always well formed.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on the sum of a class probability vector.
pub const CLASS_PROB_SUM_TOL: f64 = 1e-6;

/// Opaque image identifier. Accepts JSON strings or integers on input and
/// always writes back a string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageId(pub String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        ImageId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId(s.to_owned())
    }
}

impl From<String> for ImageId {
    fn from(s: String) -> Self {
        ImageId(s)
    }
}

impl Serialize for ImageId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Int(i64),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Str(s) => ImageId(s),
            Raw::Int(i) => ImageId(i.to_string()),
        })
    }
}

/// Axis-aligned bounding box `[xmin, ymin, xmax, ymax]`.
///
/// Zero-width or zero-height boxes are allowed; negative extents and
/// non-finite coordinates are rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            xmin,
            ymin,
            xmax,
            ymax,
            reason,
        };
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(invalid("coordinates must be finite"));
        }
        if xmin > xmax || ymin > ymax {
            return Err(invalid("negative extent"));
        }
        Ok(BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn xmin(&self) -> f64 {
        self.xmin
    }
    pub fn ymin(&self) -> f64 {
        self.ymin
    }
    pub fn xmax(&self) -> f64 {
        self.xmax
    }
    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    /// Coordinates in `[xmin, ymin, xmax, ymax]` order.
    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        BBox::new(
            self.xmin + dx,
            self.ymin + dy,
            self.xmax + dx,
            self.ymax + dy,
        )
    }

    /// Moves each side outward by the given amount (left, top, right, bottom).
    /// Negative amounts shrink the box; an inverted result is an error.
    pub fn expand(&self, left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        BBox::new(
            self.xmin - left,
            self.ymin - top,
            self.xmax + right,
            self.ymax + bottom,
        )
    }

    /// Clips the box to an image of the given size.
    pub fn clip(&self, width: f64, height: f64) -> Result<Self> {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox::new(cx(self.xmin), cy(self.ymin), cx(self.xmax), cy(self.ymax))
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(d)?;
        BBox::from_array(c).map_err(serde::de::Error::custom)
    }
}

/// A single detector output after NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    image_id: ImageId,
    bbox: BBox,
    objectness: f64,
    class_probs: Vec<f64>,
}

fn check_probability(field: &'static str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::InvalidProbability { field, value });
    }
    Ok(())
}

impl Detection {
    pub fn new(
        image_id: impl Into<ImageId>,
        bbox: BBox,
        objectness: f64,
        class_probs: Vec<f64>,
    ) -> Result<Self> {
        check_probability("objectness", objectness)?;
        if class_probs.is_empty() {
            return Err(Error::Empty("class_probs"));
        }
        for &p in &class_probs {
            check_probability("class_probs", p)?;
        }
        let sum: f64 = class_probs.iter().sum();
        if (sum - 1.0).abs() > CLASS_PROB_SUM_TOL {
            return Err(Error::InvalidProbability {
                field: "class_probs (sum)",
                value: sum,
            });
        }
        Ok(Detection {
            image_id: image_id.into(),
            bbox,
            objectness,
            class_probs,
        })
    }

    /// Single-class detection (`class_probs = [1.0]`).
    pub fn single_class(image_id: impl Into<ImageId>, bbox: BBox, objectness: f64) -> Result<Self> {
        Detection::new(image_id, bbox, objectness, vec![1.0])
    }

    pub fn image_id(&self) -> &ImageId {
        &self.image_id
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn objectness(&self) -> f64 {
        self.objectness
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    /// Objectness times the top class probability.
    pub fn confidence(&self) -> f64 {
        self.objectness * self.class_probs.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the most probable class; ties resolve to the lowest index.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn with_bbox(&self, bbox: BBox) -> Detection {
        Detection {
            bbox,
            ..self.clone()
        }
    }

    pub fn with_objectness(&self, objectness: f64) -> Result<Detection> {
        check_probability("objectness", objectness)?;
        Ok(Detection {
            objectness,
            ..self.clone()
        })
    }
}

/// Annotated ground-truth box. Always has positive area.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    image_id: ImageId,
    bbox: BBox,
    class_id: usize,
}

impl GroundTruthBox {
    pub fn new(image_id: impl Into<ImageId>, bbox: BBox, class_id: usize) -> Result<Self> {
        if area(&bbox) <= 0.0 {
            return Err(Error::DegenerateGroundTruth);
        }
        Ok(GroundTruthBox {
            image_id: image_id.into(),
            bbox,
            class_id,
        })
    }

    pub fn image_id(&self) -> &ImageId {
        &self.image_id
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let h = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over the ground-truth area.
pub fn ioa(pred: &BBox, gt: &BBox) -> Result<f64> {
    let gt_area = area(gt);
    if gt_area <= 0.0 {
        return Err(Error::DegenerateGroundTruth);
    }
    Ok((intersection_area(pred, gt) / gt_area).clamp(0.0, 1.0))
}

/// Exact box inclusion: `inner ⊆ outer`.
pub fn contains(outer: &BBox, inner: &BBox) -> bool {
    inner.xmin >= outer.xmin
        && inner.ymin >= outer.ymin
        && inner.xmax <= outer.xmax
        && inner.ymax <= outer.ymax
}

/// Indices of `dets` ordered by descending confidence, stable on ties.
pub(crate) fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_confidence_desc(&dets[a], &dets[b]));
    order
}

pub(crate) fn by_confidence_desc(a: &Detection, b: &Detection) -> Ordering {
    b.confidence().total_cmp(&a.confidence())
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending confidence (input order on ties) and a
/// box survives iff its IoU with every kept box is at most `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<&Detection> = Vec::new();
    for i in confidence_order(dets) {
        let d = &dets[i];
        if kept
            .iter()
            .all(|k| iou(k.bbox(), d.bbox()) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Keeps detections whose objectness is at least `tau`, preserving order.
pub fn filter_by_confidence(dets: &[Detection], tau: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.objectness() >= tau)
        .cloned()
        .collect()
}
