//! Conformal prediction for object detection.
//!
//! Detectors return boxes; this crate turns them into boxes that contain the
//! true object with a user-chosen probability, and scores them with metrics
//! that reward containment.
//!
//! * [`geometry`]: boxes, detections, IoU, IoA, NMS.
//! * [`matching`]: one-to-one Hungarian pairing of predictions and ground truth.
//! * [`conformal`]: nonconformity scores, corrected quantiles, calibration models.
//! * [`metrics`]: precision/recall, AP, mAP, C-mAP, margins and stretch.
//! * [`report`]: evaluation reports and tables.
//! * [`ingest`]: file formats, manifests and run configuration.
//! * [`synthlab`]: synthetic scenes and coverage experiments.
//! * [`cli`]: the `confdet` command line.
//!
//! ```
//! use confdet::{calibrate, conformalize, BBox, Detection, GroundTruthBox, MatchedPair, Penalty};
//!
//! let pairs: Vec<MatchedPair> = (0..20)
//!     .map(|i| {
//!         let s = i as f64;
//!         let gt = GroundTruthBox::new("a", BBox::new(10.0, 10.0, 50.0, 50.0).unwrap(), 0).unwrap();
//!         let pred = Detection::single_class("a", BBox::new(10.0 + s / 10.0, 10.0, 50.0, 50.0).unwrap(), 0.9).unwrap();
//!         MatchedPair::new(pred, gt).unwrap()
//!     })
//!     .collect();
//! let model = calibrate(&pairs, 0.3, Penalty::Additive).unwrap();
//! let b = conformalize(&BBox::new(11.0, 10.0, 50.0, 50.0).unwrap(), &model).unwrap();
//! assert!(b.conformal.xmin() <= 10.0);
//! ```

pub mod cli;
pub mod conformal;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod matching;
pub mod metrics;
pub mod report;
pub mod synthlab;

pub use conformal::{
    calibrate, calibrate_with, conformalize, corrected_quantile, coverage, quantile_rank,
    CalibrationModel, ConformalBox, Penalty,
};
pub use error::{Error, Result};
pub use geometry::{area, contains, ioa, iou, nms, BBox, Detection, GroundTruthBox, ImageId};
pub use matching::{hungarian_match, match_dataset, MatchResult, MatchedPair};
pub use metrics::{
    average_precision, c_map, c_map_50_80_100, map_at, map_range, ApOptions, Dataset, Interp,
    MatchRule, PrCurve,
};
pub use report::{evaluate, render_table, EvalReport, EvalSettings};
