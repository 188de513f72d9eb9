//! Synthetic scenes and a Monte-Carlo coverage laboratory.
//!
//! Each image carries one ground-truth box. A prediction is that box with
//! every side pulled inward by `bias + scale * noise`, so the additive
//! residuals are exactly the drawn perturbations. Calibration and test scenes
//! drawn from one law are exchangeable by construction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate, conformalize, coverage, min_calibration_size, CalibrationModel, Penalty, SIDES,
};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, GroundTruthBox, ImageId};
use crate::matching::match_dataset;
use crate::metrics;

/// Per-side noise distribution before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseFamily {
    Gaussian,
    StudentT { dof: f64 },
}

/// Objectness of a true detection: `sigmoid(intercept - slope * Σ|offset|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub intercept: f64,
    pub slope: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            intercept: 3.0,
            slope: 0.1,
        }
    }
}

/// How synthetic predictions deviate from the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationLaw {
    /// Noise scale per side (left, top, right, bottom), pixels.
    pub noise_scale: [f64; SIDES],
    /// Systematic inward shift per side, pixels.
    pub bias: [f64; SIDES],
    pub noise: NoiseFamily,
    /// Probability that a ground truth gets no prediction.
    pub miss_rate: f64,
    /// Probability that an image gets one spurious prediction.
    pub spurious_rate: f64,
    pub confidence: ConfidenceModel,
    /// Image width and height, pixels.
    pub image_size: [f64; 2],
    /// Range of ground-truth side lengths, pixels.
    pub box_size: [f64; 2],
}

impl Default for PerturbationLaw {
    fn default() -> Self {
        PerturbationLaw {
            noise_scale: [4.0; SIDES],
            bias: [0.0; SIDES],
            noise: NoiseFamily::Gaussian,
            miss_rate: 0.0,
            spurious_rate: 0.0,
            confidence: ConfidenceModel::default(),
            image_size: [640.0, 512.0],
            box_size: [40.0, 200.0],
        }
    }
}

impl PerturbationLaw {
    /// Exact predictions, nothing missed or spurious.
    pub fn noiseless() -> Self {
        PerturbationLaw {
            noise_scale: [0.0; SIDES],
            ..PerturbationLaw::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("perturbation law: {m}")));
        if self
            .noise_scale
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("noise scales must be finite and non-negative");
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return bad("bias must be finite");
        }
        if !(0.0..=1.0).contains(&self.miss_rate) || !(0.0..=1.0).contains(&self.spurious_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if let NoiseFamily::StudentT { dof } = self.noise {
            if !(dof.is_finite() && dof > 0.0) {
                return bad("student-t degrees of freedom must be positive");
            }
        }
        let [lo, hi] = self.box_size;
        let [w, h] = self.image_size;
        if !(lo > 0.0 && lo <= hi && hi <= w.min(h)) {
            return bad("box_size must satisfy 0 < min <= max <= image side");
        }
        if !(self.confidence.intercept.is_finite() && self.confidence.slope.is_finite()) {
            return bad("confidence parameters must be finite");
        }
        Ok(())
    }
}

/// Ground truths and predictions of a generated scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub gts: BTreeMap<ImageId, Vec<GroundTruthBox>>,
    pub preds: BTreeMap<ImageId, Vec<Detection>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

enum Sampler {
    Gaussian(Normal<f64>),
    StudentT(StudentT<f64>),
}

impl Sampler {
    fn new(family: NoiseFamily) -> Result<Self> {
        Ok(match family {
            NoiseFamily::Gaussian => Sampler::Gaussian(Normal::new(0.0, 1.0).expect("unit normal")),
            NoiseFamily::StudentT { dof } => Sampler::StudentT(
                StudentT::new(dof).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ),
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Gaussian(d) => d.sample(rng),
            Sampler::StudentT(d) => d.sample(rng),
        }
    }
}

const MAX_REDRAWS: usize = 64;

/// Deterministic in `(seed, law, n_images)`.
pub fn generate_scene(seed: u64, law: &PerturbationLaw, n_images: usize) -> Result<Scene> {
    law.validate()?;
    let sampler = Sampler::new(law.noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [img_w, img_h] = law.image_size;
    let [lo, hi] = law.box_size;
    let mut scene = Scene::default();

    for k in 0..n_images {
        let id = ImageId(format!("img{k:06}"));
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0.0..=img_w - w);
        let y0 = rng.random_range(0.0..=img_h - h);
        let gt_box = BBox::new(x0, y0, x0 + w, y0 + h)?;
        scene.gts.insert(
            id.clone(),
            vec![GroundTruthBox::new(id.clone(), gt_box, 0)?],
        );

        let mut preds = Vec::new();
        if rng.random::<f64>() >= law.miss_rate {
            let mut pred = None;
            for _ in 0..MAX_REDRAWS {
                let offset: [f64; SIDES] = std::array::from_fn(|s| {
                    law.bias[s] + law.noise_scale[s] * sampler.draw(&mut rng)
                });
                let (xa, ya) = (x0 + offset[0], y0 + offset[1]);
                let (xb, yb) = (x0 + w - offset[2], y0 + h - offset[3]);
                if xb > xa && yb > ya {
                    let magnitude: f64 = offset.iter().map(|o| o.abs()).sum();
                    pred = Some((BBox::new(xa, ya, xb, yb)?, magnitude));
                    break;
                }
            }
            let (b, magnitude) = pred.unwrap_or((gt_box, 0.0));
            let c = law.confidence;
            let obj = sigmoid(c.intercept - c.slope * magnitude).clamp(0.0, 1.0);
            preds.push(Detection::single_class(id.clone(), b, obj)?);
        }
        if rng.random::<f64>() < law.spurious_rate {
            let sw = rng.random_range(lo..=hi);
            let sh = rng.random_range(lo..=hi);
            let sx = rng.random_range(0.0..=img_w - sw);
            let sy = rng.random_range(0.0..=img_h - sh);
            let obj = rng.random_range(0.0..0.5);
            preds.push(Detection::single_class(
                id.clone(),
                BBox::new(sx, sy, sx + sw, sy + sh)?,
                obj,
            )?);
        }
        if !preds.is_empty() {
            scene.preds.insert(id, preds);
        }
    }
    Ok(scene)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Calibration and test scenes for one trial.
pub fn trial_scenes(
    seed: u64,
    trial: usize,
    law: &PerturbationLaw,
    n_calib: usize,
    n_test: usize,
) -> Result<(Scene, Scene)> {
    let calib = generate_scene(derive_seed(seed, 2 * trial as u64), law, n_calib)?;
    let test = generate_scene(derive_seed(seed, 2 * trial as u64 + 1), law, n_test)?;
    Ok((calib, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub model: CalibrationModel,
    pub coverage: f64,
    pub stretch: f64,
    pub test_pairs: usize,
}

/// Calibrates on `calib`, conformalizes matched test predictions and
/// measures their coverage.
pub fn calibrated_coverage(
    calib: &Scene,
    test: &Scene,
    alpha: f64,
    penalty: Penalty,
    min_iou: f64,
) -> Result<TrialOutcome> {
    let cal_pairs = match_dataset(&calib.preds, &calib.gts, min_iou)?.pairs;
    let model = calibrate(&cal_pairs, alpha, penalty)?;
    let test_pairs = match_dataset(&test.preds, &test.gts, min_iou)?.pairs;
    let boxes = test_pairs
        .iter()
        .map(|p| conformalize(p.pred.bbox(), &model))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<GroundTruthBox> = test_pairs.iter().map(|p| p.gt.clone()).collect();
    let stretch = if boxes.is_empty() {
        0.0
    } else {
        metrics::stretch(&boxes)?
    };
    Ok(TrialOutcome {
        coverage: coverage(&boxes, &gts)?,
        stretch,
        test_pairs: boxes.len(),
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub alpha: f64,
    pub penalty: Penalty,
    pub n_calib: usize,
    pub n_test: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub law: PerturbationLaw,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub mean_stretch: f64,
    /// Mean per-side quantile across trials.
    pub mean_q: [f64; SIDES],
    pub per_trial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub law: PerturbationLaw,
    pub alpha: f64,
    pub penalty: Penalty,
    pub n_calib: usize,
    pub n_test: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub min_iou: f64,
}

/// Repeated calibrate/test rounds. Trials run in parallel, each seeded from
/// `(seed, trial)`, so the summary does not depend on the thread count.
pub fn coverage_experiment(spec: &ExperimentSpec) -> Result<CoverageSummary> {
    spec.law.validate()?;
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {}",
            spec.alpha
        )));
    }
    if spec.n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be positive".into()));
    }
    let beta = spec.alpha / SIDES as f64;
    let min_n = min_calibration_size(beta);
    if spec.n_calib < min_n {
        return Err(Error::InsufficientCalibration {
            n: spec.n_calib,
            beta,
            rank: crate::conformal::quantile_rank(spec.n_calib, beta),
            min_n,
        });
    }

    let outcomes: Vec<TrialOutcome> = (0..spec.n_trials)
        .into_par_iter()
        .map(|trial| {
            let (calib, test) =
                trial_scenes(spec.seed, trial, &spec.law, spec.n_calib, spec.n_test)?;
            calibrated_coverage(&calib, &test, spec.alpha, spec.penalty, spec.min_iou)
        })
        .collect::<Result<_>>()?;

    let n = outcomes.len() as f64;
    let per_trial: Vec<f64> = outcomes.iter().map(|o| o.coverage).collect();
    let mut mean_q = [0.0; SIDES];
    for o in &outcomes {
        for (m, q) in mean_q.iter_mut().zip(o.model.q) {
            *m += q / n;
        }
    }
    Ok(CoverageSummary {
        alpha: spec.alpha,
        penalty: spec.penalty,
        n_calib: spec.n_calib,
        n_test: spec.n_test,
        n_trials: spec.n_trials,
        seed: spec.seed,
        law: spec.law.clone(),
        mean_coverage: per_trial.iter().sum::<f64>() / n,
        min_coverage: per_trial.iter().copied().fold(f64::INFINITY, f64::min),
        max_coverage: per_trial.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_stretch: outcomes.iter().map(|o| o.stretch).sum::<f64>() / n,
        mean_q,
        per_trial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::DEFAULT_MIN_IOU;

    fn spec(law: PerturbationLaw, penalty: Penalty, trials: usize) -> ExperimentSpec {
        ExperimentSpec {
            law,
            alpha: 0.3,
            penalty,
            n_calib: 200,
            n_test: 200,
            n_trials: trials,
            seed: 11,
            min_iou: DEFAULT_MIN_IOU,
        }
    }

    #[test]
    fn noiseless_law_reproduces_ground_truth() {
        let s = generate_scene(3, &PerturbationLaw::noiseless(), 50).unwrap();
        assert_eq!(s.gts.len(), 50);
        for (id, gts) in &s.gts {
            let preds = &s.preds[id];
            assert_eq!(preds.len(), 1);
            assert_eq!(preds[0].bbox(), gts[0].bbox());
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let law = PerturbationLaw {
            spurious_rate: 0.3,
            miss_rate: 0.1,
            ..PerturbationLaw::default()
        };
        assert_eq!(
            generate_scene(9, &law, 100).unwrap(),
            generate_scene(9, &law, 100).unwrap()
        );
        assert_ne!(
            generate_scene(9, &law, 100).unwrap(),
            generate_scene(10, &law, 100).unwrap()
        );
    }

    #[test]
    fn full_miss_rate_gives_no_predictions() {
        let law = PerturbationLaw {
            miss_rate: 1.0,
            ..PerturbationLaw::default()
        };
        let s = generate_scene(1, &law, 40).unwrap();
        assert!(s.preds.is_empty());
        assert_eq!(s.gts.len(), 40);
    }

    #[test]
    fn additive_residuals_equal_drawn_offsets_plus_bias() {
        let law = PerturbationLaw {
            noise_scale: [0.0; 4],
            bias: [1.0, -2.0, 3.0, 0.5],
            ..PerturbationLaw::default()
        };
        let s = generate_scene(5, &law, 10).unwrap();
        let pairs = match_dataset(&s.preds, &s.gts, DEFAULT_MIN_IOU)
            .unwrap()
            .pairs;
        for p in &pairs {
            let r = crate::conformal::additive_score(p).to_array();
            for (rk, bk) in r.iter().zip(law.bias) {
                assert!((rk - bk).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_experiment_has_full_coverage() {
        let out =
            coverage_experiment(&spec(PerturbationLaw::noiseless(), Penalty::Additive, 5)).unwrap();
        assert!(out.per_trial.iter().all(|&c| c == 1.0));
        assert_eq!(out.mean_q, [0.0; 4]);
    }

    #[test]
    fn infeasible_calibration_fails_up_front() {
        let mut s = spec(PerturbationLaw::default(), Penalty::Additive, 3);
        s.n_calib = 5;
        assert!(matches!(
            coverage_experiment(&s),
            Err(Error::InsufficientCalibration { min_n: 13, .. })
        ));
    }

    #[test]
    fn heavy_tailed_law_runs() {
        let law = PerturbationLaw {
            noise: NoiseFamily::StudentT { dof: 3.0 },
            ..PerturbationLaw::default()
        };
        let out = coverage_experiment(&spec(law, Penalty::Multiplicative, 10)).unwrap();
        assert!(out.mean_coverage > 0.6);
    }

    #[test]
    fn law_json_round_trip() {
        let law = PerturbationLaw {
            noise: NoiseFamily::StudentT { dof: 4.0 },
            ..PerturbationLaw::default()
        };
        let s = serde_json::to_string(&law).unwrap();
        assert!(s.contains("\"family\":\"student_t\""));
        assert_eq!(serde_json::from_str::<PerturbationLaw>(&s).unwrap(), law);
    }
}
