use confdet::conformal::{
    additive_score, conformalize, corrected_quantile, coverage, CalibrationModel, Penalty,
};
use confdet::geometry::{contains, GroundTruthBox};
use confdet::matching::match_dataset;
use confdet::synthlab::{
    calibrated_coverage, coverage_experiment, trial_scenes, ExperimentSpec, NoiseFamily,
    PerturbationLaw, Scene,
};

const ALPHA: f64 = 0.3;

fn pairs(scene: &Scene) -> Vec<confdet::MatchedPair> {
    match_dataset(&scene.preds, &scene.gts, 0.1).unwrap().pairs
}

/// Single quantile of the worst side, applied to every side.
fn max_score_coverage(calib: &Scene, test: &Scene) -> f64 {
    let scores: Vec<f64> = pairs(calib)
        .iter()
        .map(|p| {
            additive_score(p)
                .to_array()
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let q = corrected_quantile(&scores, ALPHA).unwrap();
    let model = CalibrationModel::new(Penalty::Additive, ALPHA, [q; 4], scores.len()).unwrap();
    let test_pairs = pairs(test);
    let hits = test_pairs
        .iter()
        .filter(|p| {
            contains(
                &conformalize(p.pred.bbox(), &model).unwrap().conformal,
                p.gt.bbox(),
            )
        })
        .count();
    hits as f64 / test_pairs.len() as f64
}

#[test]
fn per_side_correction_is_more_conservative_than_joint_max_score() {
    let law = PerturbationLaw::default();
    let (mut per_side, mut joint) = (0.0, 0.0);
    let trials = 40;
    for t in 0..trials {
        let (calib, test) = trial_scenes(11, t, &law, 500, 500).unwrap();
        per_side += calibrated_coverage(&calib, &test, ALPHA, Penalty::Additive, 0.1)
            .unwrap()
            .coverage;
        joint += max_score_coverage(&calib, &test);
    }
    per_side /= trials as f64;
    joint /= trials as f64;
    assert!(joint >= 1.0 - ALPHA - 0.01, "joint {joint}");
    assert!(per_side > joint, "per-side {per_side} vs joint {joint}");
}

#[test]
fn swapping_calibration_and_test_is_symmetric() {
    let law = PerturbationLaw::default();
    let n = 60;
    let diffs: Vec<f64> = (0..n)
        .map(|t| {
            let (a, b) = trial_scenes(12, t, &law, 300, 300).unwrap();
            let ab = calibrated_coverage(&a, &b, ALPHA, Penalty::Multiplicative, 0.1)
                .unwrap()
                .coverage;
            let ba = calibrated_coverage(&b, &a, ALPHA, Penalty::Multiplicative, 0.1)
                .unwrap()
                .coverage;
            ab - ba
        })
        .collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half_width = 2.576 * var.sqrt() / (n as f64).sqrt();
    assert!(
        mean.abs() <= half_width,
        "mean difference {mean} outside ±{half_width}"
    );
}

#[test]
fn guarantee_holds_under_heavy_tails_and_bias() {
    for penalty in [Penalty::Additive, Penalty::Multiplicative] {
        let law = PerturbationLaw {
            noise: NoiseFamily::StudentT { dof: 3.0 },
            bias: [2.0, -1.0, 3.0, 0.0],
            noise_scale: [3.0, 5.0, 3.0, 5.0],
            ..PerturbationLaw::default()
        };
        let s = coverage_experiment(&ExperimentSpec {
            law,
            alpha: ALPHA,
            penalty,
            n_calib: 500,
            n_test: 500,
            n_trials: 40,
            seed: 13,
            min_iou: 0.1,
        })
        .unwrap();
        assert!(
            s.mean_coverage >= 1.0 - ALPHA,
            "{penalty}: {}",
            s.mean_coverage
        );
        assert!(s.mean_q[0] > 0.0 && s.mean_q[1] > 0.0);
    }
}

#[test]
fn noiseless_predictions_need_no_margin() {
    let (calib, test) = trial_scenes(14, 0, &PerturbationLaw::noiseless(), 100, 100).unwrap();
    let out = calibrated_coverage(&calib, &test, ALPHA, Penalty::Additive, 0.1).unwrap();
    assert_eq!(out.model.q, [0.0; 4]);
    assert_eq!(out.coverage, 1.0);
    assert_eq!(out.stretch, 1.0);
}

#[test]
fn misses_and_spurious_boxes_do_not_enter_coverage() {
    let law = PerturbationLaw {
        miss_rate: 0.2,
        spurious_rate: 0.5,
        ..PerturbationLaw::default()
    };
    let (calib, test) = trial_scenes(15, 0, &law, 400, 400).unwrap();
    let out = calibrated_coverage(&calib, &test, ALPHA, Penalty::Additive, 0.1).unwrap();
    let n_gt: usize = test.gts.values().map(Vec::len).sum();
    assert!(out.test_pairs < n_gt);
    let p = pairs(&test);
    assert_eq!(p.len(), out.test_pairs);
    let boxes: Vec<_> = p
        .iter()
        .map(|x| conformalize(x.pred.bbox(), &out.model).unwrap())
        .collect();
    let gts: Vec<GroundTruthBox> = p.iter().map(|x| x.gt.clone()).collect();
    assert_eq!(coverage(&boxes, &gts).unwrap(), out.coverage);
}
