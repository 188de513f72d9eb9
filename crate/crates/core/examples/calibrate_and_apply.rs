//! Fit conformal margins on one synthetic split and check coverage on another.
//!
//! Run with `cargo run --example calibrate_and_apply`.

use confdet::conformal::{calibrate, conformalize, coverage, Penalty};
use confdet::geometry::GroundTruthBox;
use confdet::matching::match_dataset;
use confdet::metrics::{margin, stretch};
use confdet::synthlab::{trial_scenes, PerturbationLaw};

fn main() -> confdet::Result<()> {
    let law = PerturbationLaw {
        bias: [1.5, 0.0, -1.0, 2.0],
        miss_rate: 0.05,
        spurious_rate: 0.1,
        ..PerturbationLaw::default()
    };
    let (calib, test) = trial_scenes(7, 0, &law, 1000, 1000)?;
    let calib_pairs = match_dataset(&calib.preds, &calib.gts, 0.1)?;
    let test_pairs = match_dataset(&test.preds, &test.gts, 0.1)?.pairs;
    println!("calibration: {:?}", calib_pairs.counts());

    for penalty in [Penalty::Additive, Penalty::Multiplicative] {
        for alpha in [0.1, 0.3] {
            let model = calibrate(&calib_pairs.pairs, alpha, penalty)?;
            let boxes = test_pairs
                .iter()
                .map(|p| conformalize(p.pred.bbox(), &model))
                .collect::<confdet::Result<Vec<_>>>()?;
            let gts: Vec<GroundTruthBox> = test_pairs.iter().map(|p| p.gt.clone()).collect();
            let m = margin(&boxes)?;
            println!(
                "{penalty:>14} alpha {alpha}: q = {:?}\n{:>27} coverage {:.3} (target {:.2}), stretch {:.3}, margin {:.2} px",
                model.q.map(|v| (v * 1000.0).round() / 1000.0),
                "",
                coverage(&boxes, &gts)?,
                1.0 - alpha,
                stretch(&boxes)?,
                m.total
            );
        }
    }
    Ok(())
}
