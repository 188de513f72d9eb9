//! Score raw and conformalized detections side by side.
//!
//! Run with `cargo run --example evaluate_report`.

use std::collections::BTreeMap;

use confdet::conformal::{calibrate, conformalize, Penalty};
use confdet::geometry::{BBox, ImageId};
use confdet::matching::match_dataset;
use confdet::metrics::Dataset;
use confdet::report::{evaluate, render_table, EvalSettings};
use confdet::synthlab::{trial_scenes, PerturbationLaw};

fn main() -> confdet::Result<()> {
    let law = PerturbationLaw {
        spurious_rate: 0.3,
        miss_rate: 0.1,
        ..PerturbationLaw::default()
    };
    let (calib, test) = trial_scenes(3, 0, &law, 500, 500)?;
    let pairs = match_dataset(&calib.preds, &calib.gts, 0.1)?.pairs;
    let settings = EvalSettings::default();

    let raw = Dataset::new(test.preds.clone(), test.gts.clone());
    let mut reports = vec![evaluate("raw", &raw, &BTreeMap::new(), &settings)?];

    for penalty in [Penalty::Additive, Penalty::Multiplicative] {
        let model = calibrate(&pairs, 0.3, penalty)?;
        let mut originals: BTreeMap<ImageId, Vec<BBox>> = BTreeMap::new();
        let mut preds = BTreeMap::new();
        for (id, dets) in &test.preds {
            originals.insert(id.clone(), dets.iter().map(|d| *d.bbox()).collect());
            let expanded = dets
                .iter()
                .map(|d| Ok(d.with_bbox(conformalize(d.bbox(), &model)?.conformal)))
                .collect::<confdet::Result<Vec<_>>>()?;
            preds.insert(id.clone(), expanded);
        }
        let data = Dataset::new(preds, test.gts.clone());
        reports.push(evaluate(
            &format!("conformal-{penalty}"),
            &data,
            &originals,
            &settings,
        )?);
    }
    print!("{}", render_table(&reports));
    Ok(())
}
