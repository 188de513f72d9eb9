//! Rank-by-rank precision/recall for classic AP and its containment variant.
//!
//! Run with `cargo run --example map_walkthrough`.

use confdet::geometry::{contains, iou, BBox, Detection, GroundTruthBox};
use confdet::metrics::{average_precision_11pt, rank_and_classify, MatchRule, PrCurve};

fn bb(c: [f64; 4]) -> BBox {
    BBox::from_array(c).unwrap()
}

fn print_curve(title: &str, curve: &PrCurve) {
    println!("{title}");
    println!("  rank  conf  TP  FP  FN  precision  recall");
    for (i, p) in curve.points.iter().enumerate() {
        println!(
            "  {:>4}  {:.1}  {:>2}  {:>2}  {:>2}  {:>9}  {:>6}",
            i + 1,
            p.confidence,
            p.tp,
            p.fp,
            curve.false_negatives(i),
            curve.precision_exact(i).to_string(),
            curve.recall_exact(i).to_string()
        );
    }
    println!("  11-point AP = {:.4}\n", average_precision_11pt(curve));
}

fn main() {
    let gts: Vec<GroundTruthBox> = [
        [0.0, 0.0, 10.0, 10.0],
        [20.0, 0.0, 30.0, 10.0],
        [40.0, 0.0, 50.0, 10.0],
    ]
    .into_iter()
    .map(|c| GroundTruthBox::new("img", bb(c), 0).unwrap())
    .collect();

    let tight = [
        ([0.0, 0.0, 10.0, 10.0], 0.9),
        ([20.0, 0.0, 30.0, 10.0], 0.8),
        ([100.0, 100.0, 110.0, 110.0], 0.7),
        ([40.0, 0.0, 50.0, 10.0], 0.6),
        ([0.0, 0.0, 10.0, 10.0], 0.5),
    ];
    let preds: Vec<Detection> = tight
        .iter()
        .map(|&(c, s)| Detection::single_class("img", bb(c), s).unwrap())
        .collect();
    print_curve(
        "Classic rule (IoU >= 0.5)",
        &rank_and_classify(&preds, &gts, 0.5, MatchRule::Classic, 0.0),
    );

    let loose = [
        ([-1.0, -1.0, 11.0, 11.0], 0.9),
        ([10.0, -10.0, 40.0, 20.0], 0.8),
        ([100.0, 100.0, 110.0, 110.0], 0.7),
        ([39.0, -1.0, 51.0, 11.0], 0.6),
        ([200.0, 200.0, 210.0, 210.0], 0.5),
    ];
    let preds: Vec<Detection> = loose
        .iter()
        .map(|&(c, s)| Detection::single_class("img", bb(c), s).unwrap())
        .collect();
    for p in &preds {
        let best = gts
            .iter()
            .map(|g| iou(p.bbox(), g.bbox()))
            .fold(0.0, f64::max);
        let covers = gts.iter().any(|g| contains(p.bbox(), g.bbox()));
        println!(
            "  conf {:.1}: best IoU {best:.3}, contains a ground truth: {covers}",
            p.confidence()
        );
    }
    println!();
    print_curve(
        "Classic rule",
        &rank_and_classify(&preds, &gts, 0.5, MatchRule::Classic, 0.0),
    );
    print_curve(
        "Containment rule (IoU >= 0.5 and IoA = 1)",
        &rank_and_classify(&preds, &gts, 0.5, MatchRule::Conformal, 0.0),
    );
}
