//! Overlap measures, confidence filtering and greedy NMS.
//!
//! Run with `cargo run --example geometry_basics`.

use confdet::geometry::{area, contains, filter_by_confidence, ioa, iou, nms, BBox, Detection};

fn main() {
    let gt = BBox::new(10.0, 10.0, 50.0, 40.0).unwrap();
    let pred = BBox::new(15.0, 5.0, 55.0, 38.0).unwrap();
    println!("area(gt) = {}, area(pred) = {}", area(&gt), area(&pred));
    println!(
        "IoU = {:.4}, IoA = {:.4}, contains = {}",
        iou(&pred, &gt),
        ioa(&pred, &gt).unwrap(),
        contains(&pred, &gt)
    );

    let grown = pred.expand(6.0, 6.0, 0.0, 3.0).unwrap();
    println!(
        "after expansion: IoU = {:.4}, IoA = {:.4}, contains = {}",
        iou(&grown, &gt),
        ioa(&grown, &gt).unwrap(),
        contains(&grown, &gt)
    );

    let dets: Vec<Detection> = [
        ([0.0, 0.0, 8.0, 1.0], 0.9),
        ([2.0, 0.0, 10.0, 1.0], 0.8),
        ([4.0, 0.0, 12.0, 1.0], 0.7),
        ([30.0, 0.0, 40.0, 1.0], 0.2),
    ]
    .into_iter()
    .map(|(c, s)| Detection::single_class("img", BBox::from_array(c).unwrap(), s).unwrap())
    .collect();

    let confident = filter_by_confidence(&dets, 0.5);
    println!(
        "\n{} of {} detections have objectness >= 0.5",
        confident.len(),
        dets.len()
    );
    for d in nms(&confident, 0.5) {
        println!(
            "  kept by NMS: {:?} at {:.1}",
            d.bbox().to_array(),
            d.confidence()
        );
    }
}
