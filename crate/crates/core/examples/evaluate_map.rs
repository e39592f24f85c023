//! Average precision on a hand-built ranking and mAP on a small scene.

use yolite::eval::{average_precision, mean_ap, ApMethod};
use yolite::{BBox, Detection, GroundTruthBox};

fn det(class_id: usize, score: f32, bbox: BBox) -> Detection {
    Detection { bbox, objectness: score, class_probs: vec![], class_id, score }
}

fn main() {
    let ranked = [true, false, true];
    for method in [ApMethod::AllPoint, ApMethod::Interpolated11] {
        println!("{method:?} AP of {ranked:?} over 2 truths: {:.4}", average_precision(&ranked, 2, method).unwrap());
    }
    let gts = vec![vec![GroundTruthBox::new(0, 0.3, 0.3, 0.2, 0.2), GroundTruthBox::new(1, 0.7, 0.6, 0.3, 0.2)]];
    let dets = vec![vec![
        det(0, 0.9, BBox::new(0.31, 0.3, 0.2, 0.22)),
        det(0, 0.6, BBox::new(0.7, 0.7, 0.1, 0.1)),
        det(1, 0.8, BBox::new(0.68, 0.61, 0.3, 0.2)),
    ]];
    let report = mean_ap(&dets, &gts, 2, 0.5, ApMethod::AllPoint);
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
