//! Fold batch norm into Trial 3's convolutions and compare outputs and speed.

use yolite::bench::{compare, measure, seeded_input};
use yolite::darknet::WeightsBlob;
use yolite::inference::fold_batch_norm;
use yolite::model::catalog_yolo_lite;
use yolite::CompiledNetwork;

fn main() {
    let spec = catalog_yolo_lite(false);
    let blob = WeightsBlob::random(&spec, 3).unwrap();
    let (folded_spec, folded_blob) = fold_batch_norm(&spec, &blob).unwrap();
    let bn = CompiledNetwork::<f32>::new(&spec, &blob).unwrap();
    let folded = CompiledNetwork::<f32>::new(&folded_spec, &folded_blob).unwrap();
    let x = seeded_input(&bn, 0);
    let diff = bn.forward(&x, false).unwrap().0.max_abs_diff(&folded.forward(&x, false).unwrap().0);
    println!("max |bn - folded| = {diff:.3e}");
    let (a, b) = (measure(&folded, 20, 3, 0).unwrap(), measure(&bn, 20, 3, 0).unwrap());
    println!("folded {:.2} ms, unfused bn {:.2} ms, speedup {:.2}x", a.median_ms, b.median_ms, compare(&a, &b).latency_ratio);
}
