//! Magnitude pruning sweep on random Trial 3 weights.

use yolite::analysis::prune_magnitude;
use yolite::bench::{measure, seeded_input};
use yolite::darknet::WeightsBlob;
use yolite::model::catalog_yolo_lite;
use yolite::CompiledNetwork;

fn main() {
    let spec = catalog_yolo_lite(true);
    let blob = WeightsBlob::random(&spec, 5).unwrap();
    let base = CompiledNetwork::<f32>::new(&spec, &blob).unwrap();
    let x = seeded_input(&base, 1);
    let reference = base.forward(&x, false).unwrap().0;
    for t in [0.0f32, 0.01, 0.05, 0.1, 0.2] {
        let (pruned, report) = prune_magnitude(&blob, t);
        let net = CompiledNetwork::<f32>::new(&spec, &pruned).unwrap();
        let out = net.forward(&x, false).unwrap().0;
        println!(
            "threshold {t:<5} sparsity {:>6.2}%  max output change {:.3e}  median {:.2} ms",
            100.0 * report.sparsity,
            out.max_abs_diff(&reference),
            measure(&net, 10, 2, 0).unwrap().median_ms
        );
    }
}
