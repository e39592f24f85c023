//! Median forward latency of Tiny-YOLOv2 and both Trial 3 variants.
//!
//! cargo run --release --example benchmark

use yolite::bench::{compare, measure_per_layer, write_csv};
use yolite::darknet::WeightsBlob;
use yolite::model::{catalog_tiny_yolov2, catalog_yolo_lite};
use yolite::CompiledNetwork;

fn main() {
    let nets = [
        ("tiny-yolov2", catalog_tiny_yolov2(false)),
        ("trial3-bn", catalog_yolo_lite(false)),
        ("trial3-nb", catalog_yolo_lite(true)),
    ];
    let mut runs = Vec::new();
    for (name, spec) in nets {
        let net = CompiledNetwork::<f32>::new(&spec, &WeightsBlob::random(&spec, 0).unwrap()).unwrap();
        let stats = measure_per_layer(&net, 10, 2, 0).unwrap();
        let slowest = stats.per_layer.as_ref().unwrap().iter().max_by(|a, b| a.mean_ms.total_cmp(&b.mean_ms)).unwrap().clone();
        println!("{name:<12} median {:>8.2} ms  fps {:>7.1}  slowest layer {} ({:.2} ms)", stats.median_ms, stats.fps, slowest.layer, slowest.mean_ms);
        runs.push((name, stats));
    }
    println!("trial3-nb is {:.1}x faster than tiny-yolov2", compare(&runs[2].1, &runs[0].1).latency_ratio);
    let table: Vec<_> = runs.iter().map(|(n, s)| (*n, s)).collect();
    write_csv(std::io::stdout(), &table).unwrap();
}
