//! Train the toy shapes detector and score it on held-out images.
//!
//! cargo run --release --example train_toy -- [ITERS] [LR]

use std::time::Instant;

use yolite::darknet::parse_cfg;
use yolite::dataset::gen_synthetic_dataset;
use yolite::eval::{evaluate_network, ApMethod, DEFAULT_EVAL_CONF_THRESH};
use yolite::detect::DEFAULT_NMS_THRESH;
use yolite::train::{train_toy, Hyper, SMOOTHING_WINDOW};
use yolite::CompiledNetwork;

fn main() {
    let mut args = std::env::args().skip(1);
    let mut hyper = Hyper { seed: 7, ..Hyper::default() };
    if let Some(iters) = args.next() {
        hyper.iters = iters.parse().expect("ITERS");
    }
    if let Some(lr) = args.next() {
        hyper.lr = lr.parse().expect("LR");
    }
    let spec = parse_cfg(include_str!("../cfg/toy-shapes.cfg")).unwrap();
    let train = gen_synthetic_dataset(1000, 112, 3, 1);
    let held_out = gen_synthetic_dataset(200, 112, 3, 2);

    let start = Instant::now();
    let (blob, curve) = train_toy(&spec, &train, &hyper).unwrap();
    let smoothed = curve.smoothed(SMOOTHING_WINDOW);
    for i in (0..smoothed.len()).step_by((smoothed.len() / 10).max(1)) {
        println!("iter {i:>5}  smoothed loss {:.4}", smoothed[i]);
    }
    println!(
        "smoothed loss {:.4} -> {:.4} in {:.1?}",
        curve.initial_smoothed(SMOOTHING_WINDOW),
        curve.final_smoothed(SMOOTHING_WINDOW),
        start.elapsed()
    );

    let net = CompiledNetwork::<f32>::new(&spec, &blob).unwrap();
    for iou in [0.5, 0.75] {
        let report = evaluate_network(&net, &held_out, DEFAULT_EVAL_CONF_THRESH, DEFAULT_NMS_THRESH, iou, ApMethod::AllPoint).unwrap();
        let per_class: Vec<String> = report.per_class.iter().map(|c| format!("{:.3}", c.ap.unwrap_or(f64::NAN))).collect();
        println!("mAP@{iou} = {:.3}  per class {}", report.map, per_class.join(" "));
    }
}
