//! FLOPS, filter and parameter counts for every catalog network.
//!
//! cargo run --example flops_report

use yolite::analysis::{count_filters, flops, param_counts};
use yolite::model::catalog;

fn main() {
    println!("{:<22} {:>8} {:>14} {:>8} {:>10}", "network", "input", "flops", "filters", "params");
    let mut totals = Vec::new();
    for entry in catalog() {
        let net = (entry.build)();
        let report = flops(&net).expect("catalog networks are valid");
        println!(
            "{:<22} {:>8} {:>14} {:>8} {:>10}",
            entry.name,
            format!("{}x{}", net.input_w, net.input_h),
            report.total,
            count_filters(&net),
            param_counts(&net).total()
        );
        totals.push((entry.name, report.total));
    }
    let get = |name: &str| totals.iter().find(|(n, _)| *n == name).unwrap().1 as f64;
    println!("tiny-yolov2 / trial 3 flops ratio: {:.2}", get("tiny-yolov2-voc") / get("yolo-lite-trial3-nb"));
}
