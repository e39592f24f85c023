//! Layer table for a cfg file (defaults to the shipped Trial 3 network).
//!
//! cargo run --example network_summary -- crates/core/cfg/tiny-yolov2-voc.cfg

use yolite::analysis::summary;
use yolite::darknet::parse_cfg;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/cfg/yolo-lite-trial3.cfg").into());
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let net = parse_cfg(&text).unwrap_or_else(|e| panic!("{path}: {e}"));
    print!("{}", summary(&net).unwrap());
}
