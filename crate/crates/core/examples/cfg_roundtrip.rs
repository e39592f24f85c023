//! Parse, re-emit and re-parse every shipped cfg; write and read back a
//! random weights file for each.

use yolite::darknet::{emit_cfg, parse_cfg_with_warnings, read_weights, write_weights, WeightsBlob};

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/cfg");
    let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for path in paths {
        let text = std::fs::read_to_string(&path).unwrap();
        let (net, warnings) = parse_cfg_with_warnings(&text).unwrap();
        let again = parse_cfg_with_warnings(&emit_cfg(&net).unwrap()).unwrap().0;
        let blob = WeightsBlob::random(&net, 42).unwrap();
        let bytes = write_weights(&blob, &net).unwrap();
        let back = read_weights(&bytes, &net).unwrap();
        println!(
            "{:<26} layers {:>2}  warnings {}  cfg round-trip {}  weights {} bytes, round-trip {}",
            path.file_name().unwrap().to_string_lossy(),
            net.layers.len(),
            warnings.len(),
            if again == net { "ok" } else { "MISMATCH" },
            bytes.len(),
            if back == blob { "ok" } else { "MISMATCH" },
        );
    }
}
