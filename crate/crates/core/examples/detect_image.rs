//! Run a detector on one PPM image and print the surviving boxes.
//!
//! cargo run --release --example detect_image -- CFG WEIGHTS IMAGE.ppm
//!
//! Without arguments a toy detector is trained for a few hundred
//! iterations and run on a fresh synthetic image.

use yolite::darknet::{parse_cfg, read_weights};
use yolite::dataset::{gen_synthetic_dataset, SHAPE_NAMES};
use yolite::detect::{detect_image, DEFAULT_CONF_THRESH, DEFAULT_NMS_THRESH};
use yolite::image::read_ppm;
use yolite::train::{train_toy, Hyper};
use yolite::CompiledNetwork;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (net, image) = if let [cfg, weights, image] = args.as_slice() {
        let spec = parse_cfg(&std::fs::read_to_string(cfg).unwrap()).unwrap();
        let blob = read_weights(&std::fs::read(weights).unwrap(), &spec).unwrap();
        (CompiledNetwork::<f32>::new(&spec, &blob).unwrap(), read_ppm(&std::fs::read(image).unwrap()).unwrap())
    } else {
        let spec = parse_cfg(include_str!("../cfg/toy-shapes.cfg")).unwrap();
        let data = gen_synthetic_dataset(400, 112, 3, 1);
        let (blob, _) = train_toy(&spec, &data, &Hyper { iters: 600, ..Hyper::default() }).unwrap();
        let probe = gen_synthetic_dataset(1, 112, 3, 99).remove(0);
        for g in &probe.gts {
            println!("truth   {:<8} {:?}", SHAPE_NAMES[g.class_id], g.bbox);
        }
        (CompiledNetwork::new(&spec, &blob).unwrap(), probe.image)
    };
    for d in detect_image(&net, &image, DEFAULT_CONF_THRESH, DEFAULT_NMS_THRESH).unwrap() {
        println!("class {} score {:.3} box {:?}", d.class_id, d.score, d.bbox);
    }
}
