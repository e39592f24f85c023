//! Generate a few synthetic shapes images and write them as PPM + labels.
//!
//! cargo run --example synthetic_data -- /tmp/shapes

use yolite::dataset::{format_labels, gen_synthetic_dataset, write_dataset, SHAPE_NAMES};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("yolite-shapes").display().to_string());
    let samples = gen_synthetic_dataset(8, 112, 3, 1);
    for (i, s) in samples.iter().enumerate().take(3) {
        let names: Vec<_> = s.gts.iter().map(|g| SHAPE_NAMES[g.class_id]).collect();
        print!("image {i}: {names:?}\n{}", format_labels(&s.gts));
    }
    write_dataset(out.as_ref(), &samples).unwrap();
    println!("wrote {} images to {out}", samples.len());
}
