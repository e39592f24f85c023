//! Synthetic shapes dataset and the on-disk image/label layout.
//!
//! Each image holds 1–3 filled shapes (square, circle, triangle for classes
//! 0, 1, 2) on a dark noisy background. Labels are the exact pixel-aligned
//! bounding boxes, normalized to [0, 1].

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::detect::BBox;
use crate::image::{read_ppm, to_input_tensor, write_ppm, PpmError, PpmImage};
use crate::loss::GroundTruthBox;
use crate::tensor::{Scalar, Tensor};

pub const SHAPE_NAMES: [&str; 3] = ["square", "circle", "triangle"];

/// Base color per class; each instance is jittered around it.
const CLASS_COLORS: [[u8; 3]; 3] = [[220, 60, 50], [60, 200, 70], [70, 110, 230]];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: PpmImage,
    pub gts: Vec<GroundTruthBox>,
}

impl Sample {
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        to_input_tensor(&self.image, self.image.width, self.image.height)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PpmError },
    #[error("{path}:{line}: {reason}")]
    Label { path: PathBuf, line: usize, reason: String },
    #[error("no label file for image {0}")]
    MissingLabels(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Pixel-aligned box `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy)]
struct PixelBox {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl PixelBox {
    fn disjoint(&self, o: &PixelBox) -> bool {
        self.x + self.w <= o.x || o.x + o.w <= self.x || self.y + self.h <= o.y || o.y + o.h <= self.y
    }

    fn covers(&self, class: usize, px: usize, py: usize) -> bool {
        // pixel centers relative to the box
        let u = px as f64 + 0.5 - self.x as f64;
        let v = py as f64 + 0.5 - self.y as f64;
        let (w, h) = (self.w as f64, self.h as f64);
        match class {
            0 => true,
            1 => {
                let (dx, dy) = ((u - w / 2.0) / (w / 2.0), (v - h / 2.0) / (h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            // apex at top center, base along the bottom edge
            _ => (u - w / 2.0).abs() <= (w / 2.0) * (v / h),
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, base: u8, spread: i32) -> u8 {
    (base as i32 + rng.random_range(-spread..=spread)).clamp(0, 255) as u8
}

/// One image with its labels, fully determined by `rng`'s state.
fn gen_sample(rng: &mut ChaCha8Rng, side: usize, classes: usize) -> Sample {
    let mut img = PpmImage::new(side, side);
    let bg: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..40));
    for y in 0..side {
        for x in 0..side {
            let px = std::array::from_fn(|c| noisy(rng, bg[c], 12));
            img.set_pixel(x, y, px);
        }
    }
    let want = rng.random_range(1..=3);
    let (min_side, max_side) = ((side * 3 / 20).max(2), (side * 9 / 20).max(3));
    let mut placed: Vec<(usize, PixelBox)> = Vec::new();
    for _ in 0..50 {
        if placed.len() == want {
            break;
        }
        let class = rng.random_range(0..classes);
        let w = rng.random_range(min_side..=max_side.min(side));
        let h = rng.random_range(min_side..=max_side.min(side));
        let b = PixelBox { x: rng.random_range(0..=side - w), y: rng.random_range(0..=side - h), w, h };
        if placed.iter().all(|(_, p)| p.disjoint(&b)) {
            placed.push((class, b));
        }
    }
    for (class, b) in &placed {
        let base = CLASS_COLORS[class % CLASS_COLORS.len()];
        let color: [u8; 3] = std::array::from_fn(|c| noisy(rng, base[c], 30));
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if b.covers(*class, x, y) {
                    img.set_pixel(x, y, std::array::from_fn(|c| noisy(rng, color[c], 6)));
                }
            }
        }
    }
    let s = side as f32;
    let gts = placed
        .iter()
        .map(|(class, b)| GroundTruthBox {
            class_id: *class,
            bbox: BBox::new(
                (b.x as f32 + b.w as f32 / 2.0) / s,
                (b.y as f32 + b.h as f32 / 2.0) / s,
                b.w as f32 / s,
                b.h as f32 / s,
            ),
        })
        .collect();
    Sample { image: img, gts }
}

/// `n` seeded samples of `side × side` pixels. Classes beyond three reuse
/// the triangle geometry.
pub fn gen_synthetic_dataset(n: usize, side: usize, classes: usize, seed: u64) -> Vec<Sample> {
    assert!(classes >= 1 && side >= 8, "need at least one class and an 8-pixel side");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_sample(&mut rng, side, classes)).collect()
}

pub fn format_labels(gts: &[GroundTruthBox]) -> String {
    gts.iter()
        .map(|g| format!("{} {} {} {} {}\n", g.class_id, g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h))
        .collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthBox>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err((i + 1, format!("expected `class cx cy w h`, found {} fields", fields.len())));
        }
        let class_id = fields[0].parse().map_err(|_| (i + 1, format!("bad class id `{}`", fields[0])))?;
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| (i + 1, format!("bad number `{f}`")))?;
        }
        out.push(GroundTruthBox::new(class_id, v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// Writes `images/NNNNNN.ppm` and `labels/NNNNNN.txt` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<(), DatasetError> {
    let (images, labels) = (dir.join("images"), dir.join("labels"));
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&labels).map_err(io_err(&labels))?;
    for (i, s) in samples.iter().enumerate() {
        let ip = images.join(format!("{i:06}.ppm"));
        fs::write(&ip, write_ppm(&s.image)).map_err(io_err(&ip))?;
        let lp = labels.join(format!("{i:06}.txt"));
        fs::write(&lp, format_labels(&s.gts)).map_err(io_err(&lp))?;
    }
    Ok(())
}

/// Reads every `*.ppm` in `images` (sorted by name) with the same-stem
/// `.txt` from `labels`.
pub fn read_image_label_dirs(images: &Path, labels: &Path) -> Result<Vec<(String, Sample)>, DatasetError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(images)
        .map_err(io_err(images))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|ip| {
            let stem = ip.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let bytes = fs::read(&ip).map_err(io_err(&ip))?;
            let image = read_ppm(&bytes).map_err(|source| DatasetError::Image { path: ip.clone(), source })?;
            let lp = labels.join(format!("{stem}.txt"));
            if !lp.exists() {
                return Err(DatasetError::MissingLabels(ip));
            }
            let text = fs::read_to_string(&lp).map_err(io_err(&lp))?;
            let gts = parse_labels(&text).map_err(|(line, reason)| DatasetError::Label { path: lp, line, reason })?;
            Ok((stem, Sample { image, gts }))
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>, DatasetError> {
    Ok(read_image_label_dirs(&dir.join("images"), &dir.join("labels"))?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic_dataset(5, 64, 3, 7), gen_synthetic_dataset(5, 64, 3, 7));
        assert_ne!(gen_synthetic_dataset(5, 64, 3, 7), gen_synthetic_dataset(5, 64, 3, 8));
    }

    #[test]
    fn labels_valid_and_counts() {
        for s in gen_synthetic_dataset(200, 112, 3, 1) {
            assert!((1..=3).contains(&s.gts.len()));
            for g in &s.gts {
                g.validate(3).unwrap();
            }
        }
    }

    #[test]
    fn class_histogram_near_uniform() {
        let mut counts = [0usize; 3];
        for s in gen_synthetic_dataset(3000, 32, 3, 11) {
            for g in s.gts {
                counts[g.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / 3.0).abs() <= 0.1 / 3.0, "{counts:?}");
        }
    }

    #[test]
    fn shape_pixels_fill_label_box() {
        // the label box is the tight extent of the painted pixels for squares
        let b = PixelBox { x: 3, y: 4, w: 10, h: 6 };
        let painted: Vec<(usize, usize)> =
            (0..20).flat_map(|y| (0..20).map(move |x| (x, y))).filter(|&(x, y)| x >= 3 && x < 13 && y >= 4 && y < 10 && b.covers(0, x, y)).collect();
        assert_eq!(painted.len(), 60);
        // circles touch all four edges
        let circle: Vec<(usize, usize)> = (4..10).flat_map(|y| (3..13).map(move |x| (x, y))).filter(|&(x, y)| b.covers(1, x, y)).collect();
        assert_eq!(circle.iter().map(|p| p.0).min(), Some(3));
        assert_eq!(circle.iter().map(|p| p.0).max(), Some(12));
        assert_eq!(circle.iter().map(|p| p.1).min(), Some(4));
        assert_eq!(circle.iter().map(|p| p.1).max(), Some(9));
    }

    #[test]
    fn label_text_roundtrip() {
        let s = &gen_synthetic_dataset(3, 112, 3, 2)[0];
        assert_eq!(parse_labels(&format_labels(&s.gts)).unwrap(), s.gts);
        assert!(parse_labels("0 0.5 0.5 0.1").is_err());
        assert!(parse_labels("x 0.5 0.5 0.1 0.1").is_err());
        assert_eq!(parse_labels("\n\n").unwrap(), vec![]);
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_synthetic_dataset(4, 32, 3, 5);
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }
}
