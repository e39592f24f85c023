//! Binary PPM (P6) images and conversion to network input tensors.
//!
//! Only 8-bit P6 is read. Convert other formats first, e.g.
//! `convert in.jpg -depth 8 out.ppm` (ImageMagick).

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `3·width·height` bytes.
    pub rgb: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PpmError {
    #[error("not a binary PPM (expected magic P6)")]
    BadMagic,
    #[error("bad PPM header: {0}")]
    BadDims(String),
    #[error("truncated PPM raster: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl PpmImage {
    pub fn new(width: usize, height: usize) -> Self {
        PpmImage { width, height, rgb: vec![0; 3 * width * height] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&px);
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PpmError::BadDims(format!("missing or malformed {what}")))
    }
}

pub fn read_ppm(bytes: &[u8]) -> Result<PpmImage, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PpmError::BadDims(format!("{width}x{height} has no pixels")));
    }
    if maxval != 255 {
        return Err(PpmError::BadDims(format!("maxval {maxval} unsupported, only 255")));
    }
    // exactly one whitespace byte separates maxval from the raster
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmError::BadDims("no whitespace after maxval".into()));
    }
    let raster = &bytes[h.pos + 1..];
    let expected = 3 * width * height;
    if raster.len() < expected {
        return Err(PpmError::Truncated { expected, found: raster.len() });
    }
    Ok(PpmImage { width, height, rgb: raster[..expected].to_vec() })
}

pub fn write_ppm(img: &PpmImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

/// Bilinear stretch to `net_w × net_h`, CHW layout, values in [0, 1].
///
/// Pixel centers are aligned (`src = (dst + 0.5)·scale − 0.5`), clamped at
/// the borders.
pub fn to_input_tensor<T: Scalar>(img: &PpmImage, net_w: usize, net_h: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(crate::model::Shape::new(3, net_h, net_w));
    let taps = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..net_w).map(|x| taps(x, img.width, net_w)).collect();
    let plane = net_w * net_h;
    let data = out.as_mut_slice();
    for y in 0..net_h {
        let (y0, y1, fy) = taps(y, img.height, net_h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p = |xx: usize, yy: usize| img.rgb[3 * (yy * img.width + xx) + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                data[c * plane + y * net_w + x] = T::of((top * (1.0 - fy) + bottom * fy) / 255.0);
            }
        }
    }
    out
}
