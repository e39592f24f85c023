//! Region-head decoding and class-wise non-maximum suppression.

use serde::Serialize;
use thiserror::Error;

use crate::image::{to_input_tensor, PpmImage};
use crate::inference::{CompiledNetwork, InferenceError};
use crate::model::RegionSpec;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CONF_THRESH: f32 = 0.25;
pub const DEFAULT_NMS_THRESH: f32 = 0.45;

/// Box center and size, normalized to image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox<T = f32> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        let two = T::of(2.0);
        BBox { cx: (x0 + x1) / two, cy: (y0 + y1) / two, w: x1 - x0, h: y1 - y0 }
    }

    pub fn corners(&self) -> (T, T, T, T) {
        let half = T::of(0.5);
        (
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        )
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        let c = |v: T| U::of(v.as_f64());
        BBox { cx: c(self.cx), cy: c(self.cy), w: c(self.w), h: c(self.h) }
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(T::zero());
    let ih = (ay1.min(by1) - ay0.max(by0)).max(T::zero());
    let inter = iw * ih;
    // corner-derived areas keep iou(a, a) exactly 1 for off-center boxes
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one()).max(T::zero())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox<f32>,
    pub objectness: f32,
    pub class_probs: Vec<f32>,
    pub class_id: usize,
    /// Class-specific confidence `objectness · class_probs[class_id]`.
    pub score: f32,
}

/// One decoded (cell, anchor) slot of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub bbox: BBox<T>,
    pub objectness: T,
    pub class_probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("head has {found} channels, region expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Channel of entry `k` for anchor `a` in a region head.
pub fn head_channel(region: &RegionSpec, anchor: usize, entry: usize) -> usize {
    anchor * region.entries_per_anchor() + entry
}

/// Decodes every slot, ordered by row, column, then anchor.
pub fn decode_all<T: Scalar>(head: &Tensor<T>, region: &RegionSpec) -> Result<Vec<Prediction<T>>, DecodeError> {
    let s = head.shape();
    let expected = region.expected_head_filters();
    if s.c != expected || region.anchors.len() != region.num_anchors {
        return Err(DecodeError::ShapeMismatch { expected, found: s.c });
    }
    let (gh, gw) = (T::from_usize(s.h).unwrap(), T::from_usize(s.w).unwrap());
    let mut out = Vec::with_capacity(s.plane() * region.num_anchors);
    for row in 0..s.h {
        for col in 0..s.w {
            for (a, &(aw, ah)) in region.anchors.iter().enumerate() {
                let at = |k: usize| head.get(head_channel(region, a, k), row, col);
                let bbox = BBox {
                    cx: (T::from_usize(col).unwrap() + sigmoid(at(0))) / gw,
                    cy: (T::from_usize(row).unwrap() + sigmoid(at(1))) / gh,
                    w: T::of_f32(aw) * at(2).exp() / gw,
                    h: T::of_f32(ah) * at(3).exp() / gh,
                };
                let logits: Vec<T> = (0..region.classes).map(|k| at(5 + k)).collect();
                out.push(Prediction {
                    row,
                    col,
                    anchor: a,
                    bbox,
                    objectness: sigmoid(at(4)),
                    class_probs: softmax(&logits),
                });
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> Prediction<T> {
    pub fn to_detection(&self) -> Detection {
        let probs: Vec<f32> = self.class_probs.iter().map(|p| p.as_f32()).collect();
        let (class_id, best) = probs
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let objectness = self.objectness.as_f32();
        Detection {
            bbox: self.bbox.cast(),
            objectness,
            score: (objectness * best).clamp(0.0, 1.0),
            class_probs: probs,
            class_id,
        }
    }
}

/// Decodes the head and keeps detections whose score exceeds `conf_thresh`.
pub fn decode_region<T: Scalar>(
    head: &Tensor<T>,
    region: &RegionSpec,
    conf_thresh: f32,
) -> Result<Vec<Detection>, DecodeError> {
    Ok(decode_all(head, region)?
        .iter()
        .map(Prediction::to_detection)
        .filter(|d| d.score > conf_thresh)
        .collect())
}

/// Greedy class-wise suppression; output ordered by score, then input index.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("network has no region head")]
    NoRegion,
}

/// Stretch-resizes the image to the network input, runs it, decodes the
/// head and applies class-wise NMS.
pub fn detect_image<T: Scalar>(
    net: &CompiledNetwork<T>,
    img: &PpmImage,
    conf_thresh: f32,
    nms_thresh: f32,
) -> Result<Vec<Detection>, DetectError> {
    let region = net.spec().region().ok_or(DetectError::NoRegion)?;
    let input = net.input_shape();
    let (head, _) = net.forward(&to_input_tensor(img, input.w, input.h), false)?;
    Ok(nms(&decode_region(&head, region, conf_thresh)?, nms_thresh))
}
