//! Sum-of-squares detection loss over decoded region predictions.
//!
//! For every ground truth, the grid cell containing its center owns it, and
//! within that cell the anchor whose current prediction overlaps it best is
//! responsible. Responsible slots pay coordinate error (centers directly,
//! sizes through square roots, both weighted by `lambda_coord`) and squared
//! distance between objectness and the live IOU with their ground truth.
//! Every other slot pays `lambda_noobj · objectness²`. Each occupied cell
//! pays squared error between one responsible slot's class distribution and
//! the one-hot label.
//!
//! Gradients chain through the decode (sigmoid, exp, softmax) and through the
//! IOU target; the assignment is held fixed.

use serde::Serialize;
use thiserror::Error;

use crate::detect::{decode_all, BBox, DecodeError, Prediction};
use crate::inference::{CompiledNetwork, InferenceError, ParamGrads};
use crate::model::RegionSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub bbox: BBox<f32>,
}

impl GroundTruthBox {
    pub fn new(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> Self {
        GroundTruthBox { class_id, bbox: BBox::new(cx, cy, w, h) }
    }

    pub fn validate(&self, classes: usize) -> Result<(), String> {
        let b = &self.bbox;
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0) {
            return Err(format!("size {}x{} outside (0, 1]", b.w, b.h));
        }
        if !(unit(b.cx) && unit(b.cy)) {
            return Err(format!("center ({}, {}) outside [0, 1]", b.cx, b.cy));
        }
        if self.class_id >= classes {
            return Err(format!("class {} >= {classes}", self.class_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// Grid side S.
    pub grid: usize,
    /// Anchors per cell A.
    pub num_anchors: usize,
    pub classes: usize,
    /// Treat the IOU confidence target as a constant when differentiating,
    /// as Darknet does. The default `false` gives the exact gradient.
    pub detach_iou_target: bool,
}

impl LossConfig {
    pub fn new(grid: usize, num_anchors: usize, classes: usize) -> Self {
        LossConfig { lambda_coord: 5.0, lambda_noobj: 0.5, grid, num_anchors, classes, detach_iou_target: false }
    }

    pub fn for_region(region: &RegionSpec, grid: usize) -> Self {
        Self::new(grid, region.num_anchors, region.classes)
    }

    pub fn slot(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.grid + col) * self.num_anchors + anchor
    }

    pub fn slots(&self) -> usize {
        self.grid * self.grid * self.num_anchors
    }

    /// Cell (row, col) that contains a normalized center.
    pub fn cell_of(&self, bbox: &BBox<f32>) -> (usize, usize) {
        let idx = |v: f32| ((v as f64 * self.grid as f64).floor().max(0.0) as usize).min(self.grid - 1);
        (idx(bbox.cy), idx(bbox.cx))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub coord: f64,
    pub conf_obj: f64,
    pub conf_noobj: f64,
    pub classification: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

/// A ground truth dropped because its cell ran out of anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NoFreeAnchor {
    pub gt: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// Responsible slot per ground truth, `None` when dropped.
    pub slots: Vec<Option<Slot>>,
    pub dropped: Vec<NoFreeAnchor>,
}

impl Assignment {
    /// Occupied cells with the ground truth whose anchor carries the class term.
    pub fn obj_cells(&self) -> Vec<((usize, usize), usize)> {
        let mut cells: Vec<((usize, usize), usize)> = Vec::new();
        for (gt, slot) in self.slots.iter().enumerate() {
            if let Some(s) = slot {
                if !cells.iter().any(|(c, _)| *c == (s.row, s.col)) {
                    cells.push(((s.row, s.col), gt));
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ground truth {index}: {reason}")]
    InvalidGroundTruth { index: usize, reason: String },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("network has no region head")]
    NoRegion,
}

fn check_inputs<T: Scalar>(preds: &[Prediction<T>], gts: &[GroundTruthBox], cfg: &LossConfig) -> Result<(), LossError> {
    if preds.len() != cfg.slots() {
        return Err(LossError::ShapeMismatch(format!(
            "{} predictions, {}x{}x{} slots expected",
            preds.len(),
            cfg.grid,
            cfg.grid,
            cfg.num_anchors
        )));
    }
    if let Some(p) = preds.iter().find(|p| p.class_probs.len() != cfg.classes) {
        return Err(LossError::ShapeMismatch(format!(
            "prediction has {} class probabilities, {} expected",
            p.class_probs.len(),
            cfg.classes
        )));
    }
    for (index, gt) in gts.iter().enumerate() {
        gt.validate(cfg.classes)
            .map_err(|reason| LossError::InvalidGroundTruth { index, reason })?;
    }
    Ok(())
}

/// Picks the responsible (cell, anchor) slot for every ground truth.
///
/// Anchors rank by IOU of their current prediction with the ground truth,
/// ties to the lower index; a slot taken by an earlier ground truth passes to
/// the next-best free anchor.
pub fn assign_responsibility<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &[GroundTruthBox],
    cfg: &LossConfig,
) -> Result<Assignment, LossError> {
    check_inputs(preds, gts, cfg)?;
    let mut taken = vec![false; cfg.slots()];
    let mut out = Assignment::default();
    for (gi, gt) in gts.iter().enumerate() {
        let (row, col) = cfg.cell_of(&gt.bbox);
        let target: BBox<T> = gt.bbox.cast();
        let mut ranked: Vec<(usize, T)> = (0..cfg.num_anchors)
            .map(|a| (a, crate::detect::iou(&preds[cfg.slot(row, col, a)].bbox, &target)))
            .collect();
        ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(std::cmp::Ordering::Equal).then(x.0.cmp(&y.0)));
        match ranked.iter().find(|(a, _)| !taken[cfg.slot(row, col, *a)]) {
            Some(&(anchor, _)) => {
                taken[cfg.slot(row, col, anchor)] = true;
                out.slots.push(Some(Slot { row, col, anchor }));
            }
            None => {
                log::warn!("ground truth {gi}: no free anchor in cell ({row}, {col}); dropped");
                out.slots.push(None);
                out.dropped.push(NoFreeAnchor { gt: gi, row, col });
            }
        }
    }
    Ok(out)
}

/// Partial derivatives of IOU(pred, truth) wrt the predicted (cx, cy, w, h).
fn iou_with_grad<T: Scalar>(p: &BBox<T>, g: &BBox<T>) -> (T, [T; 4]) {
    let zero = T::zero();
    let half = T::of(0.5);
    let (px0, py0, px1, py1) = p.corners();
    let (gx0, gy0, gx1, gy1) = g.corners();
    // d(overlap)/d(low edge), d(overlap)/d(high edge)
    let axis = |lo: T, hi: T, glo: T, ghi: T| {
        let len = hi.min(ghi) - lo.max(glo);
        if len <= zero {
            return (zero, zero, zero);
        }
        let dlo = if lo > glo { -T::one() } else { zero };
        let dhi = if hi < ghi { T::one() } else { zero };
        (len, dlo, dhi)
    };
    let (iw, dw_lo, dw_hi) = axis(px0, px1, gx0, gx1);
    let (ih, dh_lo, dh_hi) = axis(py0, py1, gy0, gy1);
    let inter = iw * ih;
    let union = p.area() + g.area() - inter;
    if union <= zero {
        return (zero, [zero; 4]);
    }
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let grads = [
        d_inter * ih * (dw_lo + dw_hi),
        d_inter * iw * (dh_lo + dh_hi),
        d_inter * ih * half * (dw_hi - dw_lo) + d_area * p.h,
        d_inter * iw * half * (dh_hi - dh_lo) + d_area * p.w,
    ];
    (inter / union, grads)
}

/// Gradient of the loss wrt one slot's decoded quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrad<T> {
    /// d/d(cx, cy, w, h)
    pub bbox: [T; 4],
    pub objectness: T,
    pub class_probs: Vec<T>,
}

fn evaluate<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &[GroundTruthBox],
    assignment: &Assignment,
    cfg: &LossConfig,
    mut grads: Option<&mut Vec<SlotGrad<T>>>,
) -> LossBreakdown {
    let two = T::of(2.0);
    let half = T::of(0.5);
    let lc = T::of(cfg.lambda_coord);
    let ln = T::of(cfg.lambda_noobj);
    let (mut coord, mut obj, mut noobj, mut cls) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut responsible = vec![None; preds.len()];
    for (gi, slot) in assignment.slots.iter().enumerate() {
        if let Some(s) = slot {
            responsible[cfg.slot(s.row, s.col, s.anchor)] = Some(gi);
        }
    }
    for (si, p) in preds.iter().enumerate() {
        let c = p.objectness;
        match responsible[si] {
            None => {
                noobj = noobj + ln * c * c;
                if let Some(g) = grads.as_deref_mut() {
                    g[si].objectness = g[si].objectness + two * ln * c;
                }
            }
            Some(gi) => {
                let t: BBox<T> = gts[gi].bbox.cast();
                let b = &p.bbox;
                let (dx, dy) = (b.cx - t.cx, b.cy - t.cy);
                let (dw, dh) = (b.w.sqrt() - t.w.sqrt(), b.h.sqrt() - t.h.sqrt());
                coord = coord + lc * (dx * dx + dy * dy + dw * dw + dh * dh);
                let (target, diou) = iou_with_grad(b, &t);
                let e = c - target;
                obj = obj + e * e;
                if let Some(g) = grads.as_deref_mut() {
                    let sg = &mut g[si];
                    let mut d = [
                        two * lc * dx,
                        two * lc * dy,
                        two * lc * dw * half / b.w.sqrt(),
                        two * lc * dh * half / b.h.sqrt(),
                    ];
                    if !cfg.detach_iou_target {
                        for (dk, di) in d.iter_mut().zip(diou) {
                            *dk = *dk - two * e * di;
                        }
                    }
                    for (acc, v) in sg.bbox.iter_mut().zip(d) {
                        *acc = *acc + v;
                    }
                    sg.objectness = sg.objectness + two * e;
                }
            }
        }
    }
    for ((row, col), gi) in assignment.obj_cells() {
        let anchor = assignment.slots[gi].expect("obj cell has a slot").anchor;
        let si = cfg.slot(row, col, anchor);
        for (k, &pk) in preds[si].class_probs.iter().enumerate() {
            let target = if k == gts[gi].class_id { T::one() } else { T::zero() };
            let e = pk - target;
            cls = cls + e * e;
            if let Some(g) = grads.as_deref_mut() {
                g[si].class_probs[k] = g[si].class_probs[k] + two * e;
            }
        }
    }
    let f = |v: T| v.as_f64();
    LossBreakdown {
        coord: f(coord),
        conf_obj: f(obj),
        conf_noobj: f(noobj),
        classification: f(cls),
        total: f(coord) + f(obj) + f(noobj) + f(cls),
    }
}

/// Loss over decoded predictions ordered by row, column, anchor.
pub fn yolo_loss<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &[GroundTruthBox],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let assignment = assign_responsibility(preds, gts, cfg)?;
    Ok(evaluate(preds, gts, &assignment, cfg, None))
}

/// Loss under a given assignment plus its gradient wrt every slot's decoded values.
pub fn yolo_loss_with_grad<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &[GroundTruthBox],
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<SlotGrad<T>>), LossError> {
    check_inputs(preds, gts, cfg)?;
    let mut grads = vec![
        SlotGrad { bbox: [T::zero(); 4], objectness: T::zero(), class_probs: vec![T::zero(); cfg.classes] };
        preds.len()
    ];
    let loss = evaluate(preds, gts, assignment, cfg, Some(&mut grads));
    Ok((loss, grads))
}

fn head_config(head: &Tensor<impl Scalar>, region: &RegionSpec, cfg: &LossConfig) -> Result<(), LossError> {
    let s = head.shape();
    if s.h != cfg.grid || s.w != cfg.grid || region.num_anchors != cfg.num_anchors || region.classes != cfg.classes {
        return Err(LossError::ShapeMismatch(format!(
            "head {s} with {} anchors/{} classes vs loss grid {} with {} anchors/{} classes",
            region.num_anchors, region.classes, cfg.grid, cfg.num_anchors, cfg.classes
        )));
    }
    Ok(())
}

/// Loss of a raw region head and its gradient wrt the head.
pub fn head_loss_and_grad<T: Scalar>(
    head: &Tensor<T>,
    region: &RegionSpec,
    gts: &[GroundTruthBox],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<T>), LossError> {
    head_config(head, region, cfg)?;
    let preds = decode_all(head, region)?;
    let assignment = assign_responsibility(&preds, gts, cfg)?;
    let (loss, slot_grads) = yolo_loss_with_grad(&preds, gts, &assignment, cfg)?;
    let mut dhead = Tensor::zeros(head.shape());
    let s = T::from_usize(cfg.grid).expect("grid fits");
    let ch = |a: usize, k: usize| crate::detect::head_channel(region, a, k);
    for (p, g) in preds.iter().zip(&slot_grads) {
        let (row, col, a) = (p.row, p.col, p.anchor);
        let sx = crate::detect::sigmoid(head.get(ch(a, 0), row, col));
        let sy = crate::detect::sigmoid(head.get(ch(a, 1), row, col));
        let one = T::one();
        dhead.set(ch(a, 0), row, col, g.bbox[0] * sx * (one - sx) / s);
        dhead.set(ch(a, 1), row, col, g.bbox[1] * sy * (one - sy) / s);
        dhead.set(ch(a, 2), row, col, g.bbox[2] * p.bbox.w);
        dhead.set(ch(a, 3), row, col, g.bbox[3] * p.bbox.h);
        let c = p.objectness;
        dhead.set(ch(a, 4), row, col, g.objectness * c * (one - c));
        let dot: T = g.class_probs.iter().zip(&p.class_probs).map(|(&gk, &pk)| gk * pk).sum();
        for (k, (&gk, &pk)) in g.class_probs.iter().zip(&p.class_probs).enumerate() {
            dhead.set(ch(a, 5 + k), row, col, pk * (gk - dot));
        }
    }
    Ok((loss, dhead))
}

/// Loss of a network on one image and its gradient wrt every conv weight and bias.
pub fn loss_gradient<T: Scalar>(
    net: &CompiledNetwork<T>,
    image: &Tensor<T>,
    gts: &[GroundTruthBox],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<ParamGrads<T>>), LossError> {
    let region = net.spec().region().ok_or(LossError::NoRegion)?.clone();
    let trace = net.forward_trace(image)?;
    let (loss, dhead) = head_loss_and_grad(trace.output(), &region, gts, cfg)?;
    let grads = net.backward(&trace, &dhead)?;
    Ok((loss, grads))
}

/// Loss of a network on one image, without gradients.
pub fn network_loss<T: Scalar>(
    net: &CompiledNetwork<T>,
    image: &Tensor<T>,
    gts: &[GroundTruthBox],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let region = net.spec().region().ok_or(LossError::NoRegion)?;
    let (head, _) = net.forward(image, false)?;
    head_config(&head, region, cfg)?;
    yolo_loss(&decode_all(&head, region)?, gts, cfg)
}
