//! PASCAL-style detection evaluation: greedy matching, average precision, mAP.

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Sample;
use crate::detect::{detect_image, iou, DetectError, Detection};
use crate::inference::CompiledNetwork;
use crate::loss::GroundTruthBox;
use crate::tensor::Scalar;

pub const DEFAULT_MATCH_IOU: f32 = 0.5;
/// Low enough that the ranked list reaches the recall tail.
pub const DEFAULT_EVAL_CONF_THRESH: f32 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// `Σ_k P(k) Δr(k)` over the ranked list.
    #[default]
    AllPoint,
    /// Mean of the interpolated precision at recall 0, 0.1, …, 1.
    Interpolated11,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("average precision needs at least one ground truth")]
    ZeroGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Input index of each detection, by descending score (ties by input index).
    pub order: Vec<usize>,
    /// TP flag per ranked detection.
    pub true_positive: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.true_positive.iter().filter(|&&t| t).count()
    }
}

pub fn rank_by_score(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching of same-class detections against one image's ground truths.
///
/// In rank order, a detection is a true positive when the unmatched ground
/// truth it overlaps most (ties to the lower index) reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f32) -> MatchResult {
    let scores: Vec<f32> = dets.iter().map(|d| d.score).collect();
    let order = rank_by_score(&scores);
    let mut gt_matched = vec![false; gts.len()];
    let mut true_positive = Vec::with_capacity(dets.len());
    for &di in &order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, _)| !gt_matched[*gi])
            .map(|(gi, g)| (gi, iou(&dets[di].bbox, &g.bbox)))
            .fold(None, |acc: Option<(usize, f32)>, (gi, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((gi, v)),
            });
        match best {
            Some((gi, v)) if v >= iou_thresh => {
                gt_matched[gi] = true;
                true_positive.push(true);
            }
            _ => true_positive.push(false),
        }
    }
    MatchResult { order, true_positive, gt_matched }
}

/// Average precision of a ranked TP/FP list against `n_gt` ground truths.
pub fn average_precision(flags: &[bool], n_gt: usize, method: ApMethod) -> Result<f64, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::ZeroGroundTruth);
    }
    let n = n_gt as f64;
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (tp as f64 / n, tp as f64 / (k + 1) as f64)
        })
        .collect();
    Ok(match method {
        ApMethod::AllPoint => flags
            .iter()
            .zip(&curve)
            .filter(|(hit, _)| **hit)
            .fold(0.0, |acc, (_, (_, precision))| acc + precision / n),
        ApMethod::Interpolated11 => {
            (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|(recall, _)| *recall >= r - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub gts: usize,
    pub dets: usize,
    pub tps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub evaluated_classes: usize,
    pub iou_thresh: f32,
    pub method: ApMethod,
}

/// mAP over images; detections are matched per image and ranked globally per class.
pub fn mean_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    classes: usize,
    iou_thresh: f32,
    method: ApMethod,
) -> ApReport {
    let mut per_class = Vec::with_capacity(classes);
    for class_id in 0..classes {
        let mut ranked: Vec<(f32, usize, usize, bool)> = Vec::new();
        let mut n_gt = 0;
        for (img, img_gts) in gts.iter().enumerate() {
            let g: Vec<GroundTruthBox> = img_gts.iter().filter(|g| g.class_id == class_id).copied().collect();
            n_gt += g.len();
            let d: Vec<Detection> = dets
                .get(img)
                .map(|v| v.iter().filter(|d| d.class_id == class_id).cloned().collect())
                .unwrap_or_default();
            let m = match_detections(&d, &g, iou_thresh);
            for (&di, &tp) in m.order.iter().zip(&m.true_positive) {
                ranked.push((d[di].score, img, di, tp));
            }
        }
        // detections for images without ground-truth entries are all false positives
        for (img, img_dets) in dets.iter().enumerate().skip(gts.len()) {
            for (di, d) in img_dets.iter().enumerate().filter(|(_, d)| d.class_id == class_id) {
                ranked.push((d.score, img, di, false));
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        per_class.push(ClassAp {
            class_id,
            ap: average_precision(&flags, n_gt, method).ok(),
            gts: n_gt,
            dets: flags.len(),
            tps: flags.iter().filter(|&&t| t).count(),
        });
    }
    let evaluated: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if evaluated.is_empty() { 0.0 } else { evaluated.iter().sum::<f64>() / evaluated.len() as f64 };
    ApReport { per_class, map, evaluated_classes: evaluated.len(), iou_thresh, method }
}

/// Runs detection on every sample and scores the result against its labels.
pub fn evaluate_network<T: Scalar>(
    net: &CompiledNetwork<T>,
    samples: &[Sample],
    conf_thresh: f32,
    nms_thresh: f32,
    iou_thresh: f32,
    method: ApMethod,
) -> Result<ApReport, DetectError> {
    let classes = net.spec().region().ok_or(DetectError::NoRegion)?.classes;
    let dets = samples
        .iter()
        .map(|s| detect_image(net, &s.image, conf_thresh, nms_thresh))
        .collect::<Result<Vec<_>, _>>()?;
    let gts: Vec<Vec<GroundTruthBox>> = samples.iter().map(|s| s.gts.clone()).collect();
    Ok(mean_ap(&dets, &gts, classes, iou_thresh, method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::BBox;
    use proptest::prelude::*;

    fn det(class_id: usize, score: f32, cx: f32, cy: f32, w: f32, h: f32) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, w, h),
            objectness: score,
            class_probs: vec![],
            class_id,
            score,
        }
    }

    #[test]
    fn single_exact_match() {
        let g = GroundTruthBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let m = match_detections(&[det(0, 0.9, 0.5, 0.5, 0.2, 0.2)], &[g], 0.5);
        assert_eq!(m.true_positive, vec![true]);
        assert_eq!(m.gt_matched, vec![true]);
    }

    #[test]
    fn one_match_per_gt() {
        let g = GroundTruthBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let d = [det(0, 0.7, 0.5, 0.5, 0.2, 0.2), det(0, 0.9, 0.51, 0.5, 0.2, 0.2)];
        let m = match_detections(&d, &[g], 0.5);
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.true_positive, vec![true, false]);
    }

    #[test]
    fn below_threshold_is_fp() {
        // unit squares offset so the overlap gives IOU 0.45: w = 2·0.45/1.45 overlap width
        let overlap = 2.0 * 0.45 / 1.45;
        let g = GroundTruthBox::new(0, 0.5, 0.5, 0.2, 0.2);
        let shift = 0.2 * (1.0 - overlap);
        let d = det(0, 0.9, 0.5 + shift, 0.5, 0.2, 0.2);
        let v = iou(&d.bbox, &g.bbox);
        assert!((v - 0.45).abs() < 1e-5, "{v}");
        assert_eq!(match_detections(&[d], &[g], 0.5).true_positive, vec![false]);
    }

    #[test]
    fn ap_fixtures() {
        let ap = |f: &[bool], n| average_precision(f, n, ApMethod::AllPoint).unwrap();
        assert_eq!(ap(&[true, true], 2), 1.0);
        assert_eq!(ap(&[true], 2), 0.5);
        assert!((ap(&[true, false, true], 2) - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert_eq!(ap(&[false, false], 3), 0.0);
        assert_eq!(ap(&[], 1), 0.0);
        assert_eq!(average_precision(&[true], 0, ApMethod::AllPoint), Err(EvalError::ZeroGroundTruth));
    }

    #[test]
    fn eleven_point() {
        let ap = |f: &[bool], n| average_precision(f, n, ApMethod::Interpolated11).unwrap();
        assert!((ap(&[true, true], 2) - 1.0).abs() < 1e-12);
        // recall reaches 0.5 only: points 0..=0.5 have precision 1
        assert!((ap(&[true], 2) - 6.0 / 11.0).abs() < 1e-12);
        // [TP, FP, TP]: precision 1 up to r=0.5, max(2/3) beyond
        assert!((ap(&[true, false, true], 2) - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn map_edges() {
        let gts = vec![vec![GroundTruthBox::new(0, 0.3, 0.3, 0.2, 0.2), GroundTruthBox::new(2, 0.7, 0.7, 0.1, 0.3)]];
        let perfect = vec![vec![det(0, 0.9, 0.3, 0.3, 0.2, 0.2), det(2, 0.8, 0.7, 0.7, 0.1, 0.3)]];
        let r = mean_ap(&perfect, &gts, 3, 0.5, ApMethod::AllPoint);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.evaluated_classes, 2);
        assert_eq!(r.per_class[1].ap, None);
        let none = mean_ap(&[vec![]], &gts, 3, 0.5, ApMethod::AllPoint);
        assert_eq!(none.map, 0.0);
        let empty = mean_ap(&[], &[], 3, 0.5, ApMethod::AllPoint);
        assert_eq!((empty.evaluated_classes, empty.map), (0, 0.0));
    }

    proptest! {
        #[test]
        fn ap_bounds_and_monotone(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5, flip in any::<prop::sample::Index>()) {
            let n_gt = flags.iter().filter(|&&f| f).count() + extra;
            prop_assume!(n_gt > 0);
            let ap = average_precision(&flags, n_gt, ApMethod::AllPoint).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            // turning a false positive into a true positive never lowers AP at fixed n_gt
            if !flags.is_empty() && extra > 0 {
                let i = flip.index(flags.len());
                if !flags[i] {
                    let mut better = flags.clone();
                    better[i] = true;
                    let up = average_precision(&better, n_gt, ApMethod::AllPoint).unwrap();
                    prop_assert!(up + 1e-12 >= ap);
                }
            }
            let all_tp = vec![true; n_gt];
            prop_assert!((average_precision(&all_tp, n_gt, ApMethod::AllPoint).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
