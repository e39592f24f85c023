//! Static analysis: FLOPS accounting, filter and parameter counts, and
//! magnitude pruning.

use serde::Serialize;
use thiserror::Error;

use crate::darknet::WeightsBlob;
use crate::model::{describe_violations, LayerSpec, NetworkSpec, Shape, Violation};

pub const FLOPS_CONVENTION: &str =
    "2 x multiply-accumulates of convolutions only; pooling, activation, batch norm and region decoding count 0";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: &'static str,
    pub output: Shape,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
    pub convention: &'static str,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid network: {}", describe_violations(.0))]
    InvalidSpec(Vec<Violation>),
}

pub fn flops(net: &NetworkSpec) -> Result<FlopsReport, AnalysisError> {
    net.validate().map_err(AnalysisError::InvalidSpec)?;
    let ins = net.layer_inputs().expect("validated");
    let outs = net.infer_shapes().expect("validated");
    let per_layer: Vec<LayerFlops> = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let flops = match layer {
                LayerSpec::Convolutional(c) => {
                    let macs = (c.size * c.size * ins[i].c * c.filters * outs[i].plane()) as u64;
                    2 * macs
                }
                _ => 0,
            };
            LayerFlops { layer: i, kind: layer.kind_name(), output: outs[i], flops }
        })
        .collect();
    Ok(FlopsReport {
        total: per_layer.iter().map(|l| l.flops).sum(),
        per_layer,
        convention: FLOPS_CONVENTION,
    })
}

pub fn count_filters(net: &NetworkSpec) -> usize {
    net.conv_layers().map(|(_, c)| c.filters).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub kernel: usize,
    pub biases: usize,
    pub batch_norm: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.kernel + self.biases + self.batch_norm
    }
}

/// Learned scalars per category: kernels, biases, and 3 per filter for batch norm.
pub fn param_counts(net: &NetworkSpec) -> ParamCounts {
    let mut counts = ParamCounts { kernel: 0, biases: 0, batch_norm: 0 };
    let mut channels = net.input_c;
    for layer in &net.layers {
        if let LayerSpec::Convolutional(c) = layer {
            counts.kernel += c.filters * channels * c.size * c.size;
            counts.biases += c.filters;
            if c.batch_normalize {
                counts.batch_norm += 3 * c.filters;
            }
            channels = c.filters;
        }
    }
    counts
}

pub fn count_params(net: &NetworkSpec) -> usize {
    param_counts(net).total()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PruneReport {
    pub threshold: f32,
    pub zeroed: usize,
    pub total_weights: usize,
    pub sparsity: f64,
}

/// Zeroes every kernel weight with `|w| < threshold`; biases and batch-norm
/// statistics are left alone. `zeroed` counts kernel weights that are zero
/// afterwards, including those already zero.
pub fn prune_magnitude(blob: &WeightsBlob, threshold: f32) -> (WeightsBlob, PruneReport) {
    let mut out = blob.clone();
    let mut zeroed = 0;
    let mut total = 0;
    for layer in &mut out.per_layer {
        for w in &mut layer.kernel {
            if w.abs() < threshold {
                *w = 0.0;
            }
            if *w == 0.0 {
                zeroed += 1;
            }
            total += 1;
        }
    }
    let sparsity = if total == 0 { 0.0 } else { zeroed as f64 / total as f64 };
    (out, PruneReport { threshold, zeroed, total_weights: total, sparsity })
}

/// Human-readable layer table with shapes, FLOPS and totals.
pub fn summary(net: &NetworkSpec) -> Result<String, AnalysisError> {
    use std::fmt::Write;
    let report = flops(net)?;
    let ins = net.layer_inputs().expect("validated");
    let mut out = String::new();
    let _ = writeln!(out, "{:>3}  {:<8} {:>7} {:>9} {:>3} {:>2}  {:<6} {:>12} -> {:<12} {:>14}", "#", "type", "filters", "size/str", "pad", "bn", "act", "input", "output", "flops");
    for (i, layer) in net.layers.iter().enumerate() {
        let (filters, win, pad, bn, act) = match layer {
            LayerSpec::Convolutional(c) => (
                c.filters.to_string(),
                format!("{}x{}/{}", c.size, c.size, c.stride),
                c.pad.to_string(),
                if c.batch_normalize { "y" } else { "-" },
                c.activation.as_str(),
            ),
            LayerSpec::MaxPool(m) => ("".into(), format!("{}x{}/{}", m.size, m.size, m.stride), m.pad.to_string(), "", ""),
            LayerSpec::Region(r) => (format!("{}a/{}c", r.num_anchors, r.classes), "".into(), "".into(), "", ""),
        };
        let _ = writeln!(
            out,
            "{:>3}  {:<8} {:>7} {:>9} {:>3} {:>2}  {:<6} {:>12} -> {:<12} {:>14}",
            i,
            layer.kind_name(),
            filters,
            win,
            pad,
            bn,
            act,
            ins[i].to_string(),
            report.per_layer[i].output.to_string(),
            report.per_layer[i].flops
        );
    }
    let p = param_counts(net);
    let _ = writeln!(out, "filters: {}", count_filters(net));
    let _ = writeln!(
        out,
        "params: {} (kernel {}, biases {}, batch norm {})",
        p.total(),
        p.kernel,
        p.biases,
        p.batch_norm
    );
    let _ = writeln!(out, "flops: {} ({:.3} B)", report.total, report.total as f64 / 1e9);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog_tiny_yolov2, catalog_yolo_lite, ActivationKind};
    use proptest::prelude::*;

    #[test]
    fn trial3_first_layer() {
        let r = flops(&catalog_yolo_lite(true)).unwrap();
        assert_eq!(r.per_layer[0].flops, 43_352_064);
        assert_eq!(r.per_layer[0].flops, 2 * 50176 * 3 * 9 * 16);
        assert!(r.per_layer.iter().filter(|l| l.kind != "conv").all(|l| l.flops == 0));
        assert_eq!(r.total, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
    }

    #[test]
    fn reference_flops_anchors() {
        let tiny = flops(&catalog_tiny_yolov2(false)).unwrap().total as f64;
        let lite = flops(&catalog_yolo_lite(true)).unwrap().total as f64;
        assert!((tiny / 6.97e9 - 1.0).abs() <= 0.02, "{tiny}");
        assert!((lite / 482e6 - 1.0).abs() <= 0.02, "{lite}");
        assert!(tiny / lite >= 14.0);
        // BN contributes nothing
        assert_eq!(flops(&catalog_yolo_lite(false)).unwrap().total as f64, lite);
    }

    #[test]
    fn summary_lists_every_layer() {
        let net = catalog_yolo_lite(true);
        let text = summary(&net).unwrap();
        assert_eq!(text.lines().count(), 1 + net.layers.len() + 3);
        assert!(text.contains("filters: 749"));
        assert!(text.contains("3x224x224"));
    }

    #[test]
    fn filters() {
        assert_eq!(count_filters(&catalog_tiny_yolov2(false)), 3181);
        assert_eq!(count_filters(&catalog_yolo_lite(true)), 749);
        let empty = NetworkSpec { input_w: 1, input_h: 1, input_c: 1, layers: vec![] };
        assert_eq!(count_filters(&empty), 0);
    }

    #[test]
    fn params() {
        let one = NetworkSpec {
            input_w: 8,
            input_h: 8,
            input_c: 3,
            layers: vec![LayerSpec::conv(16, 3, false, ActivationKind::Leaky)],
        };
        assert_eq!(count_params(&one), 448);
        let mut bn = one.clone();
        bn.layers = vec![LayerSpec::conv(16, 3, true, ActivationKind::Leaky)];
        assert_eq!(count_params(&bn) - count_params(&one), 3 * 16);
        assert_eq!(param_counts(&catalog_tiny_yolov2(false)).kernel, 15_855_536);
    }

    #[test]
    fn flops_quadruple_with_doubled_side() {
        let stack = |side| NetworkSpec {
            input_w: side,
            input_h: side,
            input_c: 3,
            layers: vec![
                LayerSpec::conv(8, 3, false, ActivationKind::Leaky),
                LayerSpec::maxpool(2, 2, 0),
                LayerSpec::conv(16, 3, false, ActivationKind::Leaky),
                LayerSpec::conv(4, 1, false, ActivationKind::Linear),
            ],
        };
        let a = flops(&stack(32)).unwrap().total;
        let b = flops(&stack(64)).unwrap().total;
        assert_eq!(b, 4 * a);
    }

    #[test]
    fn prune_edges() {
        let net = catalog_yolo_lite(true);
        let mut blob = WeightsBlob::random(&net, 9).unwrap();
        blob.per_layer[0].kernel[..10].iter_mut().for_each(|w| *w = 0.0);
        let (same, r0) = prune_magnitude(&blob, 0.0);
        assert_eq!(same, blob);
        assert_eq!(r0.zeroed, 10);
        let max = blob.per_layer.iter().flat_map(|l| &l.kernel).fold(0.0f32, |m, w| m.max(w.abs()));
        let (all, r) = prune_magnitude(&blob, max * 1.01);
        assert_eq!(r.sparsity, 1.0);
        assert_eq!(r.total_weights, param_counts(&net).kernel);
        for (a, b) in all.per_layer.iter().zip(&blob.per_layer) {
            assert_eq!(a.biases, b.biases);
            assert_eq!(a.bn, b.bn);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sparsity_monotone(seed in 0u64..1000, t1 in 0.0f32..0.5, dt in 0.0f32..0.5) {
            let net = NetworkSpec {
                input_w: 8,
                input_h: 8,
                input_c: 3,
                layers: vec![
                    LayerSpec::conv(8, 3, true, ActivationKind::Leaky),
                    LayerSpec::conv(4, 1, false, ActivationKind::Linear),
                ],
            };
            let blob = WeightsBlob::random(&net, seed).unwrap();
            let (_, a) = prune_magnitude(&blob, t1);
            let (_, b) = prune_magnitude(&blob, t1 + dt);
            prop_assert!(a.sparsity <= b.sparsity);
            prop_assert!((0.0..=1.0).contains(&a.sparsity));
        }
    }
}
