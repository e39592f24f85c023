//! Network intermediate representation: layer descriptions, shape inference,
//! validation and the built-in catalog of reference architectures.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Negative-side slope of the leaky activation.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Anchor priors (w, h) in grid-cell units used by the VOC region heads.
pub const VOC_ANCHORS: [(f32, f32); 5] = [
    (1.08, 1.19),
    (3.42, 4.41),
    (6.63, 11.38),
    (9.42, 5.11),
    (16.62, 10.52),
];

pub const VOC_CLASSES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Leaky,
    Relu,
    Linear,
}

impl ActivationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActivationKind::Leaky => "leaky",
            ActivationKind::Relu => "relu",
            ActivationKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_normalize: bool,
    pub activation: ActivationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaxPoolSpec {
    pub size: usize,
    pub stride: usize,
    /// Cells appended on the bottom/right edge only.
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSpec {
    pub classes: usize,
    pub num_anchors: usize,
    /// Anchor priors (w, h) in grid-cell units.
    pub anchors: Vec<(f32, f32)>,
    pub coords: usize,
}

impl RegionSpec {
    pub fn voc() -> Self {
        RegionSpec {
            classes: VOC_CLASSES,
            num_anchors: VOC_ANCHORS.len(),
            anchors: VOC_ANCHORS.to_vec(),
            coords: 4,
        }
    }

    /// Channels per anchor: box coordinates, objectness and class logits.
    pub fn entries_per_anchor(&self) -> usize {
        self.coords + 1 + self.classes
    }

    /// Filter count the preceding convolution must produce.
    pub fn expected_head_filters(&self) -> usize {
        self.num_anchors * self.entries_per_anchor()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Convolutional(ConvSpec),
    MaxPool(MaxPoolSpec),
    Region(RegionSpec),
}

impl LayerSpec {
    pub fn conv(filters: usize, size: usize, batch_normalize: bool, activation: ActivationKind) -> Self {
        LayerSpec::Convolutional(ConvSpec {
            filters,
            size,
            stride: 1,
            pad: size / 2,
            batch_normalize,
            activation,
        })
    }

    pub fn maxpool(size: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::MaxPool(MaxPoolSpec { size, stride, pad })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Convolutional(_) => "conv",
            LayerSpec::MaxPool(_) => "maxpool",
            LayerSpec::Region(_) => "region",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvSpec> {
        match self {
            LayerSpec::Convolutional(c) => Some(c),
            _ => None,
        }
    }
}

/// Channel-major (C, H, W) dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkSpec {
    pub input_w: usize,
    pub input_h: usize,
    pub input_c: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("network has no layers")]
    Empty,
    #[error("layer {layer}: computed dimension is not positive")]
    NonPositiveDim { layer: usize },
    #[error("layer {layer}: kernel size {size} exceeds padded input extent {extent}")]
    KernelLargerThanInput { layer: usize, size: usize, extent: usize },
}

/// Output side of a convolution window sweep with symmetric padding.
pub fn conv_output_side(input: usize, size: usize, stride: usize, pad: usize) -> Option<usize> {
    let extent = input + 2 * pad;
    if stride == 0 || size == 0 || size > extent {
        return None;
    }
    Some((extent - size) / stride + 1)
}

/// Output side of a pooling sweep with trailing-edge padding.
pub fn pool_output_side(input: usize, size: usize, stride: usize, pad: usize) -> Option<usize> {
    let extent = input + pad;
    if stride == 0 || size == 0 || size > extent {
        return None;
    }
    Some((extent - size) / stride + 1)
}

impl NetworkSpec {
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_c, self.input_h, self.input_w)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_conv().map(|c| (i, c)))
    }

    pub fn region(&self) -> Option<&RegionSpec> {
        match self.layers.last() {
            Some(LayerSpec::Region(r)) => Some(r),
            _ => None,
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.conv_layers().any(|(_, c)| c.batch_normalize)
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>, ShapeError> {
        if self.layers.is_empty() {
            return Err(ShapeError::Empty);
        }
        let mut cur = self.input_shape();
        if cur.is_empty() {
            return Err(ShapeError::NonPositiveDim { layer: 0 });
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Convolutional(c) => {
                    if c.filters == 0 || c.stride == 0 || c.size == 0 {
                        return Err(ShapeError::NonPositiveDim { layer: i });
                    }
                    let side = |x: usize| {
                        conv_output_side(x, c.size, c.stride, c.pad).ok_or(
                            ShapeError::KernelLargerThanInput {
                                layer: i,
                                size: c.size,
                                extent: x + 2 * c.pad,
                            },
                        )
                    };
                    Shape::new(c.filters, side(cur.h)?, side(cur.w)?)
                }
                LayerSpec::MaxPool(p) => {
                    if p.stride == 0 || p.size == 0 {
                        return Err(ShapeError::NonPositiveDim { layer: i });
                    }
                    let side = |x: usize| {
                        pool_output_side(x, p.size, p.stride, p.pad).ok_or(
                            ShapeError::KernelLargerThanInput {
                                layer: i,
                                size: p.size,
                                extent: x + p.pad,
                            },
                        )
                    };
                    Shape::new(cur.c, side(cur.h)?, side(cur.w)?)
                }
                LayerSpec::Region(_) => cur,
            };
            if cur.is_empty() {
                return Err(ShapeError::NonPositiveDim { layer: i });
            }
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Input shape of every layer, in order.
    pub fn layer_inputs(&self) -> Result<Vec<Shape>, ShapeError> {
        let outs = self.infer_shapes()?;
        let mut ins = Vec::with_capacity(outs.len());
        ins.push(self.input_shape());
        ins.extend_from_slice(&outs[..outs.len() - 1]);
        Ok(ins)
    }

    pub fn output_shape(&self) -> Result<Shape, ShapeError> {
        Ok(*self.infer_shapes()?.last().expect("non-empty"))
    }

    /// Grid side of the region head, when present.
    pub fn grid(&self) -> Option<(usize, usize)> {
        self.region()?;
        let s = self.output_shape().ok()?;
        Some((s.h, s.w))
    }

    /// Every invariant violation, or `Ok(())`.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if self.layers.is_empty() {
            out.push(Violation::NoLayers);
            return Err(out);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Convolutional(c) => {
                    if c.filters == 0 || c.size == 0 || c.stride == 0 {
                        out.push(Violation::BadParameter {
                            layer: i,
                            detail: format!(
                                "filters={}, size={}, stride={} must all be >= 1",
                                c.filters, c.size, c.stride
                            ),
                        });
                    }
                }
                LayerSpec::MaxPool(p) => {
                    if p.size == 0 || p.stride == 0 {
                        out.push(Violation::BadParameter {
                            layer: i,
                            detail: format!("size={}, stride={} must be >= 1", p.size, p.stride),
                        });
                    } else if p.pad >= p.size {
                        out.push(Violation::BadParameter {
                            layer: i,
                            detail: format!("pool pad {} must be below size {}", p.pad, p.size),
                        });
                    }
                }
                LayerSpec::Region(r) => {
                    if i + 1 != self.layers.len() {
                        out.push(Violation::RegionNotLast { layer: i });
                    }
                    if r.anchors.len() != r.num_anchors {
                        out.push(Violation::AnchorCount {
                            layer: i,
                            expected: r.num_anchors,
                            found: r.anchors.len(),
                        });
                    }
                    if r.coords != 4 {
                        out.push(Violation::BadParameter {
                            layer: i,
                            detail: format!("coords={} (only 4 is supported)", r.coords),
                        });
                    }
                    if r.classes == 0 || r.num_anchors == 0 {
                        out.push(Violation::BadParameter {
                            layer: i,
                            detail: "region needs at least one class and one anchor".into(),
                        });
                    }
                    match i.checked_sub(1).map(|p| &self.layers[p]) {
                        Some(LayerSpec::Convolutional(c)) => {
                            if c.filters != r.expected_head_filters() {
                                out.push(Violation::HeadMismatch {
                                    layer: i,
                                    anchors: r.num_anchors,
                                    coords: r.coords,
                                    classes: r.classes,
                                    found: c.filters,
                                });
                            }
                        }
                        _ => out.push(Violation::RegionWithoutConv { layer: i }),
                    }
                }
            }
        }
        if let Err(e) = self.infer_shapes() {
            out.push(Violation::Shape(e));
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("no layers")]
    NoLayers,
    #[error("layer {layer}: {detail}")]
    BadParameter { layer: usize, detail: String },
    #[error("layer {layer}: region layer must be the final layer")]
    RegionNotLast { layer: usize },
    #[error("layer {layer}: region must follow a convolutional layer")]
    RegionWithoutConv { layer: usize },
    #[error("layer {layer}: {found} anchor pairs given, num={expected}")]
    AnchorCount { layer: usize, expected: usize, found: usize },
    #[error(
        "layer {layer}: head expects {anchors}×({coords}+1+{classes})={} filters, found {found}",
        anchors * (coords + 1 + classes)
    )]
    HeadMismatch {
        layer: usize,
        anchors: usize,
        coords: usize,
        classes: usize,
        found: usize,
    },
    #[error("shape inference failed: {0}")]
    Shape(ShapeError),
}

/// Joins violations into one diagnostic line.
pub fn describe_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

fn hidden_conv(filters: usize, bn: bool) -> LayerSpec {
    LayerSpec::conv(filters, 3, bn, ActivationKind::Leaky)
}

fn voc_head() -> [LayerSpec; 2] {
    let region = RegionSpec::voc();
    [
        LayerSpec::conv(region.expected_head_filters(), 1, false, ActivationKind::Linear),
        LayerSpec::Region(region),
    ]
}

fn tiny_yolov2_at(side: usize, no_batch_norm: bool) -> NetworkSpec {
    let bn = !no_batch_norm;
    let mut layers = Vec::new();
    for (i, f) in [16, 32, 64, 128, 256, 512].into_iter().enumerate() {
        layers.push(hidden_conv(f, bn));
        if i < 5 {
            layers.push(LayerSpec::maxpool(2, 2, 0));
        } else {
            layers.push(LayerSpec::maxpool(2, 1, 1));
        }
    }
    layers.push(hidden_conv(1024, bn));
    layers.push(hidden_conv(1024, bn));
    layers.extend(voc_head());
    NetworkSpec {
        input_w: side,
        input_h: side,
        input_c: 3,
        layers,
    }
}

/// Tiny-YOLOv2 (VOC) at 416×416: nine convolutions, six pools, region head.
pub fn catalog_tiny_yolov2(no_batch_norm: bool) -> NetworkSpec {
    tiny_yolov2_at(416, no_batch_norm)
}

/// Tiny-YOLOv2 layers with the input shrunk to 208×208.
pub fn catalog_trial2(no_batch_norm: bool) -> NetworkSpec {
    tiny_yolov2_at(208, no_batch_norm)
}

/// YOLO-LITE trial 3 at 224×224: seven convolutions, five stride-2 pools.
pub fn catalog_yolo_lite(no_batch_norm: bool) -> NetworkSpec {
    let bn = !no_batch_norm;
    let mut layers = Vec::new();
    for f in [16, 32, 64, 128, 128] {
        layers.push(hidden_conv(f, bn));
        layers.push(LayerSpec::maxpool(2, 2, 0));
    }
    layers.push(hidden_conv(256, bn));
    layers.extend(voc_head());
    NetworkSpec {
        input_w: 224,
        input_h: 224,
        input_c: 3,
        layers,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub build: fn() -> NetworkSpec,
}

/// Every shipped architecture under its cfg file stem.
pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry { name: "tiny-yolov2-voc", build: || catalog_tiny_yolov2(false) },
        CatalogEntry { name: "tiny-yolov2-voc-nb", build: || catalog_tiny_yolov2(true) },
        CatalogEntry { name: "trial2", build: || catalog_trial2(false) },
        CatalogEntry { name: "trial2-nb", build: || catalog_trial2(true) },
        CatalogEntry { name: "yolo-lite-trial3", build: || catalog_yolo_lite(false) },
        CatalogEntry { name: "yolo-lite-trial3-nb", build: || catalog_yolo_lite(true) },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_outputs(net: &NetworkSpec) -> Vec<Shape> {
        let shapes = net.infer_shapes().unwrap();
        net.layers
            .iter()
            .zip(shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::Convolutional(_)))
            .map(|(_, s)| s)
            .collect()
    }

    #[test]
    fn trial3_shapes() {
        let convs = conv_outputs(&catalog_yolo_lite(true));
        assert_eq!(convs.len(), 7);
        assert_eq!(convs[5], Shape::new(256, 7, 7));
        assert_eq!(convs[6], Shape::new(125, 7, 7));
        assert_eq!(catalog_yolo_lite(true).grid(), Some((7, 7)));
    }

    #[test]
    fn tiny_yolov2_shapes() {
        let net = catalog_tiny_yolov2(false);
        let convs = conv_outputs(&net);
        assert_eq!(convs.len(), 9);
        assert_eq!(convs[8], Shape::new(125, 13, 13));
        let pools = net.layers.iter().filter(|l| matches!(l, LayerSpec::MaxPool(_))).count();
        assert_eq!(pools, 6);
    }

    #[test]
    fn same_padding_preserves_dims() {
        let net = NetworkSpec {
            input_w: 4,
            input_h: 4,
            input_c: 1,
            layers: vec![LayerSpec::conv(7, 3, false, ActivationKind::Linear)],
        };
        assert_eq!(net.infer_shapes().unwrap(), vec![Shape::new(7, 4, 4)]);
    }

    #[test]
    fn pools_halve_or_preserve() {
        for entry in catalog() {
            let net = (entry.build)();
            let ins = net.layer_inputs().unwrap();
            let outs = net.infer_shapes().unwrap();
            for ((layer, i), o) in net.layers.iter().zip(&ins).zip(&outs) {
                if let LayerSpec::MaxPool(p) = layer {
                    if p.stride == 1 && p.pad == 1 {
                        assert_eq!((o.h, o.w), (i.h, i.w), "{}", entry.name);
                    } else if i.h % 2 == 0 {
                        assert_eq!((o.h * 2, o.w * 2), (i.h, i.w), "{}", entry.name);
                    }
                }
            }
        }
    }

    #[test]
    fn filter_sequences() {
        let f = |n: &NetworkSpec| n.conv_layers().map(|(_, c)| c.filters).collect::<Vec<_>>();
        assert_eq!(
            f(&catalog_tiny_yolov2(false)),
            vec![16, 32, 64, 128, 256, 512, 1024, 1024, 125]
        );
        assert_eq!(f(&catalog_yolo_lite(true)), vec![16, 32, 64, 128, 128, 256, 125]);
    }

    #[test]
    fn batch_norm_flags() {
        let bn = catalog_tiny_yolov2(false);
        let flags: Vec<bool> = bn.conv_layers().map(|(_, c)| c.batch_normalize).collect();
        assert_eq!(flags, [true, true, true, true, true, true, true, true, false]);
        let nb = catalog_tiny_yolov2(true);
        assert!(nb.conv_layers().all(|(_, c)| !c.batch_normalize));
        assert_eq!(bn.infer_shapes().unwrap(), nb.infer_shapes().unwrap());
        assert_eq!(
            catalog_yolo_lite(false).infer_shapes().unwrap(),
            catalog_yolo_lite(true).infer_shapes().unwrap()
        );
    }

    #[test]
    fn catalog_is_valid() {
        for entry in catalog() {
            assert_eq!((entry.build)().validate(), Ok(()), "{}", entry.name);
        }
    }

    #[test]
    fn head_mismatch_is_reported() {
        let mut net = catalog_yolo_lite(true);
        let n = net.layers.len();
        if let LayerSpec::Convolutional(c) = &mut net.layers[n - 2] {
            c.filters = 120;
        }
        let v = net.validate().unwrap_err();
        assert!(v.iter().any(|v| v.to_string().contains("head expects 5×(4+1+20)=125")));
    }

    #[test]
    fn empty_network() {
        let net = NetworkSpec { input_w: 8, input_h: 8, input_c: 3, layers: vec![] };
        assert_eq!(net.validate(), Err(vec![Violation::NoLayers]));
        assert_eq!(net.infer_shapes(), Err(ShapeError::Empty));
    }

    #[test]
    fn collects_all_violations() {
        let mut net = catalog_yolo_lite(true);
        let region = net.layers.pop().unwrap();
        net.layers.insert(0, region);
        net.layers.push(LayerSpec::maxpool(64, 64, 0));
        let v = net.validate().unwrap_err();
        assert!(v.iter().any(|v| matches!(v, Violation::RegionNotLast { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::RegionWithoutConv { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::Shape(_))));
    }

    #[test]
    fn kernel_larger_than_input() {
        let net = NetworkSpec {
            input_w: 2,
            input_h: 2,
            input_c: 1,
            layers: vec![LayerSpec::Convolutional(ConvSpec {
                filters: 1,
                size: 5,
                stride: 1,
                pad: 0,
                batch_normalize: false,
                activation: ActivationKind::Linear,
            })],
        };
        assert!(matches!(
            net.infer_shapes(),
            Err(ShapeError::KernelLargerThanInput { layer: 0, size: 5, extent: 2 })
        ));
    }
}
