//! Binding a network description to its weights and running it.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::darknet::{BatchNormParams, ConvWeights, WeightsBlob, WeightsError};
use crate::model::{describe_violations, ActivationKind, ConvSpec, LayerSpec, NetworkSpec, Shape};
use crate::tensor::{
    activate_backward, activate_in_place, add_bias_in_place, batchnorm_in_place, conv2d_backward, conv2d_into,
    im2col_len, maxpool2d_into, maxpool_backward, KernelError, Precision, Scalar, Tensor, Window, BN_EPSILON,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("network and weights do not match: {0}")]
    Mismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer} is not supported here: {reason}")]
    UnsupportedLayer { layer: usize, reason: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl From<WeightsError> for InferenceError {
    fn from(e: WeightsError) -> Self {
        InferenceError::Mismatch(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub scales: Vec<T>,
    pub means: Vec<T>,
    pub variances: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Vec<T>,
    pub biases: Vec<T>,
    pub bn: Option<BnStats<T>>,
}

/// Wall time spent in one layer during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerTiming {
    pub layer: usize,
    pub elapsed_ns: u64,
}

/// A validated network with weights converted to the compute precision.
///
/// Immutable once built; any number of threads may run it, each with its
/// own [`Workspace`].
#[derive(Debug, Clone)]
pub struct CompiledNetwork<T: Scalar = f32> {
    spec: NetworkSpec,
    weights: WeightsBlob,
    params: Vec<Option<ConvParams<T>>>,
    inputs: Vec<Shape>,
    outputs: Vec<Shape>,
    max_cols: usize,
}

/// Preallocated activation buffers for one forward at a time.
#[derive(Debug, Clone)]
pub struct Workspace<T: Scalar = f32> {
    outputs: Vec<Tensor<T>>,
    argmax: Vec<Vec<usize>>,
    cols: Vec<T>,
    timings: Vec<LayerTiming>,
}

impl<T: Scalar> Workspace<T> {
    pub fn buffer_shapes(&self) -> Vec<Shape> {
        self.outputs.iter().map(Tensor::shape).collect()
    }

    pub fn timings(&self) -> &[LayerTiming] {
        &self.timings
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("non-empty network")
    }
}

fn convert<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of_f32(x)).collect()
}

fn window(c: &ConvSpec) -> Window {
    Window::new(c.size, c.stride, c.pad)
}

pub fn compile<T: Scalar>(spec: &NetworkSpec, blob: &WeightsBlob) -> Result<CompiledNetwork<T>, InferenceError> {
    CompiledNetwork::new(spec, blob)
}

impl<T: Scalar> CompiledNetwork<T> {
    pub fn new(spec: &NetworkSpec, blob: &WeightsBlob) -> Result<Self, InferenceError> {
        spec.validate()
            .map_err(|v| InferenceError::Mismatch(format!("invalid network: {}", describe_violations(&v))))?;
        blob.check(spec)?;
        let outputs = spec.infer_shapes().expect("validated");
        let inputs = spec.layer_inputs().expect("validated");
        let mut convs = blob.per_layer.iter();
        let mut max_cols = 0;
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let LayerSpec::Convolutional(c) = layer else {
                    return None;
                };
                max_cols = max_cols.max(im2col_len(inputs[i], outputs[i], window(c)));
                let w = convs.next().expect("checked lengths");
                Some(ConvParams {
                    kernel: convert(&w.kernel),
                    biases: convert(&w.biases),
                    bn: w.bn.as_ref().map(|bn| BnStats {
                        scales: convert(&bn.scales),
                        means: convert(&bn.rolling_mean),
                        variances: convert(&bn.rolling_variance),
                    }),
                })
            })
            .collect();
        Ok(CompiledNetwork {
            spec: spec.clone(),
            weights: blob.clone(),
            params,
            inputs,
            outputs,
            max_cols,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Weights as loaded, in file precision.
    pub fn weights(&self) -> &WeightsBlob {
        &self.weights
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input_shape()
    }

    pub fn layer_shapes(&self) -> &[Shape] {
        &self.outputs
    }

    pub fn conv_params(&self) -> impl Iterator<Item = (usize, &ConvParams<T>)> {
        self.params.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    /// Mutable parameters of every convolution, in network order.
    pub fn conv_params_mut(&mut self) -> impl Iterator<Item = &mut ConvParams<T>> {
        self.params.iter_mut().flatten()
    }

    pub fn workspace(&self) -> Workspace<T> {
        Workspace {
            outputs: self.outputs.iter().map(|&s| Tensor::zeros(s)).collect(),
            argmax: self
                .spec
                .layers
                .iter()
                .zip(&self.outputs)
                .map(|(l, s)| match l {
                    LayerSpec::MaxPool(_) => vec![0; s.len()],
                    _ => Vec::new(),
                })
                .collect(),
            cols: Vec::with_capacity(self.max_cols),
            timings: Vec::with_capacity(self.outputs.len()),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), InferenceError> {
        if input.shape() != self.input_shape() {
            return Err(InferenceError::ShapeMismatch(format!(
                "input is {}, network expects {}",
                input.shape(),
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// Runs every layer in order, writing activations into `ws`.
    ///
    /// Convolutions follow conv → batch norm → bias → activation. Batch norm
    /// runs unfused whenever the layer has it.
    pub fn forward_with<'w>(
        &self,
        ws: &'w mut Workspace<T>,
        input: &Tensor<T>,
        collect_timings: bool,
    ) -> Result<&'w Tensor<T>, InferenceError> {
        self.check_input(input)?;
        ws.timings.clear();
        let eps = T::of(BN_EPSILON);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let start = collect_timings.then(Instant::now);
            let (before, rest) = ws.outputs.split_at_mut(i);
            let src = if i == 0 { input } else { &before[i - 1] };
            let dst = &mut rest[0];
            match layer {
                LayerSpec::Convolutional(c) => {
                    let p = self.params[i].as_ref().expect("conv params");
                    match &p.bn {
                        Some(bn) => {
                            conv2d_into(src, &p.kernel, None, c.filters, window(c), dst, &mut ws.cols)?;
                            batchnorm_in_place(dst, &bn.scales, &bn.means, &bn.variances, eps)?;
                            add_bias_in_place(dst, &p.biases)?;
                        }
                        None => {
                            conv2d_into(src, &p.kernel, Some(&p.biases), c.filters, window(c), dst, &mut ws.cols)?
                        }
                    }
                    activate_in_place(dst.as_mut_slice(), c.activation);
                }
                LayerSpec::MaxPool(mp) => {
                    maxpool2d_into(src, Window::new(mp.size, mp.stride, mp.pad), dst, &mut ws.argmax[i])?;
                }
                LayerSpec::Region(_) => dst.as_mut_slice().copy_from_slice(src.as_slice()),
            }
            if let Some(start) = start {
                ws.timings.push(LayerTiming { layer: i, elapsed_ns: start.elapsed().as_nanos() as u64 });
            }
        }
        Ok(ws.output())
    }

    /// Convenience forward with a throwaway workspace.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        collect_timings: bool,
    ) -> Result<(Tensor<T>, Option<Vec<LayerTiming>>), InferenceError> {
        let mut ws = self.workspace();
        let out = self.forward_with(&mut ws, input, collect_timings)?.clone();
        Ok((out, collect_timings.then(|| ws.timings.clone())))
    }

    /// Folds every batch norm into its convolution at compute precision.
    pub fn fold_batch_norm(&self) -> Self {
        let eps = T::of(BN_EPSILON);
        let mut out = self.clone();
        for (i, layer) in out.spec.layers.iter_mut().enumerate() {
            if let LayerSpec::Convolutional(c) = layer {
                let p = out.params[i].as_mut().expect("conv params");
                if let Some(bn) = p.bn.take() {
                    fold_into(&mut p.kernel, &mut p.biases, &bn.scales, &bn.means, &bn.variances, eps);
                    c.batch_normalize = false;
                }
            }
        }
        out.weights = out.to_blob();
        out
    }

    /// Parameters rounded back to file precision.
    pub fn to_blob(&self) -> WeightsBlob {
        let back = |v: &[T]| v.iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
        WeightsBlob {
            header: self.weights.header,
            per_layer: self
                .conv_params()
                .map(|(_, p)| ConvWeights {
                    biases: back(&p.biases),
                    bn: p.bn.as_ref().map(|bn| BatchNormParams {
                        scales: back(&bn.scales),
                        rolling_mean: back(&bn.means),
                        rolling_variance: back(&bn.variances),
                    }),
                    kernel: back(&p.kernel),
                })
                .collect(),
        }
    }
}

fn fold_into<T: Scalar>(kernel: &mut [T], biases: &mut [T], scales: &[T], means: &[T], variances: &[T], eps: T) {
    let per_filter = kernel.len() / biases.len();
    for (f, chunk) in kernel.chunks_exact_mut(per_filter).enumerate() {
        let factor = scales[f] / (variances[f] + eps).sqrt();
        chunk.iter_mut().for_each(|w| *w = *w * factor);
        biases[f] = biases[f] - means[f] * factor;
    }
}

/// Rewrites every batch-normalized convolution so normalization becomes a no-op:
/// `w' = w·γ/√(σ²+ε)`, `b' = b − γ·μ/√(σ²+ε)`.
pub fn fold_batch_norm(spec: &NetworkSpec, blob: &WeightsBlob) -> Result<(NetworkSpec, WeightsBlob), InferenceError> {
    blob.check(spec)?;
    let mut spec = spec.clone();
    let mut blob = blob.clone();
    let mut convs = blob.per_layer.iter_mut();
    for layer in spec.layers.iter_mut() {
        let LayerSpec::Convolutional(c) = layer else { continue };
        let w = convs.next().expect("checked lengths");
        let Some(bn) = w.bn.take() else { continue };
        let mut kernel: Vec<f64> = w.kernel.iter().map(|&v| v as f64).collect();
        let mut biases: Vec<f64> = w.biases.iter().map(|&v| v as f64).collect();
        let wide = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        fold_into(
            &mut kernel,
            &mut biases,
            &wide(&bn.scales),
            &wide(&bn.rolling_mean),
            &wide(&bn.rolling_variance),
            BN_EPSILON,
        );
        w.kernel = kernel.into_iter().map(|v| v as f32).collect();
        w.biases = biases.into_iter().map(|v| v as f32).collect();
        c.batch_normalize = false;
    }
    Ok((spec, blob))
}

/// Saved forward state for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar> {
    /// `activations[0]` is the network input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor<T>>,
    pre_activations: Vec<Option<Tensor<T>>>,
    argmax: Vec<Vec<usize>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("non-empty")
    }

}

/// Per-convolution parameter gradients, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub kernel: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> CompiledNetwork<T> {
    fn reject_bn(&self) -> Result<(), InferenceError> {
        match self.params.iter().position(|p| p.as_ref().is_some_and(|p| p.bn.is_some())) {
            Some(layer) => Err(InferenceError::UnsupportedLayer {
                layer,
                reason: "batch normalization has no backward pass; fold or drop it before training".into(),
            }),
            None => Ok(()),
        }
    }

    /// True when two traces sit in the same smooth piece of the network:
    /// equal pre-activation signs at every kinked activation and equal
    /// pooling argmaxes. Finite differences are only meaningful within one piece.
    pub fn same_regime(&self, a: &ForwardTrace<T>, b: &ForwardTrace<T>) -> bool {
        let signs = |t: &Tensor<T>| t.as_slice().iter().map(|v| *v > T::zero()).collect::<Vec<_>>();
        a.argmax == b.argmax
            && self.spec.layers.iter().enumerate().all(|(i, layer)| match layer {
                LayerSpec::Convolutional(c) if c.activation != ActivationKind::Linear => {
                    match (&a.pre_activations[i], &b.pre_activations[i]) {
                        (Some(x), Some(y)) => signs(x) == signs(y),
                        _ => false,
                    }
                }
                _ => true,
            })
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<ForwardTrace<T>, InferenceError> {
        self.check_input(input)?;
        self.reject_bn()?;
        let n = self.spec.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        let mut pre_activations = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(self.max_cols);
        activations.push(input.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let src = &activations[i];
            let mut dst = Tensor::zeros(self.outputs[i]);
            let mut am = Vec::new();
            let mut pre = None;
            match layer {
                LayerSpec::Convolutional(c) => {
                    let p = self.params[i].as_ref().expect("conv params");
                    conv2d_into(src, &p.kernel, Some(&p.biases), c.filters, window(c), &mut dst, &mut cols)?;
                    pre = Some(dst.clone());
                    activate_in_place(dst.as_mut_slice(), c.activation);
                }
                LayerSpec::MaxPool(mp) => {
                    maxpool2d_into(src, Window::new(mp.size, mp.stride, mp.pad), &mut dst, &mut am)?;
                }
                LayerSpec::Region(_) => dst = src.clone(),
            }
            activations.push(dst);
            pre_activations.push(pre);
            argmax.push(am);
        }
        Ok(ForwardTrace { activations, pre_activations, argmax })
    }

    /// Gradients of a scalar objective given its gradient wrt the network output.
    pub fn backward(&self, trace: &ForwardTrace<T>, output_grad: &Tensor<T>) -> Result<Vec<ParamGrads<T>>, InferenceError> {
        self.reject_bn()?;
        if output_grad.shape() != trace.output().shape() {
            return Err(InferenceError::ShapeMismatch(format!(
                "output gradient {} vs output {}",
                output_grad.shape(),
                trace.output().shape()
            )));
        }
        let mut grads: Vec<Option<ParamGrads<T>>> = vec![None; self.spec.layers.len()];
        let mut upstream = output_grad.clone();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            match layer {
                LayerSpec::Convolutional(c) => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let pre = trace.pre_activations[i].as_ref().expect("conv pre-activation");
                    let d = activate_backward(&upstream, pre, c.activation)?;
                    let g = conv2d_backward(&d, &trace.activations[i], &p.kernel, c.filters, window(c))?;
                    grads[i] = Some(ParamGrads { kernel: g.kernel, biases: g.bias });
                    upstream = g.input;
                }
                LayerSpec::MaxPool(_) => {
                    upstream = maxpool_backward(&upstream, &trace.argmax[i], self.inputs[i])?;
                }
                LayerSpec::Region(_) => {}
            }
        }
        Ok(grads.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog_yolo_lite, ActivationKind};

    fn identity_net() -> (NetworkSpec, WeightsBlob) {
        let spec = NetworkSpec {
            input_w: 5,
            input_h: 4,
            input_c: 1,
            layers: vec![LayerSpec::conv(1, 1, false, ActivationKind::Linear)],
        };
        let blob = WeightsBlob {
            header: Default::default(),
            per_layer: vec![ConvWeights { biases: vec![0.0], bn: None, kernel: vec![1.0] }],
        };
        (spec, blob)
    }

    #[test]
    fn identity_forward() {
        let (spec, blob) = identity_net();
        let net = compile::<f32>(&spec, &blob).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 4, 5), |_, y, x| (y * 5 + x) as f32 * 0.25 - 2.0);
        let (out, timings) = net.forward(&x, true).unwrap();
        assert_eq!(out, x);
        assert_eq!(timings.unwrap().len(), 1);
    }

    #[test]
    fn wrong_input_shape() {
        let (spec, blob) = identity_net();
        let net = compile::<f32>(&spec, &blob).unwrap();
        let x = Tensor::zeros(Shape::new(1, 5, 4));
        assert!(matches!(net.forward(&x, false), Err(InferenceError::ShapeMismatch(_))));
    }

    #[test]
    fn bn_stats_for_plain_layer_rejected() {
        let spec = catalog_yolo_lite(true);
        let mut blob = WeightsBlob::random(&spec, 1).unwrap();
        blob.per_layer[0].bn = Some(BatchNormParams {
            scales: vec![1.0; 16],
            rolling_mean: vec![0.0; 16],
            rolling_variance: vec![1.0; 16],
        });
        assert!(matches!(compile::<f32>(&spec, &blob), Err(InferenceError::Mismatch(_))));
    }

    #[test]
    fn trial3_buffers() {
        let spec = catalog_yolo_lite(true);
        let net = compile::<f32>(&spec, &WeightsBlob::random(&spec, 2).unwrap()).unwrap();
        let ws = net.workspace();
        let conv_buffers: Vec<Shape> = spec
            .layers
            .iter()
            .zip(ws.buffer_shapes())
            .filter(|(l, _)| matches!(l, LayerSpec::Convolutional(_)))
            .map(|(_, s)| s)
            .collect();
        assert_eq!(conv_buffers.len(), 7);
        let expected: Vec<Shape> = spec
            .infer_shapes()
            .unwrap()
            .into_iter()
            .zip(&spec.layers)
            .filter(|(_, l)| matches!(l, LayerSpec::Convolutional(_)))
            .map(|(s, _)| s)
            .collect();
        assert_eq!(conv_buffers, expected);
    }

    #[test]
    fn zero_input_gives_head_biases() {
        let spec = catalog_yolo_lite(true);
        let mut blob = WeightsBlob::random(&spec, 3).unwrap();
        let last = blob.per_layer.len() - 1;
        for w in &mut blob.per_layer[..last] {
            w.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        let net = compile::<f32>(&spec, &blob).unwrap();
        let (out, _) = net.forward(&Tensor::zeros(net.input_shape()), false).unwrap();
        assert_eq!(out.shape(), Shape::new(125, 7, 7));
        for c in 0..125 {
            assert!(out.channel(c).iter().all(|&v| v == blob.per_layer[last].biases[c]));
        }
    }

    #[test]
    fn scalar_fold() {
        let spec = NetworkSpec {
            input_w: 1,
            input_h: 1,
            input_c: 1,
            layers: vec![LayerSpec::conv(1, 1, true, ActivationKind::Linear)],
        };
        let blob = WeightsBlob {
            header: Default::default(),
            per_layer: vec![ConvWeights {
                biases: vec![0.25],
                bn: Some(BatchNormParams {
                    scales: vec![3.0],
                    rolling_mean: vec![1.0],
                    rolling_variance: vec![4.0 - BN_EPSILON as f32],
                }),
                kernel: vec![2.0],
            }],
        };
        let (fspec, fblob) = fold_batch_norm(&spec, &blob).unwrap();
        assert!(!fspec.has_batch_norm());
        assert!((fblob.per_layer[0].kernel[0] - 3.0).abs() < 1e-6);
        assert!((fblob.per_layer[0].biases[0] - (0.25 - 1.5)).abs() < 1e-6);
        assert!(fblob.per_layer[0].bn.is_none());
    }

    #[test]
    fn fold_without_bn_is_noop() {
        let spec = catalog_yolo_lite(true);
        let blob = WeightsBlob::random(&spec, 4).unwrap();
        assert_eq!(fold_batch_norm(&spec, &blob).unwrap(), (spec, blob));
    }

    #[test]
    fn repeated_forward_is_bitwise_stable() {
        let spec = catalog_yolo_lite(false);
        let net = compile::<f32>(&spec, &WeightsBlob::random(&spec, 5).unwrap()).unwrap();
        let x = Tensor::from_fn(net.input_shape(), |c, y, x| ((c * 31 + y * 7 + x) % 17) as f32 / 17.0);
        let mut ws = net.workspace();
        let a = net.forward_with(&mut ws, &x, false).unwrap().clone();
        let b = net.forward_with(&mut ws, &x, true).unwrap().clone();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn training_rejects_bn() {
        let spec = catalog_yolo_lite(false);
        let net = compile::<f32>(&spec, &WeightsBlob::random(&spec, 6).unwrap()).unwrap();
        assert!(matches!(
            net.forward_trace(&Tensor::zeros(net.input_shape())),
            Err(InferenceError::UnsupportedLayer { layer: 0, .. })
        ));
    }
}
