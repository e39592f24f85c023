//! Single-image SGD with momentum for small batch-norm-free networks.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::darknet::{ConvWeights, WeightsBlob, WeightsHeader};
use crate::dataset::Sample;
use crate::inference::{CompiledNetwork, InferenceError};
use crate::loss::{loss_gradient, LossBreakdown, LossConfig, LossError};
use crate::model::{describe_violations, NetworkSpec};
use crate::tensor::{KernelError, Scalar, Tensor};

pub const SMOOTHING_WINDOW: usize = 100;
pub const DEFAULT_BURN_IN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
    pub iters: usize,
    pub seed: u64,
    /// Darknet-style warmup: iteration `i < burn_in` uses `lr·((i+1)/burn_in)⁴`.
    pub burn_in: usize,
}

impl Hyper {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.burn_in {
            self.lr * ((iteration + 1) as f64 / self.burn_in as f64).powi(4)
        } else {
            self.lr
        }
    }
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { lr: 1e-3, momentum: 0.9, iters: 2000, seed: 0, burn_in: DEFAULT_BURN_IN }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("training needs a batch-norm-free network (layer {layer} has batch norm)")]
    BatchNorm { layer: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {index}: image is {found}, network expects {expected}")]
    ImageSize { index: usize, found: String, expected: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// `v ← momentum·v − lr·g; w ← w + v`.
pub fn sgd_step<T: Scalar>(weights: &mut [T], grads: &[T], lr: T, momentum: T, velocity: &mut [T]) -> Result<(), KernelError> {
    if weights.len() != grads.len() || weights.len() != velocity.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "sgd_step: {} weights, {} grads, {} velocities",
            weights.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *w = *w + *v;
    }
    Ok(())
}

/// He-normal kernels (`N(0, √(2/fan_in))`) and zero biases.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Result<WeightsBlob, TrainError> {
    spec.validate().map_err(|v| TrainError::InvalidSpec(describe_violations(&v)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = spec.input_c;
    let mut per_layer = Vec::new();
    for (layer, c) in spec.conv_layers() {
        if c.batch_normalize {
            return Err(TrainError::BatchNorm { layer });
        }
        let fan_in = channels * c.size * c.size;
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        per_layer.push(ConvWeights {
            biases: vec![0.0; c.filters],
            bn: None,
            kernel: (0..c.filters * fan_in).map(|_| normal.sample(&mut rng) as f32).collect(),
        });
        channels = c.filters;
    }
    Ok(WeightsBlob { header: WeightsHeader::current(), per_layer })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossCurve {
    pub iterations: Vec<LossBreakdown>,
}

impl LossCurve {
    pub fn totals(&self) -> Vec<f64> {
        self.iterations.iter().map(|l| l.total).collect()
    }

    /// Trailing mean over up to `window` iterations.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let totals = self.totals();
        let mut sum = 0.0;
        (0..totals.len())
            .map(|i| {
                sum += totals[i];
                if i >= window {
                    sum -= totals[i - window];
                }
                sum / (i + 1).min(window) as f64
            })
            .collect()
    }

    /// Mean of the first `window` iterations.
    pub fn initial_smoothed(&self, window: usize) -> f64 {
        let t = self.totals();
        let n = window.min(t.len()).max(1);
        t.iter().take(n).sum::<f64>() / n as f64
    }

    /// Mean of the last `window` iterations.
    pub fn final_smoothed(&self, window: usize) -> f64 {
        *self.smoothed(window).last().unwrap_or(&0.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        #[derive(Serialize)]
        struct Row {
            iteration: usize,
            total: f64,
            smoothed: f64,
            coord: f64,
            conf_obj: f64,
            conf_noobj: f64,
            classification: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for (i, (l, s)) in self.iterations.iter().zip(self.smoothed(SMOOTHING_WINDOW)).enumerate() {
            w.serialize(Row {
                iteration: i,
                total: l.total,
                smoothed: s,
                coord: l.coord,
                conf_obj: l.conf_obj,
                conf_noobj: l.conf_noobj,
                classification: l.classification,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains from a seeded initialization, one image per iteration. Images are
/// visited in a freshly shuffled order each pass over the dataset.
pub fn train_toy(spec: &NetworkSpec, dataset: &[Sample], hyper: &Hyper) -> Result<(WeightsBlob, LossCurve), TrainError> {
    let init = init_weights(spec, hyper.seed)?;
    train_from(spec, &init, dataset, hyper)
}

/// Same as [`train_toy`] starting from given weights.
pub fn train_from(
    spec: &NetworkSpec,
    init: &WeightsBlob,
    dataset: &[Sample],
    hyper: &Hyper,
) -> Result<(WeightsBlob, LossCurve), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut net = CompiledNetwork::<f32>::new(spec, init)?;
    let expected = net.input_shape();
    let region = spec.region().ok_or(LossError::NoRegion)?;
    let (gh, gw) = spec.grid().ok_or(LossError::NoRegion)?;
    if gh != gw {
        return Err(TrainError::InvalidSpec(format!("region grid {gh}x{gw} is not square")));
    }
    let cfg = LossConfig { detach_iou_target: true, ..LossConfig::for_region(region, gh) };
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> =
        net.conv_params().map(|(_, p)| (vec![0.0; p.kernel.len()], vec![0.0; p.biases.len()])).collect();
    let momentum = hyper.momentum as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = LossCurve { iterations: Vec::with_capacity(hyper.iters) };
    for iteration in 0..hyper.iters {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let index = order.pop().expect("refilled");
        let sample = &dataset[index];
        let image: Tensor<f32> = sample.tensor();
        if image.shape() != expected {
            return Err(TrainError::ImageSize { index, found: image.shape().to_string(), expected: expected.to_string() });
        }
        let (loss, grads) = loss_gradient(&net, &image, &sample.gts, &cfg)?;
        if !loss.total.is_finite() || grads.iter().any(|g| g.kernel.iter().chain(&g.biases).any(|v| !v.is_finite())) {
            return Err(TrainError::Divergence { iteration });
        }
        curve.iterations.push(loss);
        let lr = hyper.lr_at(iteration) as f32;
        for ((p, g), (vk, vb)) in net.conv_params_mut().zip(&grads).zip(&mut velocity) {
            sgd_step(&mut p.kernel, &g.kernel, lr, momentum, vk)?;
            sgd_step(&mut p.biases, &g.biases, lr, momentum, vb)?;
        }
    }
    Ok((net.to_blob(), curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_synthetic_dataset;
    use crate::model::{ActivationKind, LayerSpec, RegionSpec};

    fn tiny_spec() -> NetworkSpec {
        let region = RegionSpec { classes: 3, num_anchors: 2, anchors: vec![(1.0, 1.0), (2.0, 2.0)], coords: 4 };
        NetworkSpec {
            input_w: 32,
            input_h: 32,
            input_c: 3,
            layers: vec![
                LayerSpec::conv(4, 3, false, ActivationKind::Leaky),
                LayerSpec::maxpool(2, 2, 0),
                LayerSpec::conv(region.expected_head_filters(), 1, false, ActivationKind::Linear),
                LayerSpec::Region(region),
            ],
        }
    }

    #[test]
    fn sgd_fixtures() {
        let mut w = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut w, &[0.5, 1.0], 0.1, 0.0, &mut v).unwrap();
        assert_eq!(w, vec![1.0 - 0.05, -2.0 - 0.1]);

        let mut w = vec![3.0f64];
        let mut v = vec![0.4];
        sgd_step(&mut w, &[0.0], 0.1, 0.5, &mut v).unwrap();
        assert_eq!((w[0], v[0]), (3.2, 0.2));

        let (lr, g) = (0.01f64, 2.0);
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut w, &[g], lr, 0.9, &mut v).unwrap();
        sgd_step(&mut w, &[g], lr, 0.9, &mut v).unwrap();
        assert!((v[0] - (-lr * g * 1.9)).abs() < 1e-15);

        assert!(sgd_step(&mut [0.0f32], &[0.0, 1.0], 0.1, 0.9, &mut [0.0]).is_err());
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let data = gen_synthetic_dataset(1, 32, 3, 3);
        let hyper = Hyper { lr: 0.0, iters: 5, seed: 1, ..Hyper::default() };
        let (blob, curve) = train_toy(&tiny_spec(), &data, &hyper).unwrap();
        let t = curve.totals();
        assert!(t.iter().all(|&v| v == t[0]));
        assert_eq!(blob, init_weights(&tiny_spec(), 1).unwrap());
    }

    #[test]
    fn deterministic() {
        let data = gen_synthetic_dataset(4, 32, 3, 3);
        let hyper = Hyper { iters: 10, seed: 9, ..Hyper::default() };
        let a = train_toy(&tiny_spec(), &data, &hyper).unwrap();
        let b = train_toy(&tiny_spec(), &data, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bn_and_reports_divergence() {
        let mut spec = tiny_spec();
        spec.layers[0] = LayerSpec::conv(4, 3, true, ActivationKind::Leaky);
        let data = gen_synthetic_dataset(1, 32, 3, 3);
        assert!(matches!(train_toy(&spec, &data, &Hyper::default()), Err(TrainError::BatchNorm { layer: 0 })));
        let hyper = Hyper { lr: 1e6, iters: 200, seed: 1, burn_in: 0, ..Hyper::default() };
        assert!(matches!(train_toy(&tiny_spec(), &data, &hyper), Err(TrainError::Divergence { .. })));
    }

    #[test]
    fn burn_in_ramp() {
        let h = Hyper { lr: 1.0, burn_in: 4, ..Hyper::default() };
        assert_eq!(h.lr_at(0), 1.0 / 256.0);
        assert_eq!(h.lr_at(1), 1.0 / 16.0);
        assert_eq!(h.lr_at(3), 1.0);
        assert_eq!(h.lr_at(50), 1.0);
        assert_eq!(Hyper { burn_in: 0, ..h }.lr_at(0), 1.0);
    }

    #[test]
    fn smoothing() {
        let curve = LossCurve {
            iterations: [4.0, 2.0, 6.0].iter().map(|&t| LossBreakdown { total: t, ..Default::default() }).collect(),
        };
        assert_eq!(curve.smoothed(2), vec![4.0, 3.0, 4.0]);
        assert_eq!(curve.initial_smoothed(2), 3.0);
        assert_eq!(curve.final_smoothed(2), 4.0);
    }
}
