//! Forward-latency measurement over compiled networks.
//!
//! Everything runs on the calling thread; GEMM is built without its
//! threading feature. Absolute numbers are machine-specific, so only ratios
//! between runs on one machine mean anything.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::inference::{CompiledNetwork, InferenceError};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ITERS: usize = 50;
pub const DEFAULT_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMean {
    pub layer: usize,
    pub kind: &'static str,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStats {
    pub iterations: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub p5_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<LayerMean>>,
}

impl BenchStats {
    /// Summary statistics of raw per-iteration latencies.
    pub fn from_samples(samples_ms: &[f64], warmup: usize) -> Self {
        assert!(!samples_ms.is_empty(), "need at least one timed iteration");
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median_ms = percentile(&sorted, 50.0);
        BenchStats {
            iterations: sorted.len(),
            warmup,
            median_ms,
            p5_ms: percentile(&sorted, 5.0),
            p95_ms: percentile(&sorted, 95.0),
            // clamp keeps fps finite for sub-resolution timings
            fps: 1000.0 / median_ms.max(1e-9),
            per_layer: None,
        }
    }
}

/// Linear-interpolated percentile of an ascending sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub fn seeded_input<T: Scalar>(net: &CompiledNetwork<T>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = net.input_shape();
    let data = (0..shape.len()).map(|_| T::of(rng.random::<f64>())).collect();
    Tensor::from_vec(shape, data).expect("shape length")
}

fn run<T: Scalar>(
    net: &CompiledNetwork<T>,
    iters: usize,
    warmup: usize,
    seed: u64,
    per_layer: bool,
) -> Result<BenchStats, InferenceError> {
    assert!(iters >= 1, "iters must be at least 1");
    let input = seeded_input(net, seed);
    let mut ws = net.workspace();
    for _ in 0..warmup {
        net.forward_with(&mut ws, &input, false)?;
    }
    let n_layers = net.spec().layers.len();
    let mut layer_ns = vec![0u64; n_layers];
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        net.forward_with(&mut ws, &input, per_layer)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        for t in ws.timings() {
            layer_ns[t.layer] += t.elapsed_ns;
        }
    }
    let mut stats = BenchStats::from_samples(&samples, warmup);
    if per_layer {
        stats.per_layer = Some(
            net.spec()
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerMean { layer: i, kind: l.kind_name(), mean_ms: layer_ns[i] as f64 / 1e6 / iters as f64 })
                .collect(),
        );
    }
    Ok(stats)
}

/// `warmup` discarded forwards, then `iters` timed forwards on a seeded
/// uniform input.
pub fn measure<T: Scalar>(net: &CompiledNetwork<T>, iters: usize, warmup: usize, seed: u64) -> Result<BenchStats, InferenceError> {
    run(net, iters, warmup, seed, false)
}

/// Like [`measure`], also averaging per-layer time. Timing every layer adds
/// clock reads, so the whole-network numbers are slightly inflated.
pub fn measure_per_layer<T: Scalar>(
    net: &CompiledNetwork<T>,
    iters: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchStats, InferenceError> {
    run(net, iters, warmup, seed, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    /// `b.median / a.median`: how many times faster `a` is.
    pub latency_ratio: f64,
    /// `a.fps / b.fps`.
    pub fps_ratio: f64,
}

pub fn compare(a: &BenchStats, b: &BenchStats) -> Comparison {
    Comparison { latency_ratio: b.median_ms / a.median_ms, fps_ratio: a.fps / b.fps }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    iterations: usize,
    warmup: usize,
    median_ms: f64,
    p5_ms: f64,
    p95_ms: f64,
    fps: f64,
}

/// One header row and one row per labelled run.
pub fn write_csv<W: Write>(out: W, runs: &[(&str, &BenchStats)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for (label, s) in runs {
        w.serialize(CsvRow {
            label,
            iterations: s.iterations,
            warmup: s.warmup,
            median_ms: s.median_ms,
            p5_ms: s.p5_ms,
            p95_ms: s.p95_ms,
            fps: s.fps,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(stats: &BenchStats) -> String {
    serde_json::to_string(stats).expect("plain data serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darknet::WeightsBlob;
    use crate::model::{ActivationKind, LayerSpec, NetworkSpec};
    use proptest::prelude::*;

    fn small() -> CompiledNetwork<f32> {
        let spec = NetworkSpec {
            input_w: 16,
            input_h: 16,
            input_c: 3,
            layers: vec![LayerSpec::conv(4, 3, true, ActivationKind::Leaky), LayerSpec::maxpool(2, 2, 0)],
        };
        CompiledNetwork::new(&spec, &WeightsBlob::random(&spec, 1).unwrap()).unwrap()
    }

    #[test]
    fn single_sample() {
        let s = BenchStats::from_samples(&[3.5], 0);
        assert_eq!((s.median_ms, s.p5_ms, s.p95_ms), (3.5, 3.5, 3.5));
        assert_eq!(s.fps, 1000.0 / 3.5);
    }

    #[test]
    fn interpolated_percentiles() {
        let s: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), 6.0);
        assert_eq!(percentile(&s, 5.0), 1.5);
        assert_eq!(percentile(&s, 95.0), 10.5);
        assert_eq!(percentile(&[1.0, 2.0], 50.0), 1.5);
    }

    #[test]
    fn ratios() {
        let a = BenchStats::from_samples(&[10.0], 0);
        let b = BenchStats::from_samples(&[40.0], 0);
        assert_eq!(compare(&a, &a), Comparison { latency_ratio: 1.0, fps_ratio: 1.0 });
        assert_eq!(compare(&a, &b).latency_ratio, 4.0);
        assert!((compare(&a, &b).fps_ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn measure_runs() {
        let net = small();
        let s = measure_per_layer(&net, 3, 1, 0).unwrap();
        assert_eq!((s.iterations, s.warmup), (3, 1));
        assert!(s.fps > 0.0);
        assert_eq!(s.per_layer.as_ref().unwrap().len(), 2);
        assert!(measure(&net, 1, 0, 0).unwrap().per_layer.is_none());
    }

    #[test]
    fn timing_does_not_change_outputs() {
        let net = small();
        let x = seeded_input(&net, 4);
        let (a, _) = net.forward(&x, false).unwrap();
        let (b, t) = net.forward(&x, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.unwrap().len(), 2);
    }

    #[test]
    fn csv_and_json() {
        let s = BenchStats::from_samples(&[1.0, 2.0, 3.0], 2);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("x", &s)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "label,iterations,warmup,median_ms,p5_ms,p95_ms,fps");
        let v: serde_json::Value = serde_json::from_str(&to_json(&s)).unwrap();
        assert_eq!(v["median_ms"], 2.0);
    }

    proptest! {
        #[test]
        fn ordered_stats(samples in prop::collection::vec(0.001f64..1000.0, 1..60)) {
            let s = BenchStats::from_samples(&samples, 0);
            prop_assert!(s.p5_ms <= s.median_ms && s.median_ms <= s.p95_ms);
            prop_assert!(s.fps > 0.0);
        }
    }
}
