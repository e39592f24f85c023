//! Loss terms of a random two-layer detector and a finite-difference check
//! of one weight's gradient.

use yolite::darknet::WeightsBlob;
use yolite::loss::{loss_gradient, network_loss};
use yolite::model::{ActivationKind, LayerSpec, NetworkSpec, RegionSpec};
use yolite::{CompiledNetwork, GroundTruthBox, LossConfig, Shape, Tensor};

fn main() {
    let region = RegionSpec { classes: 2, num_anchors: 2, anchors: vec![(1.0, 1.5), (2.0, 1.0)], coords: 4 };
    let spec = NetworkSpec {
        input_w: 12,
        input_h: 12,
        input_c: 3,
        layers: vec![
            LayerSpec::conv(6, 3, false, ActivationKind::Leaky),
            LayerSpec::maxpool(3, 3, 0),
            LayerSpec::conv(region.expected_head_filters(), 1, false, ActivationKind::Linear),
            LayerSpec::Region(region.clone()),
        ],
    };
    let blob = WeightsBlob::random(&spec, 11).unwrap();
    let net = CompiledNetwork::<f64>::new(&spec, &blob).unwrap();
    let image = Tensor::from_fn(Shape::new(3, 12, 12), |c, y, x| ((c * 31 + y * 7 + x) % 11) as f64 / 11.0);
    let gts = [GroundTruthBox::new(0, 0.3, 0.4, 0.3, 0.4), GroundTruthBox::new(1, 0.8, 0.7, 0.2, 0.3)];
    let cfg = LossConfig::for_region(&region, 4);
    let (loss, grads) = loss_gradient(&net, &image, &gts, &cfg).unwrap();
    println!("{loss:#?}");

    let h = 1e-3;
    let nudged = |delta: f32| {
        let mut b = blob.clone();
        b.per_layer[0].kernel[5] += delta;
        network_loss(&CompiledNetwork::<f64>::new(&spec, &b).unwrap(), &image, &gts, &cfg).unwrap().total
    };
    // f32 storage limits the step, so the difference here is only indicative
    let numeric = (nudged(h as f32) - nudged(-h as f32)) / (2.0 * h);
    println!("d loss / d w[0][5]: analytic {:.6}, central difference {:.6}", grads[0].kernel[5], numeric);
}
