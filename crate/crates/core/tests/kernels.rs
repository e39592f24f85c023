use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use yolite::tensor::{conv2d, conv2d_backward, conv_output_shape, maxpool2d, Window};
use yolite::{Shape, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Textbook six-deep loop with explicit zero padding.
fn conv_direct(input: &Tensor<f64>, kernel: &[f64], bias: &[f64], filters: usize, w: Window) -> Tensor<f64> {
    let s = input.shape();
    let out = conv_output_shape(s, filters, w).unwrap();
    Tensor::from_fn(out, |f, oy, ox| {
        let mut acc = bias[f];
        for c in 0..s.c {
            for ky in 0..w.size {
                for kx in 0..w.size {
                    let iy = (oy * w.stride + ky) as isize - w.pad as isize;
                    let ix = (ox * w.stride + kx) as isize - w.pad as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    acc += kernel[((f * s.c + c) * w.size + ky) * w.size + kx] * input.get(c, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

fn weighted_sum(t: &Tensor<f64>, r: &[f64]) -> f64 {
    t.as_slice().iter().zip(r).map(|(a, b)| a * b).sum()
}

proptest! {
    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        c in 1usize..4,
        h in 3usize..10,
        wd in 3usize..10,
        filters in 1usize..5,
        size in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Window::new(size, stride, pad);
        let x = random_tensor(&mut rng, Shape::new(c, h, wd));
        let k = random_vec(&mut rng, filters * c * size * size);
        let b = random_vec(&mut rng, filters);
        let fast = conv2d(&x, &k, Some(&b), filters, w).unwrap();
        let slow = conv_direct(&x, &k, &b, filters, w);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) <= 1e-12);
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (shape, w) = (Shape::new(2, 7, 6), Window::new(3, 1, 1));
        let x = random_tensor(&mut rng, shape);
        let y = random_tensor(&mut rng, shape);
        let k = random_vec(&mut rng, 3 * 2 * 9);
        let mix = Tensor::from_fn(shape, |c, i, j| a * x.get(c, i, j) + b * y.get(c, i, j));
        let lhs = conv2d(&mix, &k, None, 3, w).unwrap();
        let (cx, cy) = (conv2d(&x, &k, None, 3, w).unwrap(), conv2d(&y, &k, None, 3, w).unwrap());
        let rhs = Tensor::from_fn(lhs.shape(), |c, i, j| a * cx.get(c, i, j) + b * cy.get(c, i, j));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn maxpool_output_bounds_window(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, Shape::new(2, 8, 8));
        let (y, argmax) = maxpool2d(&x, Window::new(2, 2, 0)).unwrap();
        for (v, &i) in y.as_slice().iter().zip(&argmax) {
            prop_assert_eq!(*v, x.as_slice()[i]);
        }
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let m = (0..4).map(|k| x.get(c, 2 * i + k / 2, 2 * j + k % 2)).fold(f64::MIN, f64::max);
                    prop_assert_eq!(y.get(c, i, j), m);
                }
            }
        }
    }
}

/// Backward pass against central differences of `Σ r ⊙ conv(x)`.
#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (w, shape, filters) in [
        (Window::new(3, 1, 1), Shape::new(2, 6, 5), 3),
        (Window::new(3, 2, 1), Shape::new(3, 7, 7), 2),
        (Window::new(1, 1, 0), Shape::new(4, 3, 4), 5),
    ] {
        let x = random_tensor(&mut rng, shape);
        let k = random_vec(&mut rng, filters * shape.c * w.size * w.size);
        let b = random_vec(&mut rng, filters);
        let out_shape = conv_output_shape(shape, filters, w).unwrap();
        let r = random_vec(&mut rng, out_shape.len());
        let upstream = Tensor::from_vec(out_shape, r.clone()).unwrap();
        let g = conv2d_backward(&upstream, &x, &k, filters, w).unwrap();
        let objective = |x: &Tensor<f64>, k: &[f64], b: &[f64]| weighted_sum(&conv2d(x, k, Some(b), filters, w).unwrap(), &r);

        let h = 1e-3;
        let check = |analytic: f64, up: f64, down: f64| {
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-6, "analytic {analytic} vs numeric {numeric}");
        };
        for i in 0..k.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp[i] += h;
            km[i] -= h;
            check(g.kernel[i], objective(&x, &kp, &b), objective(&x, &km, &b));
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            check(g.bias[i], objective(&x, &k, &bp), objective(&x, &k, &bm));
        }
        for i in 0..shape.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[i] += h;
            xm.as_mut_slice()[i] -= h;
            check(g.input.as_slice()[i], objective(&xp, &k, &b), objective(&xm, &k, &b));
        }
    }
}
