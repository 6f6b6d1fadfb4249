use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spkenc_core::gradcheck::{check_component, GradcheckOptions};
use spkenc_core::tensor::{conv2d, conv2d_backward, matmul, Conv2dSpec, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct six-loop cross-correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: (usize, usize), pad: (usize, usize)) -> Vec<f64> {
    let [n, c, h, wi] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wi + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (r, s) = ((i * stride.0 + di) as isize - pad.0 as isize, (j * stride.1 + dj) as isize - pad.1 as isize);
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wi {
                                    acc += x.at(&[b, ic, r as usize, s as usize]) * w.at(&[oc, ic, di, dj]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn conv_matches_nested_loops_on_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let y = conv2d(&x, &w, Conv2dSpec::new((1, 1), (0, 0))).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    assert_close(y.data(), &conv_oracle(&x, &w, (1, 1), (0, 0)), 1e-12);
}

#[test]
fn conv_matches_nested_loops_over_strides_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..6));
        let (h, wi) = (rng.gen_range(kh..9), rng.gen_range(kw..11));
        let stride = (rng.gen_range(1..4), rng.gen_range(1..4));
        let pad = (rng.gen_range(0..kh), rng.gen_range(0..kw));
        let x = random(&[n, c, h, wi], &mut rng);
        let w = random(&[o, c, kh, kw], &mut rng);
        let y = conv2d(&x, &w, Conv2dSpec::new(stride, pad)).unwrap();
        assert_close(y.data(), &conv_oracle(&x, &w, stride, pad), 1e-12);
    }
}

#[test]
fn conv_backward_is_adjoint_of_forward() {
    // <conv(x), g> = <x, grad_input(g)> and likewise for the weight
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let spec = Conv2dSpec::same((3, 3), (rng.gen_range(1..3), rng.gen_range(1..3)));
        let x = random(&[2, 3, 7, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let y = conv2d(&x, &w, spec).unwrap();
        let g = random(y.shape(), &mut rng);
        let (gx, gw) = conv2d_backward(&x, &w, &g, spec).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &g);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &gw)).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}

#[test]
fn identity_kernel_passes_gradient_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 1, 4, 5], &mut rng);
    let w = Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
    let g = random(&[2, 1, 4, 5], &mut rng);
    let (gx, _) = conv2d_backward(&x, &w, &g, Conv2dSpec::new((1, 1), (0, 0))).unwrap();
    assert_eq!(gx.data(), g.data());
}

#[test]
fn kernel_backwards_match_finite_differences() {
    let opts = GradcheckOptions {
        tolerance: 1e-6,
        ..GradcheckOptions::default()
    };
    let r = check_component("conv2d_kernel", &opts).unwrap();
    assert!(r.passed, "{}", r.line());
    let opts = GradcheckOptions {
        tolerance: 1e-5,
        ..GradcheckOptions::default()
    };
    for name in ["activations", "softmax"] {
        let r = check_component(name, &opts).unwrap();
        assert!(r.passed, "{}", r.line());
    }
}

#[test]
fn kernels_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 4, 16, 12], &mut rng);
    let w = random(&[5, 4, 3, 3], &mut rng);
    let spec = Conv2dSpec::same((3, 3), (2, 1));
    let a = conv2d(&x, &w, spec).unwrap();
    let b = conv2d(&x, &w, spec).unwrap();
    assert_eq!(a.data(), b.data());
    let g = random(a.shape(), &mut rng);
    assert_eq!(conv2d_backward(&x, &w, &g, spec).unwrap(), conv2d_backward(&x, &w, &g, spec).unwrap());
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
                prop_assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = random(&[1, 2, 6, 5], &mut rng);
        let x2 = random(&[1, 2, 6, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let spec = Conv2dSpec::same((3, 3), (1, 2));
        let mixed = x1.scale(alpha).add(&x2).unwrap();
        let lhs = conv2d(&mixed, &w, spec).unwrap();
        let rhs = conv2d(&x1, &w, spec).unwrap().scale(alpha).add(&conv2d(&x2, &w, spec).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
