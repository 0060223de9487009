use favit::oracle::{central_differences, FD_EPSILON};
use favit::tensor::kernels::{self, ConvGeometry};
use favit::{Initializer, Tape, Tensor};
use proptest::prelude::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

// NHWC input, HWIO kernel, zero padding
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, h, wd, cin] = x.shape().try_into().unwrap();
    let [kh, kw, _, cout] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, oh, ow, cout]);
    for n in 0..b {
        for r in 0..oh {
            for c in 0..ow {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        for j in 0..kw {
                            let (y, xx) = (
                                (r * stride + i) as isize - pad as isize,
                                (c * stride + j) as isize - pad as isize,
                            );
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc +=
                                    x.at(&[n, y as usize, xx as usize, ci]) * w.at(&[i, j, ci, o]);
                            }
                        }
                    }
                    out.data_mut()[((n * oh + r) * ow + c) * cout + o] = acc;
                }
            }
        }
    }
    out
}

// Maclaurin series, exact to machine precision for |x| <= 3
fn series_erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_series_oracle() {
    let want = -0.5 * (1.0 + series_erf(-1.0 / 2f64.sqrt()));
    assert!((kernels::gelu(-1.0) - want).abs() < 1e-14);
    assert!((kernels::gelu(-1.0) + 0.158655).abs() < 1e-6);
    for i in -30..=30 {
        let x = i as f64 / 10.0;
        let oracle = x * 0.5 * (1.0 + series_erf(x / 2f64.sqrt()));
        assert!((kernels::gelu(x) - oracle).abs() < 1e-13, "x={x}");
    }
}

#[test]
fn conv_geometry_rejects_oversized_kernel() {
    assert!(ConvGeometry::new(&[1, 2, 2, 1], &[7, 7, 1, 1], 1, 0).is_err());
    assert!(ConvGeometry::new(&[1, 4, 4, 2], &[2, 2, 3, 1], 2, 0).is_err());
    let g = ConvGeometry::new(&[1, 224, 224, 3], &[7, 7, 3, 32], 2, 3).unwrap();
    assert_eq!(
        (g.out_rows(), g.macs()),
        (112 * 112, 112 * 112 * 49 * 3 * 32)
    );
}

#[test]
fn layer_norm_rows_are_standardized() {
    let x = Initializer::new(3).normal(&[5, 16]);
    let (y, _, _) = kernels::layer_norm(x.data(), 16, &[1.0; 16], &[0.0; 16]);
    for row in y.chunks_exact(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn softmax_survives_large_logits() {
    let y = kernels::softmax_rows(&[1000.0, 1000.0, -1000.0], 3);
    assert_eq!(y, vec![0.5, 0.5, 0.0]);
}

/// Analytic gradient of `sum(r * f(x))` against central differences.
fn grad_matches(build: impl Fn(&mut Tape, favit::Var) -> favit::Var, x: Tensor, seed: u64) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = build(&mut tape, xv);
    let r = Initializer::new(seed).normal(tape.shape(y));
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();
    let numeric = central_differences(
        |th| {
            let mut t = Tape::new();
            let xv = t.constant(Tensor::new(x.shape(), th.to_vec()).unwrap());
            let y = build(&mut t, xv);
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv).unwrap();
            let l = t.sum(p).unwrap();
            Ok(t.value(l).data()[0])
        },
        x.data(),
        FD_EPSILON,
    )
    .unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(
            (a - n).abs() <= 1e-6 * (1.0 + a.abs()),
            "analytic {a} numeric {n}"
        );
    }
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut init = Initializer::new(11);
    let w = init.normal(&[4, 3]);
    let k = init.normal(&[3, 3, 2, 3]);
    let g = init.normal(&[4]);
    grad_matches(
        |t, x| {
            let w = t.constant(w.clone());
            t.matmul(x, w).unwrap()
        },
        init.normal(&[2, 4]),
        1,
    );
    grad_matches(|t, x| t.softmax_rows(x).unwrap(), init.normal(&[3, 5]), 2);
    grad_matches(|t, x| t.gelu(x).unwrap(), init.normal(&[2, 6]), 3);
    grad_matches(
        |t, x| {
            let k = t.constant(k.clone());
            t.conv2d(x, k, 2, 1).unwrap()
        },
        init.normal(&[1, 5, 5, 2]),
        4,
    );
    grad_matches(
        |t, x| {
            let g = t.constant(g.clone());
            let b = t.constant(Tensor::zeros(&[4]));
            t.layer_norm(x, g, b).unwrap()
        },
        init.normal(&[3, 4]),
        5,
    );
    grad_matches(
        |t, x| t.spatial_mean(x).unwrap(),
        init.normal(&[2, 3, 3, 2]),
        6,
    );
    grad_matches(
        |t, x| t.mean_reduce_over_windows(x).unwrap(),
        init.normal(&[3, 2, 2]),
        7,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
        let mut init = Initializer::new(seed);
        let a = init.normal(&[m, k]);
        let b = init.normal(&[k, n]);
        let got = kernels::matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_agrees_with_nested_loops(
        h in 2usize..9, w in 2usize..9, cin in 1usize..4, cout in 1usize..4,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut init = Initializer::new(seed);
        let x = init.normal(&[2, h, w, cin]);
        let kern = init.normal(&[k, k, cin, cout]);
        let got = kernels::conv2d(&x, &kern, stride, pad).unwrap();
        let want = naive_conv(&x, &kern, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..20, scale in 0.1f64..100.0, seed in any::<u64>()) {
        let x = Initializer::new(seed).normal(&[rows, cols]);
        let data: Vec<f64> = x.data().iter().map(|v| v * scale).collect();
        let y = kernels::softmax_rows(&data, cols);
        for row in y.chunks_exact(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
