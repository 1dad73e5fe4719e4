//! Convolution checked against independent direct-loop references.
//!
//! The production path lowers to im2col + GEMM; the oracles here are the
//! definition written as plain nested loops, kept deliberately naive.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcaps_tensor::{Scalar, Tape, Tensor};

/// Definition of valid cross-correlation, nested loops, no tricks.
/// input [h,w,cin], kernels [k,k,cin,cout] -> [oh,ow,cout].
fn naive_conv2d<T: Scalar>(
    input: &[T], h: usize, w: usize, cin: usize,
    kernels: &[T], k: usize, cout: usize,
    stride: usize,
) -> Vec<T> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..cin {
                            let iv = input[((oy * stride + ky) * w + (ox * stride + kx)) * cin + ci];
                            let kv = kernels[((ky * k + kx) * cin + ci) * cout + co];
                            acc += iv * kv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    out
}

/// Definition of transposed convolution as kernel-stamping.
/// input [h,w,cin], kernels [k,k,cout,cin] -> [(h-1)s+k, (w-1)s+k, cout].
fn naive_conv_transpose2d<T: Scalar>(
    input: &[T], h: usize, w: usize, cin: usize,
    kernels: &[T], k: usize, cout: usize,
    stride: usize,
) -> Vec<T> {
    let oh = (h - 1) * stride + k;
    let ow = (w - 1) * stride + k;
    let mut out = vec![T::zero(); oh * ow * cout];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..cin {
                let iv = input[(y * w + x) * cin + ci];
                for ky in 0..k {
                    for kx in 0..k {
                        for co in 0..cout {
                            let kv = kernels[((ky * k + kx) * cout + co) * cin + ci];
                            out[((y * stride + ky) * ow + (x * stride + kx)) * cout + co] += iv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv2d_matches_direct_loops() {
    let cases = [
        // (h, w, cin, k, cout, stride)
        (6, 6, 1, 3, 2, 1),
        (7, 5, 2, 3, 3, 2),
        (9, 9, 3, 4, 2, 1),
        (12, 12, 2, 5, 4, 3),
        (9, 9, 1, 9, 2, 1), // kernel fills the input
    ];
    for (ci, &(h, w, cin, k, cout, stride)) in cases.iter().enumerate() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + ci as u64);
            let input = rand_vec(&mut rng, h * w * cin);
            let kernels = rand_vec(&mut rng, k * k * cin * cout);
            let expect = naive_conv2d(&input, h, w, cin, &kernels, k, cout, stride);

            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![h, w, cin], input).unwrap());
            let kk = tape.constant(Tensor::new(vec![k, k, cin, cout], kernels).unwrap());
            let y = tape.conv2d(x, kk, stride).unwrap();
            for (a, b) in tape.data(y).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10, "case {ci} seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn conv_transpose2d_matches_direct_loops() {
    let cases = [
        (2, 2, 1, 4, 2, 2),
        (3, 3, 2, 4, 3, 2),
        (4, 5, 3, 3, 2, 1),
        (5, 5, 2, 4, 1, 3),
    ];
    for (ci, &(h, w, cin, k, cout, stride)) in cases.iter().enumerate() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + ci as u64 + 7);
            let input = rand_vec(&mut rng, h * w * cin);
            let kernels = rand_vec(&mut rng, k * k * cout * cin);
            let expect = naive_conv_transpose2d(&input, h, w, cin, &kernels, k, cout, stride);

            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![h, w, cin], input).unwrap());
            let kk = tape.constant(Tensor::new(vec![k, k, cout, cin], kernels).unwrap());
            let y = tape.conv_transpose2d(x, kk, stride).unwrap();
            for (a, b) in tape.data(y).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10, "case {ci} seed {seed}: {a} vs {b}");
            }
        }
    }
}

/// <conv(x), y> must equal <x, conv_transpose(y)> when both use the same
/// kernel tensor and the spatial sizes tile exactly.
#[test]
fn conv_and_transpose_are_adjoint() {
    let (h, k, stride, cin, cout) = (7usize, 3usize, 2usize, 2usize, 3usize);
    let oh = (h - k) / stride + 1; // 3; (3-1)*2+3 = 7 back to h
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, h * h * cin);
        let kernels = rand_vec(&mut rng, k * k * cin * cout);
        let y = rand_vec(&mut rng, oh * oh * cout);

        let mut tape = Tape::new();
        let xt = tape.constant(Tensor::new(vec![h, h, cin], x.clone()).unwrap());
        let kt = tape.constant(Tensor::new(vec![k, k, cin, cout], kernels.clone()).unwrap());
        let fx = tape.conv2d(xt, kt, stride).unwrap();

        let yt = tape.constant(Tensor::new(vec![oh, oh, cout], y.clone()).unwrap());
        let fty = tape.conv_transpose2d(yt, kt, stride).unwrap();
        assert_eq!(tape.shape(fty), &[h, h, cin]);

        let lhs: f64 = tape.data(fx).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.data(fty).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
            "seed {seed}: <Ax,y>={lhs} <x,A'y>={rhs}"
        );
    }
}

/// The f32 path goes through sgemm; check it against the f64 oracle at a
/// tolerance suited to single precision.
#[test]
fn conv2d_f32_matches_f64_oracle() {
    let (h, w, cin, k, cout, stride) = (8, 8, 2, 3, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let input = rand_vec(&mut rng, h * w * cin);
    let kernels = rand_vec(&mut rng, k * k * cin * cout);
    let expect = naive_conv2d(&input, h, w, cin, &kernels, k, cout, stride);

    let mut tape = Tape::<f32>::new();
    let xf: Vec<f32> = input.iter().map(|&v| v as f32).collect();
    let kf: Vec<f32> = kernels.iter().map(|&v| v as f32).collect();
    let x = tape.constant(Tensor::new(vec![h, w, cin], xf).unwrap());
    let kk = tape.constant(Tensor::new(vec![k, k, cin, cout], kf).unwrap());
    let y = tape.conv2d(x, kk, stride).unwrap();
    for (a, b) in tape.data(y).iter().zip(&expect) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
}
